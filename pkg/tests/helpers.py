"""Shared builders for the test suite: small graphs, meshes, random instances."""

import numpy as np

from affconv.graphs import Graph, Mesh


def triangle_graph():
    return Graph.undirected(3, [(0, 1), (1, 2), (0, 2)])


def path_graph(n=2):
    return Graph.undirected(n, [(i, i + 1) for i in range(n - 1)])


def tetrahedron():
    pos = np.array([
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ])
    faces = [(0, 1, 2), (0, 2, 3), (0, 3, 1), (1, 3, 2)]
    return Mesh(pos, faces)


def single_triangle_mesh():
    pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return Mesh(pos, [(0, 1, 2)])


def disk_mesh(n_outer=19):
    """Fan triangulation around a center vertex: n_outer + 1 vertices."""
    angles = np.linspace(0.0, 2 * np.pi, n_outer, endpoint=False)
    ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(n_outer)], axis=1)
    pos = np.concatenate([[[0.0, 0.0, 0.0]], ring])
    faces = [(0, 1 + k, 1 + (k + 1) % n_outer) for k in range(n_outer)]
    return Mesh(pos, faces)


def random_graph(rng, n, p=0.3, positions=False, dim=3):
    """Random symmetric graph with no isolated vertices (ring backbone)."""
    pairs = {(i, (i + 1) % n) for i in range(n)} if n > 1 else set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                pairs.add((i, j))
    pos = rng.uniform(-1.0, 1.0, size=(n, dim)) if positions else None
    return Graph.undirected(n, pairs, positions=pos)


def random_permutation(rng, n):
    perm = np.arange(n)
    rng.shuffle(perm)
    return perm
