"""Synthetic desk-scale datasets and the dataset manifest format.

Generators are deterministic per seed: deformed icospheres with shared
topology (reconstruction), rotated deformed icospheres (correspondence), and
digit-like rasters turned into grid-patch superpixel graphs with varying
connectivity (classification).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .graphs import Graph, Mesh
from .meshio import (load_coo, load_edge_list, load_off, save_coo,
                     save_edge_list, save_off, save_pgm)
from .models import GraphDomain, MeshTopology, PoolingLevel, graclus_coarsen
from .training import (ClassificationTask, CorrespondenceTask,
                       ReconstructionTask)

MANIFEST_VERSION = 1


# ------------------------------------------------------------------ icosphere

def icosahedron() -> Mesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return Mesh(verts, faces)


def _subdivide(positions: np.ndarray, faces: np.ndarray):
    """Split each triangle in four, projecting midpoints to the unit sphere."""
    verts = [p for p in positions]
    midpoint = {}

    def mid(a, b):
        key = (min(a, b), max(a, b))
        if key not in midpoint:
            p = (verts[a] + verts[b]) / 2.0
            p = p / np.linalg.norm(p)
            midpoint[key] = len(verts)
            verts.append(p)
        return midpoint[key]

    new_faces = []
    for a, b, c in faces:
        a, b, c = int(a), int(b), int(c)
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        new_faces.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c),
                          (ab, bc, ca)])
    return np.stack(verts), np.asarray(new_faces, dtype=np.int64)


def icosphere(subdivisions: int) -> Mesh:
    if subdivisions > 4:
        raise ValueError("desk-scale icospheres stop at 4 subdivisions")
    mesh = icosahedron()
    pos, faces = mesh.positions, mesh.faces
    for _ in range(subdivisions):
        pos, faces = _subdivide(pos, faces)
    return Mesh(pos, faces)


@dataclass(frozen=True)
class IcosphereSpec:
    subdivisions: int = 2
    samples: int = 100
    noise_amp: float = 0.15
    field_count: int = 3
    seed: int = 0
    scale: float = 1.0


def _radial_field(rng, positions, field_count, amp):
    """Smooth low-frequency radial bump field over the unit sphere."""
    r = np.ones(positions.shape[0])
    for _ in range(field_count):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(1.0, 2.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        weight = rng.uniform(0.4, 1.0)
        r += amp * weight * np.cos(freq * positions @ direction + phase)
    return r


def gen_icosphere_dataset(spec: IcosphereSpec):
    """Deformed icospheres sharing the base topology."""
    base = icosphere(spec.subdivisions)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for _ in range(spec.samples):
        r = _radial_field(rng, base.positions, spec.field_count,
                          spec.noise_amp)
        samples.append(base.positions * (spec.scale * r)[:, None])
    return base, samples


@dataclass(frozen=True)
class CorrespondenceSpec:
    subdivisions: int = 2
    poses: int = 40
    noise_amp: float = 0.1
    field_count: int = 3
    seed: int = 0


def _random_rotation(rng) -> np.ndarray:
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def gen_correspondence_dataset(spec: CorrespondenceSpec):
    """Rotated, deformed poses of one base icosphere; the correct label of
    vertex k is k on the template."""
    base = icosphere(spec.subdivisions)
    rng = np.random.default_rng(spec.seed)
    samples = []
    for _ in range(spec.poses):
        r = _radial_field(rng, base.positions, spec.field_count,
                          spec.noise_amp)
        deformed = base.positions * r[:, None]
        samples.append(deformed @ _random_rotation(rng).T)
    return base, samples


# ----------------------------------------------------------------- superpixel

@dataclass(frozen=True)
class SuperpixelSpec:
    image_size: int = 16
    patch_grid: int = 5
    classes: int = 4
    samples: int = 80
    noise: float = 0.15
    k_neighbors: int = 4
    seed: int = 0


def _render_pattern(cls: int, size: int, rng) -> np.ndarray:
    """Digit-like grayscale raster for one of the synthetic classes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    width = size / 6 + rng.uniform(0, size / 12)
    if cls % 4 == 0:  # ring
        radius = size / 3 + rng.uniform(-size / 10, size / 10)
        dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img = np.exp(-((dist - radius) / width) ** 2)
    elif cls % 4 == 1:  # vertical bar
        img = np.exp(-((xx - cx) / width) ** 2)
    elif cls % 4 == 2:  # horizontal bar
        img = np.exp(-((yy - cy) / width) ** 2)
    else:  # diagonal stripe
        img = np.exp(-(((xx - cx) - (yy - cy)) / (width * np.sqrt(2))) ** 2)
    return np.clip(img, 0.0, 1.0)


def image_to_patch_graph(image: np.ndarray, patch_grid: int,
                         k_neighbors: int = 4):
    """Grid-patch superpixels: per-patch mean intensity features, positions at
    intensity-weighted centroids, symmetric k-nearest-neighbor edges."""
    size = image.shape[0]
    if patch_grid * patch_grid > 100:
        raise ValueError("patch grid exceeds the 100-vertex desk budget")
    bounds = np.linspace(0, size, patch_grid + 1).astype(int)
    centers = []
    feats = []
    for r in range(patch_grid):
        for c in range(patch_grid):
            patch = image[bounds[r]:bounds[r + 1], bounds[c]:bounds[c + 1]]
            yy, xx = np.mgrid[bounds[r]:bounds[r + 1],
                              bounds[c]:bounds[c + 1]].astype(np.float64)
            mass = patch.sum()
            if mass > 1e-12:
                cy = float((yy * patch).sum() / mass)
                cx = float((xx * patch).sum() / mass)
            else:
                cy = float(yy.mean())
                cx = float(xx.mean())
            centers.append((cx / size, cy / size))
            feats.append(float(patch.mean()))
    centers = np.asarray(centers)
    n = len(centers)
    pairs = set()
    k = min(k_neighbors, n - 1)
    for i in range(n):
        d = np.linalg.norm(centers - centers[i], axis=1)
        d[i] = np.inf
        # distance then index tie-break keeps the graph deterministic
        nearest = np.lexsort((np.arange(n), d))[:k]
        for j in nearest:
            pairs.add((min(i, int(j)), max(i, int(j))))
    g = Graph.undirected(n, pairs, positions=centers)
    return g, np.asarray(feats)[:, None]


def gen_superpixel_dataset(spec: SuperpixelSpec):
    """Labeled patch graphs over synthetic rasters; connectivity varies with
    the per-image centroids."""
    rng = np.random.default_rng(spec.seed)
    graphs, features, labels, rasters = [], [], [], []
    for s in range(spec.samples):
        cls = s % spec.classes
        img = _render_pattern(cls, spec.image_size, rng)
        img = np.clip(img + rng.uniform(-spec.noise, spec.noise, img.shape),
                      0.0, 1.0)
        g, feat = image_to_patch_graph(img, spec.patch_grid, spec.k_neighbors)
        graphs.append(g)
        features.append(feat)
        labels.append(cls)
        rasters.append(img)
    return graphs, features, np.asarray(labels, dtype=np.int64), rasters


# ------------------------------------------------------------------ manifests

def _split_indices(n: int, seed: int, test_fraction: float = 0.1):
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test = sorted(int(i) for i in order[:n_test])
    train = sorted(int(i) for i in order[n_test:])
    return train, test


def write_mesh_dataset(out_dir, task: str, base: Mesh, samples,
                       seed: int, pooling_levels: int = 0) -> str:
    """Materialize a fixed-topology dataset: OFF meshes, optional pooling
    matrices from greedy coarsening of the base graph, and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    save_off(base, os.path.join(out_dir, "base.off"))
    sample_files = []
    for k, pos in enumerate(samples):
        rel = f"samples/sample_{k:04d}.off"
        save_off(Mesh(pos, base.faces), os.path.join(out_dir, rel))
        sample_files.append(rel)
    pooling_dir = None
    if pooling_levels:
        pooling_dir = "pooling"
        pdir = os.path.join(out_dir, pooling_dir)
        os.makedirs(pdir, exist_ok=True)
        levels = graclus_coarsen(base.graph, pooling_levels)
        for li, level in enumerate(levels):
            save_coo(level.down, os.path.join(pdir, f"level{li}.down.coo"))
            save_coo(level.up, os.path.join(pdir, f"level{li}.up.coo"))
            save_edge_list(level.coarse,
                           os.path.join(pdir, f"level{li}.graph.txt"))
    train, test = _split_indices(len(samples), seed)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "task": task,
        "base_mesh": "base.off",
        "samples": sample_files,
        "split": {"train": train, "test": test},
        "labels": None,
        "pooling_dir": pooling_dir,
        "pooling_levels": pooling_levels,
        "consistent_topology": True,
        "normalization": None,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_superpixel_dataset(out_dir, graphs, features, labels, rasters,
                             seed: int, graclus_levels: int = 4) -> str:
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("graphs", "features", "rasters"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    sample_files = []
    feature_files = []
    for k, (g, feat, img) in enumerate(zip(graphs, features, rasters)):
        grel = f"graphs/sample_{k:04d}.txt"
        frel = f"features/sample_{k:04d}.csv"
        save_edge_list(g, os.path.join(out_dir, grel))
        with open(os.path.join(out_dir, frel), "w", encoding="ascii") as fh:
            fh.write("x,y,intensity\n")
            for (x, y), v in zip(g.positions, feat[:, 0]):
                fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")
        save_pgm(img, os.path.join(out_dir, f"rasters/sample_{k:04d}.pgm"))
        sample_files.append(grel)
        feature_files.append(frel)
    train, test = _split_indices(len(graphs), seed)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "task": "classification",
        "samples": sample_files,
        "features": feature_files,
        "split": {"train": train, "test": test},
        "labels": [int(v) for v in labels],
        "pooling_dir": None,
        "graclus_levels": graclus_levels,
        "consistent_topology": False,
        "normalization": None,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_pooling(root, manifest) -> list:
    levels = []
    pdir = os.path.join(root, manifest["pooling_dir"])
    for li in range(manifest["pooling_levels"]):
        down = load_coo(os.path.join(pdir, f"level{li}.down.coo"))
        up = load_coo(os.path.join(pdir, f"level{li}.up.coo"))
        coarse = load_edge_list(os.path.join(pdir, f"level{li}.graph.txt"))
        levels.append(PoolingLevel(down=down, up=up, coarse=coarse))
    return levels


def load_task(manifest_path):
    """Reconstruct the task object (and its topology/domain) from disk."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ValueError("unsupported manifest format_version")
    task = manifest["task"]
    train = list(manifest["split"]["train"])
    test = list(manifest["split"]["test"])
    if task in ("reconstruction", "correspondence"):
        base = load_off(os.path.join(root, manifest["base_mesh"]))
        samples = [load_off(os.path.join(root, rel)).positions
                   for rel in manifest["samples"]]
        pooling = _load_pooling(root, manifest) \
            if manifest.get("pooling_dir") else []
        topo = MeshTopology(base, pooling)
        cls = ReconstructionTask if task == "reconstruction" \
            else CorrespondenceTask
        return cls(topology=topo, samples=samples, train_idx=train,
                   test_idx=test)
    if task == "classification":
        graphs = []
        features = []
        for grel, frel in zip(manifest["samples"], manifest["features"]):
            g = load_edge_list(os.path.join(root, grel))
            rows = []
            with open(os.path.join(root, frel), "r", encoding="ascii") as fh:
                next(fh)  # header
                for line in fh:
                    rows.append([float(v) for v in line.strip().split(",")])
            arr = np.asarray(rows)
            g = Graph(g.num_vertices, g.edges, positions=arr[:, :2])
            graphs.append(g)
            features.append(arr[:, 2:3])
        domain = GraphDomain(graphs, levels=manifest.get("graclus_levels", 0))
        return ClassificationTask(domain=domain, features=features,
                                  labels=np.asarray(manifest["labels"],
                                                    dtype=np.int64),
                                  train_idx=train, test_idx=test)
    raise ValueError(f"unknown task {task!r}")
