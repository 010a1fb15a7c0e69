"""Graph and triangle-mesh containers and the structural matrices built on them.

Conventions used throughout the package: a directed edge (i, j) lists j as a
neighbor of i, so messages flow from j into i and the degree of i counts its
outgoing edges.  Undirected inputs are stored with both directions present
(loaders symmetrize automatically).  After construction the edge list is kept
in lexicographic order so that per-edge data (pseudo-coordinates, attention
weights) has a reproducible layout.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np


class GraphError(ValueError):
    pass


class IsolatedVertex(GraphError):
    pass


class SelfLoopPresent(GraphError):
    pass


class MissingPositions(GraphError):
    pass


class NonManifoldVertex(GraphError):
    pass


class DisconnectedMesh(GraphError):
    pass


class Graph:
    """Immutable directed graph over vertices 0..num_vertices-1.

    Edges are deduplicated and sorted lexicographically; `positions` is an
    optional (n, d) float array with d >= 1.
    """

    __slots__ = ("num_vertices", "edges", "positions", "has_self_loops",
                 "_offsets", "_undirected_ok")

    def __init__(self, num_vertices: int, edges, positions=None):
        if num_vertices < 1:
            raise GraphError("graph needs at least one vertex")
        self.num_vertices = int(num_vertices)
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                       dtype=np.int64)
        if e.size == 0:
            e = np.zeros((0, 2), dtype=np.int64)
        if e.ndim != 2 or e.shape[1] != 2:
            raise GraphError("edges must be (source, target) pairs")
        if e.size and (e.min() < 0 or e.max() >= self.num_vertices):
            raise GraphError("edge endpoint out of range")
        # canonical order: lexicographic by (source, target)
        order = np.lexsort((e[:, 1], e[:, 0]))
        e = e[order]
        if e.shape[0] > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise GraphError("duplicate edge")
        self.edges = e
        self.edges.setflags(write=False)
        self.has_self_loops = bool(e.size) and bool(np.any(e[:, 0] == e[:, 1]))
        if positions is not None:
            positions = np.asarray(positions, dtype=np.float64)
            if positions.ndim != 2 or positions.shape[0] != self.num_vertices:
                raise GraphError("positions must be one coordinate row per vertex")
            positions.setflags(write=False)
        self.positions = positions
        self._offsets = None

    @classmethod
    def undirected(cls, num_vertices: int, pairs, positions=None) -> "Graph":
        """Build a graph from undirected pairs, storing both directions."""
        seen = set()
        for i, j in pairs:
            i, j = int(i), int(j)
            seen.add((i, j))
            seen.add((j, i))
        return cls(num_vertices, sorted(seen), positions=positions)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def edge_index(self) -> np.ndarray:
        """The (E, 2) array of directed edges in canonical order."""
        return self.edges

    def _neighbor_offsets(self):
        if self._offsets is None:
            # edges are sorted by source, so each vertex's out-edges are a slice
            counts = np.bincount(self.edges[:, 0], minlength=self.num_vertices)
            self._offsets = np.concatenate(([0], np.cumsum(counts)))
        return self._offsets

    def out_neighbors(self, i: int) -> np.ndarray:
        """Targets of i's outgoing edges, ascending."""
        off = self._neighbor_offsets()
        return self.edges[off[i]:off[i + 1], 1]

    def relabeled(self, perm) -> "Graph":
        """Apply a vertex permutation: new index of vertex v is perm[v]."""
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.num_vertices)):
            raise GraphError("not a permutation")
        new_edges = perm[self.edges]
        new_pos = None
        if self.positions is not None:
            new_pos = np.empty_like(self.positions)
            new_pos[perm] = self.positions
        return Graph(self.num_vertices, new_edges, positions=new_pos)

    def __repr__(self):
        return f"Graph(n={self.num_vertices}, e={self.num_edges})"


class Mesh:
    """Triangle mesh: a graph derived from faces plus required 3D positions.

    Face orientation is checked at construction: the mesh is consistently
    oriented iff no directed half-edge is shared by two faces.  When the check
    fails, spiral extraction falls back to BFS ring order.
    """

    __slots__ = ("graph", "faces", "consistently_oriented")

    def __init__(self, positions, faces):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise GraphError("mesh positions must be (n, 3)")
        faces = np.asarray(list(faces) if not isinstance(faces, np.ndarray) else faces,
                           dtype=np.int64)
        if faces.size == 0:
            faces = np.zeros((0, 3), dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise GraphError("faces must be vertex triples")
        n = positions.shape[0]
        if faces.size and (faces.min() < 0 or faces.max() >= n):
            raise GraphError("face index out of range")
        pairs = set()
        half_edges = set()
        consistent = True
        for a, b, c in faces:
            for u, v in ((a, b), (b, c), (c, a)):
                u, v = int(u), int(v)
                if u == v:
                    raise GraphError("degenerate face")
                if (u, v) in half_edges:
                    consistent = False
                half_edges.add((u, v))
                pairs.add((min(u, v), max(u, v)))
        self.graph = Graph.undirected(n, pairs, positions=positions)
        faces.setflags(write=False)
        self.faces = faces
        self.consistently_oriented = consistent

    @property
    def num_vertices(self) -> int:
        return self.graph.num_vertices

    @property
    def positions(self) -> np.ndarray:
        return self.graph.positions

    def relabeled(self, perm) -> "Mesh":
        perm = np.asarray(perm, dtype=np.int64)
        new_pos = np.empty_like(self.positions)
        new_pos[perm] = self.positions
        return Mesh(new_pos, perm[self.faces])

    def __repr__(self):
        return f"Mesh(n={self.num_vertices}, f={len(self.faces)})"


@dataclass(frozen=True)
class SparseMatrix:
    """COO sparse matrix with entries sorted by (row, col) and no duplicates."""

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    data: np.ndarray

    @classmethod
    def from_triplets(cls, rows, cols, triplets) -> "SparseMatrix":
        trip = sorted((int(r), int(c), float(v)) for r, c, v in triplets)
        for k in range(1, len(trip)):
            if trip[k][:2] == trip[k - 1][:2]:
                raise GraphError("duplicate sparse entry")
        r = np.array([t[0] for t in trip], dtype=np.int64)
        c = np.array([t[1] for t in trip], dtype=np.int64)
        v = np.array([t[2] for t in trip], dtype=np.float64)
        if r.size and (r.min() < 0 or r.max() >= rows or c.min() < 0 or c.max() >= cols):
            raise GraphError("sparse entry out of range")
        return cls(rows, cols, r, c, v)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def entries(self):
        return list(zip(self.row_idx.tolist(), self.col_idx.tolist(),
                        self.data.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_idx, self.col_idx] = self.data
        return out

    def transpose(self) -> "SparseMatrix":
        order = np.lexsort((self.row_idx, self.col_idx))
        return SparseMatrix(self.cols, self.rows, self.col_idx[order],
                            self.row_idx[order], self.data[order])

    def scaled(self, factor: float) -> "SparseMatrix":
        return SparseMatrix(self.rows, self.cols, self.row_idx, self.col_idx,
                            self.data * factor)


def block_diag(blocks: list) -> SparseMatrix:
    """Stack sparse matrices along the diagonal (batching helper)."""
    r_off = 0
    c_off = 0
    rs, cs, vs = [], [], []
    for b in blocks:
        rs.append(b.row_idx + r_off)
        cs.append(b.col_idx + c_off)
        vs.append(b.data)
        r_off += b.rows
        c_off += b.cols
    if not blocks:
        raise GraphError("no blocks")
    return SparseMatrix(r_off, c_off,
                        np.concatenate(rs), np.concatenate(cs), np.concatenate(vs))


@dataclass(frozen=True)
class PseudoCoords:
    """Per-edge geometry vectors aligned with the graph's canonical edge order."""

    values: np.ndarray  # (E, d)
    mode: str

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def degree_vector(g: Graph) -> np.ndarray:
    """Out-degree of each vertex; a self-loop counts once."""
    return np.bincount(g.edges[:, 0], minlength=g.num_vertices)


def normalized_adjacency(g: Graph, strict: bool = False) -> SparseMatrix:
    """D^{-1/2} A D^{-1/2}; zero rows for isolated vertices unless strict."""
    d = degree_vector(g)
    if strict and np.any(d == 0):
        raise IsolatedVertex("isolated vertex in strict mode")
    src, dst = g.edges[:, 0], g.edges[:, 1]
    prod = (d[src] * d[dst]).astype(np.float64)
    vals = np.where(prod > 0, 1.0 / np.sqrt(np.maximum(prod, 1.0)), 0.0)
    return SparseMatrix(g.num_vertices, g.num_vertices, src.copy(), dst.copy(), vals)


def gcn_propagation_matrix(g: Graph) -> SparseMatrix:
    """Self-loop-augmented symmetric normalization D~^{-1/2} (A + I) D~^{-1/2}."""
    if g.has_self_loops:
        raise SelfLoopPresent("input graph already has self-loops")
    n = g.num_vertices
    d_tilde = degree_vector(g) + 1
    src = np.concatenate([g.edges[:, 0], np.arange(n)])
    dst = np.concatenate([g.edges[:, 1], np.arange(n)])
    vals = 1.0 / np.sqrt((d_tilde[src] * d_tilde[dst]).astype(np.float64))
    order = np.lexsort((dst, src))
    return SparseMatrix(n, n, src[order], dst[order], vals[order])


def chebyshev_operator(g: Graph, strict: bool = False) -> SparseMatrix:
    """The propagation operator -D^{-1/2} A D^{-1/2} used by the polynomial filters."""
    return normalized_adjacency(g, strict=strict).scaled(-1.0)


def pseudo_coordinates(g: Graph, mode: str = "cartesian") -> PseudoCoords:
    """Per-edge vectors u_ij for attention-style operators.

    cartesian: u_ij = pos_j - pos_i.
    degree: u_ij = (1/sqrt(d_i), 1/sqrt(d_j)), rescaled by the global
    per-component maximum so values lie in (0, 1].
    """
    if mode == "cartesian":
        if g.positions is None:
            raise MissingPositions("cartesian pseudo-coordinates need positions")
        u = g.positions[g.edges[:, 1]] - g.positions[g.edges[:, 0]]
        return PseudoCoords(u, "cartesian")
    if mode == "degree":
        d = degree_vector(g).astype(np.float64)
        inv_sqrt = np.where(d > 0, 1.0 / np.sqrt(np.maximum(d, 1.0)), 0.0)
        u = np.stack([inv_sqrt[g.edges[:, 0]], inv_sqrt[g.edges[:, 1]]], axis=1)
        peak = u.max(axis=0) if u.size else np.ones(2)
        peak = np.where(peak > 0, peak, 1.0)
        return PseudoCoords(u / peak, "degree")
    raise GraphError(f"unknown pseudo-coordinate mode {mode!r}")


def unit_rescale(pseudo: PseudoCoords) -> PseudoCoords:
    """Min-max rescale each component to [0, 1] (constant components map to 0)."""
    u = pseudo.values
    if u.shape[0] == 0:
        return PseudoCoords(u.copy(), pseudo.mode)
    lo = u.min(axis=0)
    hi = u.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return PseudoCoords((u - lo) / span, pseudo.mode)


def _vertex_ring_successors(mesh: Mesh, i: int):
    """Map neighbor -> next neighbor walking the face fan around i."""
    succ = {}
    for a, b, c in mesh.faces:
        if i == a:
            u, v = int(b), int(c)
        elif i == b:
            u, v = int(c), int(a)
        elif i == c:
            u, v = int(a), int(b)
        else:
            continue
        if u in succ:
            raise NonManifoldVertex(f"vertex {i} has a non-manifold fan")
        succ[u] = v
    return succ


def _first_ring(mesh: Mesh, i: int):
    """Ordered 1-ring of i via the fan walk; raises when the walk cannot cover it."""
    neighbors = mesh.graph.out_neighbors(i)
    if len(neighbors) == 0:
        return []
    if not mesh.consistently_oriented:
        raise NonManifoldVertex("inconsistent orientation")
    succ = _vertex_ring_successors(mesh, i)
    start = int(neighbors[0])  # smallest index
    ring = [start]
    seen = {start}
    cur = start
    while True:
        nxt = succ.get(cur)
        if nxt is None or nxt in seen:
            break
        ring.append(nxt)
        seen.add(nxt)
        cur = nxt
    if len(ring) != len(neighbors):
        raise NonManifoldVertex("open or broken fan")
    return ring


def spiral_sequences(mesh: Mesh, length: int, return_fallback: bool = False):
    """Fixed-length spiral neighbor enumeration for every vertex.

    The sequence starts at the center vertex itself; the first ring starts at
    the smallest-index neighbor and follows the face orientation.  Outer rings
    are appended in first-visit order (previous-ring order, each vertex's
    unvisited neighbors ascending).  When the spiral runs out of vertices the
    last entry is repeated; when the fan walk fails for a vertex the whole
    ordering falls back to ascending-index BFS rings for that vertex and the
    vertex is flagged.
    """
    if length < 1:
        raise GraphError("spiral length must be >= 1")
    n = mesh.num_vertices
    out = np.empty((n, length), dtype=np.int64)
    fallback = []
    for i in range(n):
        try:
            ring = _first_ring(mesh, i)
        except NonManifoldVertex:
            ring = sorted(int(v) for v in mesh.graph.out_neighbors(i))
            fallback.append(i)
        seq = [i] + ring
        visited = set(seq)
        frontier = ring
        while len(seq) < length and frontier:
            nxt = []
            for v in frontier:
                for w in mesh.graph.out_neighbors(v):
                    w = int(w)
                    if w not in visited:
                        visited.add(w)
                        nxt.append(w)
            seq.extend(nxt)
            frontier = nxt
        if len(seq) >= length:
            seq = seq[:length]
        else:
            seq = seq + [seq[-1]] * (length - len(seq))
        out[i] = seq
    if return_fallback:
        return out, fallback
    return out


def geodesic_distances(mesh: Mesh, source: int) -> np.ndarray:
    """Dijkstra over the edge-length-weighted mesh graph; +inf when unreached."""
    n = mesh.num_vertices
    pos = mesh.positions
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    heap = [(0.0, source)]
    g = mesh.graph
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        pu = pos[u]
        for v in g.out_neighbors(u):
            v = int(v)
            nd = d + float(np.linalg.norm(pos[v] - pu))
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def geodesic_diameter(mesh: Mesh) -> float:
    """Max pairwise geodesic distance; raises on disconnected meshes."""
    worst = 0.0
    for s in range(mesh.num_vertices):
        d = geodesic_distances(mesh, s)
        if np.any(np.isinf(d)):
            raise DisconnectedMesh("mesh is not connected")
        worst = max(worst, float(d.max()))
    return worst


def union_graphs(graphs: list) -> tuple:
    """Disjoint union of graphs (for batching); returns the union and offsets."""
    offsets = []
    total = 0
    edges = []
    pos_blocks = []
    have_pos = all(g.positions is not None for g in graphs)
    for g in graphs:
        offsets.append(total)
        if g.num_edges:
            edges.append(g.edges + total)
        if have_pos:
            pos_blocks.append(g.positions)
        total += g.num_vertices
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    pos = np.concatenate(pos_blocks) if have_pos and pos_blocks else None
    return Graph(total, e, positions=pos), np.array(offsets, dtype=np.int64)
