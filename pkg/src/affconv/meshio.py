"""Text formats: OFF and OBJ triangle meshes, plain-graph edge lists, sparse
COO matrices, and raw grayscale PGM rasters.

Writers emit a canonical form (floats via repr, sorted entries), so
save(load(f)) is byte-identical for canonical inputs.
"""

from __future__ import annotations

import numpy as np

from .graphs import Graph, GraphError, Mesh, SparseMatrix


def _fmt(x: float) -> str:
    return repr(float(x))


def _data_lines(path):
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


def load_off(path) -> Mesh:
    lines = _data_lines(path)
    header = next(lines, None)
    if header != "OFF":
        raise GraphError(f"{path}: not an ASCII OFF file")
    counts = next(lines, "").split()
    if len(counts) < 2:
        raise GraphError(f"{path}: malformed OFF counts")
    nv, nf = int(counts[0]), int(counts[1])
    verts = np.empty((nv, 3))
    for k in range(nv):
        parts = next(lines).split()
        verts[k] = [float(p) for p in parts[:3]]
    faces = np.empty((nf, 3), dtype=np.int64)
    for k in range(nf):
        parts = next(lines).split()
        if int(parts[0]) != 3:
            raise GraphError(f"{path}: only triangle faces are supported")
        faces[k] = [int(p) for p in parts[1:4]]
    return Mesh(verts, faces)


def save_off(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_vertices} {len(mesh.faces)} 0\n")
        for p in mesh.positions:
            fh.write(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        for a, b, c in mesh.faces:
            fh.write(f"3 {a} {b} {c}\n")


def load_obj(path) -> Mesh:
    verts = []
    faces = []
    for line in _data_lines(path):
        parts = line.split()
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise GraphError(f"{path}: only triangle faces are supported")
            # indices may carry /texture/normal suffixes; OBJ counts from 1
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
            faces.append(idx)
    if not verts:
        raise GraphError(f"{path}: no vertices")
    return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in mesh.positions:
            fh.write(f"v {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_edge_list(path) -> Graph:
    """`v <n>` header plus one `e <i> <j>` per undirected pair; symmetrized."""
    n = None
    pairs = []
    for line in _data_lines(path):
        parts = line.split()
        if parts[0] == "v":
            n = int(parts[1])
        elif parts[0] == "e":
            pairs.append((int(parts[1]), int(parts[2])))
        else:
            raise GraphError(f"{path}: unknown record {parts[0]!r}")
    if n is None:
        raise GraphError(f"{path}: missing `v <n>` header")
    return Graph.undirected(n, pairs)


def save_edge_list(g: Graph, path) -> None:
    pairs = sorted({(min(int(i), int(j)), max(int(i), int(j))) for i, j in g.edges})
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"v {g.num_vertices}\n")
        for i, j in pairs:
            fh.write(f"e {i} {j}\n")


def load_coo(path) -> SparseMatrix:
    lines = _data_lines(path)
    head = next(lines, "").split()
    if len(head) != 3:
        raise GraphError(f"{path}: malformed COO header")
    rows, cols, nnz = int(head[0]), int(head[1]), int(head[2])
    triplets = []
    for _ in range(nnz):
        r, c, v = next(lines).split()
        triplets.append((int(r), int(c), float(v)))
    return SparseMatrix.from_triplets(rows, cols, triplets)


def save_coo(sm: SparseMatrix, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{sm.rows} {sm.cols} {sm.nnz}\n")
        for r, c, v in zip(sm.row_idx, sm.col_idx, sm.data):
            fh.write(f"{r} {c} {_fmt(v)}\n")


def load_pgm(path) -> np.ndarray:
    """Binary (P5) grayscale PGM as a float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    k = 0
    while len(tokens) < 4:
        while k < len(data) and data[k:k + 1].isspace():
            k += 1
        if data[k:k + 1] == b"#":
            while k < len(data) and data[k] != 0x0A:
                k += 1
            continue
        start = k
        while k < len(data) and not data[k:k + 1].isspace():
            k += 1
        tokens.append(data[start:k])
    if tokens[0] != b"P5":
        raise GraphError(f"{path}: not a raw PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.frombuffer(data[k + 1:k + 1 + width * height], dtype=np.uint8)
    return pixels.reshape(height, width).astype(np.float64) / maxval


def save_pgm(image: np.ndarray, path) -> None:
    img = np.clip(np.asarray(image), 0.0, 1.0)
    raw = np.round(img * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())
