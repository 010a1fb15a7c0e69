"""The seven convolution operators plus the affine and residual skip wrappers.

Each operator is a pure function of an OperatorParams bundle, a feature
matrix (vertices x channels) and the graph structure; everything runs through
the autodiff primitives so forward results are differentiable.  Ablation
variants: `center_weight=False` drops the term acting on the center vertex
(polynomial filters lose order 0 and gain the next order; spiral filters
rotate one step down the spiral), `self_loops=False` removes i from its own
neighborhood in the soft-assignment operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import (Param, Tensor, add, add_rowvec, concat_cols, const,
                       exp, gather_rows, hadamard, matmul, mul_rowvec, relu,
                       reshape, row_softmax, row_sum, scalar_mul, scale_rows,
                       select_col, slice_cols, sparse_matmul, sub, sub_rowvec,
                       segment_reduce, tensor_scalar_mul)
from .graphs import (Graph, GraphError, Mesh, PseudoCoords, chebyshev_operator,
                     gcn_propagation_matrix, pseudo_coordinates,
                     spiral_sequences, unit_rescale)


class MissingPseudoCoords(GraphError):
    pass


class EmptyNeighborhood(GraphError):
    pass


class SpiralUnavailable(GraphError):
    pass


class PseudoCoordOutOfRange(GraphError):
    pass


OPERATOR_KINDS = ("gcn", "chebnet", "monet", "feastnet", "spiralnet", "gin",
                  "splinecnn")
WRAPPERS = ("none", "residual", "affine")


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one convolution layer.

    kernel_size is the operator's size parameter: number of attention kernels
    (monet/feastnet), polynomial order (chebnet), spiral length (spiralnet),
    B-spline functions per dimension (splinecnn); unused for gcn and gin.
    """

    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int = 1
    wrapper: str = "none"
    center_weight: bool = True
    self_loops: bool = True
    translation_invariant: bool = False
    pseudo_mode: str = "cartesian"
    pseudo_dim: int = 3
    bias: bool = True
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.wrapper not in WRAPPERS:
            raise ValueError(f"unknown wrapper {self.wrapper!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if not self.center_weight and self.kind not in ("chebnet", "spiralnet"):
            raise ValueError("center_weight ablation only applies to "
                             "chebnet/spiralnet")
        if not self.self_loops and self.kind != "feastnet":
            raise ValueError("self_loops ablation only applies to feastnet")
        if self.translation_invariant and self.kind != "feastnet":
            raise ValueError("translation_invariant only applies to feastnet")
        if self.normalize and self.kind != "gin":
            raise ValueError("normalize only applies to gin")
        if self.pseudo_mode not in ("cartesian", "degree"):
            raise ValueError(f"unknown pseudo mode {self.pseudo_mode!r}")
        if self.pseudo_mode == "degree" and self.pseudo_dim != 2:
            raise ValueError("degree pseudo-coordinates are 2-dimensional")

    def with_wrapper(self, wrapper: str) -> "LayerSpec":
        return replace(self, wrapper=wrapper)


class OperatorParams:
    """Named parameter bundle for one layer, in a fixed insertion order.

    Each Param carries a role: "weight" for channel-mixing matrices (what the
    kernel-size column counts), "kernel" for attention parameters, "bias" for
    additive offsets, "other" for the rest.
    """

    def __init__(self, spec: LayerSpec):
        self.spec = spec
        self._params: dict[str, Param] = {}

    def add(self, name: str, values, role: str) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate param {name!r}")
        p = Param(np.asarray(values, dtype=ad.get_default_dtype()),
                  name=name, role=role)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def params(self):
        return list(self._params.values())

    def weight_matrix_count(self) -> int:
        return sum(1 for p in self._params.values() if p.role == "weight")

    def num_scalars(self) -> int:
        return sum(p.size for p in self._params.values())


def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: LayerSpec, seed: int) -> OperatorParams:
    """Deterministic initialization: Glorot-uniform weights, zero biases,
    except the soft-assignment operator whose parameters are N(0, 0.1)."""
    rng = np.random.default_rng(seed)
    params = OperatorParams(spec)
    cin, cout, m = spec.in_channels, spec.out_channels, spec.kernel_size
    if spec.kind == "gcn":
        params.add("theta", _glorot(rng, (cin, cout), cin, cout), "weight")
    elif spec.kind == "chebnet":
        for k in _cheb_orders(spec):
            params.add(f"theta_{k}", _glorot(rng, (cin, cout), cin, cout),
                       "weight")
    elif spec.kind == "monet":
        for k in range(m):
            params.add(f"theta_{k}", _glorot(rng, (cin, cout), cin, cout),
                       "weight")
        d = spec.pseudo_dim
        params.add("mu", _glorot(rng, (m, d), m, d), "kernel")
        params.add("log_sigma2", np.zeros((m, d)), "kernel")
    elif spec.kind == "feastnet":
        for k in range(m):
            params.add(f"w_{k}", rng.normal(0.0, 0.1, size=(cin, cout)),
                       "weight")
        params.add("attn_u", rng.normal(0.0, 0.1, size=(cin, m)), "kernel")
        if not spec.translation_invariant:
            params.add("attn_v", rng.normal(0.0, 0.1, size=(cin, m)), "kernel")
        params.add("attn_c", rng.normal(0.0, 0.1, size=(m,)), "kernel")
    elif spec.kind == "spiralnet":
        params.add("weight", _glorot(rng, (m * cin, cout), m * cin, cout),
                   "weight")
    elif spec.kind == "gin":
        hidden = cout
        params.add("epsilon", np.zeros(1), "other")
        params.add("mlp_w1", _glorot(rng, (cin, hidden), cin, hidden), "weight")
        params.add("mlp_b1", np.zeros(hidden), "bias")
        params.add("mlp_w2", _glorot(rng, (hidden, cout), hidden, cout),
                   "weight")
        params.add("mlp_b2", np.zeros(cout), "bias")
        if spec.normalize:
            params.add("norm_scale", np.ones(cout), "other")
            params.add("norm_shift", np.zeros(cout), "bias")
    elif spec.kind == "splinecnn":
        for k in range(m ** spec.pseudo_dim):
            params.add(f"weight_{k}", _glorot(rng, (cin, cout), cin, cout),
                       "weight")
    if spec.wrapper == "affine":
        params.add("skip_weight", _glorot(rng, (cin, cout), cin, cout),
                   "weight")
        params.add("skip_bias", np.zeros(cout), "bias")
    elif spec.bias:
        params.add("bias", np.zeros(cout), "bias")
    return params


def _cheb_orders(spec: LayerSpec):
    if spec.center_weight:
        return range(0, spec.kernel_size + 1)
    return range(1, spec.kernel_size + 2)


def _check_features(X: Tensor, g: Graph):
    if X.ndim != 2 or X.shape[0] != g.num_vertices:
        raise ad.ShapeMismatch(
            f"features {X.shape} do not match graph with {g.num_vertices} "
            "vertices")


# -------------------------------------------------------------- the operators

def gcn_forward(params: OperatorParams, X: Tensor, g: Graph,
                matrix=None) -> Tensor:
    """Renormalized propagation followed by channel mixing."""
    _check_features(X, g)
    if matrix is None:
        matrix = gcn_propagation_matrix(g)
    return matmul(sparse_matmul(matrix, X), params["theta"].tensor)


def chebnet_forward(params: OperatorParams, X: Tensor, g: Graph,
                    operator=None) -> Tensor:
    """Polynomial filter on L = -D^{-1/2} A D^{-1/2} via the three-term
    recursion T_k = 2 L T_{k-1} - T_{k-2}."""
    _check_features(X, g)
    spec = params.spec
    if operator is None:
        operator = chebyshev_operator(g)
    orders = list(_cheb_orders(spec))
    max_order = orders[-1]
    terms = [X]
    if max_order >= 1:
        terms.append(sparse_matmul(operator, X))
    for k in range(2, max_order + 1):
        terms.append(sub(scalar_mul(2.0, sparse_matmul(operator, terms[k - 1])),
                         terms[k - 2]))
    out = None
    for k in orders:
        contrib = matmul(terms[k], params[f"theta_{k}"].tensor)
        out = contrib if out is None else add(out, contrib)
    return out


def monet_forward(params: OperatorParams, X: Tensor, g: Graph,
                  pseudo: PseudoCoords) -> Tensor:
    """Gaussian-kernel attention: per edge w_m(u) = exp(-0.5 (u-mu_m)^T
    diag(sigma_m^2)^{-1} (u-mu_m)), aggregated then mixed per kernel."""
    _check_features(X, g)
    if pseudo is None or pseudo.values.shape[0] != g.num_edges:
        raise MissingPseudoCoords("one pseudo-coordinate per edge required")
    spec = params.spec
    if pseudo.dim != spec.pseudo_dim:
        raise MissingPseudoCoords(
            f"pseudo dim {pseudo.dim} != spec dim {spec.pseudo_dim}")
    src, dst = g.edges[:, 0], g.edges[:, 1]
    u = const(pseudo.values)
    xj = gather_rows(X, dst)
    d = spec.pseudo_dim
    out = None
    for k in range(spec.kernel_size):
        mu_k = reshape(gather_rows(params["mu"].tensor, [k]), (d,))
        rho_k = reshape(gather_rows(params["log_sigma2"].tensor, [k]), (d,))
        diff = sub_rowvec(u, mu_k)
        quad = row_sum(mul_rowvec(hadamard(diff, diff),
                                  exp(scalar_mul(-1.0, rho_k))))
        w = exp(scalar_mul(-0.5, quad))
        agg = segment_reduce(scale_rows(xj, w), src, g.num_vertices, "sum")
        contrib = matmul(agg, params[f"theta_{k}"].tensor)
        out = contrib if out is None else add(out, contrib)
    return out


def feastnet_forward(params: OperatorParams, X: Tensor, g: Graph,
                     strict: bool = False) -> Tensor:
    """Soft assignment of neighbors to filters:
    x'_i = b + (1/|N(i)|) sum_m sum_j q_m(x_i, x_j) W_m x_j."""
    _check_features(X, g)
    spec = params.spec
    src, dst = g.edges[:, 0], g.edges[:, 1]
    if spec.self_loops:
        if not g.has_self_loops:
            loops = np.arange(g.num_vertices, dtype=np.int64)
            src = np.concatenate([src, loops])
            dst = np.concatenate([dst, loops])
    else:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    counts = np.bincount(src, minlength=g.num_vertices)
    if strict and np.any(counts == 0):
        raise EmptyNeighborhood("vertex with no neighbors in strict mode")
    xi = gather_rows(X, src)
    xj = gather_rows(X, dst)
    if spec.translation_invariant:
        scores = matmul(sub(xj, xi), params["attn_u"].tensor)
    else:
        scores = add(matmul(xi, params["attn_u"].tensor),
                     matmul(xj, params["attn_v"].tensor))
    q = row_softmax(add_rowvec(scores, params["attn_c"].tensor))
    msg = None
    for k in range(spec.kernel_size):
        part = scale_rows(matmul(xj, params[f"w_{k}"].tensor), select_col(q, k))
        msg = part if msg is None else add(msg, part)
    agg = segment_reduce(msg, src, g.num_vertices, "sum")
    inv_n = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    out = scale_rows(agg, const(inv_n))
    if "bias" in params:
        out = add_rowvec(out, params["bias"].tensor)
    return out


def spiralnet_forward(params: OperatorParams, X: Tensor,
                      sequences: np.ndarray) -> Tensor:
    """Linear map over the concatenated features of each vertex's spiral."""
    spec = params.spec
    if sequences is None:
        raise SpiralUnavailable("spiral sequences are required")
    sequences = np.asarray(sequences, dtype=np.int64)
    if sequences.ndim != 2 or sequences.shape[1] != spec.kernel_size:
        raise SpiralUnavailable(
            f"sequences {sequences.shape} do not match kernel size "
            f"{spec.kernel_size}")
    cols = [gather_rows(X, sequences[:, s]) for s in range(sequences.shape[1])]
    return matmul(concat_cols(cols), params["weight"].tensor)


def rotated_sequences(mesh_or_sequences, length: int) -> np.ndarray:
    """Spiral of length+1 with the center dropped (the rotated filter)."""
    if isinstance(mesh_or_sequences, Mesh):
        seq = spiral_sequences(mesh_or_sequences, length + 1)
    else:
        seq = np.asarray(mesh_or_sequences, dtype=np.int64)
        if seq.shape[1] != length + 1:
            raise SpiralUnavailable("need sequences of length M+1 to rotate")
    return seq[:, 1:]


def gin_forward(params: OperatorParams, X: Tensor, g: Graph) -> Tensor:
    """x'_i = MLP((1 + eps) x_i + sum_{j in N(i)} x_j) with a 2-layer MLP."""
    _check_features(X, g)
    src, dst = g.edges[:, 0], g.edges[:, 1]
    neigh = segment_reduce(gather_rows(X, dst), src, g.num_vertices, "sum")
    one_plus = add(const(np.ones(1)), params["epsilon"].tensor)
    h = add(tensor_scalar_mul(X, one_plus), neigh)
    h = relu(add_rowvec(matmul(h, params["mlp_w1"].tensor),
                        params["mlp_b1"].tensor))
    out = add_rowvec(matmul(h, params["mlp_w2"].tensor),
                     params["mlp_b2"].tensor)
    if params.spec.normalize:
        out = add_rowvec(mul_rowvec(out, params["norm_scale"].tensor),
                         params["norm_shift"].tensor)
    return out


def _bspline_coefficients(u: np.ndarray, m: int) -> list:
    """Degree-1 open B-spline tensor-product coefficients on [0, 1]^d.

    Returns one (E,) coefficient vector per basis element, m^d in total,
    indexed row-major over dimensions; they sum to 1 per edge.
    """
    e, d = u.shape
    if np.any(u < -1e-9) or np.any(u > 1.0 + 1e-9):
        raise PseudoCoordOutOfRange("pseudo-coordinates must lie in [0, 1]")
    per_dim = []
    for a in range(d):
        basis = np.zeros((e, m))
        if m == 1:
            basis[:, 0] = 1.0
        else:
            t = np.clip(u[:, a], 0.0, 1.0) * (m - 1)
            i0 = np.minimum(t.astype(np.int64), m - 2)
            w = t - i0
            rows = np.arange(e)
            basis[rows, i0] = 1.0 - w
            basis[rows, i0 + 1] += w
        per_dim.append(basis)
    coeffs = []
    for flat in range(m ** d):
        idx = []
        rest = flat
        for _ in range(d):
            idx.append(rest % m)
            rest //= m
        idx.reverse()
        c = np.ones(e)
        for a in range(d):
            c = c * per_dim[a][:, idx[a]]
        coeffs.append(c)
    return coeffs


def splinecnn_forward(params: OperatorParams, X: Tensor, g: Graph,
                      pseudo: PseudoCoords) -> Tensor:
    """Neighborhood mean of B-spline-interpolated weight matrices applied to
    neighbor features; pseudo-coordinates must be normalized to [0, 1]^d."""
    _check_features(X, g)
    if pseudo is None or pseudo.values.shape[0] != g.num_edges:
        raise MissingPseudoCoords("one pseudo-coordinate per edge required")
    spec = params.spec
    if pseudo.dim != spec.pseudo_dim:
        raise MissingPseudoCoords(
            f"pseudo dim {pseudo.dim} != spec dim {spec.pseudo_dim}")
    src, dst = g.edges[:, 0], g.edges[:, 1]
    coeffs = _bspline_coefficients(pseudo.values, spec.kernel_size)
    xj = gather_rows(X, dst)
    msg = None
    for k, c in enumerate(coeffs):
        if not np.any(c):
            continue
        part = scale_rows(matmul(xj, params[f"weight_{k}"].tensor), const(c))
        msg = part if msg is None else add(msg, part)
    counts = np.bincount(src, minlength=g.num_vertices)
    if msg is None:  # no edges at all
        return scale_rows(matmul(X, params["weight_0"].tensor),
                          const(np.zeros(g.num_vertices)))
    agg = segment_reduce(msg, src, g.num_vertices, "sum")
    inv_n = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    return scale_rows(agg, const(inv_n))


# ------------------------------------------------------------------- wrappers

def affine_skip_wrap(layer_fn, X: Tensor, skip_weight: Param,
                     skip_bias: Param) -> Tensor:
    """Sum of the convolution path and the shortcut X A + b."""
    return add_rowvec(add(layer_fn(X), matmul(X, skip_weight.tensor)),
                      skip_bias.tensor)


def residual_wrap(layer_fn, X: Tensor, out_channels: int) -> Tensor:
    """Identity shortcut, zero-padded when channels expand and truncated to
    the first out_channels when they shrink."""
    conv = layer_fn(X)
    cin = X.shape[1]
    if cin == out_channels:
        shortcut = X
    elif cin < out_channels:
        zeros = const(np.zeros((X.shape[0], out_channels - cin),
                               dtype=ad.get_default_dtype()))
        shortcut = concat_cols([X, zeros])
    else:
        shortcut = slice_cols(X, 0, out_channels)
    return add(conv, shortcut)


# ------------------------------------------------------- layer-level dispatch

class GraphContext:
    """Caches the per-graph structures the operators consume.

    spiral_fn, when given, overrides spiral extraction (used for batched
    unions where template spirals are tiled instead of re-walked).
    """

    def __init__(self, graph: Graph, mesh: Mesh | None = None,
                 spiral_fn=None):
        self.graph = graph
        self.mesh = mesh
        self.spiral_fn = spiral_fn
        self._cache = {}

    def gcn_matrix(self):
        if "gcn" not in self._cache:
            self._cache["gcn"] = gcn_propagation_matrix(self.graph)
        return self._cache["gcn"]

    def cheb_operator(self):
        if "cheb" not in self._cache:
            self._cache["cheb"] = chebyshev_operator(self.graph)
        return self._cache["cheb"]

    def pseudo(self, mode: str) -> PseudoCoords:
        key = ("pseudo", mode)
        if key not in self._cache:
            self._cache[key] = pseudo_coordinates(self.graph, mode)
        return self._cache[key]

    def unit_pseudo(self, mode: str) -> PseudoCoords:
        key = ("unit", mode)
        if key not in self._cache:
            self._cache[key] = unit_rescale(self.pseudo(mode))
        return self._cache[key]

    def spirals(self, length: int, center_weight: bool = True) -> np.ndarray:
        key = ("spiral", length, center_weight)
        if key not in self._cache:
            span = length if center_weight else length + 1
            if self.spiral_fn is not None:
                seq = self.spiral_fn(span)
            elif self.mesh is not None:
                seq = spiral_sequences(self.mesh, span)
            else:
                seq = bfs_sequences(self.graph, span)
            self._cache[key] = seq if center_weight else seq[:, 1:]
        return self._cache[key]


def bfs_sequences(g: Graph, length: int) -> np.ndarray:
    """Ascending-index BFS ring ordering (spiral fallback for face-less graphs)."""
    out = np.empty((g.num_vertices, length), dtype=np.int64)
    for i in range(g.num_vertices):
        seq = [i]
        visited = {i}
        frontier = [i]
        while len(seq) < length and frontier:
            nxt = []
            for v in frontier:
                for w in g.out_neighbors(v):
                    w = int(w)
                    if w not in visited:
                        visited.add(w)
                        nxt.append(w)
            seq.extend(nxt)
            frontier = nxt
        seq = seq[:length] + [seq[-1]] * max(0, length - len(seq))
        out[i] = seq
    return out


def layer_forward(spec: LayerSpec, params: OperatorParams, X: Tensor,
                  ctx: GraphContext) -> Tensor:
    """Run one layer: operator core, optional bias, optional skip wrapper."""

    def core(features: Tensor) -> Tensor:
        if spec.kind == "gcn":
            out = gcn_forward(params, features, ctx.graph, ctx.gcn_matrix())
        elif spec.kind == "chebnet":
            out = chebnet_forward(params, features, ctx.graph,
                                  ctx.cheb_operator())
        elif spec.kind == "monet":
            out = monet_forward(params, features, ctx.graph,
                                ctx.pseudo(spec.pseudo_mode))
        elif spec.kind == "feastnet":
            out = feastnet_forward(params, features, ctx.graph)
        elif spec.kind == "spiralnet":
            out = spiralnet_forward(
                params, features,
                ctx.spirals(spec.kernel_size, spec.center_weight))
        elif spec.kind == "gin":
            out = gin_forward(params, features, ctx.graph)
        elif spec.kind == "splinecnn":
            out = splinecnn_forward(params, features, ctx.graph,
                                    ctx.unit_pseudo(spec.pseudo_mode))
        else:  # pragma: no cover
            raise ValueError(spec.kind)
        if spec.kind != "feastnet" and "bias" in params:
            out = add_rowvec(out, params["bias"].tensor)
        return out

    if spec.wrapper == "affine":
        return affine_skip_wrap(core, X, params["skip_weight"],
                                params["skip_bias"])
    if spec.wrapper == "residual":
        return residual_wrap(core, X, spec.out_channels)
    return core(X)
