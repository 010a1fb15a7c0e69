"""Network assembly: declarative model specs, parameter construction, graph
pooling (file-loaded matrices or Graclus coarsening), and the batched runtime
that feeds graphs and derived structures to the layers.

Batches are handled as disjoint unions: per-sample feature matrices are
stacked into one (B*n, C) block matrix, graphs and pooling matrices become
block-diagonal, and dense heads (Flatten/Linear) see one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor, add_rowvec, const, dropout, elu, matmul, \
    relu, reshape, row_softmax, segment_reduce, sparse_matmul
from .graphs import (Graph, GraphError, Mesh, SparseMatrix, block_diag,
                     spiral_sequences, union_graphs)
from .operators import (GraphContext, LayerSpec, bfs_sequences, init_params,
                        layer_forward)


class InconsistentChannels(ValueError):
    pass


# ----------------------------------------------------------------- model spec

@dataclass(frozen=True)
class Conv:
    spec: LayerSpec


@dataclass(frozen=True)
class Linear:
    out_channels: int


@dataclass(frozen=True)
class Flatten:
    vertices: int
    channels: int


@dataclass(frozen=True)
class Unflatten:
    vertices: int
    channels: int


@dataclass(frozen=True)
class Pool:
    level: int


@dataclass(frozen=True)
class Unpool:
    level: int


@dataclass(frozen=True)
class GlobalAvg:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


@dataclass(frozen=True)
class Activation:
    name: str  # elu | relu | softmax


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    items: tuple

    def __post_init__(self):
        cur = self.in_channels
        for item in self.items:
            if isinstance(item, Conv):
                if item.spec.in_channels != cur:
                    raise InconsistentChannels(
                        f"conv expects {item.spec.in_channels} channels, "
                        f"chain provides {cur}")
                cur = item.spec.out_channels
            elif isinstance(item, Linear):
                cur = item.out_channels
            elif isinstance(item, Flatten):
                if item.channels != cur:
                    raise InconsistentChannels(
                        f"flatten expects {item.channels} channels, chain "
                        f"provides {cur}")
                cur = item.vertices * item.channels
            elif isinstance(item, Unflatten):
                if item.vertices * item.channels != cur:
                    raise InconsistentChannels(
                        f"unflatten expects {item.vertices * item.channels} "
                        f"features, chain provides {cur}")
                cur = item.channels
            elif isinstance(item, Activation):
                if item.name not in ("elu", "relu", "softmax"):
                    raise ValueError(f"unknown activation {item.name!r}")
            elif isinstance(item, (Pool, Unpool, GlobalAvg, Dropout)):
                pass
            else:
                raise ValueError(f"unknown model item {item!r}")

    @property
    def out_channels(self) -> int:
        cur = self.in_channels
        for item in self.items:
            if isinstance(item, Conv):
                cur = item.spec.out_channels
            elif isinstance(item, Linear):
                cur = item.out_channels
            elif isinstance(item, Flatten):
                cur = item.vertices * item.channels
            elif isinstance(item, Unflatten):
                cur = item.channels
        return cur


# -------------------------------------------------------------------- pooling

def _sm_apply(sm: SparseMatrix, arr: np.ndarray) -> np.ndarray:
    out = np.zeros((sm.rows, arr.shape[1]), dtype=arr.dtype)
    np.add.at(out, sm.row_idx, sm.data[:, None] * arr[sm.col_idx])
    return out


@dataclass(frozen=True)
class PoolingLevel:
    """One down/up sampling stage: down is (coarse x fine) with rows summing
    to one, up is (fine x coarse); up @ down preserves constant vectors."""

    down: SparseMatrix
    up: SparseMatrix
    coarse: Graph

    def __post_init__(self):
        if self.down.rows != self.coarse.num_vertices:
            raise GraphError("down matrix does not match coarse graph")
        if self.up.cols != self.down.rows or self.up.rows != self.down.cols:
            raise GraphError("up matrix must transpose the down shape")
        ones = np.ones((self.down.cols, 1))
        row_sums = _sm_apply(self.down, ones)
        if np.max(np.abs(row_sums - 1.0)) > 1e-10:
            raise GraphError("down matrix rows must sum to 1")
        back = _sm_apply(self.up, row_sums)
        if np.max(np.abs(back - 1.0)) > 1e-10:
            raise GraphError("up @ down must preserve constants")


def graclus_coarsen(g: Graph, levels: int) -> list:
    """Greedy heavy-edge matching (unit weights): visit vertices ascending,
    pair each unmatched vertex with its lowest-index unmatched neighbor.
    Each level roughly halves the vertex count; down matrices average the
    matched pairs and coarse positions are those averages."""
    out = []
    cur = g
    for _ in range(levels):
        n = cur.num_vertices
        cluster = np.full(n, -1, dtype=np.int64)
        next_id = 0
        for i in range(n):
            if cluster[i] >= 0:
                continue
            cluster[i] = next_id
            for j in cur.out_neighbors(i):
                j = int(j)
                if j != i and cluster[j] < 0:
                    cluster[j] = next_id
                    break
            next_id += 1
        sizes = np.bincount(cluster, minlength=next_id)
        down_trip = [(int(cluster[i]), i, 1.0 / sizes[cluster[i]])
                     for i in range(n)]
        up_trip = [(i, int(cluster[i]), 1.0) for i in range(n)]
        coarse_pairs = {(int(cluster[i]), int(cluster[j]))
                        for i, j in cur.edges
                        if cluster[i] != cluster[j]}
        coarse_pos = None
        if cur.positions is not None:
            down_sm = SparseMatrix.from_triplets(next_id, n, down_trip)
            coarse_pos = _sm_apply(down_sm, cur.positions)
        coarse = Graph.undirected(next_id, coarse_pairs, positions=coarse_pos)
        level = PoolingLevel(
            down=SparseMatrix.from_triplets(next_id, n, down_trip),
            up=SparseMatrix.from_triplets(n, next_id, up_trip),
            coarse=coarse)
        out.append(level)
        cur = coarse
    return out


def pool_apply(X: Tensor, level: PoolingLevel, direction: str) -> Tensor:
    if direction == "down":
        return sparse_matmul(level.down, X)
    if direction == "up":
        return sparse_matmul(level.up, X)
    raise ValueError(f"unknown pooling direction {direction!r}")


# -------------------------------------------------------------------- runtime

class Runtime:
    """Per-batch execution context: one GraphContext per pooling depth plus
    the block-diagonal pooling matrices and per-level sample segments."""

    def __init__(self, contexts, downs=(), ups=(), segments=None,
                 training=False, dropout_seed=0, step=0):
        self.contexts = list(contexts)
        self.downs = list(downs)
        self.ups = list(ups)
        if segments is None:
            segments = [np.zeros(c.graph.num_vertices, dtype=np.int64)
                        for c in self.contexts]
        self.segments = list(segments)
        self.training = training
        self.dropout_seed = dropout_seed
        self.step = step

    @property
    def batch_size(self) -> int:
        return int(self.segments[0].max()) + 1 if self.segments[0].size else 1

    def context(self, level: int) -> GraphContext:
        return self.contexts[level]

    def down(self, level: int) -> SparseMatrix:
        return self.downs[level]

    def up(self, level: int) -> SparseMatrix:
        return self.ups[level]


def single_graph_runtime(graph: Graph, mesh: Mesh | None = None,
                         **kw) -> Runtime:
    return Runtime([GraphContext(graph, mesh)], **kw)


# ---------------------------------------------------------------------- model

class _ConvLayer:
    def __init__(self, item: Conv, seed: int, prefix: str):
        self.spec = item.spec
        self.params = init_params(item.spec, seed)
        for p in self.params.params():
            p.name = f"{prefix}.{p.name}"

    def param_list(self):
        return self.params.params()


class _LinearLayer:
    def __init__(self, in_channels: int, out_channels: int, seed: int,
                 prefix: str):
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (in_channels + out_channels))
        self.weight = Param(rng.uniform(-bound, bound,
                                        size=(in_channels, out_channels)),
                            name=f"{prefix}.weight", role="weight")
        self.bias = Param(np.zeros(out_channels), name=f"{prefix}.bias",
                          role="bias")

    def forward(self, x: Tensor) -> Tensor:
        return add_rowvec(matmul(x, self.weight.tensor), self.bias.tensor)

    def param_list(self):
        return [self.weight, self.bias]


class Model:
    """A built network: the spec plus per-item parameter bundles."""

    def __init__(self, spec: ModelSpec, layers: dict):
        self.spec = spec
        self._layers = layers  # item index -> _ConvLayer | _LinearLayer

    def params(self):
        out = []
        for idx in sorted(self._layers):
            out.extend(self._layers[idx].param_list())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state(self, state: dict) -> None:
        for p in self.params():
            if p.name not in state:
                raise KeyError(f"checkpoint is missing {p.name!r}")
            p.value = np.asarray(state[p.name], dtype=p.value.dtype)

    def forward(self, X, rt: Runtime, logits: bool = False) -> Tensor:
        x = const(np.asarray(X, dtype=ad.get_default_dtype()))
        level = 0
        items = self.spec.items
        last = len(items) - 1
        for idx, item in enumerate(items):
            if (logits and idx == last and isinstance(item, Activation)
                    and item.name == "softmax"):
                break
            if isinstance(item, Conv):
                layer = self._layers[idx]
                x = layer_forward(layer.spec, layer.params, x,
                                  rt.context(level))
            elif isinstance(item, Linear):
                x = self._layers[idx].forward(x)
            elif isinstance(item, Flatten):
                x = reshape(x, (-1, item.vertices * item.channels))
            elif isinstance(item, Unflatten):
                x = reshape(x, (-1, item.channels))
            elif isinstance(item, Pool):
                x = sparse_matmul(rt.down(item.level), x)
                level = item.level + 1
            elif isinstance(item, Unpool):
                x = sparse_matmul(rt.up(item.level), x)
                level = item.level
            elif isinstance(item, GlobalAvg):
                seg = rt.segments[level]
                x = segment_reduce(x, seg, int(seg.max()) + 1, "mean")
            elif isinstance(item, Dropout):
                x = dropout(x, item.rate, rt.training,
                            key=(rt.dropout_seed, idx, rt.step))
            elif isinstance(item, Activation):
                if item.name == "elu":
                    x = elu(x)
                elif item.name == "relu":
                    x = relu(x)
                else:
                    x = row_softmax(x)
        return x


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Instantiate parameters for every item; deterministic per seed."""
    layer_seeds = np.random.SeedSequence(seed).generate_state(
        max(len(spec.items), 1))
    layers = {}
    cur = spec.in_channels
    for idx, item in enumerate(spec.items):
        if isinstance(item, Conv):
            layers[idx] = _ConvLayer(item, int(layer_seeds[idx]),
                                     f"layer{idx:02d}")
            cur = item.spec.out_channels
        elif isinstance(item, Linear):
            layers[idx] = _LinearLayer(cur, item.out_channels,
                                       int(layer_seeds[idx]),
                                       f"layer{idx:02d}")
            cur = item.out_channels
        elif isinstance(item, Flatten):
            cur = item.vertices * item.channels
        elif isinstance(item, Unflatten):
            cur = item.channels
    return Model(spec, layers)


def count_parameters(model: Model) -> int:
    return sum(p.size for p in model.params())


# ------------------------------------------------------------- architectures

def _conv_spec(kind, cin, cout, kernel_size, wrapper, layer_kw):
    return LayerSpec(kind=kind, in_channels=cin, out_channels=cout,
                     kernel_size=kernel_size, wrapper=wrapper, **layer_kw)


def autoencoder_spec(kind: str, kernel_size: int, vertex_counts,
                     in_channels: int = 3, conv_channels=(32, 32, 32, 64),
                     latent: int = 16, wrapper: str = "none",
                     **layer_kw) -> ModelSpec:
    """Encoder {Conv -> Pool} per level into a dense latent code, mirrored
    decoder {Unpool -> Conv} with one extra output Conv and no final
    activation.  vertex_counts lists the vertex count at every pooling depth,
    finest first (len == len(conv_channels) + 1)."""
    levels = len(conv_channels)
    if len(vertex_counts) != levels + 1:
        raise InconsistentChannels("need one vertex count per pooling depth")
    items = []
    cur = in_channels
    for li, ch in enumerate(conv_channels):
        items.append(Conv(_conv_spec(kind, cur, ch, kernel_size, wrapper,
                                     layer_kw)))
        items.append(Activation("elu"))
        items.append(Pool(li))
        cur = ch
    coarse_n = vertex_counts[-1]
    items.append(Flatten(coarse_n, cur))
    items.append(Linear(latent))
    items.append(Linear(coarse_n * conv_channels[-1]))
    items.append(Unflatten(coarse_n, conv_channels[-1]))
    cur = conv_channels[-1]
    for k in range(levels):
        items.append(Unpool(levels - 1 - k))
        out_ch = conv_channels[-1] if k == 0 else conv_channels[levels - 1 - k]
        items.append(Conv(_conv_spec(kind, cur, out_ch, kernel_size, wrapper,
                                     layer_kw)))
        items.append(Activation("elu"))
        cur = out_ch
    items.append(Conv(_conv_spec(kind, cur, in_channels, kernel_size, wrapper,
                                 layer_kw)))
    return ModelSpec(in_channels=in_channels, items=tuple(items))


def correspondence_spec(kind: str, kernel_size: int, num_vertices: int,
                        in_channels: int = 3, widths=(16, 32, 64, 128, 256),
                        dropout_rate: float = 0.5, wrapper: str = "none",
                        **layer_kw) -> ModelSpec:
    """Single-scale vertex classifier: Lin, three Convs, Lin, Dropout, Lin
    over the vertex-label space, softmax output."""
    lin0, c1, c2, c3, lin1 = widths
    items = [
        Linear(lin0), Activation("elu"),
        Conv(_conv_spec(kind, lin0, c1, kernel_size, wrapper, layer_kw)),
        Activation("elu"),
        Conv(_conv_spec(kind, c1, c2, kernel_size, wrapper, layer_kw)),
        Activation("elu"),
        Conv(_conv_spec(kind, c2, c3, kernel_size, wrapper, layer_kw)),
        Activation("elu"),
        Linear(lin1),
        Dropout(dropout_rate),
        Linear(num_vertices),
        Activation("softmax"),
    ]
    return ModelSpec(in_channels=in_channels, items=tuple(items))


def classifier_spec(kind: str, kernel_size: int, num_classes: int = 10,
                    in_channels: int = 1, conv_channels=(32, 64, 64),
                    fc_width: int = 128, dropout_rate: float = 0.5,
                    wrapper: str = "none", pools_per_stage: int = 2,
                    **layer_kw) -> ModelSpec:
    """Graph classifier: Conv stages with coarsening between them, an
    average-pool readout over vertices, then a dense head."""
    items = []
    cur = in_channels
    level = 0
    for si, ch in enumerate(conv_channels):
        items.append(Conv(_conv_spec(kind, cur, ch, kernel_size, wrapper,
                                     layer_kw)))
        items.append(Activation("elu"))
        cur = ch
        if si < len(conv_channels) - 1:
            for _ in range(pools_per_stage):
                items.append(Pool(level))
                level += 1
    items.append(GlobalAvg())
    items.append(Linear(fc_width))
    items.append(Activation("elu"))
    items.append(Dropout(dropout_rate))
    items.append(Linear(num_classes))
    items.append(Activation("softmax"))
    return ModelSpec(in_channels=in_channels, items=tuple(items))


# ------------------------------------------------------- batched mesh domains

class MeshTopology:
    """A fixed mesh topology with its pooling hierarchy; builds batched
    runtimes by disjoint union (per-sample positions, shared structure)."""

    def __init__(self, mesh: Mesh, pooling=()):
        self.mesh = mesh
        self.pooling = list(pooling)
        self.graphs = [mesh.graph] + [p.coarse for p in self.pooling]
        self._spiral_cache = {}
        self._union_cache = {}

    def num_levels(self) -> int:
        return len(self.graphs)

    def template_spirals(self, level: int, span: int) -> np.ndarray:
        key = (level, span)
        if key not in self._spiral_cache:
            if level == 0:
                seq = spiral_sequences(self.mesh, span)
            else:
                seq = bfs_sequences(self.graphs[level], span)
            self._spiral_cache[key] = seq
        return self._spiral_cache[key]

    def _union_structure(self, batch: int):
        key = batch
        if key not in self._union_cache:
            edges = []
            downs = []
            ups = []
            for g in self.graphs:
                e = np.concatenate([g.edges + s * g.num_vertices
                                    for s in range(batch)]) \
                    if g.num_edges else np.zeros((0, 2), dtype=np.int64)
                edges.append(e)
            for p in self.pooling:
                downs.append(block_diag([p.down] * batch))
                ups.append(block_diag([p.up] * batch))
            self._union_cache[key] = (edges, downs, ups)
        return self._union_cache[key]

    def level_positions(self, positions: np.ndarray) -> list:
        """Project one sample's vertex positions through the down matrices."""
        out = [np.asarray(positions, dtype=np.float64)]
        for p in self.pooling:
            out.append(_sm_apply(p.down, out[-1]))
        return out

    def _tiled_spiral_fn(self, level: int, batch: int):
        nv = self.graphs[level].num_vertices

        def fn(span):
            tmpl = self.template_spirals(level, span)
            return np.concatenate([tmpl + s * nv for s in range(batch)])

        return fn

    def runtime(self, positions_list, training: bool = False,
                dropout_seed: int = 0, step: int = 0) -> Runtime:
        batch = len(positions_list)
        edges, downs, ups = self._union_structure(batch)
        per_sample_levels = [self.level_positions(p) for p in positions_list]
        contexts = []
        segments = []
        for li, g in enumerate(self.graphs):
            pos = np.concatenate([lv[li] for lv in per_sample_levels])
            union = Graph(batch * g.num_vertices, edges[li], positions=pos)
            contexts.append(GraphContext(
                union, spiral_fn=self._tiled_spiral_fn(li, batch)))
            segments.append(np.repeat(np.arange(batch), g.num_vertices))
        return Runtime(contexts, downs, ups, segments, training=training,
                       dropout_seed=dropout_seed, step=step)


class GraphDomain:
    """Per-sample graphs with their own coarsening (varying connectivity)."""

    def __init__(self, graphs, levels: int = 0):
        self.graphs = list(graphs)
        self.levels = levels
        self.poolings = [graclus_coarsen(g, levels) for g in self.graphs]

    def runtime(self, indices, training: bool = False, dropout_seed: int = 0,
                step: int = 0) -> Runtime:
        chosen = list(indices)
        contexts = []
        downs = [None] * self.levels
        ups = [None] * self.levels
        segments = []
        level_graphs = []
        for li in range(self.levels + 1):
            graphs_li = []
            for s in chosen:
                g = self.graphs[s] if li == 0 \
                    else self.poolings[s][li - 1].coarse
                graphs_li.append(g)
            level_graphs.append(graphs_li)
        for li in range(self.levels + 1):
            union, _ = union_graphs(level_graphs[li])
            contexts.append(GraphContext(union))
            counts = [g.num_vertices for g in level_graphs[li]]
            segments.append(np.repeat(np.arange(len(chosen)), counts))
        for li in range(self.levels):
            downs[li] = block_diag([self.poolings[s][li].down for s in chosen])
            ups[li] = block_diag([self.poolings[s][li].up for s in chosen])
        return Runtime(contexts, downs, ups, segments, training=training,
                       dropout_seed=dropout_seed, step=step)
