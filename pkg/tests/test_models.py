import numpy as np
import pytest

from affconv import autodiff as ad
from affconv.autodiff import const, grad_check
from affconv.graphs import Graph, SparseMatrix
from affconv.models import (Activation, Conv, Dropout, Flatten, GlobalAvg,
                            GraphDomain, InconsistentChannels, Linear,
                            MeshTopology, Model, ModelSpec, Pool, PoolingLevel,
                            Unflatten, Unpool, autoencoder_spec, build_model,
                            classifier_spec, correspondence_spec,
                            count_parameters, graclus_coarsen, pool_apply,
                            single_graph_runtime)
from affconv.operators import LayerSpec
from helpers import path_graph, random_graph, triangle_graph, disk_mesh

COMA_VERTEX_COUNTS = (5023, 1256, 314, 79, 20)


def test_graclus_path4():
    g = path_graph(4)
    levels = graclus_coarsen(g, 1)
    assert len(levels) == 1
    up = levels[0].up.to_dense()
    assert up.shape == (4, 2)
    assert up[:, 0].tolist() == [1.0, 1.0, 0.0, 0.0]
    assert up[:, 1].tolist() == [0.0, 0.0, 1.0, 1.0]


def test_graclus_single_vertex():
    levels = graclus_coarsen(Graph(1, []), 1)
    assert levels[0].coarse.num_vertices == 1
    assert levels[0].down.to_dense().tolist() == [[1.0]]


def test_graclus_k3():
    levels = graclus_coarsen(triangle_graph(), 1)
    assert levels[0].coarse.num_vertices == 2
    down = levels[0].down.to_dense()
    assert np.allclose(down[0], [0.5, 0.5, 0.0])
    assert np.allclose(down[1], [0.0, 0.0, 1.0])


def test_graclus_deterministic_and_halving():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 24)
    a = graclus_coarsen(g, 2)
    b = graclus_coarsen(g, 2)
    for la, lb in zip(a, b):
        assert la.down.entries() == lb.down.entries()
        assert np.array_equal(la.coarse.edges, lb.coarse.edges)
    assert a[0].coarse.num_vertices <= (g.num_vertices + 1) // 2 + 2
    assert a[1].coarse.num_vertices < a[0].coarse.num_vertices


def test_pooling_level_invariants():
    bad_down = SparseMatrix.from_triplets(1, 2, [(0, 0, 0.7), (0, 1, 0.7)])
    up = SparseMatrix.from_triplets(2, 1, [(0, 0, 1.0), (1, 0, 1.0)])
    with pytest.raises(Exception):
        PoolingLevel(down=bad_down, up=up, coarse=Graph(1, []))


def test_pool_apply():
    g = path_graph(4)
    level = graclus_coarsen(g, 1)[0]
    x = const(np.array([[1.0], [3.0], [5.0], [7.0]]))
    down = pool_apply(x, level, "down").values
    assert np.allclose(down, [[2.0], [6.0]])
    const_rows = pool_apply(const(np.full((4, 2), 3.5)), level, "down").values
    assert np.allclose(const_rows, 3.5)
    ident = PoolingLevel(
        down=SparseMatrix.from_triplets(4, 4, [(i, i, 1.0) for i in range(4)]),
        up=SparseMatrix.from_triplets(4, 4, [(i, i, 1.0) for i in range(4)]),
        coarse=g)
    assert np.array_equal(pool_apply(x, ident, "down").values, x.values)


def _coma_autoencoder(kind, m, wrapper="none", **kw):
    return autoencoder_spec(kind, m, COMA_VERTEX_COUNTS, wrapper=wrapper, **kw)


def test_count_chebnet_published():
    # 4 weight matrices per conv: order 3 with the center term
    spec = _coma_autoencoder("chebnet", 3)
    assert count_parameters(build_model(spec, 0)) == 92499
    ablated = _coma_autoencoder("chebnet", 3, center_weight=False)
    assert count_parameters(build_model(ablated, 0)) == 92499
    spec9 = _coma_autoencoder("chebnet", 8)  # 9 matrices
    assert count_parameters(build_model(spec9, 0)) == 154899
    spec14 = _coma_autoencoder("chebnet", 13)  # 14 matrices
    assert count_parameters(build_model(spec14, 0)) == 217299


def test_count_spiralnet_matches_chebnet():
    spec = _coma_autoencoder("spiralnet", 9)
    assert count_parameters(build_model(spec, 0)) == 154899


def test_count_monet_published():
    spec = _coma_autoencoder("monet", 9)
    assert count_parameters(build_model(spec, 0)) == 155385  # 155.4k
    plus = _coma_autoencoder("monet", 10)
    aff = _coma_autoencoder("monet", 9, wrapper="affine")
    assert count_parameters(build_model(plus, 0)) == 167919  # 167.9k
    assert count_parameters(build_model(aff, 0)) == 167865   # 167.9k


def test_count_feastnet_published():
    spec = _coma_autoencoder("feastnet", 9, translation_invariant=True)
    assert count_parameters(build_model(spec, 0)) == 157887  # 157.9k
    aff = _coma_autoencoder("feastnet", 9, wrapper="affine",
                            translation_invariant=True)
    assert count_parameters(build_model(aff, 0)) == 170367   # 170.4k
    res = _coma_autoencoder("feastnet", 9, wrapper="residual",
                            translation_invariant=True)
    assert count_parameters(build_model(res, 0)) == 157887


def test_count_invariant_to_seed():
    spec = _coma_autoencoder("monet", 4)
    assert count_parameters(build_model(spec, 0)) == \
        count_parameters(build_model(spec, 99))


def test_autoencoder_latent_size():
    spec = _coma_autoencoder("chebnet", 3)
    linears = [it for it in spec.items if isinstance(it, Linear)]
    assert linears[0].out_channels == 16


def test_correspondence_spec_shape():
    spec = correspondence_spec("gcn", 1, num_vertices=6890)
    assert isinstance(spec.items[-1], Activation)
    assert spec.items[-1].name == "softmax"
    assert isinstance(spec.items[-2], Linear)
    assert spec.items[-2].out_channels == 6890
    # GCN correspondence net parameter count (conv biases included)
    model = build_model(spec, 0)
    assert count_parameters(model) == 64 + 544 + 2112 + 8320 + 33024 + 1770730


def test_classifier_gcn_published_count():
    spec = classifier_spec("gcn", 1)
    assert count_parameters(build_model(spec, 0)) == 15946  # 15.9k
    aff = classifier_spec("gcn", 1, wrapper="affine")
    assert count_parameters(build_model(aff, 0)) == 22122   # 22.1k


def test_single_linear_count():
    spec = ModelSpec(in_channels=2, items=(Linear(3),))
    assert count_parameters(build_model(spec, 0)) == 9


def test_inconsistent_channels_rejected():
    conv = Conv(LayerSpec(kind="gcn", in_channels=4, out_channels=8))
    with pytest.raises(InconsistentChannels):
        ModelSpec(in_channels=3, items=(conv,))
    with pytest.raises(InconsistentChannels):
        ModelSpec(in_channels=3, items=(Flatten(5, 4),))


def test_forward_roundtrip_autoencoder():
    mesh = disk_mesh(9)
    pooling = graclus_coarsen(mesh.graph, 2)
    topo = MeshTopology(mesh, pooling)
    n2 = pooling[1].coarse.num_vertices
    spec = autoencoder_spec(
        "monet", 2,
        vertex_counts=(mesh.num_vertices, pooling[0].coarse.num_vertices, n2),
        conv_channels=(4, 4), latent=3)
    model = build_model(spec, 1)
    rt = topo.runtime([mesh.positions, mesh.positions * 1.1])
    out = model.forward(np.concatenate([mesh.positions,
                                        mesh.positions * 1.1]), rt)
    assert out.shape == (2 * mesh.num_vertices, 3)


def test_forward_batched_equals_sequential():
    mesh = disk_mesh(7)
    pooling = graclus_coarsen(mesh.graph, 1)
    topo = MeshTopology(mesh, pooling)
    spec = autoencoder_spec(
        "spiralnet", 3,
        vertex_counts=(mesh.num_vertices, pooling[0].coarse.num_vertices),
        conv_channels=(4,), latent=2)
    model = build_model(spec, 2)
    rng = np.random.default_rng(3)
    a = mesh.positions + rng.normal(0, 0.05, mesh.positions.shape)
    b = mesh.positions + rng.normal(0, 0.05, mesh.positions.shape)
    batched = model.forward(np.concatenate([a, b]),
                            topo.runtime([a, b])).values
    single_a = model.forward(a, topo.runtime([a])).values
    single_b = model.forward(b, topo.runtime([b])).values
    assert np.allclose(batched, np.concatenate([single_a, single_b]),
                       atol=1e-12)


def test_end_to_end_gradcheck_with_pooling():
    mesh = disk_mesh(7)
    pooling = graclus_coarsen(mesh.graph, 1)
    topo = MeshTopology(mesh, pooling)
    spec = autoencoder_spec(
        "gcn", 1,
        vertex_counts=(mesh.num_vertices, pooling[0].coarse.num_vertices),
        conv_channels=(3,), latent=2)
    model = build_model(spec, 4)
    rng = np.random.default_rng(5)
    x = mesh.positions + rng.normal(0, 0.1, mesh.positions.shape)
    rt = topo.runtime([x])
    target = const(rng.uniform(-1, 1, size=(mesh.num_vertices, 3)))

    def f():
        pred = model.forward(x, rt)
        return ad.mean_all(ad.abs_(ad.sub(pred, target)))

    report = grad_check(f, model.params(), eps=1e-5, tol=1e-5)
    assert report.passed, report.failures()


def test_classifier_forward_and_dropout_determinism():
    rng = np.random.default_rng(6)
    graphs = [random_graph(rng, int(rng.integers(6, 12)), positions=True,
                           dim=2) for _ in range(3)]
    domain = GraphDomain(graphs, levels=2)
    spec = classifier_spec("gin", 1, num_classes=4, conv_channels=(4, 4),
                           fc_width=8, pools_per_stage=2)
    model = build_model(spec, 7)
    feats = np.concatenate([rng.uniform(0, 1, size=(g.num_vertices, 1))
                            for g in graphs])
    rt = domain.runtime([0, 1, 2], training=True, dropout_seed=5, step=3)
    out1 = model.forward(feats, rt, logits=True).values
    rt2 = domain.runtime([0, 1, 2], training=True, dropout_seed=5, step=3)
    out2 = model.forward(feats, rt2, logits=True).values
    assert out1.shape == (3, 4)
    assert np.array_equal(out1, out2)
    rt3 = domain.runtime([0, 1, 2], training=True, dropout_seed=5, step=4)
    assert not np.array_equal(out1, model.forward(feats, rt3,
                                                  logits=True).values)
    # softmax rows sum to one in eval mode
    rt4 = domain.runtime([0, 1, 2])
    probs = model.forward(feats, rt4).values
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_state_dict_roundtrip(tmp_path):
    from affconv.checkpoint import load_checkpoint, save_checkpoint
    spec = correspondence_spec("gcn", 1, num_vertices=10,
                               widths=(4, 4, 4, 4, 4))
    model = build_model(spec, 8)
    state = model.state_dict()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, state)
    loaded = load_checkpoint(path)
    model2 = build_model(spec, 9)
    model2.load_state(loaded)
    for p, q in zip(model.params(), model2.params()):
        assert np.array_equal(p.value, q.value)
