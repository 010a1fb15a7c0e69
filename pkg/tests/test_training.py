import numpy as np
import pytest

from affconv import autodiff as ad
from affconv.autodiff import Param, Tape, backward, const
from affconv.datasets import IcosphereSpec, gen_icosphere_dataset
from affconv.graphs import Mesh
from affconv.models import (MeshTopology, autoencoder_spec, build_model,
                            graclus_coarsen)
from affconv.operators import OPERATOR_KINDS
from affconv.training import (Adam, LabelOutOfRange, LrSchedule,
                              ReconstructionTask, TrainConfig, adam_step,
                              correspondence_accuracy_curve,
                              cross_entropy_loss, euclidean_error_stats,
                              l1_vertex_loss, train)
from helpers import disk_mesh


def test_adam_first_step_magnitude():
    p = Param(np.array([0.0]), name="p")
    p.grad = np.array([1.0])
    opt = Adam([p], lr=1e-3, schedule=LrSchedule())
    adam_step(opt)
    assert np.isclose(p.value[0], -1e-3, rtol=1e-6)


def test_adam_zero_grad_no_change():
    p = Param(np.array([1.0, -2.0]), name="p")
    opt = Adam([p], lr=1e-3)
    adam_step(opt)
    assert np.array_equal(p.value, [1.0, -2.0])


def test_lr_schedules():
    exp = LrSchedule(kind="exponential", rate=0.99)
    assert np.isclose(exp.at(1e-3, 10), 1e-3 * 0.99 ** 10)
    step = LrSchedule(kind="step", factor=0.5, every=30)
    assert step.at(1e-3, 29) == 1e-3
    assert step.at(1e-3, 30) == 0.5e-3
    assert step.at(1e-3, 90) == 1e-3 * 0.5 ** 3


def test_l1_vertex_loss():
    pred = const(np.zeros((5, 3)))
    assert l1_vertex_loss(pred, np.zeros((5, 3))).item() == 0.0
    assert l1_vertex_loss(pred, np.full((5, 3), 2.0)).item() == 2.0
    rng = np.random.default_rng(0)
    a = rng.uniform(-1, 1, (5, 3))
    b = rng.uniform(-1, 1, (5, 3))
    assert np.isclose(l1_vertex_loss(const(a), b).item(),
                      np.mean(np.abs(a - b)))


def test_cross_entropy_examples():
    c = 7
    logits = const(np.zeros((3, c)))
    labels = np.array([0, 3, 6])
    assert np.isclose(cross_entropy_loss(logits, labels).item(), np.log(c))
    strong = np.zeros((1, 3))
    strong[0, 1] = 50.0
    assert cross_entropy_loss(const(strong), [1]).item() < 1e-8
    rng = np.random.default_rng(1)
    z = rng.uniform(-2, 2, size=(3, 4))
    labels = np.array([2, 0, 3])
    direct = -np.mean([np.log(np.exp(z[i, labels[i]])
                              / np.exp(z[i]).sum()) for i in range(3)])
    assert np.isclose(cross_entropy_loss(const(z), labels).item(), direct)
    with pytest.raises(LabelOutOfRange):
        cross_entropy_loss(const(z), [0, 1, 4])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    p = Param(rng.uniform(-1, 1, size=(4, 3)), name="logits")
    labels = np.array([0, 2, 1, 1])

    def f():
        return cross_entropy_loss(p.tensor, labels)

    assert ad.grad_check(f, [p], eps=1e-5).max_rel_error < 1e-6


def test_euclidean_error_stats():
    same = np.zeros((4, 3))
    assert euclidean_error_stats(same, same) == (0.0, 0.0, 0.0)
    pred = np.array([[3.0, 4.0, 0.0]])
    truth = np.zeros((1, 3))
    m, s, med = euclidean_error_stats(pred, truth)
    assert (m, med, s) == (5.0, 5.0, 0.0)
    pred = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    m, s, med = euclidean_error_stats(pred, np.zeros((2, 3)))
    assert m == 1.0 and med == 0.0  # lower median of {0, 2}


def test_accuracy_curve_step_and_monotone():
    mesh = disk_mesh(8)
    n = mesh.num_vertices
    perfect = np.arange(n)
    curve = correspondence_accuracy_curve(perfect, mesh, [0.0, 0.1])
    assert curve[0][1] == 100.0
    # predict a neighbor for every vertex
    neighbor = np.array([int(mesh.graph.out_neighbors(i)[0])
                         for i in range(n)])
    radii = [0.0, 0.25, 0.5, 0.75, 1.0]
    curve = correspondence_accuracy_curve(neighbor, mesh, radii)
    assert curve[0][1] == 0.0
    assert curve[-1][1] == 100.0
    values = [v for _, v in curve]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_accuracy_curve_matches_bruteforce():
    mesh = disk_mesh(9)
    n = mesh.num_vertices
    rng = np.random.default_rng(3)
    pred = rng.integers(0, n, size=n)
    from affconv.graphs import geodesic_distances
    dists = np.stack([geodesic_distances(mesh, s) for s in range(n)])
    diameter = dists.max()
    radii = [0.0, 0.1, 0.3, 0.6]
    curve = correspondence_accuracy_curve(pred, mesh, radii)
    for r, v in curve:
        brute = 100.0 * np.mean([dists[i, pred[i]] <= r * diameter + 1e-12
                                 for i in range(n)])
        assert np.isclose(v, brute)


def _tiny_reconstruction_task(samples=4, subdivisions=0, pool=False):
    base, all_samples = gen_icosphere_dataset(
        IcosphereSpec(subdivisions=subdivisions, samples=samples,
                      noise_amp=0.2, seed=5))
    pooling = graclus_coarsen(base.graph, 1) if pool else []
    topo = MeshTopology(base, pooling)
    idx = list(range(samples))
    return topo, all_samples, idx


def _tiny_autoencoder_spec(kind, topo, pool=False, wrapper="none"):
    if pool:
        counts = (topo.mesh.num_vertices, topo.pooling[0].coarse.num_vertices)
        return autoencoder_spec(kind, 2, vertex_counts=counts,
                                conv_channels=(6,), latent=4, wrapper=wrapper)
    # a pool-free stack: conv + flatten latent round trip
    from affconv.models import (Activation, Conv, Flatten, Linear, ModelSpec,
                                Unflatten)
    from affconv.operators import LayerSpec
    n = topo.mesh.num_vertices
    items = (
        Conv(LayerSpec(kind=kind, in_channels=3, out_channels=6,
                       kernel_size=2, wrapper=wrapper)),
        Activation("elu"),
        Flatten(n, 6), Linear(4), Linear(n * 6), Unflatten(n, 6),
        Conv(LayerSpec(kind=kind, in_channels=6, out_channels=3,
                       kernel_size=2, wrapper=wrapper)),
    )
    return ModelSpec(in_channels=3, items=items)


def test_train_zero_epochs_keeps_params():
    topo, samples, idx = _tiny_reconstruction_task()
    task = ReconstructionTask(topology=topo, samples=samples,
                              train_idx=idx[:3], test_idx=idx[3:])
    spec = _tiny_autoencoder_spec("gcn", topo)
    model = build_model(spec, 0)
    before = model.state_dict()
    cfg = TrainConfig(task="reconstruction", epochs=0, batch_size=2, seed=1)
    result = train(model, task, cfg)
    for name, value in before.items():
        assert np.array_equal(result.state[name], value)
    assert "mean_error" in result.metrics


def test_train_reproducible_and_loss_logged():
    topo, samples, idx = _tiny_reconstruction_task(pool=True)
    task = ReconstructionTask(topology=topo, samples=samples,
                              train_idx=idx[:3], test_idx=idx[3:])
    spec = _tiny_autoencoder_spec("monet", topo, pool=True)
    cfg = TrainConfig(task="reconstruction", epochs=3, batch_size=2, seed=2)
    r1 = train(build_model(spec, 3), task, cfg)
    r2 = train(build_model(spec, 3), task, cfg)
    assert len(r1.epoch_losses) == 3
    for name in r1.state:
        assert np.array_equal(r1.state[name], r2.state[name])
    assert r1.metrics == r2.metrics


@pytest.mark.parametrize("kind", OPERATOR_KINDS)
def test_overfit_first_steps_decrease(kind):
    # 1-sample overfit: loss strictly decreases over the first 10 Adam steps
    # for every operator wrapped with the affine shortcut
    topo, samples, _ = _tiny_reconstruction_task(samples=1)
    task = ReconstructionTask(topology=topo, samples=samples, train_idx=[0],
                              test_idx=[0])
    spec = _tiny_autoencoder_spec(kind, topo, wrapper="affine")
    model = build_model(spec, 4)
    # raw coordinates: standardizing a single sample would zero it out
    cfg = TrainConfig(task="reconstruction", epochs=10, batch_size=1, seed=3,
                      schedule=LrSchedule(), normalize=False)
    result = train(model, task, cfg)
    losses = result.epoch_losses
    assert all(b < a for a, b in zip(losses, losses[1:])), (kind, losses)


def test_threaded_batch_matches_loss_scale():
    topo, samples, idx = _tiny_reconstruction_task(samples=6)
    task = ReconstructionTask(topology=topo, samples=samples,
                              train_idx=idx, test_idx=idx[:1])
    spec = _tiny_autoencoder_spec("gcn", topo)
    cfg1 = TrainConfig(task="reconstruction", epochs=2, batch_size=3, seed=7)
    cfg2 = TrainConfig(task="reconstruction", epochs=2, batch_size=3, seed=7,
                       threads=2)
    r1 = train(build_model(spec, 5), task, cfg1)
    r2 = train(build_model(spec, 5), task, cfg2)
    # same data order; gradients reduced in fixed chunk order, so the loss
    # trajectories agree to numerical reordering noise
    assert np.allclose(r1.epoch_losses, r2.epoch_losses, rtol=1e-9)
