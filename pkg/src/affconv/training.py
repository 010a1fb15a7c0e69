"""Optimization, losses, task metrics, and the deterministic training loop.

Single-threaded runs are bit-reproducible given the seed and config; with
--threads > 1 a batch is split into chunks whose gradients are reduced in
chunk order, which is reproducible for a fixed thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import (Param, Tape, Tensor, backward, const, ShapeMismatch)
from .graphs import DisconnectedMesh, Mesh, geodesic_distances
from .models import GraphDomain, MeshTopology, Model


class LabelOutOfRange(ValueError):
    pass


# ------------------------------------------------------------------ optimizer

@dataclass(frozen=True)
class LrSchedule:
    """exponential: lr * rate^epoch; step: lr * factor^(epoch // every)."""

    kind: str = "constant"
    rate: float = 1.0
    factor: float = 0.5
    every: int = 30

    def at(self, base_lr: float, epoch: int) -> float:
        if self.kind == "constant":
            return base_lr
        if self.kind == "exponential":
            return base_lr * self.rate ** epoch
        if self.kind == "step":
            return base_lr * self.factor ** (epoch // max(self.every, 1))
        raise ValueError(f"unknown schedule {self.kind!r}")


class Adam:
    """Adam with bias correction; l2_weight adds coupled weight decay
    (lambda * w joins the gradient before the moment updates)."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 l2_weight: float = 0.0, schedule: LrSchedule | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2_weight = l2_weight
        self.schedule = schedule or LrSchedule()
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(state: Adam, epoch: int = 0) -> None:
    """One update from the gradients currently stored on the Params."""
    state.step_count += 1
    t = state.step_count
    lr = state.schedule.at(state.lr, epoch)
    b1, b2 = state.beta1, state.beta2
    for p in state.params:
        g = p.grad
        if g.shape != p.value.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {p.name!r}")
        if state.l2_weight:
            g = g + state.l2_weight * p.value
        m = state._m[id(p)]
        v = state._v[id(p)]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --------------------------------------------------------------------- losses

def l1_vertex_loss(pred: Tensor, target) -> Tensor:
    target = const(np.asarray(target, dtype=pred.values.dtype))
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1 loss: {pred.shape} vs {target.shape}")
    return ad.mean_all(ad.abs_(ad.sub(pred, target)))


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Softmax + NLL, mean over rows, stabilized by a constant row-max shift."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch("one label per logit row required")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    shift = const(np.broadcast_to(logits.values.max(axis=1, keepdims=True),
                                  (n, c)).copy())
    z = ad.sub(logits, shift)
    lse = ad.log(ad.row_sum(ad.exp(z)))
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), labels] = 1.0
    picked = ad.row_sum(ad.hadamard(z, const(one_hot)))
    return ad.mean_all(ad.sub(lse, picked))


# -------------------------------------------------------------------- metrics

def euclidean_error_stats(pred, truth):
    """(mean, std, median) of per-vertex L2 errors; lower median, population
    std."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{pred.shape} vs {truth.shape}")
    errors = np.linalg.norm(pred - truth, axis=-1).ravel()
    order = np.sort(errors)
    median = float(order[(len(order) - 1) // 2])
    return float(errors.mean()), float(errors.std()), median


def geodesic_matrix(mesh: Mesh) -> np.ndarray:
    d = np.stack([geodesic_distances(mesh, s)
                  for s in range(mesh.num_vertices)])
    if np.any(np.isinf(d)):
        raise DisconnectedMesh("geodesic protocol needs a connected mesh")
    return d


def correspondence_accuracy_curve(pred_vertices, mesh: Mesh, radii,
                                  true_vertices=None,
                                  geodesics: np.ndarray | None = None):
    """Fraction of predictions within each geodesic radius of the true vertex;
    radii are fractions of the mesh's geodesic diameter."""
    pred = np.asarray(pred_vertices, dtype=np.int64).ravel()
    if true_vertices is None:
        true = np.tile(np.arange(mesh.num_vertices),
                       pred.size // mesh.num_vertices)
    else:
        true = np.asarray(true_vertices, dtype=np.int64).ravel()
    if geodesics is None:
        geodesics = geodesic_matrix(mesh)
    diameter = float(geodesics.max())
    err = geodesics[true, pred]
    curve = []
    for r in radii:
        frac = float(np.mean(err <= r * diameter + 1e-12))
        curve.append((float(r), 100.0 * frac))
    return curve


# ------------------------------------------------------------------ the tasks

@dataclass
class ReconstructionTask:
    topology: MeshTopology
    samples: list
    train_idx: list
    test_idx: list


@dataclass
class CorrespondenceTask:
    topology: MeshTopology
    samples: list
    train_idx: list
    test_idx: list


@dataclass
class ClassificationTask:
    domain: GraphDomain
    features: list
    labels: np.ndarray
    train_idx: list
    test_idx: list


@dataclass
class TrainConfig:
    task: str
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(
        kind="exponential", rate=0.99))
    l2_weight: float = 0.0
    seed: int = 0
    threads: int = 1
    normalize: bool = True
    eval_radii: tuple = (0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass
class TrainResult:
    epoch_losses: list
    metrics: dict
    state: dict
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None


def _norm_stats(samples, train_idx):
    stack = np.stack([samples[i] for i in train_idx])
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


def _resolve_norm(task, cfg, norm):
    if norm[0] is not None:
        return norm
    if cfg.normalize:
        return _norm_stats(task.samples, task.train_idx)
    shape = np.asarray(task.samples[0]).shape
    return np.zeros(shape), np.ones(shape)


def _chunks(seq, size):
    return [seq[k:k + size] for k in range(0, len(seq), size)]


def _batch_pass(model, task, cfg, batch, norm, training, step):
    """Forward + backward on one batch; returns (mean loss, grads dict)."""
    if cfg.task in ("reconstruction", "correspondence"):
        positions = [task.samples[i] for i in batch]
        rt = task.topology.runtime(positions, training=training,
                                   dropout_seed=cfg.seed, step=step)
        if cfg.task == "reconstruction":
            mean, std = norm
            x = np.concatenate([(p - mean) / std for p in positions])
            tape = Tape()
            with tape:
                pred = model.forward(x, rt)
                loss = l1_vertex_loss(pred, x)
        else:
            x = np.concatenate(positions)
            n = task.topology.mesh.num_vertices
            labels = np.tile(np.arange(n), len(batch))
            tape = Tape()
            with tape:
                logits = model.forward(x, rt, logits=True)
                loss = cross_entropy_loss(logits, labels)
    elif cfg.task == "classification":
        rt = task.domain.runtime(batch, training=training,
                                 dropout_seed=cfg.seed, step=step)
        x = np.concatenate([task.features[i] for i in batch])
        labels = task.labels[list(batch)]
        tape = Tape()
        with tape:
            logits = model.forward(x, rt, logits=True)
            loss = cross_entropy_loss(logits, labels)
    else:
        raise ValueError(f"unknown task {cfg.task!r}")
    grads = backward(tape, loss, accumulate=False)
    return loss.item(), grads


def _apply_grads(model, grads_list):
    for grads in grads_list:
        for p, g in grads.items():
            p.grad = p.grad + g


def train(model: Model, task, cfg: TrainConfig) -> TrainResult:
    """Deterministic training loop; logs one loss per epoch and computes the
    task metrics on the test split at the end."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), lr=cfg.lr, l2_weight=cfg.l2_weight,
               schedule=cfg.schedule)
    norm = (None, None)
    if cfg.task == "reconstruction":
        norm = _resolve_norm(task, cfg, norm)
    epoch_losses = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.array(task.train_idx)
        rng.shuffle(order)
        total = 0.0
        count = 0
        for batch in _chunks(order.tolist(), cfg.batch_size):
            model.zero_grad()
            if cfg.threads > 1 and len(batch) > 1:
                parts = _chunks(batch, max(1, -(-len(batch) // cfg.threads)))
                with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                    results = list(pool.map(
                        lambda part: _batch_pass(model, task, cfg, part, norm,
                                                 True, step), parts))
                weight = sum(len(p) for p in parts)
                loss_val = sum(lv * len(p) for (lv, _), p
                               in zip(results, parts)) / weight
                scale = [len(p) / weight for p in parts]
                scaled = []
                for (_, grads), s in zip(results, scale):
                    scaled.append({p: g * s for p, g in grads.items()})
                _apply_grads(model, scaled)
            else:
                loss_val, grads = _batch_pass(model, task, cfg, batch, norm,
                                              True, step)
                _apply_grads(model, [grads])
            adam_step(opt, epoch=epoch)
            total += loss_val * len(batch)
            count += len(batch)
            step += 1
        epoch_losses.append(total / max(count, 1))
    metrics = evaluate_model(model, task, cfg, norm)
    return TrainResult(epoch_losses=epoch_losses, metrics=metrics,
                       state=model.state_dict(),
                       norm_mean=norm[0], norm_std=norm[1])


def evaluate_model(model: Model, task, cfg: TrainConfig, norm=(None, None),
                   split: str = "test") -> dict:
    idx = task.test_idx if split == "test" else task.train_idx
    if not idx:
        idx = task.train_idx
    if cfg.task == "reconstruction":
        mean, std = _resolve_norm(task, cfg, norm)
        preds = []
        truths = []
        for batch in _chunks(list(idx), cfg.batch_size):
            positions = [task.samples[i] for i in batch]
            rt = task.topology.runtime(positions)
            x = np.concatenate([(p - mean) / std for p in positions])
            out = model.forward(x, rt).values
            preds.append(out * np.tile(std, (len(batch), 1))
                         + np.tile(mean, (len(batch), 1)))
            truths.append(np.concatenate(positions))
        m, s, med = euclidean_error_stats(np.concatenate(preds),
                                          np.concatenate(truths))
        return {"task": "reconstruction", "mean_error": m, "std_error": s,
                "median_error": med}
    if cfg.task == "correspondence":
        mesh = task.topology.mesh
        geo = geodesic_matrix(mesh)
        hits = []
        for i in idx:
            rt = task.topology.runtime([task.samples[i]])
            logits = model.forward(task.samples[i], rt, logits=True).values
            hits.append(np.argmax(logits, axis=1))
        pred = np.concatenate(hits)
        curve = correspondence_accuracy_curve(
            pred, mesh, cfg.eval_radii,
            true_vertices=np.tile(np.arange(mesh.num_vertices), len(idx)),
            geodesics=geo)
        values = [v for _, v in curve]
        if any(b < a - 1e-9 for a, b in zip(values, values[1:])):
            raise AssertionError("accuracy curve must be nondecreasing")
        return {"task": "correspondence", "accuracy_radius0": curve[0][1],
                "curve": curve}
    if cfg.task == "classification":
        correct = 0
        for batch in _chunks(list(idx), cfg.batch_size):
            rt = task.domain.runtime(batch)
            x = np.concatenate([task.features[i] for i in batch])
            logits = model.forward(x, rt, logits=True).values
            pred = np.argmax(logits, axis=1)
            correct += int(np.sum(pred == task.labels[list(batch)]))
        acc = 100.0 * correct / max(len(idx), 1)
        return {"task": "classification", "accuracy": acc}
    raise ValueError(f"unknown task {cfg.task!r}")
