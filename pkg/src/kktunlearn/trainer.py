"""Full-batch gradient descent training and the model-modification operators.

Binary nets minimize ``sum_i log(1 + exp(-y_i M(x_i)))``; multi-class nets
minimize summed softmax cross-entropy. Unlearning is either retraining from
scratch on the retained samples or fine-tuning on a copy of the data in which
the forgotten samples carry random wrong labels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax, softmax

from . import diffnet
from .data_io import LabeledDataset
from .diffnet import NetworkSpec
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 0.01
    max_steps: int = 100_000
    init_scale: float = 0.01
    seed: int = 0
    loss_kind: str | None = None  # "logistic" | "cross-entropy"; inferred when None
    margin_stop: float | None = 1.0
    record_every: int = 10

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if int(self.max_steps) < 1:
            raise ValueError(f"max_steps must be at least 1, got {self.max_steps}")
        if not self.init_scale > 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        if self.loss_kind not in (None, "logistic", "cross-entropy"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")
        if int(self.record_every) < 1:
            raise ValueError("record_every must be at least 1")


@dataclass
class TrainReport:
    final_loss: float
    separation_step: int | None
    margin_trajectory: list[tuple[int, float]]
    loss_trajectory: list[tuple[int, float]]
    steps_run: int
    n_train: int
    train_indices: tuple[int, ...] = ()
    monotone: bool = True
    relabeled: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class UnlearnRequest:
    forget_indices: frozenset[int]
    mode: str = "retrain"  # "retrain" | "relabel-finetune"

    def __post_init__(self):
        object.__setattr__(self, "forget_indices", frozenset(int(i) for i in self.forget_indices))
        if not self.forget_indices:
            raise ValueError("forget set must not be empty")
        if self.mode not in ("retrain", "relabel-finetune"):
            raise ValueError(f"unknown unlearning mode {self.mode!r}")

    def check(self, n: int):
        bad = sorted(i for i in self.forget_indices if not 0 <= i < n)
        if bad:
            raise ValueError(f"forget indices out of range [0, {n}): {bad}")


def init_params(spec: NetworkSpec, init_scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mats = []
    for fan_out, fan_in in spec.layer_shapes:
        bound = init_scale / np.sqrt(fan_in)
        mats.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return diffnet.flatten(mats)


def _loss_kind(spec: NetworkSpec, cfg: TrainConfig) -> str:
    kind = cfg.loss_kind or ("logistic" if spec.is_binary else "cross-entropy")
    if (kind == "logistic") != spec.is_binary:
        raise ValueError(f"loss {kind!r} does not fit a network with {spec.output_dim} outputs")
    return kind


def _loss_terms(kind: str, out: np.ndarray, y: np.ndarray):
    """Summed loss, gradient w.r.t. the outputs, and the per-sample margins."""
    if kind == "logistic":
        q = y * out[:, 0]
        loss = float(np.logaddexp(0.0, -q).sum())
        # d/dq log(1+e^-q) = -sigmoid(-q)
        grad = (-y * np.exp(-np.logaddexp(0.0, q)))[:, None]
        return loss, grad, q
    n = out.shape[0]
    yi = y.astype(int)
    logp = log_softmax(out, axis=1)
    loss = float(-logp[np.arange(n), yi].sum())
    grad = softmax(out, axis=1)
    grad[np.arange(n), yi] -= 1.0
    rival = out.copy()
    rival[np.arange(n), yi] = -np.inf
    q = out[np.arange(n), yi] - rival.max(axis=1)
    return loss, grad, q


def empirical_loss(spec: NetworkSpec, theta, dataset: LabeledDataset, loss_kind=None) -> float:
    kind = loss_kind or ("logistic" if spec.is_binary else "cross-entropy")
    out = diffnet.forward_batch(spec, theta, dataset.samples)
    return _loss_terms(kind, out, np.asarray(dataset.labels, dtype=np.float64))[0]


def _descend(spec, theta, X, y, cfg: TrainConfig, max_steps: int, indices):
    kind = _loss_kind(spec, cfg)
    theta = np.array(theta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    state = {}

    def grad_fn(out):
        state["loss"], g, state["q"] = _loss_terms(kind, out, y)
        return g

    margin_traj, loss_traj = [], []
    separation = None
    monotone = True
    prev = np.inf
    step = 0
    while True:
        with np.errstate(over="ignore", invalid="ignore"):
            _, grad = diffnet.value_and_param_vjp(spec, theta, X, grad_fn)
        loss, q = state["loss"], state["q"]
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(step, loss)
        if separation is None and loss < 1.0:
            separation = step
        if loss > prev:
            monotone = False
        prev = loss
        done = step >= max_steps or (cfg.margin_stop is not None and q.min() >= cfg.margin_stop)
        if step % cfg.record_every == 0 or done:
            margin_traj.append((step, float(q.min())))
            loss_traj.append((step, loss))
        if done:
            break
        theta -= cfg.step_size * grad
        step += 1
    if not monotone:
        log.warning("training loss increased at least once (step_size=%g)", cfg.step_size)
    report = TrainReport(
        final_loss=loss,
        separation_step=separation,
        margin_trajectory=margin_traj,
        loss_trajectory=loss_traj,
        steps_run=step,
        n_train=X.shape[0],
        train_indices=tuple(int(i) for i in indices),
        monotone=monotone,
    )
    return theta, report


def train(spec: NetworkSpec, dataset: LabeledDataset, cfg: TrainConfig):
    """Train from a fresh initialization; returns ``(theta, TrainReport)``."""
    if dataset.n < 1:
        raise ValueError("cannot train on an empty dataset")
    dataset.check_against(spec)
    theta0 = init_params(spec, cfg.init_scale, cfg.seed)
    return _descend(spec, theta0, dataset.samples, dataset.labels, cfg, cfg.max_steps, range(dataset.n))


def finetune(spec: NetworkSpec, theta, dataset: LabeledDataset, cfg: TrainConfig, steps: int | None = None):
    """Continue gradient descent from ``theta``; ``steps`` overrides ``cfg.max_steps`` and may be 0."""
    dataset.check_against(spec)
    n_steps = cfg.max_steps if steps is None else int(steps)
    if n_steps < 0:
        raise ValueError("steps must be non-negative")
    return _descend(spec, theta, dataset.samples, dataset.labels, cfg, n_steps, range(dataset.n))


def random_wrong_labels(labels, forget, num_classes: int, seed: int) -> dict[int, int]:
    """A uniformly random label different from the current one for each forgotten index."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in sorted(forget):
        y = int(labels[i])
        if num_classes == 2 and set(np.unique(labels)) <= {-1, 1}:
            out[i] = -y
            continue
        choices = [c for c in range(num_classes) if c != y]
        out[i] = int(choices[rng.integers(len(choices))])
    return out


def unlearn(spec: NetworkSpec, theta, dataset: LabeledDataset, req: UnlearnRequest, cfg: TrainConfig,
            finetune_steps: int | None = None):
    """Apply an unlearning operator; returns ``(theta, TrainReport)``."""
    req.check(dataset.n)
    if req.mode == "retrain":
        keep = [i for i in range(dataset.n) if i not in req.forget_indices]
        if not keep:
            raise ValueError("retraining would leave an empty training set")
        retained = dataset.subset(keep)
        fresh = replace(cfg, seed=derive_seed(cfg.seed, "unlearn/retrain"))
        theta0 = init_params(spec, fresh.init_scale, fresh.seed)
        return _descend(spec, theta0, retained.samples, retained.labels, fresh, fresh.max_steps, keep)

    new_labels = random_wrong_labels(
        dataset.labels, req.forget_indices, dataset.num_classes, derive_seed(cfg.seed, "unlearn/relabel")
    )
    labels = np.array(dataset.labels, copy=True)
    for i, y in new_labels.items():
        labels[i] = y
    relabeled = replace(dataset, labels=labels)
    theta, report = finetune(spec, theta, relabeled, cfg, finetune_steps)
    report.relabeled = new_labels
    return theta, report


def prune_random(spec: NetworkSpec, theta, fraction: float, seed: int) -> np.ndarray:
    """Zero a uniformly random ``floor(fraction * size)`` subset of each layer's weights."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    out = np.array(theta, dtype=np.float64, copy=True)
    for sl in diffnet.layer_slices(spec):
        size = sl.stop - sl.start
        k = int(np.floor(fraction * size))
        out[sl.start + rng.choice(size, size=k, replace=False)] = 0.0
    return out


def accuracy(spec: NetworkSpec, theta, dataset: LabeledDataset, subset=None) -> float:
    idx = np.arange(dataset.n) if subset is None else np.asarray(sorted(subset), dtype=int)
    if idx.size == 0:
        raise ValueError("accuracy over an empty subset is undefined")
    if idx.min() < 0 or idx.max() >= dataset.n:
        raise ValueError("subset indices out of range")
    out = diffnet.forward_batch(spec, theta, dataset.samples[idx])
    y = np.asarray(dataset.labels)[idx]
    if spec.is_binary:
        # a zero output counts as wrong
        correct = np.sign(out[:, 0]) == y
    else:
        correct = np.argmax(out, axis=1) == y
    return float(np.mean(correct))
