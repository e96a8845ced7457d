"""Recovering training samples from trained weights.

A trained homogeneous net sits close to a KKT point of the max-margin problem,
so ``theta`` is approximately ``sum_i lambda_i y_i grad_theta M(x_i)`` over the
training set. Recovery treats the ``x_i`` and ``lambda_i`` as unknowns and
minimizes the squared residual of that identity (the stationarity loss), a
penalty on negative multipliers, and in a second phase a confidence term
``-|M_k(x)|`` that sharpens the candidates while they are kept within
``epsilon`` of where phase one left them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import nnls

from . import diffnet
from .data_io import LabeledDataset
from .diffnet import NetworkSpec, _backprop, _forward_cache, _mixed_from_cache


class MissingAnchorError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, candidate: int | None = None):
        super().__init__(message)
        self.candidate = candidate


class RecoveryDivergedError(RuntimeError):
    def __init__(self, step: int, total: float, trajectory):
        super().__init__(f"reconstruction loss {total!r} at step {step} exceeds the divergence limit")
        self.step = step
        self.trajectory = trajectory


@dataclass(frozen=True)
class CandidateSet:
    candidates: np.ndarray
    multipliers: np.ndarray
    labels: np.ndarray
    anchor: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.candidates, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError(f"candidates must be a non-empty matrix, got shape {X.shape}")
        lam = np.asarray(self.multipliers, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if lam.shape != (X.shape[0],) or labels.shape != (X.shape[0],):
            raise ValueError("multipliers and labels need one entry per candidate")
        object.__setattr__(self, "candidates", X)
        object.__setattr__(self, "multipliers", lam)
        object.__setattr__(self, "labels", labels)
        if self.anchor is not None:
            A = np.asarray(self.anchor, dtype=np.float64)
            if A.shape != X.shape:
                raise ValueError("anchor must have the same shape as the candidates")
            object.__setattr__(self, "anchor", A)

    @property
    def m(self) -> int:
        return self.candidates.shape[0]


@dataclass(frozen=True)
class ReconstructConfig:
    m: int = 100
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    epsilon: float = 0.1
    T1: int = 3000
    T2: int = 1000
    step_size_x: float = 1.0
    step_size_lambda: float = 1e-3
    candidate_init_scale: float = 0.05
    # None centres the initial candidates on the network's input offset (0.5 without one)
    candidate_init_center: float | None = None
    lambda_init: float = 1e-2
    seed: int = 0
    divergence_limit: float = 1e12

    def __post_init__(self):
        if int(self.m) < 1:
            raise ValueError("m must be at least 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.T1 < 0 or self.T2 < 0:
            raise ValueError("iteration counts must be non-negative")
        if not (self.step_size_x > 0 and self.step_size_lambda > 0):
            raise ValueError("step sizes must be positive")
        if not self.candidate_init_scale > 0:
            raise ValueError("candidate_init_scale must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l_stationary: float
    l_lambda: float
    l_prior: float
    total: float
    phase: int = 1


def assigned_labels(spec: NetworkSpec, m: int) -> np.ndarray:
    """First half +1 and the rest -1 for binary nets, round-robin classes otherwise."""
    if spec.is_binary:
        return np.where(np.arange(m) < (m + 1) // 2, 1, -1).astype(np.int64)
    return (np.arange(m) % spec.output_dim).astype(np.int64)


def init_candidates(spec: NetworkSpec, cfg: ReconstructConfig) -> CandidateSet:
    rng = np.random.default_rng(cfg.seed)
    if cfg.candidate_init_center is not None:
        center = np.full(spec.input_dim, float(cfg.candidate_init_center))
    elif spec.input_offset is not None:
        center = spec.offset_array()
    else:
        center = np.full(spec.input_dim, 0.5)
    s = cfg.candidate_init_scale
    X = center + rng.uniform(-s, s, size=(cfg.m, spec.input_dim))
    lam = np.full(cfg.m, cfg.lambda_init)
    return CandidateSet(X, lam, assigned_labels(spec, cfg.m))


def _check_dims(spec: NetworkSpec, cands: CandidateSet):
    if cands.candidates.shape[1] != spec.input_dim:
        raise diffnet.DimensionError(
            f"candidates have {cands.candidates.shape[1]} features, network expects {spec.input_dim}"
        )


def _label_directions(spec: NetworkSpec, out: np.ndarray, labels) -> np.ndarray:
    # binary: y_i; multi-class: e_y - e_j with the rival j picked from the current logits
    return diffnet.margin_directions(spec, out, labels)


def _predicted(spec: NetworkSpec, out: np.ndarray) -> np.ndarray:
    if spec.is_binary:
        return np.zeros(out.shape[0], dtype=int)
    return np.argmax(out, axis=1)


def loss_lambda(cands: CandidateSet) -> float:
    return float(np.maximum(-cands.multipliers, 0.0).sum())


def stationarity_residual(spec: NetworkSpec, theta, cands: CandidateSet) -> np.ndarray:
    """``theta - sum_i lambda_i grad_theta (c_i @ M(x_i))`` with ``c_i`` the label direction."""
    _check_dims(spec, cands)
    theta = np.asarray(theta, dtype=np.float64)
    Ws, hs, masks, out = _forward_cache(spec, theta, cands.candidates)
    C = _label_directions(spec, out, cands.labels)
    deltas = _backprop(Ws, masks, C * cands.multipliers[:, None])
    r = theta - diffnet.flatten([d.T @ h for d, h in zip(deltas, hs)])
    if not np.all(np.isfinite(r)):
        _raise_nonfinite(out, cands)
    return r


def _raise_nonfinite(out, cands):
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    if bad.size == 0:
        bad = np.flatnonzero(~np.isfinite(cands.multipliers) | ~np.all(np.isfinite(cands.candidates), axis=1))
    idx = int(bad[0]) if bad.size else None
    raise NonFiniteError(f"non-finite value in the stationarity residual (candidate {idx})", idx)


def loss_stationary(spec: NetworkSpec, theta, cands: CandidateSet) -> float:
    r = stationarity_residual(spec, theta, cands)
    return float(r @ r)


def loss_prior(spec: NetworkSpec, theta, cands: CandidateSet) -> float:
    """Sum of ``-|M_k(x)|`` over candidates, ``k`` the predicted class. Labels are not used."""
    out = diffnet.forward_batch(spec, theta, cands.candidates)
    k = _predicted(spec, out)
    return float(-np.abs(out[np.arange(out.shape[0]), k]).sum())


def project_to_bounds(cands: CandidateSet, epsilon: float, lo: float = 0.0, hi: float = 1.0) -> CandidateSet:
    """Clamp to ``anchor +- epsilon`` and then to the data range."""
    if cands.anchor is None:
        raise MissingAnchorError("projection needs an anchor snapshot")
    X = np.clip(cands.candidates, cands.anchor - epsilon, cands.anchor + epsilon)
    return replace(cands, candidates=np.clip(X, lo, hi))


def loss_and_gradients(spec: NetworkSpec, theta, cands: CandidateSet, alpha1=1.0, alpha2=1.0, alpha3=0.0):
    """Loss breakdown plus gradients of the weighted total w.r.t. candidates and multipliers."""
    _check_dims(spec, cands)
    theta = np.asarray(theta, dtype=np.float64)
    X, lam = cands.candidates, cands.multipliers
    Ws, hs, masks, out = _forward_cache(spec, theta, X)
    C = _label_directions(spec, out, cands.labels)
    deltas = _backprop(Ws, masks, C * lam[:, None])
    r = theta - diffnet.flatten([d.T @ h for d, h in zip(deltas, hs)])
    if not np.all(np.isfinite(r)):
        _raise_nonfinite(out, cands)
    # a_i = grad_x <r, grad_theta (c_i @ M(x_i))>, g_i = <r, grad_theta (c_i @ M(x_i))>
    a, g = _mixed_from_cache(Ws, hs, masks, diffnet.unflatten(spec, r), C, return_values=True)

    l_stat = float(r @ r)
    l_lam = float(np.maximum(-lam, 0.0).sum())
    n = X.shape[0]
    k = _predicted(spec, out)
    top = out[np.arange(n), k]
    l_prior = float(-np.abs(top).sum())

    grad_x = alpha1 * (-2.0 * lam[:, None] * a)
    grad_lam = alpha1 * (-2.0 * g) + alpha2 * np.where(lam < 0, -1.0, 0.0)
    total = alpha1 * l_stat + alpha2 * l_lam
    if alpha3:
        E = np.zeros_like(out)
        E[np.arange(n), k] = 1.0
        gin = _backprop(Ws, masks, E)[0] @ Ws[0]
        grad_x = grad_x + alpha3 * (-np.sign(top))[:, None] * gin
        total += alpha3 * l_prior
    breakdown = LossBreakdown(l_stat, l_lam, l_prior, float(total), 2 if alpha3 else 1)
    return breakdown, grad_x, grad_lam


def _step(spec, theta, cands, cfg, alpha3, phase, trajectory, step_index):
    b, gx, gl = loss_and_gradients(spec, theta, cands, cfg.alpha1, cfg.alpha2, alpha3)
    b = replace(b, phase=phase)
    trajectory.append(b)
    if not np.isfinite(b.total) or b.total > cfg.divergence_limit:
        raise RecoveryDivergedError(step_index, b.total, trajectory)
    return replace(
        cands,
        candidates=cands.candidates - cfg.step_size_x * gx,
        multipliers=cands.multipliers - cfg.step_size_lambda * gl,
    )


def run_phase1(spec: NetworkSpec, theta, cfg: ReconstructConfig, cands: CandidateSet | None = None):
    """``T1`` gradient steps on the stationarity and multiplier losses."""
    cands = init_candidates(spec, cfg) if cands is None else cands
    _check_dims(spec, cands)
    trajectory: list[LossBreakdown] = []
    for t in range(cfg.T1):
        cands = _step(spec, theta, cands, cfg, 0.0, 1, trajectory, t)
    return cands, trajectory


def run_phase2(spec: NetworkSpec, theta, cands: CandidateSet, cfg: ReconstructConfig, step_offset: int = 0):
    """Snapshot the anchor, then ``T2`` projected steps on the full loss."""
    # the anchor is taken inside the data range so that both box constraints can hold at once
    anchor = np.clip(cands.candidates, 0.0, 1.0)
    cands = replace(cands, candidates=anchor.copy(), anchor=anchor)
    trajectory: list[LossBreakdown] = []
    for t in range(cfg.T2):
        cands = _step(spec, theta, cands, cfg, cfg.alpha3, 2, trajectory, step_offset + t)
        cands = project_to_bounds(cands, cfg.epsilon)
    return cands, trajectory


def recover(spec: NetworkSpec, theta, cfg: ReconstructConfig, phase1=None):
    """Two-phase recovery; returns ``(CandidateSet, trajectory)``.

    ``phase1`` may hold the ``(CandidateSet, trajectory)`` of an earlier
    :func:`run_phase1` call with the same config, which is then reused.
    With ``T1 == T2 == 0`` the initial candidates are returned untouched.
    """
    theta = np.asarray(theta, dtype=np.float64)
    cands, traj1 = run_phase1(spec, theta, cfg) if phase1 is None else phase1
    if cfg.T2 == 0:
        return cands, list(traj1)
    try:
        cands, traj2 = run_phase2(spec, theta, cands, cfg, step_offset=cfg.T1)
    except RecoveryDivergedError as e:
        e.trajectory = list(traj1) + e.trajectory
        raise
    return cands, list(traj1) + traj2


@dataclass(frozen=True)
class KKTReport:
    margins: np.ndarray
    multipliers: np.ndarray
    slackness: np.ndarray
    residual_norm: float
    theta_norm: float
    scale: float

    @property
    def relative_residual(self) -> float:
        return self.residual_norm / self.theta_norm if self.theta_norm else 0.0


def kkt_report(spec: NetworkSpec, theta, dataset: LabeledDataset, normalize: bool = True) -> KKTReport:
    """Fit non-negative multipliers to the training set and report KKT violations.

    With ``normalize`` the weights are first rescaled so the smallest margin
    is exactly 1, the scale at which the max-margin constraints are stated.
    Relative residuals do not depend on this scaling.
    """
    theta = np.asarray(theta, dtype=np.float64)
    q = diffnet.margins(spec, theta, dataset.samples, dataset.labels).margins
    scale = 1.0
    if normalize and q.min() > 0:
        scale = float(q.min()) ** (-1.0 / spec.depth)
        theta = theta * scale
        q = q * scale**spec.depth
    out = diffnet.forward_batch(spec, theta, dataset.samples)
    C = diffnet.margin_directions(spec, out, dataset.labels)
    G = diffnet.param_gradient_batch(spec, theta, dataset.samples, C)
    lam, resid = nnls(G.T, theta, maxiter=50 * G.shape[0])
    return KKTReport(
        margins=q,
        multipliers=lam,
        slackness=np.abs(lam * (q - 1.0)),
        residual_norm=float(resid),
        theta_norm=float(np.linalg.norm(theta)),
        scale=scale,
    )
