"""Deciding whether samples were unlearned by comparing reconstructions.

A query image counts as *present* in a model when some recovered candidate
matches it with SSIM above ``eta``. Comparing presence before and after an
unlearning request gives one of three outcomes per forgotten query.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import diffnet
from .diffnet import NetworkSpec

EXECUTED = "executed"
NOT_EXECUTED = "not-executed"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")
        if not (self.k1 > 0 and self.k2 > 0 and self.data_range > 0):
            raise ValueError("k1, k2 and data_range must be positive")


@dataclass(frozen=True)
class VerifyConfig:
    eta: float = 0.15
    ssim: SsimConfig = SsimConfig()


def _window_stats(imgs: np.ndarray, w: int):
    mu = sliding_window_view(imgs, (w, w), axis=(-2, -1)).mean(axis=(-2, -1))
    sq = sliding_window_view(imgs * imgs, (w, w), axis=(-2, -1)).mean(axis=(-2, -1))
    return mu, sq - mu * mu


def ssim_matrix(A, B, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """SSIM between every image of ``A`` ``(na, h, w)`` and every image of ``B`` ``(nb, h, w)``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 3 or B.ndim != 3 or A.shape[1:] != B.shape[1:]:
        raise ValueError(f"image shapes differ: {A.shape[1:]} vs {B.shape[1:]}")
    w = cfg.window
    if w > min(A.shape[1:]):
        raise ValueError(f"window {w} larger than image side {min(A.shape[1:])}")
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a, var_a = _window_stats(A, w)
    mu_b, var_b = _window_stats(B, w)
    out = np.empty((A.shape[0], B.shape[0]))
    for i in range(A.shape[0]):
        prod = sliding_window_view(A[i] * B, (w, w), axis=(-2, -1)).mean(axis=(-2, -1))
        cov = prod - mu_a[i] * mu_b
        num = (2 * mu_a[i] * mu_b + c1) * (2 * cov + c2)
        den = (mu_a[i] * mu_a[i] + mu_b * mu_b + c1) * (var_a[i] + var_b + c2)
        out[i] = (num / den).mean(axis=(-2, -1))
    return out


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two images of equal shape, got {a.shape} and {b.shape}")
    return float(ssim_matrix(a[None], b[None], cfg)[0, 0])


def _as_images(cands, shape) -> np.ndarray:
    X = getattr(cands, "candidates", cands)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X.reshape(X.shape[0], *shape)
    return X


def match(query, cands, cfg: SsimConfig = SsimConfig()) -> tuple[float, int]:
    """Best SSIM against the candidates and its index; ties go to the lowest index."""
    query = np.asarray(query, dtype=np.float64)
    imgs = _as_images(cands, query.shape)
    if imgs.shape[0] == 0:
        raise ValueError("cannot match against an empty candidate set")
    scores = ssim_matrix(query[None], imgs, cfg)[0]
    j = int(np.argmax(scores))
    return float(scores[j]), j


def match_all(queries, cands, cfg: SsimConfig = SsimConfig()):
    """Vectorized :func:`match` for a stack of queries."""
    queries = np.asarray(queries, dtype=np.float64)
    imgs = _as_images(cands, queries.shape[1:])
    if imgs.shape[0] == 0:
        raise ValueError("cannot match against an empty candidate set")
    S = ssim_matrix(queries, imgs, cfg)
    idx = np.argmax(S, axis=1)
    return S[np.arange(len(idx)), idx], idx


def _check_eta(eta: float):
    if eta >= 1:
        warnings.warn(f"eta={eta} >= 1: no candidate can ever count as present", stacklevel=3)


def presence(query, cands, cfg: VerifyConfig = VerifyConfig()) -> bool:
    _check_eta(cfg.eta)
    best, _ = match(query, cands, cfg.ssim)
    return best > cfg.eta


def decide(present_pre: bool, present_post: bool) -> str:
    if not present_pre:
        return INCONCLUSIVE
    return NOT_EXECUTED if present_post else EXECUTED


@dataclass(frozen=True)
class QueryRecord:
    query_id: int
    forgotten: bool
    ssim_pre: float
    index_pre: int
    present_pre: bool
    ssim_post: float
    index_post: int
    present_post: bool
    distance: float
    decision: str
    boundary_distance: float | None = None


@dataclass(frozen=True)
class VerificationReport:
    queries: list[QueryRecord]
    mean_D_forget: float
    mean_D_retain: float
    decision: str

    def decisions(self, forgotten: bool = True) -> list[str]:
        return [q.decision for q in self.queries if q.forgotten == forgotten]


def overall_decision(records) -> str:
    """Executed only if every forgotten query that was present before is absent after."""
    checked = [q for q in records if q.forgotten and q.present_pre]
    if not checked:
        return INCONCLUSIVE
    if all(q.decision == EXECUTED for q in checked):
        return EXECUTED
    return NOT_EXECUTED


def verify_unlearning(pre_cands, post_cands, queries, forgotten, cfg: VerifyConfig = VerifyConfig(),
                      query_ids=None, boundary=None) -> VerificationReport:
    """Compare presence of each query before and after unlearning.

    ``queries`` is a stack of images, ``forgotten`` a boolean per query.
    ``D_i`` is the Euclidean distance between the query's best pre-match and
    its best post-match.
    """
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 3 or queries.shape[0] == 0:
        raise ValueError("verification needs a non-empty stack of query images")
    forgotten = np.asarray(forgotten, dtype=bool)
    if forgotten.shape != (queries.shape[0],):
        raise ValueError("forgotten needs one flag per query")
    _check_eta(cfg.eta)
    pre = _as_images(pre_cands, queries.shape[1:])
    post = _as_images(post_cands, queries.shape[1:])
    s_pre, j_pre = match_all(queries, pre, cfg.ssim)
    s_post, j_post = match_all(queries, post, cfg.ssim)
    D = np.linalg.norm((pre[j_pre] - post[j_post]).reshape(len(queries), -1), axis=1)
    ids = list(range(len(queries))) if query_ids is None else [int(i) for i in query_ids]

    records = []
    for i in range(len(queries)):
        p0, p1 = bool(s_pre[i] > cfg.eta), bool(s_post[i] > cfg.eta)
        records.append(QueryRecord(
            query_id=ids[i], forgotten=bool(forgotten[i]),
            ssim_pre=float(s_pre[i]), index_pre=int(j_pre[i]), present_pre=p0,
            ssim_post=float(s_post[i]), index_post=int(j_post[i]), present_post=p1,
            distance=float(D[i]), decision=decide(p0, p1),
            boundary_distance=None if boundary is None else float(boundary[i]),
        ))
    mean_f = float(D[forgotten].mean()) if forgotten.any() else float("nan")
    mean_r = float(D[~forgotten].mean()) if (~forgotten).any() else float("nan")
    return VerificationReport(records, mean_f, mean_r, overall_decision(records))


def boundary_distance(spec: NetworkSpec, theta, x, y) -> float:
    """Margin of a single labelled sample; negative when it is misclassified."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(diffnet.margins(spec, theta, x, np.array([y])).min_margin)
