"""Bias-free rectifier MLPs and the derivatives the rest of the package needs.

Parameters are a single flat float64 vector holding the row-major weight
matrices of every layer, first layer first. A layer maps ``fan_in`` inputs to
``fan_out`` outputs through a ``(fan_out, fan_in)`` matrix; there are no bias
terms, so ``M(a * theta; x) == a**L * M(theta; x)`` for ``a > 0``.

Every function has a batched form (suffix ``_batch``) working on a matrix of
inputs with one row per sample. The single-sample functions are thin wrappers.

Outputs are selected with an *output direction*: an integer picks one logit,
a vector ``c`` of length ``output_dim`` selects ``c @ M(theta; x)``. Margins
of multi-class nets use ``e_y - e_j``.

The rectifier derivative at exactly zero is 0 and the activation pattern is
held fixed when differentiating twice, so second-order quantities are exact
inside each linear region.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when an array does not fit the network it is used with."""


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a bias-free rectifier MLP.

    ``input_offset`` is an optional fixed vector subtracted from every input
    before the first layer. It is not a parameter, so homogeneity in the
    weights is unaffected.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int = 1
    input_offset: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError(f"hidden widths must be positive, got {self.hidden_widths}")
        if self.output_dim < 1:
            raise ValueError(f"output_dim must be positive, got {self.output_dim}")
        if self.input_offset is not None:
            offset = tuple(float(v) for v in self.input_offset)
            if len(offset) != self.input_dim:
                raise DimensionError(
                    f"input_offset has length {len(offset)}, expected {self.input_dim}"
                )
            object.__setattr__(self, "input_offset", offset)

    @property
    def depth(self) -> int:
        return len(self.hidden_widths) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i + 1], w[i]) for i in range(self.depth)]

    @property
    def num_params(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    @property
    def is_binary(self) -> bool:
        return self.output_dim == 1

    def offset_array(self) -> np.ndarray:
        if self.input_offset is None:
            return np.zeros(self.input_dim)
        return np.asarray(self.input_offset, dtype=np.float64)


@dataclass(frozen=True)
class MarginInfo:
    margins: np.ndarray
    min_margin: float


def layer_slices(spec: NetworkSpec) -> list[slice]:
    out, start = [], 0
    for r, c in spec.layer_shapes:
        out.append(slice(start, start + r * c))
        start += r * c
    return out


def unflatten(spec: NetworkSpec, theta: np.ndarray) -> list[np.ndarray]:
    """Split ``theta`` into per-layer weight matrices (views, no copy)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != spec.num_params:
        raise DimensionError(
            f"parameter vector has shape {theta.shape}, expected ({spec.num_params},)"
        )
    return [theta[s].reshape(shape) for s, shape in zip(layer_slices(spec), spec.layer_shapes)]


def flatten(mats: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in mats])


def _inputs(spec: NetworkSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(
            f"layer 1 expects inputs with {spec.input_dim} features, got array of shape {X.shape}"
        )
    if spec.input_offset is not None:
        X = X - spec.offset_array()
    return X


def _directions(spec: NetworkSpec, output_index, batch: int) -> np.ndarray:
    """Normalize an output selector to a ``(batch, output_dim)`` matrix."""
    k = spec.output_dim
    if output_index is None:
        if k != 1:
            raise DimensionError("output_index is required for multi-output networks")
        return np.ones((batch, 1))
    sel = np.asarray(output_index)
    if sel.ndim == 0 and np.issubdtype(sel.dtype, np.integer):
        if not 0 <= int(sel) < k:
            raise DimensionError(f"output index {int(sel)} out of range for {k} outputs")
        C = np.zeros((batch, k))
        C[:, int(sel)] = 1.0
        return C
    if sel.ndim == 1 and np.issubdtype(sel.dtype, np.integer) and sel.size == batch:
        if sel.min() < 0 or sel.max() >= k:
            raise DimensionError(f"output indices out of range for {k} outputs")
        C = np.zeros((batch, k))
        C[np.arange(batch), sel] = 1.0
        return C
    sel = np.asarray(sel, dtype=np.float64)
    if sel.shape == (k,):
        return np.broadcast_to(sel, (batch, k)).copy()
    if sel.shape == (batch, k):
        return sel
    raise DimensionError(f"cannot interpret output selector of shape {sel.shape}")


def _forward_cache(spec, theta, X):
    Ws = unflatten(spec, theta)
    h = _inputs(spec, X)
    hs, masks = [h], []
    for W in Ws[:-1]:
        z = h @ W.T
        mask = z > 0
        h = np.where(mask, z, 0.0)
        hs.append(h)
        masks.append(mask)
    out = h @ Ws[-1].T
    return Ws, hs, masks, out


def forward_batch(spec: NetworkSpec, theta, X) -> np.ndarray:
    """Network outputs for every row of ``X``; shape ``(n, output_dim)``."""
    return _forward_cache(spec, theta, X)[3]


def forward(spec: NetworkSpec, theta, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a single input vector, got shape {x.shape}")
    return forward_batch(spec, theta, x[None, :])[0]


def _backprop(Ws, masks, C):
    """Return deltas ``dM/dz_l`` for every layer, top layer last."""
    deltas = [C]
    d = C
    for l in range(len(Ws) - 1, 0, -1):
        d = (d @ Ws[l]) * masks[l - 1]
        deltas.append(d)
    deltas.reverse()
    return deltas


def param_gradient_batch(spec: NetworkSpec, theta, X, output_index=None) -> np.ndarray:
    """Per-sample ``grad_theta (c @ M(theta; x_i))`` as an ``(n, p)`` matrix."""
    Ws, hs, masks, _ = _forward_cache(spec, theta, X)
    C = _directions(spec, output_index, hs[0].shape[0])
    deltas = _backprop(Ws, masks, C)
    n = hs[0].shape[0]
    blocks = [np.einsum("bi,bj->bij", d, h).reshape(n, -1) for d, h in zip(deltas, hs)]
    return np.concatenate(blocks, axis=1)


def param_gradient(spec: NetworkSpec, theta, x, output_index=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return param_gradient_batch(spec, theta, x[None, :], output_index)[0]


def weighted_param_gradient(spec: NetworkSpec, theta, X, weights, output_index=None) -> np.ndarray:
    """``sum_i weights[i] * grad_theta (c_i @ M(theta; x_i))`` without the per-sample matrix."""
    Ws, hs, masks, _ = _forward_cache(spec, theta, X)
    C = _directions(spec, output_index, hs[0].shape[0])
    deltas = _backprop(Ws, masks, C * np.asarray(weights, dtype=np.float64)[:, None])
    return flatten([d.T @ h for d, h in zip(deltas, hs)])


def input_gradient_batch(spec: NetworkSpec, theta, X, output_index=None) -> np.ndarray:
    Ws, hs, masks, _ = _forward_cache(spec, theta, X)
    C = _directions(spec, output_index, hs[0].shape[0])
    return _backprop(Ws, masks, C)[0] @ Ws[0]


def input_gradient(spec: NetworkSpec, theta, x, output_index=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return input_gradient_batch(spec, theta, x[None, :], output_index)[0]


def mixed_hvp_batch(spec: NetworkSpec, theta, X, v, output_index=None, return_values=False):
    """``grad_x <v, grad_theta (c @ M(theta; x))>`` for every row of ``X``.

    The inner product is evaluated by a tangent forward pass along ``v`` and
    then differentiated in reverse with the activation pattern frozen. With
    ``return_values`` the inner products themselves are returned as well.
    """
    Ws, hs, masks, _ = _forward_cache(spec, theta, X)
    C = _directions(spec, output_index, hs[0].shape[0])
    return _mixed_from_cache(Ws, hs, masks, unflatten(spec, v), C, return_values)


def _mixed_from_cache(Ws, hs, masks, Vs, C, return_values=False):
    L = len(Ws)
    values = None
    if return_values:
        tang = np.zeros_like(hs[0])
        for l in range(L - 1):
            tang = np.where(masks[l], hs[l] @ Vs[l].T + tang @ Ws[l].T, 0.0)
        values = np.einsum("bk,bk->b", C, hs[L - 1] @ Vs[L - 1].T + tang @ Ws[L - 1].T)

    # adjoints of the primal (a) and tangent (b) activations
    a = C @ Vs[L - 1]
    b = C @ Ws[L - 1]
    for l in range(L - 2, -1, -1):
        a = a * masks[l]
        b = b * masks[l]
        a = a @ Ws[l] + b @ Vs[l]
        b = b @ Ws[l]
    if return_values:
        return a, values
    return a


def mixed_hvp(spec: NetworkSpec, theta, x, v, output_index=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return mixed_hvp_batch(spec, theta, x[None, :], v, output_index)[0]


def margin_directions(spec: NetworkSpec, outputs: np.ndarray, labels) -> np.ndarray:
    """Direction matrix whose inner product with the logits gives each margin.

    Binary nets use ``y`` itself (labels are +-1). Multi-class nets use
    ``e_y - e_j`` with ``j`` the strongest rival logit; ties go to the lowest
    index.
    """
    labels = np.asarray(labels)
    n = outputs.shape[0]
    if spec.is_binary:
        return labels.astype(np.float64).reshape(n, 1)
    y = labels.astype(int)
    rival = outputs.copy()
    rival[np.arange(n), y] = -np.inf
    j = np.argmax(rival, axis=1)
    C = np.zeros_like(outputs)
    C[np.arange(n), y] = 1.0
    C[np.arange(n), j] -= 1.0
    return C


def margins(spec: NetworkSpec, theta, X, labels) -> MarginInfo:
    out = forward_batch(spec, theta, X)
    labels = np.asarray(labels)
    if labels.shape[0] != out.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {out.shape[0]} samples")
    if spec.is_binary:
        q = labels.astype(np.float64) * out[:, 0]
    else:
        q = np.einsum("bk,bk->b", margin_directions(spec, out, labels), out)
    return MarginInfo(margins=q, min_margin=float(q.min()))


def value_and_param_vjp(spec: NetworkSpec, theta, X, output_grad):
    """Outputs plus ``sum_i G_i @ dM(x_i)/dtheta`` with ``G = output_grad(outputs)``.

    One forward and one reverse pass; this is what the trainer steps on.
    """
    Ws, hs, masks, out = _forward_cache(spec, theta, X)
    G = np.asarray(output_grad(out), dtype=np.float64)
    deltas = _backprop(Ws, masks, G)
    return out, flatten([d.T @ h for d, h in zip(deltas, hs)])
