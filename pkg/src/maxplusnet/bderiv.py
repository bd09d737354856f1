"""Support sets, Bouligand derivatives and exact affine ranges of morphological layers.

Index sets are stored as boolean masks of shape ``(outputs, candidates)``:
for a dilation ``mask[i, j]`` says that ``w_ij + x_j`` attains the maximum
of row ``i``. Everything here is dtype-generic (float64 or ``Fraction``
object arrays); with a zero tie tolerance and exact arithmetic the affine
range is exact, i.e. the first-order expansion is an equality precisely on
``[0, epsilon]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maxplus import windows_from_signal

INF = math.inf


@dataclass(frozen=True)
class SupportSets:
    """Argmax (or argmin, for erosions) index sets, one per output."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("support mask must be 2-D")
        if not mask.any(axis=1).all():
            raise ValueError("every support set must be non-empty")
        object.__setattr__(self, "mask", mask)

    @property
    def sets(self) -> list[tuple[int, ...]]:
        return [tuple(int(j) for j in np.flatnonzero(row)) for row in self.mask]

    @property
    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def is_singleton(self) -> bool:
        """True when every set has one element (the Frechet-differentiable case)."""
        return bool((self.sizes == 1).all())

    def incidence(self) -> np.ndarray:
        """0/1 float matrix with ``E[i, j] = 1`` iff ``j`` is in set ``i``."""
        return self.mask.astype(np.float64)


@dataclass(frozen=True)
class AffineRange:
    """Step sizes ``[0, epsilon]`` over which a layer responds exactly affinely.

    ``per_row`` holds the row bounds (``inf`` when no competitor can
    overtake the support) and ``eta`` the slack between the row maximum and
    the best non-support value (``inf`` when the support is the whole row).
    """

    epsilon: object
    per_row: list
    eta: list

    @property
    def finite(self) -> bool:
        return self.epsilon != INF

    def capped(self, eta_max: float) -> float:
        return min(self.epsilon, eta_max)


def _support_mask(values: np.ndarray, tie_tol) -> np.ndarray:
    rowmax = values.max(axis=1)
    if tie_tol:
        return values >= (rowmax - tie_tol)[:, None]
    return values == rowmax[:, None]


def _check_tol(tie_tol):
    if tie_tol < 0:
        raise ValueError("tie_tol must be >= 0")


def _num(a) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(np.float64) if a.dtype.kind in "iub" else a


def _scores(W, x) -> np.ndarray:
    W = _num(W)
    x = _num(x)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: W {W.shape}, x {x.shape}")
    return W + x[None, :]


def support_sets_wrt_params(W, x, tie_tol=0) -> SupportSets:
    """Row argmax sets of ``w_ij + x_j``.

    The same sets govern the derivative with respect to ``x``, see
    :func:`support_sets`.
    """
    _check_tol(tie_tol)
    return SupportSets(_support_mask(_scores(W, x), tie_tol))


support_sets = support_sets_wrt_params


def _check_support(J: SupportSets, shape):
    if not isinstance(J, SupportSets):
        J = SupportSets(J)
    if J.shape != tuple(shape):
        raise ValueError(f"shape mismatch: support {J.shape} vs direction {tuple(shape)}")
    return J


def _masked_max(mask: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.where(mask, values, -INF).max(axis=1)


def bderiv_wrt_params(J: SupportSets, H) -> np.ndarray:
    """``delta'_x(W; H)_i = max_{j in J_i} h_ij``."""
    H = _num(H)
    J = _check_support(J, H.shape)
    return _masked_max(J.mask, H)


def bderiv_wrt_input(J: SupportSets, h) -> np.ndarray:
    """``delta'_W(x; h)_i = max_{j in J_i} h_j``."""
    h = _num(h)
    if h.ndim != 1:
        raise ValueError("input direction must be 1-D")
    if not isinstance(J, SupportSets):
        J = SupportSets(J)
    J = _check_support(J, (J.shape[0], h.shape[0]))
    return _masked_max(J.mask, np.broadcast_to(h, J.shape))


def affine_range(values, slopes, support: np.ndarray) -> AffineRange:
    """Exact affine range of ``eta -> max_j (values_ij + eta * slopes_ij)`` per row.

    ``support`` marks the entries attaining each row maximum at ``eta = 0``.
    Competitors are the entries whose slope strictly exceeds the best support
    slope; the row bound is the smallest step at which one of them catches up.
    """
    values = np.asarray(values)
    slopes = np.asarray(slopes)
    support = np.asarray(support, dtype=bool)
    if values.shape != slopes.shape or values.shape != support.shape:
        raise ValueError(f"shape mismatch: {values.shape}, {slopes.shape}, {support.shape}")
    if values.dtype != object and slopes.dtype != object:
        return _affine_range_float(values.astype(np.float64), slopes.astype(np.float64), support)
    per_row, etas = [], []
    for i in range(values.shape[0]):
        v, s, on = values[i], slopes[i], support[i]
        top = v[on].max()
        best = s[on].max()
        off = ~on
        etas.append(top - v[off].max() if off.any() else INF)
        comp = off & (s > best)
        if comp.any():
            per_row.append(min((top - v[comp]) / (s[comp] - best)))
        else:
            per_row.append(INF)
    return AffineRange(epsilon=min(per_row), per_row=per_row, eta=etas)


def _affine_range_float(values, slopes, support) -> AffineRange:
    # vectorized twin of the row loop above; same operations, same rounding
    top = np.where(support, values, -INF).max(axis=1)
    best = np.where(support, slopes, -INF).max(axis=1)
    etas = top - np.where(support, -INF, values).max(axis=1)
    comp = ~support & (slopes > best[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(comp, (top[:, None] - values) / (slopes - best[:, None]), INF)
    per_row = ratio.min(axis=1)
    return AffineRange(epsilon=float(per_row.min()), per_row=per_row.tolist(), eta=etas.tolist())


def affine_range_wrt_params(W, x, H, J: SupportSets | None = None) -> AffineRange:
    """Largest ``epsilon`` with ``delta_x(W + eta H) = delta_x(W) + eta delta'_x(W; H)`` on ``[0, epsilon]``."""
    scores = _scores(W, x)
    H = _num(H)
    if H.shape != scores.shape:
        raise ValueError(f"shape mismatch: H {H.shape} vs W {scores.shape}")
    if J is None:
        J = support_sets_wrt_params(W, x)
    return affine_range(scores, H, _check_support(J, H.shape).mask)


def affine_range_wrt_input(W, x, h, J: SupportSets | None = None) -> AffineRange:
    scores = _scores(W, x)
    h = _num(h)
    if h.shape != (scores.shape[1],):
        raise ValueError(f"shape mismatch: h {h.shape} vs input dim {scores.shape[1]}")
    if J is None:
        J = support_sets_wrt_params(W, x)
    return affine_range(scores, np.broadcast_to(h, scores.shape), _check_support(J, scores.shape).mask)


# Erosions: x_j = min_k (y_k - w_kj). Support sets index outputs j (rows of
# the mask) against candidate inputs k (columns), i.e. the mask is n x m.

def _erosion_scores(W, y) -> np.ndarray:
    W = _num(W)
    y = _num(y)
    if W.ndim != 2 or y.ndim != 1 or W.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: W {W.shape}, y {y.shape}")
    return (y[:, None] - W).T


def erosion_support_sets(W, y, tie_tol=0) -> SupportSets:
    _check_tol(tie_tol)
    scores = _erosion_scores(W, y)
    rowmin = scores.min(axis=1)
    if tie_tol:
        return SupportSets(scores <= (rowmin + tie_tol)[:, None])
    return SupportSets(scores == rowmin[:, None])


def erosion_bderiv_wrt_input(J: SupportSets, h) -> np.ndarray:
    """``eps'_W(y; h)_j = min_{k in J_j} h_k``."""
    h = _num(h)
    if not isinstance(J, SupportSets):
        J = SupportSets(J)
    J = _check_support(J, (J.shape[0], h.shape[0]))
    return np.where(J.mask, np.broadcast_to(h, J.shape), INF).min(axis=1)


def erosion_bderiv_wrt_params(J: SupportSets, H) -> np.ndarray:
    """``eps'_y(W; H)_j = min_{k in J_j} (-h_kj) = -max_{k in J_j} h_kj``."""
    H = _num(H)
    J = _check_support(J, H.T.shape)
    return -_masked_max(J.mask, H.T)


def erosion_affine_range_wrt_input(W, y, h, J: SupportSets | None = None) -> AffineRange:
    """Mirror image of the dilation range: competitors have a slope strictly below the support minimum."""
    scores = _erosion_scores(W, y)
    h = _num(h)
    if J is None:
        J = erosion_support_sets(W, y)
    J = _check_support(J, scores.shape)
    return affine_range(-scores, -np.broadcast_to(h, scores.shape), J.mask)


def erosion_affine_range_wrt_params(W, y, H, J: SupportSets | None = None) -> AffineRange:
    scores = _erosion_scores(W, y)
    H = _num(H)
    if H.T.shape != scores.shape:
        raise ValueError(f"shape mismatch: H {H.shape} vs W {np.asarray(W).shape}")
    if J is None:
        J = erosion_support_sets(W, y)
    J = _check_support(J, scores.shape)
    # value y_k - w_kj moves with slope -h_kj; negate to reuse the max form
    return affine_range(-scores, H.T, J.mask)


# Convolutional dilation: out_i = max_j (X_ij + w_j). Relative to the taps it
# is a dense dilation with X in the role of the weights; relative to the
# signal it is a dense dilation of the windows in the role of parameters.

def conv_support_sets(w, X, tie_tol=0) -> SupportSets:
    return support_sets_wrt_params(X, w, tie_tol)


def conv_bderiv_wrt_taps(J: SupportSets, h) -> np.ndarray:
    return bderiv_wrt_input(J, h)


def conv_bderiv_wrt_signal(J: SupportSets, h_signal) -> np.ndarray:
    p = J.shape[1]
    return bderiv_wrt_params(J, windows_from_signal(np.asarray(h_signal), p))


def conv_affine_range_wrt_taps(w, X, h, J: SupportSets | None = None) -> AffineRange:
    return affine_range_wrt_input(X, w, h, J)


def conv_affine_range_wrt_signal(w, X, h_signal, J: SupportSets | None = None) -> AffineRange:
    w = np.asarray(w)
    return affine_range_wrt_params(X, w, windows_from_signal(np.asarray(h_signal), w.shape[0]), J)


def first_order_check(f, point, direction, derivative, alphas) -> object:
    """Largest deviation of the difference quotients from a claimed directional derivative.

    Returns ``max_alpha |(f(point + alpha d) - f(point)) / alpha - derivative|``
    (sup norm). Zero, exactly, for a morphological layer and every
    ``alpha <= epsilon`` when evaluated in exact arithmetic.
    """
    point = np.asarray(point)
    direction = np.asarray(direction)
    derivative = np.asarray(derivative)
    base = np.asarray(f(point))
    worst = 0
    for a in alphas:
        if not a > 0:
            raise ValueError("alphas must be positive")
        q = (np.asarray(f(point + a * direction)) - base) / a
        worst = max(worst, np.abs(q - derivative).max())
    return worst
