"""Candidate descent directions, message candidates and adaptive step sizes.

Given a unit target message ``u`` for the output of a dilation layer, the
functions here propose a unit parameter direction ``H`` (or input direction
``h``) whose first-order effect on the output has a positive inner product
with ``u``, and pick the largest step for which that first-order effect is
realized exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bderiv import (
    AffineRange,
    SupportSets,
    affine_range_wrt_params,
    bderiv_wrt_input,
    bderiv_wrt_params,
    support_sets_wrt_params,
)

DEFAULT_ETA_MAX = 1.0


@dataclass(frozen=True)
class Direction:
    entries: np.ndarray
    degenerate: bool = False

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.asarray(self.entries, dtype=np.float64) ** 2)))


@dataclass(frozen=True)
class TargetMessage:
    """A direction requested by later layers, stored with unit norm.

    A zero incoming vector gives a degenerate message whose entries are zero.
    """

    entries: np.ndarray
    degenerate: bool = False

    @classmethod
    def from_vector(cls, v) -> "TargetMessage":
        v = np.asarray(v, dtype=np.float64)
        nrm = np.linalg.norm(v)
        if nrm == 0 or not np.isfinite(nrm):
            return cls(np.zeros_like(v), degenerate=True)
        return cls(v / nrm)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.entries))


@dataclass(frozen=True)
class SignSplit:
    plus: np.ndarray
    minus: np.ndarray


@dataclass
class UpdateProposal:
    direction: Direction
    predicted_gain: float
    epsilon: AffineRange | None = None
    chosen_step: float = 0.0
    extra: dict = field(default_factory=dict)


def _as_message(u) -> TargetMessage:
    if isinstance(u, TargetMessage):
        return u
    u = np.asarray(u, dtype=np.float64)
    nrm = np.linalg.norm(u)
    if nrm == 0:
        return TargetMessage(u.copy(), degenerate=True)
    if abs(nrm - 1.0) > 1e-9:
        raise ValueError(f"target message must have unit norm, got {nrm}")
    return TargetMessage(u)


def sign_split(u) -> SignSplit:
    """Rows with ``u_i >= 0`` go to ``plus`` (zeros included), the rest to ``minus``."""
    u = np.asarray(getattr(u, "entries", u))
    return SignSplit(plus=np.flatnonzero(u >= 0), minus=np.flatnonzero(u < 0))


def closed_form_gain(J: SupportSets, u) -> float:
    """``1 - sum_{u_i < 0} (1 - 1/sqrt(p_i)) u_i^2`` for a unit ``u``."""
    u = np.asarray(getattr(u, "entries", u), dtype=np.float64)
    p = J.sizes
    neg = u < 0
    return 1.0 - float(np.sum((1.0 - 1.0 / np.sqrt(p[neg])) * u[neg] ** 2))


def candidate_delta_W(J: SupportSets, u) -> UpdateProposal:
    """Unit-norm parameter direction for a dense dilation.

    Rows with a non-negative target put ``u_i`` on the smallest index of the
    support set; rows with a negative target spread ``u_i / sqrt(p_i)`` over
    the whole support set so that the row maximum actually moves down.
    """
    msg = _as_message(u)
    m, n = J.shape
    if msg.entries.shape != (m,):
        raise ValueError(f"message has shape {msg.entries.shape}, expected ({m},)")
    H = np.zeros((m, n))
    if msg.degenerate:
        return UpdateProposal(Direction(H, degenerate=True), predicted_gain=0.0)
    u = msg.entries
    mask = J.mask
    p = J.sizes
    for i in range(m):
        if u[i] >= 0:
            H[i, np.argmax(mask[i])] = u[i]
        else:
            H[i, mask[i]] = u[i] / math.sqrt(p[i])
    gain = float(np.dot(bderiv_wrt_params(J, H), u))
    return UpdateProposal(Direction(H), predicted_gain=gain)


def gain_identity_check(J: SupportSets, u, H) -> float:
    u = np.asarray(getattr(u, "entries", u), dtype=np.float64)
    H = np.asarray(getattr(H, "entries", H), dtype=np.float64)
    return abs(float(np.dot(bderiv_wrt_params(J, H), u)) - closed_form_gain(J, u))


def specialized_epsilon(W, x, J: SupportSets, u) -> float:
    """``min_{u_i < 0} eta_i sqrt(p_i) / |u_i|`` where ``eta_i`` is the row slack.

    ``inf`` when no row has a negative target or every such row has its
    whole input range in the support set.
    """
    u = np.asarray(getattr(u, "entries", u), dtype=np.float64)
    scores = np.asarray(W, dtype=np.float64) + np.asarray(x, dtype=np.float64)[None, :]
    best = math.inf
    for i in np.flatnonzero(u < 0):
        off = ~J.mask[i]
        if not off.any():
            continue
        top = scores[i, J.mask[i]].max()
        slack = top - scores[i, off].max()
        best = min(best, slack * math.sqrt(J.sizes[i]) / abs(u[i]))
    return best


def learning_rate_param(W, x, J: SupportSets, u, H, eta_max: float = DEFAULT_ETA_MAX) -> float:
    """Step for the candidate ``H``: the smaller of the specialized and general ranges, capped.

    For the candidate built by :func:`candidate_delta_W` the two ranges
    coincide; the general one also covers hand-made ``H``.
    """
    if eta_max <= 0:
        raise ValueError("eta_max must be positive")
    H = np.asarray(getattr(H, "entries", H), dtype=np.float64)
    general = affine_range_wrt_params(W, x, H, J).epsilon
    special = specialized_epsilon(W, x, J, u)
    return float(min(general, special, eta_max))


def propose_param_update(W, x, u, eta_max: float = DEFAULT_ETA_MAX, tie_tol: float = 0.0) -> UpdateProposal:
    """Candidate direction, its affine range and the chosen step in one call."""
    J = support_sets_wrt_params(W, x, tie_tol)
    prop = candidate_delta_W(J, u)
    if prop.direction.degenerate:
        return prop
    H = prop.direction.entries
    prop.epsilon = affine_range_wrt_params(W, x, H, J)
    prop.chosen_step = learning_rate_param(W, x, J, u, H, eta_max)
    return prop


def _normalized_or_degenerate(v: np.ndarray) -> Direction:
    nrm = np.linalg.norm(v)
    if nrm == 0:
        return Direction(np.zeros_like(v), degenerate=True)
    return Direction(v / nrm)


def message_candidate(J: SupportSets, u, unit_on_degenerate: bool = False) -> Direction:
    """``E^T u / ||E^T u||`` with ``E`` the 0/1 incidence matrix of the support sets.

    When ``E^T u`` vanishes the zero direction is returned, flagged
    degenerate. ``unit_on_degenerate`` instead returns the first basis
    vector, still flagged.
    """
    msg = _as_message(u)
    E = J.incidence()
    if msg.entries.shape != (E.shape[0],):
        raise ValueError(f"message has shape {msg.entries.shape}, expected ({E.shape[0]},)")
    d = _normalized_or_degenerate(E.T @ msg.entries)
    if d.degenerate and unit_on_degenerate:
        e = np.zeros(E.shape[1])
        e[0] = 1.0
        return Direction(e, degenerate=True)
    return d


def conv_candidate_delta_w(J_conv: SupportSets, u) -> Direction:
    """Tap direction for a convolutional dilation: same ``E^T u`` heuristic, ``E`` is n x p."""
    return message_candidate(J_conv, u)


def disjoint_message_candidate(J: SupportSets, u) -> Direction:
    """Row-wise construction for pairwise disjoint supports (max-pooling-like layers)."""
    if (J.mask.sum(axis=0) > 1).any():
        raise ValueError("support sets are not pairwise disjoint")
    msg = _as_message(u)
    h = np.zeros(J.shape[1])
    if msg.degenerate:
        return Direction(h, degenerate=True)
    for i, ui in enumerate(msg.entries):
        cols = np.flatnonzero(J.mask[i])
        if ui >= 0:
            h[cols[0]] = ui
        else:
            h[cols] = ui / math.sqrt(len(cols))
    return _normalized_or_degenerate(h)


@dataclass
class MessageAudit:
    degenerate: bool
    cond2: bool
    inner: float
    cond3_violations: int
    samples: int

    def as_dict(self) -> dict:
        return {
            "degenerate": self.degenerate,
            "cond2": self.cond2,
            "inner": self.inner,
            "cond3_violations": self.cond3_violations,
            "samples": self.samples,
        }


# inner products below -AUDIT_TOL count as violations; guards float noise only
AUDIT_TOL = 1e-12


def message_quality_audit(J: SupportSets, u, h, samples: int = 10_000, rng=None, seed: int = 0) -> MessageAudit:
    """Check the message ``h`` against the chain-rule conditions by sampling.

    ``cond2`` is ``<delta'(x; h), u> >= 0``. The third condition (every
    ``v`` with ``<v, h> >= 0`` also has ``<delta'(x; v), u> >= 0``) is
    estimated from ``samples`` random ``v`` folded into the half space.
    Nothing is asserted: the result is a report.
    """
    degenerate = isinstance(h, Direction) and h.degenerate
    h = np.asarray(getattr(h, "entries", h), dtype=np.float64)
    u = np.asarray(getattr(u, "entries", u), dtype=np.float64)
    if degenerate or np.linalg.norm(h) == 0 or np.linalg.norm(u) == 0:
        return MessageAudit(True, False, 0.0, 0, 0)
    inner = float(bderiv_wrt_input(J, h) @ u)
    if rng is None:
        rng = np.random.default_rng(seed)
    V = rng.standard_normal((samples, h.shape[0]))
    V[V @ h < 0] *= -1
    D = np.where(J.mask[None, :, :], V[:, None, :], -np.inf).max(axis=2)
    vals = D @ u
    return MessageAudit(
        degenerate=False,
        cond2=inner >= -AUDIT_TOL,
        inner=inner,
        cond3_violations=int(np.sum(vals < -AUDIT_TOL)),
        samples=samples,
    )


def _gain(J: SupportSets, u: np.ndarray, H: np.ndarray) -> float:
    return float(bderiv_wrt_params(J, H) @ u)


REFINE_TOL = 1e-14


def local_refine(J: SupportSets, u, H0, iters: int = 200, step: float = 0.25,
                 seed: int = 0, restarts: int = 0) -> Direction:
    """Hill-climb ``<delta'(W; H), u>`` on the unit sphere starting at ``H0``.

    Moves are single support entries and whole-row rescalings, each followed
    by renormalization; a move is kept only if it improves the gain by more
    than rounding noise (``REFINE_TOL``), so the result is never worse than
    ``H0`` and an already optimal ``H0`` comes back unchanged. With ``restarts > 0``
    extra climbs start from random perturbations of ``H0``.
    """
    u = np.asarray(getattr(u, "entries", u), dtype=np.float64)
    H0 = np.asarray(getattr(H0, "entries", H0), dtype=np.float64)
    if np.linalg.norm(H0) == 0:
        return Direction(H0.copy(), degenerate=True)
    rng = np.random.default_rng(seed)
    coords = np.argwhere(J.mask)
    m = J.shape[0]

    def climb(H):
        nrm = np.linalg.norm(H)
        if abs(nrm - 1.0) > 1e-12:
            H = H / nrm
        best = _gain(J, u, H)
        t = step
        for _ in range(iters):
            improved = False
            moves = [("row", i) for i in range(m)] + [("entry", tuple(c)) for c in coords]
            for k in rng.permutation(len(moves)):
                kind, where = moves[k]
                for sign in (1.0, -1.0):
                    C = H.copy()
                    if kind == "row":
                        C[where] *= 1.0 + sign * t
                    else:
                        C[where] += sign * t
                    nrm = np.linalg.norm(C)
                    if nrm == 0:
                        continue
                    C /= nrm
                    g = _gain(J, u, C)
                    if g > best + REFINE_TOL:
                        H, best, improved = C, g, True
                        break
            if not improved:
                t *= 0.5
                if t < 1e-10:
                    break
        return H, best

    H_best, g_best = climb(H0)
    for _ in range(restarts):
        H, g = climb(H0 + 0.1 * rng.standard_normal(H0.shape) * J.mask)
        if g > g_best:
            H_best, g_best = H, g
    return Direction(H_best)
