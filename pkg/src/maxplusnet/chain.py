"""Layer stacks trained by message passing with B-derivatives.

A stack is a list of layers ending with a scalar loss. ``backward`` walks it
from the loss down: each layer receives a unit target direction for its
output, proposes a unit parameter direction and sends a unit target
direction for its input to the layer below. ``apply_updates`` moves the
parameters, then sweeps the B-derivatives forward to record the realized
first-order displacement at every layer, which is what the property monitor
inspects.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import bderiv as bd
from . import descent as ds
from .descent import Direction, TargetMessage, UpdateProposal
from .maxplus import (
    anti_dilation_forward,
    anti_erosion_forward,
    conv_dilation_forward,
    dilation_forward,
    erosion_forward,
    linear_forward,
    relu_forward,
    squared_error_loss,
    windows_from_signal,
)

FORMAT_VERSION = 1
INF = math.inf


def _arr(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == object:
        return a.copy()
    return np.array(a, dtype=np.float64)


def _unit(v) -> Direction:
    v = np.asarray(v, dtype=np.float64)
    nrm = np.linalg.norm(v)
    if nrm == 0 or not np.isfinite(nrm):
        return Direction(np.zeros_like(v), degenerate=True)
    return Direction(v / nrm)


@dataclass
class StepPolicy:
    """How steps are chosen.

    ``eta_max`` caps every morphological step (affine ranges can be
    infinite). ``classical_lr`` is the fixed step of Linear layers.
    ``loss_aware`` scales all steps by a common factor in ``[0, 1]`` so the
    combined first-order displacement of the loss input stops at the
    minimizer of the squared loss along it. ``backtrack`` halves all steps while the realized loss
    on the sample goes up.
    """

    eta_max: float = ds.DEFAULT_ETA_MAX
    classical_lr: float = 0.05
    loss_aware: bool = True
    backtrack: bool = False
    max_halvings: int = 30
    tie_tol: float = 0.0
    unit_on_degenerate: bool = False
    frozen: frozenset = frozenset()


class Layer:
    kind = "Layer"
    has_params = False

    in_dim: int
    out_dim: int

    def forward(self, x):
        raise NotImplementedError

    def deriv_input(self, x, h):
        raise NotImplementedError

    def deriv_params(self, x, D):
        raise NotImplementedError

    def joint_deriv(self, x, h, D):
        """B-derivative in the joint direction (input ``h``, parameters ``D``)."""
        if D is None:
            return self.deriv_input(x, h)
        raise NotImplementedError

    def message(self, x, u: TargetMessage, policy: StepPolicy) -> Direction:
        raise NotImplementedError

    def propose(self, x, u: TargetMessage, policy: StepPolicy) -> UpdateProposal | None:
        return None

    def param_affine_range(self, x, D) -> float:
        return INF

    def get_params(self):
        return None

    def set_params(self, theta):
        pass

    def support_mask(self, x, tie_tol=0):
        """Parameter entries that attain a max/min at input ``x`` (``None`` if not morphological)."""
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError


class DenseDilation(Layer):
    kind = "DenseDilation"
    has_params = True

    def __init__(self, W):
        self.W = _arr(W)
        self.out_dim, self.in_dim = self.W.shape

    def _point(self, x):
        return x

    def forward(self, x):
        return dilation_forward(self.W, self._point(x))

    def supports(self, x, tie_tol=0):
        return bd.support_sets_wrt_params(self.W, self._point(x), tie_tol)

    def deriv_input(self, x, h):
        return bd.bderiv_wrt_input(self.supports(x), np.asarray(h))

    def deriv_params(self, x, D):
        return bd.bderiv_wrt_params(self.supports(x), D)

    def joint_deriv(self, x, h, D):
        J = self.supports(x)
        if D is None:
            return bd.bderiv_wrt_input(J, h)
        return np.where(J.mask, np.asarray(h)[None, :] + D, -INF).max(axis=1)

    def message(self, x, u, policy):
        J = self.supports(x, policy.tie_tol)
        return ds.message_candidate(J, u, policy.unit_on_degenerate)

    def propose(self, x, u, policy):
        xp = self._point(x)
        J = self.supports(x, policy.tie_tol)
        prop = ds.candidate_delta_W(J, u)
        if prop.direction.degenerate:
            return prop
        H = prop.direction.entries
        prop.epsilon = bd.affine_range_wrt_params(self.W, xp, H, J)
        prop.chosen_step = ds.learning_rate_param(self.W, xp, J, u, H, policy.eta_max)
        return prop

    def param_affine_range(self, x, D):
        return bd.affine_range_wrt_params(self.W, self._point(x), D).epsilon

    def get_params(self):
        return self.W

    def set_params(self, theta):
        self.W = _arr(theta)

    def support_mask(self, x, tie_tol=0):
        return self.supports(x, tie_tol).mask

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.W.shape), "weights": self.W.ravel().tolist()}


class AntiDilation(DenseDilation):
    """``x -> delta_W(-x)``."""

    kind = "AntiDilation"

    def _point(self, x):
        return -np.asarray(x)

    def deriv_input(self, x, h):
        return super().deriv_input(x, -np.asarray(h))

    def joint_deriv(self, x, h, D):
        return super().joint_deriv(x, -np.asarray(h), D)

    def message(self, x, u, policy):
        d = super().message(x, u, policy)
        return Direction(-d.entries, d.degenerate)


class DenseErosion(Layer):
    """``y -> (min_k y_k - w_kj)_j`` with ``W`` of shape (m, n): maps R^m to R^n.

    Parameter updates go through the duality with a dilation by ``W^T`` at
    ``-y`` with target ``-u``.
    """

    kind = "DenseErosion"
    has_params = True

    def __init__(self, W):
        self.W = _arr(W)
        self.in_dim, self.out_dim = self.W.shape

    def _point(self, x):
        return x

    def forward(self, x):
        return erosion_forward(self.W, self._point(x))

    def supports(self, x, tie_tol=0):
        return bd.erosion_support_sets(self.W, self._point(x), tie_tol)

    def deriv_input(self, x, h):
        return bd.erosion_bderiv_wrt_input(self.supports(x), np.asarray(h))

    def deriv_params(self, x, D):
        return bd.erosion_bderiv_wrt_params(self.supports(x), D)

    def joint_deriv(self, x, h, D):
        J = self.supports(x)
        if D is None:
            return bd.erosion_bderiv_wrt_input(J, h)
        return np.where(J.mask, np.asarray(h)[None, :] - np.asarray(D).T, INF).min(axis=1)

    def message(self, x, u, policy):
        return ds.message_candidate(self.supports(x, policy.tie_tol), u, policy.unit_on_degenerate)

    def propose(self, x, u, policy):
        yp = np.asarray(self._point(x), dtype=np.float64)
        J = self.supports(x, policy.tie_tol)
        neg = TargetMessage(-u.entries, u.degenerate)
        prop = ds.candidate_delta_W(J, neg)
        if prop.direction.degenerate:
            return prop
        Ht = prop.direction.entries
        H = Ht.T.copy()
        prop.direction = Direction(H)
        prop.predicted_gain = float(bd.erosion_bderiv_wrt_params(J, H) @ u.entries)
        prop.epsilon = bd.erosion_affine_range_wrt_params(self.W, yp, H, J)
        prop.chosen_step = ds.learning_rate_param(self.W.T, -yp, J, neg, Ht, policy.eta_max)
        return prop

    def param_affine_range(self, x, D):
        return bd.erosion_affine_range_wrt_params(self.W, self._point(x), D).epsilon

    def get_params(self):
        return self.W

    def set_params(self, theta):
        self.W = _arr(theta)

    def support_mask(self, x, tie_tol=0):
        return self.supports(x, tie_tol).mask.T

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.W.shape), "weights": self.W.ravel().tolist()}


class AntiErosion(DenseErosion):
    kind = "AntiErosion"

    def _point(self, x):
        return -np.asarray(x)

    def deriv_input(self, x, h):
        return super().deriv_input(x, -np.asarray(h))

    def joint_deriv(self, x, h, D):
        return super().joint_deriv(x, -np.asarray(h), D)

    def message(self, x, u, policy):
        d = super().message(x, u, policy)
        return Direction(-d.entries, d.degenerate)


class ConvDilation(Layer):
    """Valid-mode 1-D dilation of a signal of ``length`` samples by ``p`` taps."""

    kind = "ConvDilation"
    has_params = True

    def __init__(self, w, length: int):
        self.w = _arr(w)
        if self.w.ndim != 1:
            raise ValueError("taps must be 1-D")
        self.in_dim = int(length)
        self.out_dim = self.in_dim - self.w.shape[0] + 1
        if self.out_dim < 1:
            raise ValueError("signal shorter than the number of taps")

    def _blocks(self, x):
        return windows_from_signal(np.asarray(x), self.w.shape[0])

    def forward(self, x):
        return conv_dilation_forward(self.w, self._blocks(x))

    def supports(self, x, tie_tol=0):
        return bd.conv_support_sets(self.w, self._blocks(x), tie_tol)

    def deriv_input(self, x, h):
        return bd.conv_bderiv_wrt_signal(self.supports(x), h)

    def deriv_params(self, x, D):
        return bd.conv_bderiv_wrt_taps(self.supports(x), D)

    def joint_deriv(self, x, h, D):
        J = self.supports(x)
        hw = self._blocks(h)
        if D is not None:
            hw = hw + np.asarray(D)[None, :]
        return np.where(J.mask, hw, -INF).max(axis=1)

    def signal_incidence(self, J):
        E = np.zeros((self.out_dim, self.in_dim))
        for i, j in np.argwhere(J.mask):
            E[i, i + j] = 1.0
        return E

    def message(self, x, u, policy):
        J = self.supports(x, policy.tie_tol)
        E = self.signal_incidence(J)
        return _unit(E.T @ u.entries) if not u.degenerate else Direction(np.zeros(self.in_dim), True)

    def propose(self, x, u, policy):
        J = self.supports(x, policy.tie_tol)
        d = ds.conv_candidate_delta_w(J, u)
        prop = UpdateProposal(d, predicted_gain=0.0)
        if d.degenerate:
            return prop
        prop.predicted_gain = float(bd.conv_bderiv_wrt_taps(J, d.entries) @ u.entries)
        prop.epsilon = bd.conv_affine_range_wrt_taps(self.w, self._blocks(x), d.entries, J)
        prop.chosen_step = float(min(prop.epsilon.epsilon, policy.eta_max))
        return prop

    def param_affine_range(self, x, D):
        return bd.conv_affine_range_wrt_taps(self.w, self._blocks(x), D).epsilon

    def get_params(self):
        return self.w

    def set_params(self, theta):
        self.w = _arr(theta)

    def support_mask(self, x, tie_tol=0):
        return self.supports(x, tie_tol).mask.any(axis=0)

    def to_dict(self):
        return {"kind": self.kind, "shape": [self.w.shape[0], self.in_dim], "weights": self.w.tolist()}


class Linear(Layer):
    """``x -> W x + b``; parameter directions are flat vectors ``[vec(dW), db]``."""

    kind = "Linear"
    has_params = True

    def __init__(self, W, b=None):
        self.W = _arr(W)
        self.out_dim, self.in_dim = self.W.shape
        self.b = _arr(np.zeros(self.out_dim) if b is None else b)

    def _split(self, D):
        D = np.asarray(D)
        k = self.W.size
        return D[:k].reshape(self.W.shape), D[k:]

    def forward(self, x):
        return linear_forward(self.W, self.b, x)

    def deriv_input(self, x, h):
        return self.W @ np.asarray(h)

    def deriv_params(self, x, D):
        dW, db = self._split(D)
        return dW @ np.asarray(x) + db

    def joint_deriv(self, x, h, D):
        out = self.W @ np.asarray(h)
        if D is not None:
            out = out + self.deriv_params(x, D)
        return out

    def message(self, x, u, policy):
        return _unit(self.W.T @ u.entries)

    def propose(self, x, u, policy):
        g = np.concatenate([np.outer(u.entries, np.asarray(x, dtype=np.float64)).ravel(), u.entries])
        d = _unit(g)
        prop = UpdateProposal(d, predicted_gain=float(np.linalg.norm(g)))
        prop.chosen_step = 0.0 if d.degenerate else policy.classical_lr
        return prop

    def get_params(self):
        return np.concatenate([self.W.ravel(), self.b])

    def set_params(self, theta):
        theta = _arr(theta)
        self.W, self.b = theta[: self.W.size].reshape(self.W.shape), theta[self.W.size:]

    def to_dict(self):
        return {"kind": self.kind, "shape": list(self.W.shape),
                "weights": self.W.ravel().tolist(), "bias": self.b.tolist()}


class ReLU(Layer):
    kind = "ReLU"

    def __init__(self, dim: int):
        self.in_dim = self.out_dim = int(dim)

    def forward(self, x):
        return relu_forward(x)

    def deriv_input(self, x, h):
        x = np.asarray(x)
        h = np.asarray(h)
        return np.where(x > 0, h, np.where(x < 0, h * 0, np.maximum(h, h * 0)))

    def message(self, x, u, policy):
        x = np.asarray(x)
        keep = (x > 0) | ((x == 0) & (u.entries > 0))
        return _unit(np.where(keep, u.entries, 0.0))

    def to_dict(self):
        return {"kind": self.kind, "shape": [self.in_dim]}


class SquaredErrorLoss(Layer):
    """``x -> ||x - target||^2``, returned as a length-1 array."""

    kind = "SquaredErrorLoss"

    def __init__(self, target):
        self.target = _arr(target)
        self.in_dim = self.target.shape[0]
        self.out_dim = 1

    def forward(self, x):
        return np.array([squared_error_loss(x, self.target)], dtype=np.asarray(x).dtype)

    def residual(self, x):
        return np.asarray(x) - self.target

    def deriv_input(self, x, h):
        return np.array([2 * (self.residual(x) * np.asarray(h)).sum()], dtype=np.asarray(h).dtype)

    def message(self, x, u, policy):
        return _unit(u.entries[0] * 2.0 * np.asarray(self.residual(x), dtype=np.float64))

    def to_dict(self):
        return {"kind": self.kind, "shape": [self.in_dim], "target": self.target.tolist()}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (DenseDilation, DenseErosion, AntiDilation, AntiErosion, ConvDilation, Linear, ReLU, SquaredErrorLoss)
}


def layer_from_dict(d: dict) -> Layer:
    kind = d.get("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    shape = d["shape"]
    if kind in ("DenseDilation", "DenseErosion", "AntiDilation", "AntiErosion"):
        return LAYER_KINDS[kind](np.array(d["weights"], dtype=np.float64).reshape(shape))
    if kind == "ConvDilation":
        return ConvDilation(np.array(d["weights"], dtype=np.float64), shape[1])
    if kind == "Linear":
        return Linear(np.array(d["weights"], dtype=np.float64).reshape(shape), d["bias"])
    if kind == "ReLU":
        return ReLU(shape[0])
    return SquaredErrorLoss(d["target"])


class LayerStack:
    """Ordered layers, the last one a :class:`SquaredErrorLoss`."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("empty stack")
        if not isinstance(layers[-1], SquaredErrorLoss):
            raise ValueError("the last layer must be the loss")
        for k in range(len(layers) - 1):
            if layers[k].out_dim != layers[k + 1].in_dim:
                raise ValueError(
                    f"layer {k} ({layers[k].kind}) outputs {layers[k].out_dim} values, "
                    f"layer {k + 1} ({layers[k + 1].kind}) expects {layers[k + 1].in_dim}"
                )
        self.layers = layers
        self.ever_support: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.layers)

    @property
    def loss_layer(self) -> SquaredErrorLoss:
        return self.layers[-1]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    def set_target(self, target):
        self.loss_layer.target = _arr(target)

    def to_json(self) -> str:
        doc = {"version": FORMAT_VERSION, "layers": [layer.to_dict() for layer in self.layers]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LayerStack":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        return cls([layer_from_dict(d) for d in doc["layers"]])


def forward(stack: LayerStack, x) -> tuple[object, list]:
    """Evaluate the stack, returning the loss and all activations ``[x_1, ..., x_{L+1}]``."""
    xs = [np.asarray(x)]
    for k, layer in enumerate(stack.layers):
        if xs[-1].shape != (layer.in_dim,):
            raise ValueError(f"layer {k} ({layer.kind}) expects {layer.in_dim} inputs, got {xs[-1].shape}")
        xs.append(layer.forward(xs[-1]))
    return xs[-1][0], xs


@dataclass
class LayerTrace:
    received: TargetMessage
    proposal: UpdateProposal | None
    sent: Direction | None


@dataclass
class BackwardTrace:
    activations: list
    layers: list[LayerTrace]


def backward(stack: LayerStack, activations: list, policy: StepPolicy | None = None) -> BackwardTrace:
    """Propagate target messages from the loss down and collect parameter proposals."""
    policy = policy or StepPolicy()
    L = len(stack.layers)
    traces: list[LayerTrace | None] = [None] * L
    u = TargetMessage(np.array([-1.0]))
    for k in range(L - 1, -1, -1):
        layer = stack.layers[k]
        x = activations[k]
        prop = None
        if layer.has_params:
            prop = layer.propose(x, u, policy)
            mask = layer.support_mask(x, policy.tie_tol)
            if mask is not None:
                prev = stack.ever_support.get(k)
                stack.ever_support[k] = mask.copy() if prev is None else (prev | mask)
        sent = layer.message(x, u, policy) if k > 0 else None
        traces[k] = LayerTrace(received=u, proposal=prop, sent=sent)
        if sent is not None:
            u = TargetMessage(sent.entries, sent.degenerate)
    return BackwardTrace(activations=activations, layers=traces)


@dataclass
class StepReport:
    loss_before: float
    loss_after: float
    steps: list
    gains: list
    vu: list
    degenerate: list
    param_violations: list
    message_violations: list
    propagation_violations: list
    first_order_loss_change: float
    halvings: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def decreased(self) -> bool:
        return self.loss_after <= self.loss_before


def _loss_aware_scale(stack: LayerStack, trace: BackwardTrace, realized: list) -> float:
    """Common factor in ``[0, 1]`` for all steps: the loss minimizer along the realized displacement.

    ``realized[-2]`` is the first-order displacement of the loss input. A
    non-positive minimizer means the combined update raises the loss to first
    order, and the factor is 0.
    """
    d = np.asarray(realized[-2], dtype=np.float64)
    dd = float(d @ d)
    if dd == 0:
        return 1.0
    r = np.asarray(stack.loss_layer.residual(trace.activations[-2]), dtype=np.float64)
    best = -float(r @ d) / dd
    return min(1.0, best) if best > 0 else 0.0


def choose_steps(stack: LayerStack, trace: BackwardTrace, policy: StepPolicy) -> list[float]:
    steps = []
    for k, (layer, lt) in enumerate(zip(stack.layers, trace.layers)):
        prop = lt.proposal
        if prop is None or prop.direction.degenerate or k in policy.frozen:
            steps.append(0.0)
            continue
        steps.append(float(prop.chosen_step))
    if policy.loss_aware:
        scale = _loss_aware_scale(stack, trace, realized_directions(stack, trace, steps))
        if scale < 1.0:
            steps = [s * scale for s in steps]
    return steps


def realized_directions(stack: LayerStack, trace: BackwardTrace, steps: list[float]) -> list:
    """First-order displacement of every activation caused by the scaled updates.

    ``d_1 = 0``; ``d_{k+1}`` is the joint B-derivative of layer ``k`` at its
    cached point in the direction (``d_k``, ``step_k * dtheta_k``).
    """
    d = np.zeros_like(np.asarray(trace.activations[0], dtype=np.float64))
    out = [d]
    for k, layer in enumerate(stack.layers):
        prop = trace.layers[k].proposal
        D = None
        if prop is not None and steps[k] > 0:
            D = steps[k] * prop.direction.entries
        d = np.asarray(layer.joint_deriv(trace.activations[k], d, D), dtype=np.float64)
        out.append(d)
    return out


def _apply(stack: LayerStack, trace: BackwardTrace, steps: list[float], sign: float = 1.0):
    for k, layer in enumerate(stack.layers):
        prop = trace.layers[k].proposal
        if prop is not None and steps[k] > 0:
            layer.set_params(layer.get_params() + sign * steps[k] * prop.direction.entries)


def property_monitor(stack: LayerStack, trace: BackwardTrace, realized: list, tol: float = 1e-12) -> dict:
    """Count layers where the chain-rule sign conditions fail.

    * parameter: ``<f'(theta_k; dtheta_k), u_{k+1}> < 0``
    * message: ``<f'(x_k; u_k), u_{k+1}> < 0``
    * propagation: ``<v_k, u_k> >= 0`` but ``<f'(x_k; v_k), u_{k+1}> < 0``

    ``v_k`` is the realized displacement of the input of layer ``k``.
    """
    param, message, prop_v, vu = [], [], [], []
    for k, layer in enumerate(stack.layers):
        lt = trace.layers[k]
        x = trace.activations[k]
        u_next = lt.received.entries
        p_bad = False
        if lt.proposal is not None and not lt.proposal.direction.degenerate:
            g = np.asarray(layer.deriv_params(x, lt.proposal.direction.entries), dtype=np.float64)
            p_bad = float(g @ u_next) < -tol
        param.append(p_bad)
        m_bad = False
        if lt.sent is not None and not lt.sent.degenerate:
            g = np.asarray(layer.deriv_input(x, lt.sent.entries), dtype=np.float64)
            m_bad = float(g @ u_next) < -tol
        message.append(m_bad)
        v = realized[k]
        u_k = trace.layers[k - 1].received.entries if k > 0 else None
        if u_k is None:
            vu.append(None)
            prop_v.append(False)
            continue
        inner = float(v @ u_k)
        vu.append(inner)
        out = float(np.asarray(layer.deriv_input(x, v), dtype=np.float64) @ u_next)
        prop_v.append(inner >= -tol and out < -tol and np.linalg.norm(v) > 0)
    return {
        "param_violations": param,
        "message_violations": message,
        "propagation_violations": prop_v,
        "vu": vu,
    }


def apply_updates(stack: LayerStack, trace: BackwardTrace, policy: StepPolicy | None = None) -> StepReport:
    """Move the parameters along the proposals and report what happened."""
    policy = policy or StepPolicy()
    x0 = trace.activations[0]
    loss_before = float(trace.activations[-1][0])
    steps = choose_steps(stack, trace, policy)
    realized = realized_directions(stack, trace, steps)
    mon = property_monitor(stack, trace, realized)
    _apply(stack, trace, steps)
    loss_after = float(forward(stack, x0)[0])
    halvings = 0
    if policy.backtrack:
        while loss_after > loss_before and halvings < policy.max_halvings and any(s > 0 for s in steps):
            _apply(stack, trace, steps, sign=-1.0)
            steps = [s / 2 for s in steps]
            _apply(stack, trace, steps)
            loss_after = float(forward(stack, x0)[0])
            halvings += 1
        if halvings:
            realized = realized_directions(stack, trace, steps)
            mon = property_monitor(stack, trace, realized)
    gains = []
    for lt in trace.layers:
        gains.append(None if lt.proposal is None else float(lt.proposal.predicted_gain))
    return StepReport(
        loss_before=loss_before,
        loss_after=loss_after,
        steps=steps,
        gains=gains,
        vu=mon["vu"],
        degenerate=[bool(lt.proposal is not None and lt.proposal.direction.degenerate) for lt in trace.layers],
        param_violations=mon["param_violations"],
        message_violations=mon["message_violations"],
        propagation_violations=mon["propagation_violations"],
        first_order_loss_change=float(realized[-1][0]),
        halvings=halvings,
    )


def train_step(stack: LayerStack, x, target, policy: StepPolicy | None = None) -> StepReport:
    """One per-sample forward / backward / update cycle."""
    policy = policy or StepPolicy()
    stack.set_target(target)
    _, xs = forward(stack, x)
    trace = backward(stack, xs, policy)
    return apply_updates(stack, trace, policy)


def train_step_batch(stack: LayerStack, xs, targets, policy: StepPolicy | None = None) -> tuple[float, float]:
    """Mini-batch step: averaged unit directions, smallest affine range over the batch.

    Every sample's output moves along its first-order prediction, and the
    loss-aware factor minimizes the summed loss along those displacements
    (exactly so for a single morphological layer). Returns the
    mean batch loss before and after the update.
    """
    policy = policy or StepPolicy()
    if len(stack.layers) == 2 and type(stack.layers[0]) is DenseDilation:
        return _dense_dilation_batch_step(stack, np.asarray(xs, dtype=np.float64),
                                          np.asarray(targets, dtype=np.float64), policy)
    L = len(stack.layers)
    sums = [None] * L
    cached = []
    before = 0.0
    for x, t in zip(xs, targets):
        stack.set_target(t)
        loss, acts = forward(stack, x)
        before += float(loss)
        trace = backward(stack, acts, policy)
        cached.append((np.asarray(t), acts))
        for k, lt in enumerate(trace.layers):
            if lt.proposal is not None and not lt.proposal.direction.degenerate:
                e = lt.proposal.direction.entries
                sums[k] = e.copy() if sums[k] is None else sums[k] + e
    dirs, steps = [None] * L, [0.0] * L
    for k, layer in enumerate(stack.layers):
        if sums[k] is None or k in policy.frozen:
            continue
        d = _unit(sums[k])
        if d.degenerate:
            continue
        dirs[k] = d.entries
        if isinstance(layer, Linear):
            steps[k] = policy.classical_lr
        else:
            steps[k] = min([layer.param_affine_range(acts[k], d.entries) for _, acts in cached] + [policy.eta_max])
    if policy.loss_aware:
        num = den = 0.0
        for t, acts in cached:
            d = np.zeros(np.shape(acts[0]))
            for k, layer in enumerate(stack.layers[:-1]):
                D = None if dirs[k] is None or steps[k] == 0 else steps[k] * dirs[k]
                d = np.asarray(layer.joint_deriv(acts[k], d, D), dtype=np.float64)
            num += float((acts[-2] - t) @ d)
            den += float(d @ d)
        if den > 0:
            star = -num / den
            scale = min(1.0, star) if star > 0 else 0.0
            steps = [s * scale for s in steps]
    for k, layer in enumerate(stack.layers):
        if dirs[k] is not None and steps[k] > 0:
            layer.set_params(layer.get_params() + steps[k] * dirs[k])
    after = 0.0
    for x, t in zip(xs, targets):
        stack.set_target(t)
        after += float(forward(stack, x)[0])
    n = max(len(xs), 1)
    return before / n, after / n


def _dense_dilation_batch_step(stack: LayerStack, X: np.ndarray, Y: np.ndarray, policy: StepPolicy):
    """Vectorized :func:`train_step_batch` for a lone dense dilation followed by the loss."""
    layer = stack.layers[0]
    W = layer.W
    m, n = W.shape
    scores = W[None, :, :] + X[:, None, :]
    top = scores.max(axis=2)
    if policy.tie_tol:
        mask = scores >= (top - policy.tie_tol)[:, :, None]
    else:
        mask = scores == top[:, :, None]
    r = top - Y
    before = float((r * r).sum(axis=1).mean())
    norms = np.sqrt((r * r).sum(axis=1))
    live = norms > 0
    if not live.any() or 0 in policy.frozen:
        return before, before
    u = -r[live] / norms[live, None]
    mk = mask[live]
    p = mk.sum(axis=2)
    first = np.zeros_like(mk)
    np.put_along_axis(first, mk.argmax(axis=2)[:, :, None], True, axis=2)
    H = np.where(u[:, :, None] >= 0, first * u[:, :, None], mk * (u / np.sqrt(p))[:, :, None])
    stack.ever_support[0] = stack.ever_support.get(0, np.zeros((m, n), bool)) | mask.any(axis=0)
    total = H.sum(axis=0)
    nrm = np.linalg.norm(total)
    if nrm == 0:
        return before, before
    D = total / nrm
    best = np.where(mask, D[None], -INF).max(axis=2)
    comp = ~mask & (D[None] > best[:, :, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(comp, (top[:, :, None] - scores) / (D[None] - best[:, :, None]), INF)
    step = min(float(ratio.min()), policy.eta_max)
    if policy.loss_aware:
        den = float((best * best).sum())
        if den > 0:
            star = -float((r * best).sum()) / den
            step = min(step, star) if star > 0 else 0.0
    layer.W = W + step * D
    r2 = (layer.W[None, :, :] + X[:, None, :]).max(axis=2) - Y
    return before, float((r2 * r2).sum(axis=1).mean())
