import json

import numpy as np
import pytest

from maxplusnet import bderiv as bd
from maxplusnet import chain
from maxplusnet import descent as ds
from maxplusnet.chain import (
    AntiDilation,
    AntiErosion,
    ConvDilation,
    DenseDilation,
    DenseErosion,
    LayerStack,
    Linear,
    ReLU,
    SquaredErrorLoss,
    StepPolicy,
)
from maxplusnet.maxplus import dilation_forward, maxplus_matmul
from maxplusnet.descent import TargetMessage


def dilation_stack(W, target):
    return LayerStack([DenseDilation(W), SquaredErrorLoss(target)])


def test_forward_examples(rng):
    x = np.array([0.3, -0.7])
    ident = np.array([[0.0, -1e9], [-1e9, 0.0]])
    assert chain.forward(dilation_stack(ident, x), x)[0] == 0.0
    for _ in range(20):
        A, B = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (2, 3))
        v = rng.uniform(-1, 1, 4)
        t = rng.normal(size=2)
        two = LayerStack([DenseDilation(A), DenseDilation(B), SquaredErrorLoss(t)])
        one = dilation_stack(maxplus_matmul(B, A), t)
        assert chain.forward(two, v)[0] == chain.forward(one, v)[0]
    W, b, t = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=2)
    loss, acts = chain.forward(LayerStack([Linear(W, b), SquaredErrorLoss(t)]), x)
    assert loss == pytest.approx(np.sum((W @ x + b - t) ** 2), abs=1e-14) and len(acts) == 3


def test_stack_validation():
    with pytest.raises(ValueError):
        LayerStack([DenseDilation(np.zeros((2, 3))), SquaredErrorLoss(np.zeros(3))])
    with pytest.raises(ValueError):
        LayerStack([DenseDilation(np.zeros((2, 3)))])
    with pytest.raises(ValueError):
        chain.forward(dilation_stack(np.zeros((2, 3)), np.zeros(2)), np.zeros(2))


def test_backward_delegates_to_candidate(rng):
    W, x, t = rng.uniform(-1, 1, (4, 5)), rng.uniform(0, 1, 5), rng.normal(size=4)
    stack = dilation_stack(W, t)
    _, acts = chain.forward(stack, x)
    trace = chain.backward(stack, acts)
    assert np.array_equal(trace.layers[-1].received.entries, [-1.0])
    u = trace.layers[0].received
    expected = ds.candidate_delta_W(bd.support_sets(W, x), u)
    assert np.array_equal(trace.layers[0].proposal.direction.entries, expected.direction.entries)
    assert np.allclose(u.entries, -(dilation_forward(W, x) - t) / np.linalg.norm(dilation_forward(W, x) - t))


def test_singleton_messages_are_selection_messages(rng):
    W1, W2 = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (2, 3))
    stack = LayerStack([DenseDilation(W1), DenseDilation(W2), SquaredErrorLoss(rng.normal(size=2))])
    x = rng.uniform(0, 1, 4)
    _, acts = chain.forward(stack, x)
    trace = chain.backward(stack, acts)
    J = bd.support_sets(W2, acts[1])
    assert J.is_singleton()
    E = J.incidence()
    u = trace.layers[1].received.entries
    assert np.allclose(trace.layers[1].sent.entries, E.T @ u / np.linalg.norm(E.T @ u), atol=1e-15)


def _classical(rng):
    return LayerStack([Linear(rng.normal(size=(5, 4)), rng.normal(size=5)), ReLU(5),
                       Linear(rng.normal(size=(3, 5)), rng.normal(size=3)), SquaredErrorLoss(rng.normal(size=3))])


def test_classical_directions_follow_gradient(rng):
    stack, x = _classical(rng), rng.normal(size=4)
    _, acts = chain.forward(stack, x)
    trace = chain.backward(stack, acts)
    for k in (0, 2):
        layer = stack.layers[k]
        theta = layer.get_params().copy()
        g = np.zeros_like(theta)
        for i in range(theta.size):
            for sgn in (1, -1):
                t = theta.copy()
                t[i] += sgn * 1e-6
                layer.set_params(t)
                g[i] += sgn * chain.forward(stack, x)[0]
        layer.set_params(theta)
        d = trace.layers[k].proposal.direction.entries
        assert -g @ d / np.linalg.norm(g) >= 1 - 1e-9


def test_classical_stack_has_no_violations(rng):
    for _ in range(10):
        stack, x = _classical(rng), rng.normal(size=4)
        rep = chain.train_step(stack, x, stack.loss_layer.target)
        assert not any(rep.param_violations + rep.message_violations + rep.propagation_violations)


def test_singleton_morphological_stack_has_no_violations(rng):
    for _ in range(30):
        stack = LayerStack([DenseDilation(rng.uniform(-1, 1, (4, 5))), DenseDilation(rng.uniform(-1, 1, (3, 4))),
                            SquaredErrorLoss(rng.normal(size=3))])
        rep = chain.train_step(stack, rng.uniform(0, 1, 5), stack.loss_layer.target)
        assert not any(rep.param_violations + rep.message_violations + rep.propagation_violations)
        if all(v is None or v >= 0 for v in rep.vu):
            assert rep.first_order_loss_change <= 1e-12


def test_single_layer_step_is_exact_and_descends(rng):
    for _ in range(50):
        W, x, t = rng.uniform(-1, 1, (4, 6)), rng.uniform(0, 1, 6), rng.normal(size=4)
        stack = dilation_stack(W.copy(), t)
        _, acts = chain.forward(stack, x)
        trace = chain.backward(stack, acts)
        steps = chain.choose_steps(stack, trace, StepPolicy())
        realized = chain.realized_directions(stack, trace, steps)
        rep = chain.apply_updates(stack, trace, StepPolicy())
        moved = dilation_forward(stack.layers[0].W, x) - acts[1]
        assert np.allclose(moved, realized[1], rtol=0, atol=1e-12)
        assert rep.gains[0] > 0 and rep.loss_after <= rep.loss_before * (1 + 1e-12)


def test_zero_residual_gives_no_update():
    W = np.array([[0.5, -0.25], [0.0, 1.0]])
    x = np.array([0.25, 0.5])
    stack = dilation_stack(W.copy(), dilation_forward(W, x))
    rep = chain.train_step(stack, x, dilation_forward(W, x))
    assert rep.degenerate[0] and rep.steps[0] == 0.0
    assert rep.loss_before == rep.loss_after == 0.0
    assert np.array_equal(stack.layers[0].W, W)


@pytest.mark.parametrize("make", [
    lambda r: DenseDilation(r.uniform(-1, 1, (3, 5))),
    lambda r: AntiDilation(r.uniform(-1, 1, (3, 5))),
    lambda r: DenseErosion(r.uniform(-1, 1, (5, 3))),
    lambda r: AntiErosion(r.uniform(-1, 1, (5, 3))),
    lambda r: ConvDilation(r.uniform(-1, 1, 3), 5),
])
def test_each_morphological_layer_descends(make, rng):
    for _ in range(20):
        layer = make(rng)
        stack = LayerStack([layer, SquaredErrorLoss(rng.normal(size=3))])
        rep = chain.train_step(stack, rng.uniform(0, 1, 5), stack.loss_layer.target)
        assert rep.gains[0] > 0
        assert not rep.param_violations[0]
        assert rep.loss_after <= rep.loss_before * (1 + 1e-12)


def test_joint_derivatives_match_finite_differences(rng):
    layers = [DenseDilation(rng.uniform(-1, 1, (3, 4))), DenseErosion(rng.uniform(-1, 1, (4, 3))),
              ConvDilation(rng.uniform(-1, 1, 2), 4), AntiDilation(rng.uniform(-1, 1, (3, 4)))]
    for layer in layers:
        x = rng.uniform(0, 1, layer.in_dim)
        h = rng.normal(size=layer.in_dim)
        D = rng.normal(size=np.shape(layer.get_params()))
        theta = layer.get_params().copy()
        a = 1e-7
        layer.set_params(theta + a * D)
        moved = layer.forward(x + a * h)
        layer.set_params(theta)
        assert np.allclose((moved - layer.forward(x)) / a, layer.joint_deriv(x, h, D), atol=1e-6)


def test_relu_at_zero():
    relu = ReLU(3)
    x = np.array([0.0, 1.0, -1.0])
    assert np.array_equal(relu.deriv_input(x, np.array([-2.0, -2.0, 5.0])), [0.0, -2.0, 0.0])
    assert np.array_equal(relu.deriv_input(x, np.array([3.0, 1.0, 1.0])), [3.0, 1.0, 0.0])
    m = relu.message(x, TargetMessage(np.array([0.6, 0.0, 0.8])), StepPolicy())
    assert np.array_equal(m.entries, [1.0, 0.0, 0.0])
    m = relu.message(x, TargetMessage(np.array([-0.6, 0.8, 0.0])), StepPolicy())
    assert np.array_equal(m.entries, [0.0, 1.0, 0.0])


def test_frozen_and_backtracking(rng):
    stack = LayerStack([DenseDilation(rng.uniform(-1, 1, (3, 4))), Linear(rng.normal(size=(2, 3))),
                        SquaredErrorLoss(rng.normal(size=2))])
    W0 = stack.layers[0].W.copy()
    rep = chain.train_step(stack, rng.uniform(0, 1, 4), stack.loss_layer.target,
                           StepPolicy(frozen=frozenset({0}), backtrack=True))
    assert rep.steps[0] == 0.0 and np.array_equal(stack.layers[0].W, W0)
    assert rep.loss_after <= rep.loss_before


def test_serialization_round_trip(rng):
    stack = LayerStack([
        ConvDilation(rng.normal(size=3), 9), DenseDilation(rng.normal(size=(5, 7))), AntiErosion(rng.normal(size=(5, 4))),
        DenseErosion(rng.normal(size=(4, 6))), AntiDilation(rng.normal(size=(3, 6))), Linear(rng.normal(size=(3, 3)), rng.normal(size=3)),
        ReLU(3), SquaredErrorLoss(rng.normal(size=3)),
    ])
    text = stack.to_json()
    back = LayerStack.from_json(text)
    assert back.to_json() == text
    for a, b in zip(stack.layers, back.layers):
        assert type(a) is type(b)
        if a.has_params:
            assert np.array_equal(a.get_params(), b.get_params())
    x = rng.normal(size=9)
    assert chain.forward(stack, x)[0] == chain.forward(back, x)[0]
    doc = json.loads(text)
    doc["version"] = 99
    with pytest.raises(ValueError):
        LayerStack.from_json(json.dumps(doc))
    with pytest.raises(ValueError):
        chain.layer_from_dict({"kind": "Pooling", "shape": [1]})


def test_dead_weights_never_move(rng):
    W = rng.uniform(-2, -1, (4, 4))
    stack = dilation_stack(W.copy(), np.zeros(4))
    hidden = rng.uniform(-1, 1, (4, 4))
    for _ in range(100):
        x = rng.uniform(0, 1, 4)
        before = stack.layers[0].W.copy()
        chain.train_step(stack, x, dilation_forward(hidden, x))
        dead = ~stack.ever_support[0]
        assert np.array_equal(stack.layers[0].W[dead], before[dead])
        assert np.array_equal(stack.layers[0].W[dead], W[dead])
    assert (~stack.ever_support[0]).any()


class PlainDilation(DenseDilation):
    """Same layer, but not eligible for the vectorized batch path."""


def test_fast_batch_path_matches_generic(rng):
    hidden = rng.uniform(-1, 1, (5, 6))
    W = np.zeros((5, 6))
    fast, slow = dilation_stack(W.copy(), np.zeros(5)), LayerStack([PlainDilation(W.copy()), SquaredErrorLoss(np.zeros(5))])
    for _ in range(40):
        X = rng.uniform(0, 1, (8, 6))
        Y = np.array([dilation_forward(hidden, x) for x in X])
        a = chain.train_step_batch(fast, X, Y)
        b = chain.train_step_batch(slow, X, Y)
        assert a[0] == pytest.approx(b[0], rel=1e-10, abs=1e-14)
        assert a[1] == pytest.approx(b[1], rel=1e-9, abs=1e-12)
        assert np.allclose(fast.layers[0].W, slow.layers[0].W, rtol=0, atol=1e-10)
        assert a[1] <= a[0] * (1 + 1e-12)
    assert np.array_equal(fast.ever_support[0], slow.ever_support[0])


def test_generic_batch_on_mixed_stack(rng):
    stack = LayerStack([DenseDilation(np.zeros((4, 3))), Linear(rng.normal(size=(2, 4))), SquaredErrorLoss(np.zeros(2))])
    X, Y = rng.uniform(0, 1, (6, 3)), rng.normal(size=(6, 2))
    before, after = chain.train_step_batch(stack, X, Y)
    assert np.isfinite(after) and after <= before * 1.5
