"""Max-plus / min-plus algebra and forward evaluation of morphological layers.

All functions are written against plain numpy operations (add, max, min) so
they work on float64 arrays and equally on object arrays of
``fractions.Fraction``; the latter is how exact identities are verified.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "dilation_forward",
    "erosion_forward",
    "maxplus_matmul",
    "pointwise_max_reduce",
    "anti_dilation_forward",
    "anti_erosion_forward",
    "conv_dilation_forward",
    "windows_from_signal",
    "toeplitz_from_taps",
    "linear_forward",
    "relu_forward",
    "squared_error_loss",
]


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        a = a.astype(np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    return a


def _as_vector(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        a = a.astype(np.float64)
    if a.ndim != 1 or a.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty 1-D array, got shape {a.shape}")
    return a


def dilation_forward(W, x) -> np.ndarray:
    """Dense dilation ``y_i = max_k (x_k + w_ik)``.

    >>> dilation_forward([[1.0, -1.0], [0.0, 2.0]], [0.0, 1.0])
    array([1., 3.])
    """
    W = _as_matrix(W, "W")
    x = _as_vector(x, "x")
    if W.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: W is {W.shape}, x has {x.shape[0]} entries")
    return (x[None, :] + W).max(axis=1)


def erosion_forward(W, y) -> np.ndarray:
    """Dense erosion ``x_j = min_k (y_k - w_kj)``, the adjoint of the dilation by ``W``."""
    W = _as_matrix(W, "W")
    y = _as_vector(y, "y")
    if W.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: W is {W.shape}, y has {y.shape[0]} entries")
    return (y[:, None] - W).min(axis=0)


def maxplus_matmul(A, B) -> np.ndarray:
    """Max-plus matrix product ``C_ij = max_k (A_ik + B_kj)``."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[1] != B.shape[0]:
        raise ValueError(f"dimension mismatch: A is {A.shape}, B is {B.shape}")
    return (A[:, :, None] + B[None, :, :]).max(axis=1)


def pointwise_max_reduce(Ws) -> np.ndarray:
    """Collapse a list of same-shape dilation weights into a single one.

    The dilation by the result equals the componentwise max of the
    individual dilations.
    """
    Ws = [_as_matrix(W, "W") for W in Ws]
    if not Ws:
        raise ValueError("pointwise_max_reduce needs at least one matrix")
    shape = Ws[0].shape
    for W in Ws[1:]:
        if W.shape != shape:
            raise ValueError(f"shape mismatch: {W.shape} vs {shape}")
    return np.stack(Ws).max(axis=0)


def anti_dilation_forward(W, x) -> np.ndarray:
    return dilation_forward(W, -_as_vector(x, "x"))


def anti_erosion_forward(W, x) -> np.ndarray:
    return erosion_forward(W, -_as_vector(x, "x"))


def conv_dilation_forward(w, X) -> np.ndarray:
    """Translation-invariant dilation on block input ``X`` (n x p) with taps ``w`` (p)."""
    w = _as_vector(w, "w")
    X = _as_matrix(X, "X")
    if X.shape[1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: X is {X.shape}, w has {w.shape[0]} taps")
    return (X + w[None, :]).max(axis=1)


def windows_from_signal(signal, p: int) -> np.ndarray:
    """Stack the "valid" sliding windows of width ``p`` as rows."""
    signal = _as_vector(signal, "signal")
    if p < 1:
        raise ValueError("window width must be >= 1")
    if signal.shape[0] < p:
        raise ValueError(f"signal of length {signal.shape[0]} is shorter than window {p}")
    n = signal.shape[0] - p + 1
    idx = np.arange(n)[:, None] + np.arange(p)[None, :]
    return signal[idx]


def toeplitz_from_taps(w, length: int, fill: float = -1e9) -> np.ndarray:
    """Dense weights equivalent to the valid-mode conv dilation of a signal of ``length``.

    Entries outside the band get ``fill``, a large negative finite value
    standing in for ``-inf``.
    """
    w = _as_vector(w, "w")
    p = w.shape[0]
    n = length - p + 1
    if n < 1:
        raise ValueError("signal shorter than the number of taps")
    W = np.full((n, length), fill, dtype=w.dtype)
    for i in range(n):
        W[i, i:i + p] = w
    return W


def linear_forward(W, b, x) -> np.ndarray:
    W = _as_matrix(W, "W")
    x = _as_vector(x, "x")
    b = _as_vector(b, "b")
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: W {W.shape}, b {b.shape}, x {x.shape}")
    return W @ x + b


def relu_forward(x) -> np.ndarray:
    x = _as_vector(x, "x")
    return np.where(x > 0, x, x * 0)


def squared_error_loss(x, target):
    """``||x - target||^2`` as a scalar."""
    x = _as_vector(x, "x")
    target = _as_vector(target, "target")
    if x.shape != target.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs target {target.shape}")
    r = x - target
    return (r * r).sum()
