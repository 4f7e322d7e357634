"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The backend is picked once at import time from the MODELMARKET_BACKEND
environment variable:

    auto   (default) use numba when importable, else numpy
    numba  require the jitted path, fail loudly if numba is missing
    numpy  force the pure-numpy path

Every kernel exists in both variants with identical semantics; the
benchmark in benchmarks/bench_kernels.py compares them. All arrays are
C-contiguous float64.
"""

from __future__ import annotations

import math
import os

import numpy as np

ACT_IDENTITY = 0
ACT_TANH = 1
ACT_RELU = 2

_REQUESTED = os.environ.get("MODELMARKET_BACKEND", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"MODELMARKET_BACKEND must be one of auto|numba|numpy, got {_REQUESTED!r}"
    )

_HAVE_NUMBA = False
if _REQUESTED in ("auto", "numba"):
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:
        if _REQUESTED == "numba":
            raise RuntimeError("MODELMARKET_BACKEND=numba but numba is not importable")

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy variants
# ---------------------------------------------------------------------------

def _apply_act_np(pre: np.ndarray, act_id: int) -> np.ndarray:
    if act_id == ACT_TANH:
        return np.tanh(pre)
    if act_id == ACT_RELU:
        return np.maximum(pre, 0.0)
    return pre


def _affine_act_np(x, w, b, act_id):
    return _apply_act_np(x @ w + b, act_id)


def _act_grad_np(a, act_id):
    # derivative expressed through the activation output
    if act_id == ACT_TANH:
        return 1.0 - a * a
    if act_id == ACT_RELU:
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


def _layer_backward_np(x, a, w, g, act_id):
    delta = g * _act_grad_np(a, act_id)
    dw = x.T @ delta
    db = delta.sum(axis=0)
    dx = delta @ w.T
    return dw, db, dx


def _layer_backward_input_np(a, w, g, act_id):
    delta = g * _act_grad_np(a, act_id)
    return delta @ w.T


def _slot_softmax_np(scores):
    # softmax over the last axis of (batch, items, slots)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _slot_softmax_grad_np(probs, dprobs):
    inner = (probs * dprobs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# numba variants
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def _affine_act_nb(x, w, b, act_id):
        out = np.dot(x, w)
        rows, cols = out.shape
        for i in range(rows):
            for j in range(cols):
                v = out[i, j] + b[j]
                if act_id == ACT_TANH:
                    v = math.tanh(v)
                elif act_id == ACT_RELU:
                    if v < 0.0:
                        v = 0.0
                out[i, j] = v
        return out

    @njit(cache=True)
    def _delta_from_output_nb(a, g, act_id):
        rows, cols = a.shape
        delta = np.empty((rows, cols), dtype=np.float64)
        for i in range(rows):
            for j in range(cols):
                if act_id == ACT_TANH:
                    delta[i, j] = g[i, j] * (1.0 - a[i, j] * a[i, j])
                elif act_id == ACT_RELU:
                    delta[i, j] = g[i, j] if a[i, j] > 0.0 else 0.0
                else:
                    delta[i, j] = g[i, j]
        return delta

    @njit(cache=True)
    def _layer_backward_nb(x, a, w, g, act_id):
        delta = _delta_from_output_nb(a, g, act_id)
        dw = np.dot(np.ascontiguousarray(x.T), delta)
        db = np.zeros(delta.shape[1], dtype=np.float64)
        for i in range(delta.shape[0]):
            for j in range(delta.shape[1]):
                db[j] += delta[i, j]
        dx = np.dot(delta, np.ascontiguousarray(w.T))
        return dw, db, dx

    @njit(cache=True)
    def _layer_backward_input_nb(a, w, g, act_id):
        delta = _delta_from_output_nb(a, g, act_id)
        return np.dot(delta, np.ascontiguousarray(w.T))

    @njit(cache=True)
    def _slot_softmax_nb(scores):
        batch, items, slots = scores.shape
        probs = np.empty((batch, items, slots), dtype=np.float64)
        for b in range(batch):
            for m in range(items):
                hi = scores[b, m, 0]
                for s in range(1, slots):
                    if scores[b, m, s] > hi:
                        hi = scores[b, m, s]
                total = 0.0
                for s in range(slots):
                    e = math.exp(scores[b, m, s] - hi)
                    probs[b, m, s] = e
                    total += e
                for s in range(slots):
                    probs[b, m, s] /= total
        return probs

    @njit(cache=True)
    def _slot_softmax_grad_nb(probs, dprobs):
        batch, items, slots = probs.shape
        out = np.empty((batch, items, slots), dtype=np.float64)
        for b in range(batch):
            for m in range(items):
                inner = 0.0
                for s in range(slots):
                    inner += probs[b, m, s] * dprobs[b, m, s]
                for s in range(slots):
                    out[b, m, s] = probs[b, m, s] * (dprobs[b, m, s] - inner)
        return out

    @njit(cache=True)
    def _sigmoid_nb(x):
        flat = x.ravel()
        out = np.empty(flat.shape[0], dtype=np.float64)
        for i in range(flat.shape[0]):
            v = flat[i]
            if v >= 0.0:
                out[i] = 1.0 / (1.0 + math.exp(-v))
            else:
                e = math.exp(v)
                out[i] = e / (1.0 + e)
        return out.reshape(x.shape)


if BACKEND == "numba":
    affine_act = _affine_act_nb
    layer_backward = _layer_backward_nb
    layer_backward_input = _layer_backward_input_nb
    slot_softmax = _slot_softmax_nb
    slot_softmax_grad = _slot_softmax_grad_nb
    sigmoid_kernel = _sigmoid_nb
else:
    affine_act = _affine_act_np
    layer_backward = _layer_backward_np
    layer_backward_input = _layer_backward_input_np
    slot_softmax = _slot_softmax_np
    slot_softmax_grad = _slot_softmax_grad_np
    sigmoid_kernel = _sigmoid_np


def numpy_kernels():
    """The pure-numpy kernel set, regardless of the active backend (for benchmarks/tests)."""
    return {
        "affine_act": _affine_act_np,
        "layer_backward": _layer_backward_np,
        "layer_backward_input": _layer_backward_input_np,
        "slot_softmax": _slot_softmax_np,
        "slot_softmax_grad": _slot_softmax_grad_np,
        "sigmoid_kernel": _sigmoid_np,
    }


def numba_kernels():
    """The jitted kernel set, or None when numba is unavailable."""
    if not _HAVE_NUMBA:
        return None
    return {
        "affine_act": _affine_act_nb,
        "layer_backward": _layer_backward_nb,
        "layer_backward_input": _layer_backward_input_nb,
        "slot_softmax": _slot_softmax_nb,
        "slot_softmax_grad": _slot_softmax_grad_nb,
        "sigmoid_kernel": _sigmoid_nb,
    }


def warmup():
    """Trigger JIT compilation of every kernel on tiny inputs (no-op on numpy)."""
    x = np.ones((2, 3))
    w = np.ones((3, 2))
    b = np.zeros(2)
    for act in (ACT_IDENTITY, ACT_TANH, ACT_RELU):
        a = affine_act(x, w, b, act)
        layer_backward(x, a, w, a, act)
        layer_backward_input(a, w, a, act)
    s = np.ones((2, 2, 3))
    slot_softmax_grad(slot_softmax(s), s)
    sigmoid_kernel(np.linspace(-1, 1, 4))
