"""Dense feedforward network engine with reverse-mode gradients.

Sized for the tiny networks this project trains (auction mechanisms and
blob classifiers): float64 throughout, batched on a leading axis, and
gradients flow to the *input* as well as to parameters so callers can
optimize over inputs. Hot per-layer math lives in .kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import kernels

ACTIVATIONS = {"identity": kernels.ACT_IDENTITY,
               "tanh": kernels.ACT_TANH,
               "relu": kernels.ACT_RELU}


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray   # (n_in, n_out)
    bias: np.ndarray      # (n_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"layer shape mismatch: weights {self.weights.shape}, bias {self.bias.shape}"
            )


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a net needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weights.shape[1] != nxt.weights.shape[0]:
                raise ValueError(
                    f"layer dims do not chain: {prev.weights.shape} -> {nxt.weights.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    @property
    def n_params(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)


def init_net(dims: Sequence[int], hidden_activation: str = "tanh",
             output_activation: str = "identity", *,
             rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform initialized net with the given layer widths."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        bound = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        act = output_activation if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(w, np.zeros(n_out), act))
    return DenseNet(tuple(layers))


def _as_batch(x: np.ndarray, expected_dim: int) -> tuple[np.ndarray, bool]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    given = x.shape
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != expected_dim:
        raise ValueError(
            f"input shape {given} does not match net input dim {expected_dim}"
        )
    return x, squeezed


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return forward_cache(net, x)[0]


def forward_cache(net: DenseNet, x: np.ndarray):
    """Run the net, returning (output, cache) where cache holds every
    layer input/output needed by backward()."""
    xb, squeezed = _as_batch(x, net.input_dim)
    acts = [xb]
    h = xb
    for layer in net.layers:
        h = kernels.affine_act(h, layer.weights, layer.bias,
                               ACTIVATIONS[layer.activation])
        acts.append(h)
    out = h[0] if squeezed else h
    return out, (acts, squeezed)


def backward(net: DenseNet, cache, grad_out: np.ndarray):
    """Gradients of sum(grad_out * output) w.r.t. every parameter and the input.

    Returns (param_grads, grad_input) with param_grads a list of
    (d_weights, d_bias) per layer.
    """
    acts, squeezed = cache
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    if squeezed:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(
            f"upstream grad shape {grad_out.shape} does not match output shape "
            f"{acts[-1].shape[1:] if squeezed else acts[-1].shape}"
        )
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dw, db, g = kernels.layer_backward(
            acts[i], acts[i + 1], layer.weights, g, ACTIVATIONS[layer.activation])
        param_grads[i] = (dw, db)
    grad_input = g[0] if squeezed else g
    return param_grads, grad_input


def backward_input(net: DenseNet, cache, grad_out: np.ndarray) -> np.ndarray:
    """Input gradient only; skips parameter gradients (misreport search hot path)."""
    acts, squeezed = cache
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    if squeezed:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(
            f"upstream grad shape {grad_out.shape} does not match output shape {acts[-1].shape}"
        )
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = kernels.layer_backward_input(
            acts[i + 1], layer.weights, g, ACTIVATIONS[layer.activation])
    return g[0] if squeezed else g


def softmax(v: np.ndarray) -> np.ndarray:
    """Probability vector from a 1-D score vector (shift-invariant, stable)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"softmax expects a nonempty 1-D vector, got shape {v.shape}")
    return kernels.slot_softmax(np.ascontiguousarray(v)[None, None, :])[0, 0]


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = kernels.sigmoid_kernel(arr)
    if np.isscalar(x) or getattr(x, "ndim", 0) == 0:
        return float(out.reshape(-1)[0])
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimState:
    kind: str                       # "sgd" | "adam"
    learning_rate: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: tuple[np.ndarray, ...] | None = None
    v: tuple[np.ndarray, ...] | None = None


def make_sgd(learning_rate: float) -> OptimState:
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    return OptimState(kind="sgd", learning_rate=learning_rate)


def make_adam(learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> OptimState:
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    return OptimState(kind="adam", learning_rate=learning_rate,
                      beta1=beta1, beta2=beta2, eps=eps)


def optim_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               state: OptimState):
    """One optimizer update. Returns (new_params, new_state); inputs untouched."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params vs {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"param shape {p.shape} vs grad shape {g.shape}")

    if state.kind == "sgd":
        new = [p - state.learning_rate * g for p, g in zip(params, grads)]
        return new, replace(state, step=state.step + 1)

    if state.kind != "adam":
        raise ValueError(f"unknown optimizer kind {state.kind!r}")
    t = state.step + 1
    m = state.m if state.m is not None else tuple(np.zeros_like(p) for p in params)
    v = state.v if state.v is not None else tuple(np.zeros_like(p) for p in params)
    if len(m) != len(params):
        raise ValueError("optimizer moments do not match parameter count")
    new_m, new_v, new_p = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = state.beta1 * mi + (1 - state.beta1) * g
        vi = state.beta2 * vi + (1 - state.beta2) * (g * g)
        m_hat = mi / (1 - state.beta1 ** t)
        v_hat = vi / (1 - state.beta2 ** t)
        new_m.append(mi)
        new_v.append(vi)
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_p, replace(state, step=t, m=tuple(new_m), v=tuple(new_v))


def net_params(net: DenseNet) -> list[np.ndarray]:
    """Flat parameter list (w0, b0, w1, b1, ...) in layer order."""
    out = []
    for layer in net.layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def with_params(net: DenseNet, params: Sequence[np.ndarray]) -> DenseNet:
    if len(params) != 2 * len(net.layers):
        raise ValueError("parameter list does not match net layout")
    layers = []
    for i, layer in enumerate(net.layers):
        w, b = params[2 * i], params[2 * i + 1]
        if w.shape != layer.weights.shape or b.shape != layer.bias.shape:
            raise ValueError("parameter shapes do not match net layout")
        layers.append(Layer(np.ascontiguousarray(w, dtype=np.float64),
                            np.ascontiguousarray(b, dtype=np.float64),
                            layer.activation))
    return DenseNet(tuple(layers))


def flat_param_grads(param_grads) -> list[np.ndarray]:
    out = []
    for dw, db in param_grads:
        out.append(dw)
        out.append(db)
    return out


# ---------------------------------------------------------------------------
# checkpoint io (text, lossless: repr() round-trips float64 exactly)
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "modelmarket-densenet v1"


def net_to_text(net: DenseNet) -> str:
    """Lossless text form: repr() of each float64 round-trips bit-exactly."""
    lines = [CHECKPOINT_MAGIC, f"layers {len(net.layers)}"]
    for i, layer in enumerate(net.layers):
        n_in, n_out = layer.weights.shape
        lines.append(f"layer {i} {n_in} {n_out} {layer.activation}")
    for i, layer in enumerate(net.layers):
        lines.append("w " + str(i) + " " + " ".join(repr(float(x)) for x in layer.weights.ravel()))
        lines.append("b " + str(i) + " " + " ".join(repr(float(x)) for x in layer.bias))
    return "\n".join(lines) + "\n"


def net_from_text(text: str) -> DenseNet:
    lines = text.splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a {CHECKPOINT_MAGIC!r} checkpoint")
    n_layers = int(lines[1].split()[1])
    specs = []
    for i in range(n_layers):
        tag, idx, n_in, n_out, act = lines[2 + i].split()
        if tag != "layer" or int(idx) != i:
            raise ValueError(f"malformed checkpoint header at line {3 + i}")
        specs.append((int(n_in), int(n_out), act))
    values: dict[str, np.ndarray] = {}
    for line in lines[2 + n_layers:]:
        parts = line.split()
        values[f"{parts[0]}{parts[1]}"] = np.array([float(t) for t in parts[2:]])
    layers = []
    for i, (n_in, n_out, act) in enumerate(specs):
        w = values[f"w{i}"].reshape(n_in, n_out)
        b = values[f"b{i}"]
        if b.shape != (n_out,):
            raise ValueError(f"bias length mismatch in layer {i}")
        layers.append(Layer(np.ascontiguousarray(w), np.ascontiguousarray(b), act))
    return DenseNet(tuple(layers))


def save_net(net: DenseNet, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(net_to_text(net))


def load_net(path) -> DenseNet:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        return net_from_text(text)
    except ValueError as exc:
        raise ValueError(f"{exc}: {path}") from None
