"""Dense networks in plain numpy: layers, ReLU, inverted dropout, softmax
cross-entropy, Adam, backpropagation and finite-difference gradient checks.

Batches are row-major: an input batch has shape (batch, features). A 1-D input
is treated as a batch of one and a 1-D result is returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInput, ShapeError, StateError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class DenseLayer:
    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        weights = np.asarray(weights)
        bias = np.asarray(bias, dtype=weights.dtype)
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise ShapeError(f"weights {weights.shape} and bias {bias.shape} do not agree")
        self.weights = weights
        self.bias = bias

    @classmethod
    def he_uniform(cls, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        limit = np.sqrt(6.0 / n_in)
        w = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
        return cls(w, np.zeros(n_out, dtype=dtype))

    @classmethod
    def zeros(cls, n_in: int, n_out: int, dtype=np.float32):
        return cls(np.zeros((n_out, n_in), dtype=dtype), np.zeros(n_out, dtype=dtype))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != layer.in_dim or x.ndim > 2:
        raise ShapeError(f"layer expects {layer.in_dim} inputs, got shape {x.shape}")
    return x @ layer.weights.T + layer.bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


@dataclass
class DropoutSpec:
    p_drop: float = 0.4
    train: bool = False

    def __post_init__(self):
        if not 0.0 <= self.p_drop < 1.0:
            raise InvalidInput(f"dropout probability must be in [0, 1), got {self.p_drop}")


def dropout_apply(x: np.ndarray, spec: DropoutSpec, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns (output, keep-mask); inference is the identity."""
    x = np.asarray(x)
    if not spec.train or spec.p_drop == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if rng is None:
        raise InvalidInput("training-mode dropout needs an rng")
    mask = rng.random(x.shape) >= spec.p_drop
    scale = np.asarray(1.0 / (1.0 - spec.p_drop), dtype=x.dtype)
    return x * mask * scale, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target):
    """Mean cross-entropy of softmax(logits) against integer class targets.

    Returns ``(loss, grad)`` where grad is d(loss)/d(logits); for a batch the
    gradient carries the 1/batch factor of the mean.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    t = np.atleast_1d(np.asarray(target))
    k = z.shape[1]
    if t.shape != (z.shape[0],):
        raise ShapeError(f"{z.shape[0]} logit rows but {t.shape} targets")
    if not np.issubdtype(t.dtype, np.integer) and not np.issubdtype(t.dtype, np.bool_):
        raise InvalidInput("targets must be integer class indices")
    t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= k):
        raise InvalidInput(f"class index out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, t]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, t] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


class MLP:
    """Stack of dense layers with optional ReLU and dropout after each.

    ``relu[i]`` / ``dropout[i]`` say whether layer ``i`` is followed by a ReLU
    and by dropout (dropout always comes after the activation).
    """

    def __init__(self, layers: Sequence[DenseLayer], relu: Sequence[bool],
                 dropout: Sequence[bool] | None = None, p_drop: float = 0.0):
        if len(relu) != len(layers):
            raise ShapeError("one relu flag per layer required")
        dropout = list(dropout) if dropout is not None else [False] * len(layers)
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer output {a.out_dim} does not feed input {b.in_dim}")
        self.layers = list(layers)
        self.relu = list(relu)
        self.dropout = dropout
        self.p_drop = p_drop
        self._cache = None

    @classmethod
    def build(cls, dims: Sequence[int], rng: np.random.Generator | None = None, *,
              relu_last: bool = False, dropout_hidden: bool = False, p_drop: float = 0.0,
              dtype=np.float32, init: str = "he"):
        n = len(dims) - 1
        if init == "he":
            layers = [DenseLayer.he_uniform(dims[i], dims[i + 1], rng, dtype) for i in range(n)]
        elif init == "zeros":
            layers = [DenseLayer.zeros(dims[i], dims[i + 1], dtype) for i in range(n)]
        else:
            raise InvalidInput(f"unknown init {init!r}")
        relu_flags = [True] * (n - 1) + [relu_last]
        drop_flags = [dropout_hidden] * (n - 1) + [False]
        return cls(layers, relu_flags, drop_flags, p_drop)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def astype(self, dtype) -> "MLP":
        layers = [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype)) for l in self.layers]
        return MLP(layers, self.relu, self.dropout, self.p_drop)

    def copy(self) -> "MLP":
        return self.astype(self.dtype)

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None, record: bool = False) -> np.ndarray:
        """Forward pass; ``record=True`` keeps the activations for ``backward``.

        Without ``record`` the network is not mutated, so concurrent inference
        on one instance is safe.
        """
        x = np.asarray(x)
        single = x.ndim == 1
        h = np.atleast_2d(x).astype(self.dtype, copy=False)
        if h.shape[1] != self.layers[0].in_dim:
            raise ShapeError(f"network expects {self.layers[0].in_dim} inputs, got {x.shape}")
        cache = []
        spec = DropoutSpec(self.p_drop, train)
        for layer, act, drop in zip(self.layers, self.relu, self.dropout):
            inp = h
            h = dense_forward(layer, inp)
            active = h > 0 if act else None
            if act:
                h = h * active
            mask = None
            if drop and train and self.p_drop > 0:
                h, mask = dropout_apply(h, spec, rng)
            if record:
                cache.append((inp, active, mask))
        if record:
            self._cache = cache
        return h[0] if single else h

    def backward(self, grad_out: np.ndarray):
        """Reverse pass over the last forward. Returns (param_grads, input_grad)."""
        if self._cache is None:
            raise StateError("backward called before forward")
        g = np.atleast_2d(np.asarray(grad_out, dtype=self.dtype))
        single = np.asarray(grad_out).ndim == 1
        grads: list[np.ndarray] = []
        scale = np.asarray(1.0 / (1.0 - self.p_drop), dtype=self.dtype) if self.p_drop else None
        for layer, (inp, active, mask) in zip(reversed(self.layers), reversed(self._cache)):
            if mask is not None:
                g = g * mask * scale
            if active is not None:
                g = g * active
            grads += [g.sum(axis=0), g.T @ inp]
            g = g @ layer.weights
        grads.reverse()  # -> [W0, b0, W1, b1, ...]
        return grads, (g[0] if single else g)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ShapeError(f"parameter {p.shape} vs gradient {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference(loss: Callable[[], float], array: np.ndarray, index, h: float) -> float:
    old = array[index]
    array[index] = old + h
    up = loss()
    array[index] = old - h
    down = loss()
    array[index] = old
    return (up - down) / (2.0 * h)


def check_arrays(loss: Callable[[], float], arrays: Sequence[np.ndarray],
                 analytic: Sequence[np.ndarray], h: float = 1e-5,
                 max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between ``analytic`` and central differences of ``loss``.

    ``arrays`` are perturbed in place and restored. With ``max_coords`` only that
    many coordinates per array are probed, chosen by ``rng``.
    """
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        if arr.shape != grad.shape:
            raise ShapeError(f"array {arr.shape} vs gradient {grad.shape}")
        if max_coords is None or arr.size <= max_coords:
            flat = range(arr.size)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            flat = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for k in flat:
            idx = np.unravel_index(int(k), arr.shape)
            numeric = finite_difference(loss, arr, idx, h)
            worst = max(worst, float(relative_error(grad[idx], numeric)))
    return worst


def grad_check(network, inputs, target, h: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> float:
    """Compare analytic gradients of ``network`` against central differences.

    ``network`` must offer ``params()`` and ``loss_and_grads(inputs, target)``
    returning ``(loss, param_grads, input_grads)``; ``inputs`` is a tuple of
    arrays. Run it on a float64 copy of the network.
    """
    inputs = tuple(np.array(x, dtype=np.float64) for x in inputs)
    _, pgrads, igrads = network.loss_and_grads(inputs, target)
    pgrads = [np.array(g, dtype=np.float64) for g in pgrads]
    igrads = [np.array(g, dtype=np.float64) for g in igrads]

    def loss() -> float:
        return network.loss_and_grads(inputs, target, need_grads=False)[0]

    rng = np.random.default_rng(seed)
    return max(
        check_arrays(loss, network.params(), pgrads, h, max_coords, rng),
        check_arrays(loss, inputs, igrads, h, max_coords, rng),
    )


class Classifier:
    """MLP + softmax cross-entropy; what the probes train and grad_check checks."""

    def __init__(self, net: MLP):
        self.net = net

    def params(self):
        return self.net.params()

    def loss_and_grads(self, inputs, target, need_grads: bool = True):
        (x,) = inputs
        logits = self.net.forward(x, record=need_grads)
        loss, g = softmax_cross_entropy(logits, target)
        if not need_grads:
            return loss, None, None
        pgrads, xgrad = self.net.backward(g)
        return loss, pgrads, [xgrad]
