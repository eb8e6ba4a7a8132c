"""Dense linear algebra, layers with hand-derived backward rules, optimizers
and a central-difference gradient checker.

Matrices are plain numpy arrays. Everything here is pure except the
optimizer state and :class:`ParamSet` gradient buffers, which are
single-writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np

from .errors import NumericError, ShapeError, StateError

FLOAT_MODES = {32: np.float32, 64: np.float64}

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def dtype_for(mode: int):
    try:
        return FLOAT_MODES[int(mode)]
    except (KeyError, ValueError):
        raise ShapeError(f"float mode must be 32 or 64, got {mode!r}") from None


# ---------------------------------------------------------------------------
# elementwise functions


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0, x)


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


def _activate(name, x):
    try:
        return _ACTIVATIONS[name](x)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


def _activation_grad(name, pre, out, grad_out):
    if name == "identity":
        return grad_out
    if name == "relu":
        return grad_out * (pre > 0)
    if name == "sigmoid":
        return grad_out * out * (1 - out)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# graph and dense layers


def normalize_adjacency(A, dtype=np.float64):
    """Symmetric GCN normalisation D^-1/2 (A v A^T + I) D^-1/2.

    The result is mirrored from its upper triangle, so it is bitwise
    symmetric regardless of rounding order.
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {A.shape}")
    n = A.shape[0]
    sym = ((A != 0) | (A.T != 0)).astype(dtype)
    np.fill_diagonal(sym, 1)
    inv_sqrt = 1.0 / np.sqrt(sym.sum(axis=1))
    out = sym * inv_sqrt[:, None] * inv_sqrt[None, :]
    upper = np.triu(out)
    out = upper + np.triu(out, 1).T
    return out.astype(dtype, copy=False) if n else out


def gcn_layer(A_hat, H, W, activation="relu"):
    """act(A_hat @ H @ W)."""
    A_hat, H, W = np.asarray(A_hat), np.asarray(H), np.asarray(W)
    if A_hat.ndim != 2 or A_hat.shape[0] != A_hat.shape[1]:
        raise ShapeError(f"A_hat must be square, got {A_hat.shape}")
    if H.shape[0] != A_hat.shape[0] or H.shape[1] != W.shape[0]:
        raise ShapeError(
            f"shape mismatch: A_hat {A_hat.shape}, H {H.shape}, W {W.shape}")
    if activation not in ("relu", "identity"):
        raise ValueError(f"gcn activation must be relu or identity, got {activation!r}")
    return _activate(activation, A_hat @ H @ W)


def gcn_layer_backward(A_hat, H, W, grad_out, activation="relu"):
    """Gradients (dH, dW) of gcn_layer given dL/d(output).

    Works on single graphs (2-d) and padded batches (3-d, leading batch axis).
    """
    pre = A_hat @ H @ W
    g = _activation_grad(activation, pre, None, grad_out)
    AtG = np.swapaxes(A_hat, -1, -2) @ g
    dW = np.swapaxes(H, -1, -2) @ AtG
    if dW.ndim == 3:
        dW = dW.sum(axis=0)
    dH = AtG @ W.T
    return dH, dW


def dense_layer(x, W, b, activation="identity"):
    """act(W x + b). ``W`` is (d_out, d_in); ``x`` may carry a leading batch axis."""
    x, W, b = np.asarray(x), np.asarray(W), np.asarray(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    return _activate(activation, x @ W.T + b)


def dense_layer_backward(x, W, b, out, grad_out, activation="identity"):
    """Gradients (dx, dW, db) of dense_layer; ``out`` is the forward output."""
    pre = x @ W.T + b
    g = _activation_grad(activation, pre, out, grad_out)
    if g.ndim == 1:
        return g @ W, np.outer(g, x), g
    return g @ W, g.T @ x, g.sum(axis=0)


# ---------------------------------------------------------------------------
# parameters and optimizers


class ParamSet:
    """Named parameter arrays with gradient buffers of identical shape."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None):
        self._params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, copy=True)
        self._params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def shapes(self):
        return {k: v.shape for k, v in self._params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def accumulate(self, name, grad):
        buf = self.grads[name]
        if buf.shape != np.shape(grad):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grad)}, expected {buf.shape}")
        buf += grad

    def astype(self, dtype):
        return ParamSet({k: v.astype(dtype) for k, v in self._params.items()})

    def copy(self):
        return ParamSet({k: v for k, v in self._params.items()})

    def set(self, name, value):
        if np.shape(value) != self._params[name].shape:
            raise ShapeError(f"cannot set {name!r}: shape {np.shape(value)} != {self._params[name].shape}")
        self._params[name][...] = value

    def check_finite(self):
        for name, value in self._params.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"parameter {name!r} has non-finite entries")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be adam or sgd, got {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params: ParamSet, state: OptimizerState) -> ParamSet:
    """Apply one update in place and return ``params``."""
    for name in params:
        if name not in params.grads:
            raise StateError(f"no gradient for parameter {name!r}")
    state.step += 1
    if state.kind == "sgd":
        for name, p in params.items():
            p -= state.lr * params.grads[name]
        return params

    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = params.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# loss passes and gradient checking


class LossPass:
    """A forward computation of a scalar loss with a hand-chained backward.

    Subclasses implement ``_forward`` (returning the loss and whatever the
    backward rule needs) and ``_backward`` (accumulating into
    ``self.params.grads``).
    """

    def __init__(self, params: ParamSet):
        self.params = params
        self._cache = None
        self._ready = False
        self.loss = None

    def forward(self) -> float:
        self._ready = False
        self.loss, self._cache = self._forward()
        if not np.isfinite(self.loss):
            raise NumericError(f"non-finite loss {self.loss!r}")
        self._ready = True
        return self.loss

    def backward(self):
        if not self._ready:
            raise StateError("backward() called before forward()")
        self._backward(self._cache)
        self._cache, self._ready = None, False
        return self.params.grads

    def _forward(self) -> Tuple[float, object]:
        raise NotImplementedError

    def _backward(self, cache):
        raise NotImplementedError


def backward(loss_pass: LossPass, zero_grad=True):
    """Populate gradients for every parameter of ``loss_pass``."""
    if zero_grad:
        loss_pass.params.zero_grad()
    return loss_pass.backward()


def grad_check(make_pass: Callable[[ParamSet], LossPass], params: ParamSet,
               probes: Optional[int] = None, eps: float = 1e-5, rng=None,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``make_pass(params)`` must build a deterministic pass (noise frozen).
    ``probes`` coordinates are drawn per parameter; ``None`` checks all.
    The error is ``|a - n| / max(|a| + |n|, floor)``. Central differences
    with step 1e-5 carry roundoff near 1e-10, so without a floor a gradient
    of 1e-9 would score as wrong even when both estimates agree to that noise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lp = make_pass(params)
    lp.forward()
    backward(lp)
    analytic = {k: g.copy() for k, g in params.grads.items()}

    def loss_at():
        value = make_pass(params).forward()
        if not np.isfinite(value):
            raise NumericError("non-finite loss during finite differencing")
        return value

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        if probes is None or probes >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=probes, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at()
            flat[i] = orig - eps
            down = loss_at()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(floor, abs(ana) + abs(num))
            worst = max(worst, err)
    return float(worst)


def glorot_uniform(rng, fan_in, fan_out, shape=None, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
