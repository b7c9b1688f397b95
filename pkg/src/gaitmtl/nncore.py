"""A small deterministic CNN engine on numpy (float64).

Functional forward/backward pairs for the fixed layer set (valid 1-D
convolution, batch norm, ReLU, 2x1 max-pool, fully connected, softmax
cross-entropy, MSE), thin layer objects that cache activations between the
forward and backward pass, Adam with a trainability mask, and a
central-difference gradient checker.

Activations are laid out as (batch, channels, length); the trailing "x1"
sensor axis of the CNN input is squeezed before entering the network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidBatch, InvalidLabel, NumericalError, ShapeError

DTYPE = np.float64


# ---------------------------------------------------------------- convolution
#
# Layers keep activations channels-last, (B, L, C): flattening batch and time
# then makes every kernel tap one contiguous GEMM. Rows that straddle two
# batch items are computed and discarded.

def conv1d_cl(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid conv, channels-last. x (B, L, C), w (O, C, k) -> (B, L-k+1, O)."""
    B, L, C = x.shape
    O, C2, k = w.shape
    if C != C2:
        raise ShapeError(f"input has {C} channels, kernel expects {C2}")
    if L < k:
        raise ShapeError(f"input length {L} shorter than kernel {k}")
    M = B * L - k + 1
    xf = np.ascontiguousarray(x).reshape(B * L, C)
    taps = np.ascontiguousarray(w.transpose(2, 1, 0))  # (k, C, O); BLAS needs contiguous operands
    y = np.empty((B * L, O))
    y[M:] = 0.0
    yv = y[:M]
    np.matmul(xf[:M], taps[0], out=yv)
    for j in range(1, k):
        yv += xf[j:j + M] @ taps[j]
    y += b
    return np.ascontiguousarray(y.reshape(B, L, O)[:, : L - k + 1])


def conv1d_cl_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                       need_x: bool = True) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    B, L, C = x.shape
    O, _, k = w.shape
    Lo = L - k + 1
    if grad_out.shape != (B, Lo, O):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(B, Lo, O)}")
    M = B * L - k + 1
    gpad = np.zeros((B, L, O))
    gpad[:, :Lo] = grad_out
    gf = gpad.reshape(B * L, O)[:M]
    gfT = np.ascontiguousarray(gf.T)
    xf = np.ascontiguousarray(x).reshape(B * L, C)
    grad_w = np.empty((O, C, k))
    for j in range(k):
        grad_w[:, :, j] = gfT @ xf[j:j + M]
    grad_b = grad_out.sum(axis=(0, 1))
    grad_x = None
    if need_x:
        taps = np.ascontiguousarray(w.transpose(2, 0, 1))  # (k, O, C)
        gx = np.zeros((B * L, C))
        for j in range(k):
            gx[j:j + M] += gf @ taps[j]
        grad_x = gx.reshape(B, L, C)
    return grad_x, grad_w, grad_b


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Valid, stride-1 convolution. x (C_in, L) or (B, C_in, L); w (C_out, C_in, k)."""
    single = x.ndim == 2
    xb = x[None] if single else x
    xcl = np.ascontiguousarray(xb.transpose(0, 2, 1))
    out = conv1d_cl(xcl, w, b).transpose(0, 2, 1)
    out = np.ascontiguousarray(out[0] if single else out)
    return out, (xcl, w, single)


def conv_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv_forward w.r.t. (x, w, b), in the same layouts."""
    xcl, w, single = cache
    g = grad_out[None] if single else grad_out
    if g.ndim != 3:
        raise ShapeError(f"grad_out has {g.ndim} dims")
    gx, gw, gb = conv1d_cl_backward(np.ascontiguousarray(g.transpose(0, 2, 1)), xcl, w)
    gx = gx.transpose(0, 2, 1)
    return (gx[0] if single else gx), gw, gb


# ----------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, update_stats: bool = True,
                      channel_axis: int = 1) -> tuple[np.ndarray, tuple]:
    """Per-channel normalization over every other axis. Default layout (B, C, L) or (B, C)."""
    xm = np.moveaxis(x, channel_axis, -1)
    C = xm.shape[-1]
    x2 = xm.reshape(-1, C)
    n = x2.shape[0]
    if state.mode == "train":
        if x.shape[0] < 2:
            raise InvalidBatch(f"batch norm in train mode needs batch >= 2, got {x.shape[0]}")
        mean = x2.sum(axis=0) / n
        xc = x2 - mean
        var = np.einsum("ij,ij->j", xc, xc) / n
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        # Fixed statistics make the layer one affine map; xhat is rebuilt only if a backward pass asks.
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        scale = state.gamma * inv_std
        out = x2 * scale + (state.beta - state.running_mean * scale)
        out = np.moveaxis(out.reshape(xm.shape), -1, channel_axis)
        return out, ((x2, state.running_mean), inv_std, state.gamma, state.mode, channel_axis, xm.shape)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv_std
    out = xhat * state.gamma + state.beta
    out = np.moveaxis(out.reshape(xm.shape), -1, channel_axis)
    return out, (xhat, inv_std, state.gamma, state.mode, channel_axis, xm.shape)


def batchnorm_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma, mode, channel_axis, mshape = cache
    if isinstance(xhat, tuple):
        x2, mean = xhat
        xhat = (x2 - mean) * inv_std
    g2 = np.moveaxis(grad_out, channel_axis, -1).reshape(xhat.shape)
    n = g2.shape[0]
    grad_beta = g2.sum(axis=0)
    grad_gamma = np.einsum("ij,ij->j", g2, xhat)
    if mode == "train":
        # sum(gamma * g) == gamma * grad_beta and sum(gamma * g * xhat) == gamma * grad_gamma
        grad_x = (gamma * inv_std / n) * (n * g2 - grad_beta - xhat * grad_gamma)
    else:
        grad_x = g2 * (gamma * inv_std)
    grad_x = np.moveaxis(grad_x.reshape(mshape), -1, channel_axis)
    return grad_x, grad_gamma, grad_beta


# ------------------------------------------------------- pointwise / pooling

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return grad_out * (x > 0)


def maxpool_forward(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, tuple]:
    """2x1 max-pool along `axis` (default last); an odd trailing element is dropped."""
    xm = np.moveaxis(x, axis, -1)
    L = xm.shape[-1]
    if L < 2:
        raise ShapeError(f"cannot pool length {L}")
    half = L // 2
    pairs = xm[..., : 2 * half].reshape(*xm.shape[:-1], half, 2)
    first = pairs[..., 0] >= pairs[..., 1]  # ties go to the first index
    out = np.where(first, pairs[..., 0], pairs[..., 1])
    return np.moveaxis(out, -1, axis), (xm.shape, first, axis)


def maxpool_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    shape, first, axis = cache
    g = np.moveaxis(grad_out, axis, -1)
    half = shape[-1] // 2
    grad = np.zeros(shape)
    pairs = grad[..., : 2 * half].reshape(*shape[:-1], half, 2)
    pairs[..., 0] = np.where(first, g, 0.0)
    pairs[..., 1] = np.where(first, 0.0, g)
    return np.moveaxis(grad, -1, axis)


# ------------------------------------------------------------ fully connected

def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (B, F_in) @ W (F_in, F_out) + b."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"fc expects {W.shape[0]} features, got {x.shape[-1]}")
    return x @ W + b


def fc_backward(grad_out: np.ndarray, x: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.ndim == 1:
        return W @ grad_out, np.outer(x, grad_out), grad_out.copy()
    return grad_out @ W.T, x.T @ grad_out, grad_out.sum(axis=0)


# --------------------------------------------------------------------- losses

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Fused, max-shifted softmax + cross-entropy; mean over the batch."""
    logits = np.asarray(logits, dtype=DTYPE)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    tgt = np.atleast_1d(np.asarray(target))
    K = z.shape[-1]
    if K < 2:
        raise ShapeError("need at least 2 classes")
    if tgt.shape[0] != z.shape[0] or np.any(tgt < 0) or np.any(tgt >= K) or not np.issubdtype(tgt.dtype, np.integer):
        raise InvalidLabel(f"class target out of range [0, {K}): {target}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - shifted[rows, tgt]))
    grad = softmax(z)
    grad[rows, tgt] -= 1.0
    grad /= z.shape[0]
    return loss, (grad[0] if single else grad)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# --------------------------------------------------------------------- layers

@dataclass(eq=False)
class Param:
    value: np.ndarray
    name: str = ""
    trainable: bool = True
    grad: np.ndarray | None = field(default=None, repr=False)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def kinks(self):
        """Discrete activation pattern (ReLU masks, pool argmaxes), for gradient checking."""
        return None

    def forward(self, x, train=False, update_stats=True):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, grad):  # pragma: no cover - interface
        raise NotImplementedError


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator, bias: bool = True):
        fan_in = in_ch * kernel
        self.weight = Param(kaiming_uniform(rng, (out_ch, in_ch, kernel), fan_in))
        # A bias directly ahead of batch norm is cancelled by the mean subtraction.
        self.bias = Param(np.zeros(out_ch)) if bias else None
        self._zero_bias = np.zeros(out_ch)
        self._cache = None

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    # channels-last in and out
    def forward(self, x, train=False, update_stats=True):
        b = self._zero_bias if self.bias is None else self.bias.value
        self._cache = x
        return conv1d_cl(x, self.weight.value, b)

    def backward(self, grad, need_x=True):
        gx, gw, gb = conv1d_cl_backward(grad, self._cache, self.weight.value, need_x)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class BatchNorm1d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.state = BatchNormState.fresh(channels, momentum, eps)
        self.gamma = Param(self.state.gamma)
        self.beta = Param(self.state.beta)
        self.frozen = False
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def set_buffers(self, running_mean: np.ndarray, running_var: np.ndarray):
        self.state.running_mean = np.array(running_mean, dtype=DTYPE)
        self.state.running_var = np.array(running_var, dtype=DTYPE)

    def forward(self, x, train=False, update_stats=True):
        # Params are authoritative (optimizer and loader replace their arrays).
        self.state.gamma = self.gamma.value
        self.state.beta = self.beta.value
        self.state.mode = "train" if (train and not self.frozen) else "eval"
        out, self._cache = batchnorm_forward(x, self.state, update_stats, channel_axis=-1)
        return out

    def backward(self, grad):
        gx, gg, gb = batchnorm_backward(grad, self._cache)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x, train=False, update_stats=True):
        self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(grad, self._x)

    def kinks(self):
        return self._x > 0


class MaxPool1d(Layer):
    """Pools along the length axis of channels-last (B, L, C) activations."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train=False, update_stats=True):
        out, self._cache = maxpool_forward(x, axis=1)
        return out

    def backward(self, grad):
        return maxpool_backward(grad, self._cache)

    def kinks(self):
        return self._cache[1]


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, train=False, update_stats=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Param(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = Param(np.zeros(out_features))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=False, update_stats=True):
        self._x = x
        return fc_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = fc_backward(grad, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Sequential(Layer):
    def __init__(self, layers: Iterable[Layer]):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train=False, update_stats=True):
        for layer in self.layers:
            x = layer.forward(x, train, update_stats)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def kinks(self):
        out = []
        for layer in self.layers:
            k = layer.kinks()
            if k is None:
                continue
            out.extend(k if isinstance(k, list) else [k])
        return out


# ----------------------------------------------------------------------- Adam

class Adam:
    """Bias-corrected Adam. Parameters with trainable=False are skipped entirely."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.value) for p in self.params}
        self.v = {id(p): np.zeros_like(p.value) for p in self.params}

    def step(self):
        live = [p for p in self.params if p.trainable]
        for p in live:
            if p.grad is None or not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient for parameter {p.name or '?'}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in live:
            m = self.m[id(p)]
            v = self.v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -------------------------------------------------------------- gradient check

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    n_kink_skipped: int

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error <= tol


def _same_kinks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    net: Layer,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    eps: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckResult:
    """Compare analytic parameter gradients against central differences.

    Relative error per element is |a - n| / max(|a|, |n|, floor). Frozen
    parameters are excluded. If a perturbation flips a ReLU mask or a pool
    argmax the function is not differentiable across the step; eps is shrunk
    up to twice and the element is skipped (and counted) if it still flips.
    """
    params = [p for p in net.params() if p.trainable]
    for p in net.params():
        p.zero_grad()
    out = net.forward(x, train=True, update_stats=False)
    base_kinks = net.kinks()
    _, g = loss_fn(out)
    net.backward(g)

    def f():
        o = net.forward(x, train=True, update_stats=False)
        return loss_fn(o)[0], net.kinks()

    worst = (0.0, "", ())
    checked = skipped = 0
    for pi, p in enumerate(params):
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps
            numeric = None
            for _ in range(3):
                flat[i] = orig + h
                fp, kp = f()
                flat[i] = orig - h
                fm, km = f()
                flat[i] = orig
                if _same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks):
                    numeric = (fp - fm) / (2 * h)
                    break
                h /= 10
            if numeric is None:
                skipped += 1
                continue
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if rel > worst[0]:
                worst = (rel, p.name or f"param{pi}", np.unravel_index(i, p.value.shape))
    return GradCheckResult(worst[0], worst[1], tuple(int(j) for j in worst[2]), checked, skipped)
