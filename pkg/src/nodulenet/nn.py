"""Minimal neural-network engine with explicit per-layer backward passes.

Image layers work on NHWC batches ``(B, H, W, C)``: the im2col rows times
the transposed weight matrix land directly in the next layer's layout.
Vectors are ``(B, n)``.  A forward call returns ``(output, cache)`` and the
matching backward call consumes the cache.  Arrays stay in whatever float dtype they
arrive in, so float64 inputs and parameters give a float64 pass for gradient
checking while training runs in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

NUM_CLASSES = 6


class ShapeError(ValueError):
    """Raised when tensor shapes disagree with the layer geometry."""


@dataclass
class LayerParams:
    kind: str  # "conv" or "dense"
    weights: np.ndarray
    bias: np.ndarray

    @property
    def kernel(self) -> int:
        return self.weights.shape[-1] if self.kind == "conv" else 1

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.kind, self.weights.astype(dtype), self.bias.astype(dtype))


# ---------------------------------------------------------------- init


def glorot_init(shape, seed=None, dtype=np.float32, rng=None) -> np.ndarray:
    """Glorot-uniform draw in +/- sqrt(6 / (fan_in + fan_out)).

    ``shape`` is ``(out, in)`` for dense layers or ``(F, k, k, C)`` for
    convolutions, where the receptive field multiplies both fans.
    """
    fan_in, fan_out = _fans(shape)
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    rng = rng if rng is not None else np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _fans(shape):
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 4:
        field_size = shape[1] * shape[2]
        return shape[3] * field_size, shape[0] * field_size
    raise ShapeError(f"cannot derive fan-in/fan-out from shape {shape}")


def conv_params(in_channels, filters, k, rng, dtype=np.float32) -> LayerParams:
    return LayerParams("conv", glorot_init((filters, k, k, in_channels), rng=rng, dtype=dtype),
                       np.zeros(filters, dtype=dtype))


def dense_params(n_in, n_out, rng, dtype=np.float32) -> LayerParams:
    return LayerParams("dense", glorot_init((n_out, n_in), rng=rng, dtype=dtype),
                       np.zeros(n_out, dtype=dtype))


# ---------------------------------------------------------------- layers


def conv2d_forward(x, p: LayerParams):
    """Same-padded cross-correlation, stride 1, on an NHWC batch ``(B, H, W, C)``.

    Weights are ``(F, k, k, C)``; the output is ``(B, H, W, F)``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects (B, H, W, C), got {x.shape}")
    F, k, k2, C = p.weights.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if x.shape[3] != C:
        raise ShapeError(f"input has {x.shape[3]} channels, layer expects {C}")
    B, H, W, _ = x.shape
    cols = kernels.im2col(np.ascontiguousarray(x), k)
    out = cols @ p.weights.reshape(F, -1).T
    out += p.bias
    return out.reshape(B, H, W, F), (cols, x.shape)


def conv2d_backward(dout, cache, p: LayerParams, need_dx=True):
    cols, (B, H, W, C) = cache
    F, k, _, _ = p.weights.shape
    d2 = dout.reshape(-1, F)
    dw = (d2.T @ cols).reshape(p.weights.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2 @ p.weights.reshape(F, -1)
        dx = kernels.col2im(dcols, B, H, W, C, k)
    return dx, dw, db


def conv2d(x_chw, p: LayerParams):
    """Single-image convenience: ``(C, H, W)`` in, ``(F, H, W)`` out."""
    out, _ = conv2d_forward(np.ascontiguousarray(np.moveaxis(x_chw, 0, -1))[None], p)
    return np.moveaxis(out[0], -1, 0)


def maxpool2_forward(x):
    """2x2 stride-2 max pool of an NHWC batch; returns ``(out, argmax_cache)``."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects (B, H, W, C), got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape[1:3]}")
    return kernels.maxpool2_forward(np.ascontiguousarray(x))


def maxpool2_backward(dout, idx):
    return kernels.maxpool2_backward(np.ascontiguousarray(dout), idx)


def maxpool2(x_chw):
    """Single-image convenience: ``(C, H, W)`` in, ``(C, H/2, W/2)`` out."""
    out, _ = maxpool2_forward(np.ascontiguousarray(np.moveaxis(x_chw, 0, -1))[None])
    return np.moveaxis(out[0], -1, 0)


def dense_forward(x, p: LayerParams):
    if x.shape[-1] != p.weights.shape[1]:
        raise ShapeError(f"dense expects {p.weights.shape[1]} inputs, got {x.shape[-1]}")
    return x @ p.weights.T + p.bias, x


def dense_backward(dout, x, p: LayerParams):
    return dout @ p.weights, dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, targets):
    """Mean categorical cross-entropy over the batch.

    Returns ``(probs, loss, dlogits)`` where ``dlogits`` is the gradient of
    the mean loss, ``(p - onehot) / B``.
    """
    logits = np.atleast_2d(logits)
    targets = np.atleast_1d(np.asarray(targets))
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    loss = float(-logp[np.arange(B), targets].mean())
    d = probs.copy()
    d[np.arange(B), targets] -= 1.0
    return probs, loss, d / B


def dropout(x, rate, train, rng=None, seed=None):
    """Inverted dropout; returns ``(output, mask)`` with mask ``None`` in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    rng = rng if rng is not None else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected ADAM update of every array in ``params``."""
    if params.keys() != grads.keys():
        raise ShapeError("params and grads have different keys")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr == 0.0:
            continue
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        w -= step.astype(w.dtype, copy=False)


def l2_penalty(params: dict, grads: dict, decay: float, is_weight: Callable[[str], bool] | None = None) -> float:
    """Add ``decay * w`` to the gradient of every weight (biases excluded).

    Returns the penalty value ``decay / 2 * sum(w**2)``.
    """
    if decay < 0:
        raise ValueError("weight decay must be non-negative")
    is_weight = is_weight or (lambda name: name.endswith(".w"))
    total = 0.0
    if decay == 0:
        return total
    for name, w in params.items():
        if is_weight(name):
            grads[name] += decay * w
            total += 0.5 * decay * float(np.sum(w.astype(np.float64) ** 2))
    return total


# ---------------------------------------------------------------- gradient checking


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(loss_fn, params: dict, grads: dict, n_checks=200, step=1e-5, seed=0, floor=1e-8) -> float:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``loss_fn()`` must re-evaluate the scalar loss with the current contents
    of ``params`` (which are perturbed in place and restored).  At least
    ``n_checks`` coordinates are sampled across all arrays, or every
    coordinate when fewer exist.  When the estimate changes with a ten times
    smaller step (a kink inside the stencil) the smaller step is used, at
    most twice.  Returns the max relative error.
    """
    for name, w in params.items():
        if w.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 parameters ({name} is {w.dtype})")
    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if total <= n_checks:
        picks = [(n, i) for n in names for i in range(params[n].size)]
    else:
        # every array contributes, the rest is spread proportionally to size
        picks = [(n, int(rng.integers(params[n].size))) for n in names]
        flat = rng.choice(total, size=max(n_checks - len(names), 0), replace=False)
        offsets = np.cumsum(sizes) - sizes
        for f in flat:
            j = int(np.searchsorted(offsets, f, side="right") - 1)
            picks.append((names[j], int(f - offsets[j])))
    scale = max(abs(loss_fn()), 1.0)
    worst = 0.0
    for name, i in picks:
        flat_w = params[name].reshape(-1)
        old = flat_w[i]

        def central(h):
            flat_w[i] = old + h
            fp = loss_fn()
            flat_w[i] = old - h
            fm = loss_fn()
            flat_w[i] = old
            return (fp - fm) / (2 * h)

        h = step
        numeric = central(h)
        for _ in range(2):
            # a ReLU/max kink inside [-h, h] makes the estimate depend on h beyond roundoff
            finer = central(h / 10)
            noise = 10 * np.finfo(np.float64).eps * scale / (h / 10)
            if abs(numeric - finer) <= 1e-6 * abs(finer) + noise:
                break
            h, numeric = h / 10, finer
        analytic = grads[name].reshape(-1)[i]
        worst = max(worst, float(relative_error(analytic, numeric, floor)))
    return worst
