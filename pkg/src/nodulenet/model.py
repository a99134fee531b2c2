"""Multi-stream multi-scale ConvNet.

One stream parameter set per scale is applied to all three orthogonal views
of that scale (weight sharing); streams of different scales are independent.
The per-stream 256-d outputs are concatenated scale-major, view-minor and fed
to a 256-unit combiner, dropout, and a six-way softmax head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .container import read_container, write_container

ALLOWED_SCALES = (10.0, 20.0, 40.0)
CHECKPOINT_MAGIC = b"TPLN"

# (kernel, filters) entries and "pool" markers; ReLU follows every conv.
STREAM_LAYOUT = ((5, 32), "pool", (3, 64), (3, 64), "pool", (3, 128), "pool")


class ScaleMismatchError(ValueError):
    """Sample or checkpoint scales disagree with the model configuration."""


@dataclass(frozen=True)
class StreamConfig:
    layout: tuple = STREAM_LAYOUT
    dense_width: int = 256
    width: float = 1.0  # filter-count multiplier; 1.0 is the full architecture

    def filters(self):
        return [max(1, int(round(f * self.width))) for k, f in (e for e in self.layout if e != "pool")]

    def n_pools(self):
        return sum(1 for e in self.layout if e == "pool")


@dataclass
class MultiScaleModel:
    scales: tuple
    config: StreamConfig
    patch_side: int
    streams: list  # one list[LayerParams] per scale, shared by its three views
    combiner: nn.LayerParams
    head: nn.LayerParams
    dropout_rate: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.head.weights.dtype

    def named_params(self) -> dict:
        """Flat name -> array view of every trainable tensor (shared arrays appear once)."""
        out = {}
        for s, layers in enumerate(self.streams):
            for i, p in enumerate(layers):
                out[f"s{s}.l{i}.w"] = p.weights
                out[f"s{s}.l{i}.b"] = p.bias
        out["combiner.w"] = self.combiner.weights
        out["combiner.b"] = self.combiner.bias
        out["head.w"] = self.head.weights
        out["head.b"] = self.head.bias
        return out

    def stream_for(self, scale_index: int, view: int):
        """The parameter list used by ``view`` at ``scale_index`` (identical object for all views)."""
        if not 0 <= view < 3:
            raise IndexError(view)
        return self.streams[scale_index]

    def copy(self) -> "MultiScaleModel":
        return MultiScaleModel(
            self.scales, self.config, self.patch_side,
            [[nn.LayerParams(p.kind, p.weights.copy(), p.bias.copy()) for p in layers] for layers in self.streams],
            nn.LayerParams("dense", self.combiner.weights.copy(), self.combiner.bias.copy()),
            nn.LayerParams("dense", self.head.weights.copy(), self.head.bias.copy()),
            self.dropout_rate, dict(self.meta),
        )

    def astype(self, dtype) -> "MultiScaleModel":
        m = self.copy()
        m.streams = [[p.astype(dtype) for p in layers] for layers in m.streams]
        m.combiner = m.combiner.astype(dtype)
        m.head = m.head.astype(dtype)
        return m


def _check_scales(scales):
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise ValueError("at least one scale is required")
    if len(scales) > 3 or len(set(scales)) != len(scales):
        raise ValueError(f"expected 1-3 distinct scales, got {scales}")
    for s in scales:
        if s not in ALLOWED_SCALES:
            raise ValueError(f"scale {s} not in {ALLOWED_SCALES}")
    return scales


def build_model(scales, seed, config: StreamConfig | None = None, patch_side=64,
                dropout_rate=0.5, dtype=np.float32) -> MultiScaleModel:
    scales = _check_scales(scales)
    config = config or StreamConfig()
    if patch_side % (2 ** config.n_pools()):
        raise ValueError(f"patch side {patch_side} not divisible by {2 ** config.n_pools()}")
    rng = np.random.default_rng(seed)
    filters = config.filters()
    streams = []
    for _ in scales:
        layers = []
        c_in = 1
        fi = 0
        for entry in config.layout:
            if entry == "pool":
                continue
            k, _ = entry
            layers.append(nn.conv_params(c_in, filters[fi], k, rng, dtype))
            c_in = filters[fi]
            fi += 1
        side = patch_side // (2 ** config.n_pools())
        layers.append(nn.dense_params(c_in * side * side, config.dense_width, rng, dtype))
        streams.append(layers)
    n_in = 3 * len(scales) * config.dense_width
    combiner = nn.dense_params(n_in, 256, rng, dtype)
    head = nn.dense_params(256, nn.NUM_CLASSES, rng, dtype)
    return MultiScaleModel(scales, config, patch_side, streams, combiner, head, dropout_rate,
                           {"seed": int(seed)})


# ---------------------------------------------------------------- forward / backward


def _stream_forward(layers, x, layout):
    caches = []
    li = 0
    for entry in layout:
        if entry == "pool":
            x, idx = nn.maxpool2_forward(x)
            caches.append(("pool", idx))
        else:
            x, c = nn.conv2d_forward(x, layers[li])
            x, mask = nn.relu_forward(x)
            caches.append(("conv", li, c, mask))
            li += 1
    shape = x.shape
    x = x.reshape(shape[0], -1)
    x, c = nn.dense_forward(x, layers[li])
    x, mask = nn.relu_forward(x)
    caches.append(("dense", li, c, mask, shape))
    return x, caches


def _stream_backward(layers, dout, caches, grads, prefix):
    _, li, c, mask, shape = caches[-1]
    d = nn.relu_backward(dout, mask)
    d, dw, db = nn.dense_backward(d, c, layers[li])
    _accumulate(grads, f"{prefix}.l{li}", dw, db)
    d = d.reshape(shape)
    for entry in reversed(caches[:-1]):
        if entry[0] == "pool":
            d = nn.maxpool2_backward(d, entry[1])
        else:
            _, li, c, mask = entry
            d = nn.relu_backward(d, mask)
            d, dw, db = nn.conv2d_backward(d, c, layers[li], need_dx=li > 0)
            _accumulate(grads, f"{prefix}.l{li}", dw, db)
    return grads


def _accumulate(grads, prefix, dw, db):
    for key, g in ((f"{prefix}.w", dw), (f"{prefix}.b", db)):
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g.copy()


def _as_batch(m: MultiScaleModel, patches):
    patches = np.asarray(patches)
    if patches.ndim == 4:
        patches = patches[None]
    if patches.ndim != 5 or patches.shape[1] != len(m.scales) or patches.shape[2] != 3:
        raise ScaleMismatchError(
            f"model expects (B, {len(m.scales)}, 3, H, W) patches, got {patches.shape}")
    return patches.astype(m.dtype, copy=False)


def _forward(m: MultiScaleModel, patches, train, rng):
    B = patches.shape[0]
    feats = []
    caches = []
    for s, layers in enumerate(m.streams):
        x = np.ascontiguousarray(patches[:, s]).reshape(B * 3, *patches.shape[-2:], 1)
        out, c = _stream_forward(layers, x, m.config.layout)
        feats.append(out.reshape(B, 3 * m.config.dense_width))
        caches.append(c)
    concat = np.concatenate(feats, axis=1)
    hidden, ccache = nn.dense_forward(concat, m.combiner)
    hidden, hmask = nn.relu_forward(hidden)
    dropped, dmask = nn.dropout(hidden, m.dropout_rate, train, rng=rng)
    logits, hcache = nn.dense_forward(dropped, m.head)
    return logits, hidden, (caches, ccache, hmask, dmask, hcache)


def _backward(m: MultiScaleModel, dlogits, cache):
    caches, ccache, hmask, dmask, hcache = cache
    grads = {}
    d, dw, db = nn.dense_backward(dlogits, hcache, m.head)
    _accumulate(grads, "head", dw, db)
    d = nn.dropout_backward(d, dmask)
    d = nn.relu_backward(d, hmask)
    d, dw, db = nn.dense_backward(d, ccache, m.combiner)
    _accumulate(grads, "combiner", dw, db)
    B = d.shape[0]
    width = 3 * m.config.dense_width
    for s, layers in enumerate(m.streams):
        ds = d[:, s * width:(s + 1) * width].reshape(B * 3, m.config.dense_width)
        _stream_backward(layers, ds, caches[s], grads, f"s{s}")
    return grads


def forward(m: MultiScaleModel, patches, train=False, rng=None, chunk=64) -> np.ndarray:
    """Class probabilities for one sample ``(S, 3, H, W)`` or a batch ``(B, S, 3, H, W)``."""
    single = np.asarray(patches).ndim == 4
    patches = _as_batch(m, patches)
    out = []
    for i in range(0, patches.shape[0], chunk):
        logits, _, _ = _forward(m, patches[i:i + chunk], train, rng)
        out.append(nn.softmax(logits.astype(np.float64)))
    probs = np.concatenate(out, axis=0)
    return probs[0] if single else probs


def embed(m: MultiScaleModel, patches, chunk=64) -> np.ndarray:
    """Combiner activations (post-ReLU, pre-dropout, eval mode); 256 values per sample."""
    single = np.asarray(patches).ndim == 4
    patches = _as_batch(m, patches)
    out = [_forward(m, patches[i:i + chunk], False, None)[1] for i in range(0, patches.shape[0], chunk)]
    feats = np.concatenate(out, axis=0)
    return feats[0] if single else feats


def loss_and_grads(m: MultiScaleModel, patches, labels, train=True, rng=None, chunk=32):
    """Mean cross-entropy over the batch and its gradient w.r.t. every parameter.

    The batch is processed in chunks and gradients are summed, so memory stays
    bounded for large batches.
    """
    patches = _as_batch(m, patches)
    labels = np.asarray(labels)
    B = patches.shape[0]
    grads = None
    total = 0.0
    for i in range(0, B, chunk):
        logits, _, cache = _forward(m, patches[i:i + chunk], train, rng)
        n = logits.shape[0]
        _, loss, dlogits = nn.softmax_xent(logits, labels[i:i + chunk])
        total += loss * n
        # softmax_xent averages over the chunk; rescale to the full batch
        g = _backward(m, (dlogits * (n / B)).astype(m.dtype), cache)
        if grads is None:
            grads = g
        else:
            for k, v in g.items():
                grads[k] += v
    return total / B, grads


def train_step(m: MultiScaleModel, patches, labels, lr, state: nn.AdamState, rng=None,
               weight_decay=1e-6, chunk=32) -> float:
    """One ADAM step on the batch; returns the pre-step mean data loss."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(m, patches, labels, train=True, rng=rng, chunk=chunk)
    params = m.named_params()
    nn.l2_penalty(params, grads, weight_decay)
    nn.adam_step(params, grads, state, lr)
    return loss


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(m: MultiScaleModel, path, adam: nn.AdamState | None = None, meta=None) -> None:
    tensors = dict(m.named_params())
    info = {
        "patch_side": m.patch_side,
        "dropout": m.dropout_rate,
        "width": m.config.width,
        "dense_width": m.config.dense_width,
        "layout": [list(e) if e != "pool" else e for e in m.config.layout],
        **m.meta,
        **(meta or {}),
    }
    if adam is not None:
        info["adam_t"] = adam.t
        for k in adam.m:
            tensors[f"adam.m.{k}"] = adam.m[k]
            tensors[f"adam.v.{k}"] = adam.v[k]
    write_container(path, CHECKPOINT_MAGIC, tensors, scales=m.scales, meta=info)


def load_checkpoint(path, expect_scales=None):
    """Return ``(model, adam_state_or_None)``.

    ``expect_scales`` guards against evaluating a checkpoint with the wrong
    scale configuration.
    """
    tensors, scales, info = read_container(Path(path), CHECKPOINT_MAGIC)
    if expect_scales is not None and tuple(float(s) for s in expect_scales) != tuple(scales):
        raise ScaleMismatchError(f"checkpoint has scales {scales}, run expects {list(expect_scales)}")
    layout = tuple(tuple(e) if e != "pool" else e for e in info["layout"])
    config = StreamConfig(layout=layout, dense_width=info["dense_width"], width=info["width"])
    m = build_model(scales, 0, config, info["patch_side"], info["dropout"])
    params = m.named_params()
    for name, arr in params.items():
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name}")
        if tensors[name].shape != arr.shape:
            raise ValueError(f"tensor {name} has shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    m.meta = {k: v for k, v in info.items()
              if k not in ("patch_side", "dropout", "width", "dense_width", "layout", "adam_t")}
    adam = None
    if "adam_t" in info:
        adam = nn.AdamState(t=info["adam_t"])
        for name in params:
            if f"adam.m.{name}" in tensors:
                adam.m[name] = tensors[f"adam.m.{name}"].copy()
                adam.v[name] = tensors[f"adam.v.{name}"].copy()
    return m, adam
