"""Small fully-convolutional pixel classifier with hand-written backprop.

Tensors are channels-last: a batch is ``(N, H, W, C)`` with values in
[0, 1]. Layers are tuples::

    ("conv", in_ch, out_ch)   3x3, zero-padded "same"
    ("relu",)
    ("maxpool2",)             ceil mode
    ("upsample2",)            nearest, cropped back to the pre-pool size
    ("sigmoid",)              final layer only
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster_store import Slide, downsample2

P_CLAMP = 1e-7
MAGIC = b"WOBP"
ROW_CHUNK = 2048
FILE_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FcnConfig:
    layers: Tuple[tuple, ...]
    input_channels: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(l) for l in self.layers))
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("empty layer list")
        channels = self.input_channels
        depth = 0
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                _, cin, cout = layer
                if cin != channels:
                    raise ConfigError(f"layer {i}: conv expects {channels} input channels, got {cin}")
                if cout < 1:
                    raise ConfigError(f"layer {i}: conv needs at least one output channel")
                channels = cout
            elif kind == "maxpool2":
                depth += 1
            elif kind == "upsample2":
                depth -= 1
                if depth < 0:
                    raise ConfigError(f"layer {i}: upsample2 without a matching maxpool2")
            elif kind == "sigmoid":
                if i != len(self.layers) - 1:
                    raise ConfigError("sigmoid is only allowed as the final layer")
            elif kind != "relu":
                raise ConfigError(f"layer {i}: unknown kind {kind!r}")
        if depth != 0:
            raise ConfigError("maxpool2/upsample2 counts do not balance")
        if self.layers[-1][0] != "sigmoid" or channels != 1:
            raise ConfigError("network must end in a 1-channel conv followed by sigmoid")

    def to_dict(self) -> dict:
        return {"layers": [list(l) for l in self.layers], "input_channels": self.input_channels}

    @classmethod
    def from_dict(cls, d: dict) -> "FcnConfig":
        return cls(tuple(tuple(l) for l in d["layers"]), int(d["input_channels"]))

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()

    def shapes(self) -> List[Tuple[tuple, tuple]]:
        """(weight shape, bias shape) per conv layer, in order."""
        return [((3, 3, l[1], l[2]), (l[2],)) for l in self.layers if l[0] == "conv"]

    def n_params(self) -> int:
        return sum(math.prod(w) + math.prod(b) for w, b in self.shapes())

    @property
    def pool_depth(self) -> int:
        depth = best = 0
        for layer in self.layers:
            depth += layer[0] == "maxpool2"
            depth -= layer[0] == "upsample2"
            best = max(best, depth)
        return best


BASE_CONFIG = FcnConfig(
    (("conv", 3, 8), ("relu",), ("conv", 8, 8), ("relu",), ("conv", 8, 1), ("sigmoid",)), 3
)
HEAD_CONFIG = FcnConfig(
    (
        ("conv", 4, 8),
        ("relu",),
        ("maxpool2",),
        ("conv", 8, 8),
        ("relu",),
        ("upsample2",),
        ("conv", 8, 1),
        ("sigmoid",),
    ),
    4,
)
NAMED_CONFIGS = {"base": BASE_CONFIG, "head": HEAD_CONFIG}


def alignment(config: FcnConfig) -> int:
    return 2 ** config.pool_depth


def receptive_radius(config: FcnConfig) -> int:
    """Largest offset between an output pixel and any input pixel it reads."""
    align = alignment(config)
    base = 8 * align
    radius = 0
    for offset in range(align):
        pos = base + offset
        lo = hi = pos
        for layer in reversed(config.layers):
            kind = layer[0]
            if kind == "conv":
                lo, hi = lo - 1, hi + 1
            elif kind == "upsample2":
                lo, hi = lo // 2, hi // 2
            elif kind == "maxpool2":
                lo, hi = 2 * lo, 2 * hi + 1
        radius = max(radius, pos - lo, hi - pos)
    return radius


@dataclass
class Params:
    config: FcnConfig
    vector: np.ndarray
    seed: int = 0

    def __post_init__(self):
        if self.vector.ndim != 1 or self.vector.size != self.config.n_params():
            raise ConfigError(
                f"parameter vector has {self.vector.size} entries, config needs {self.config.n_params()}"
            )

    def tensors(self, vector=None):
        """Per-conv (weight, bias) views into ``vector`` (defaults to own)."""
        vec = self.vector if vector is None else vector
        out, pos = [], 0
        for wshape, bshape in self.config.shapes():
            nw, nb = math.prod(wshape), math.prod(bshape)
            out.append((vec[pos:pos + nw].reshape(wshape), vec[pos + nw:pos + nw + nb]))
            pos += nw + nb
        return out

    def copy(self) -> "Params":
        return Params(self.config, self.vector.copy(), self.seed)


def init_params(config: FcnConfig, seed: int = 0, dtype=np.float32) -> Params:
    config.validate()
    rng = np.random.default_rng(seed)
    chunks = []
    for wshape, bshape in config.shapes():
        fan_in = 9 * wshape[2]
        fan_out = 9 * wshape[3]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, math.prod(wshape)))
        chunks.append(np.zeros(math.prod(bshape)))
    return Params(config, np.concatenate(chunks).astype(dtype), seed)


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _im2col(x):
    """(N, H, W, C) -> (N*H*W, 9*C) columns ordered (ky, kx, c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _matmul_rows(a, b, chunk=ROW_CHUNK):
    """``a @ b`` in fixed-height row blocks.

    BLAS may round a row differently depending on the matrix height; fixed
    blocks make each output row independent of how the image was tiled.
    """
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    for start in range(0, m, chunk):
        block = a[start:start + chunk]
        if block.shape[0] < chunk:
            block = np.concatenate([block, np.zeros((chunk - block.shape[0], a.shape[1]), a.dtype)])
        out[start:start + chunk] = (block @ b)[: min(chunk, m - start)]
    return out


def _conv_input_grad(d, wt):
    """Gradient w.r.t. a "same" 3x3 conv input: correlate with the flipped kernel."""
    flipped = wt[::-1, ::-1].transpose(0, 1, 3, 2)  # (3, 3, out, in)
    n, h, w, _ = d.shape
    return (_im2col(d) @ flipped.reshape(-1, wt.shape[2])).reshape(n, h, w, wt.shape[2])


def _pool(x):
    n, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    if (h2 * 2, w2 * 2) != (h, w):
        x = np.pad(x, ((0, 0), (0, h2 * 2 - h), (0, w2 * 2 - w), (0, 0)), constant_values=-np.inf)
    blocks = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _unpool(dout, idx, shape):
    n, h, w, c = shape
    h2, w2 = dout.shape[1:3]
    blocks = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    full = blocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return full[:, :h, :w]


def _upsample(x, size):
    h, w = size
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)[:, :h, :w]


def _upsample_back(dout, pooled_shape):
    n, h2, w2, c = pooled_shape
    h, w = dout.shape[1:3]
    pad = np.zeros((n, 2 * h2, 2 * w2, c), dtype=dout.dtype)
    pad[:, :h, :w] = dout
    return pad.reshape(n, h2, 2, w2, 2, c).sum(axis=(2, 4))


def _run(params: Params, x: np.ndarray, vector=None, keep: bool = False):
    """Forward pass to pre-sigmoid logits; optionally keep backward caches."""
    tensors = params.tensors(vector)
    caches = []
    sizes = []
    conv_i = 0
    for layer in params.config.layers:
        kind = layer[0]
        if kind == "conv":
            wt, b = tensors[conv_i]
            conv_i += 1
            n, h, w, _ = x.shape
            cols = _im2col(x)
            y = (_matmul_rows(cols, wt.reshape(-1, wt.shape[3])) + b).reshape(n, h, w, wt.shape[3])
            if keep:
                caches.append(("conv", cols, x.shape))
            x = y
        elif kind == "relu":
            if keep:
                caches.append(("relu", x > 0))
            x = np.maximum(x, 0)
        elif kind == "maxpool2":
            sizes.append(x.shape[1:3])
            shape = x.shape
            x, idx = _pool(x)
            if keep:
                caches.append(("maxpool2", idx, shape))
        elif kind == "upsample2":
            size = sizes.pop()
            if keep:
                caches.append(("upsample2", x.shape))
            x = _upsample(x, size)
        elif kind == "sigmoid":
            pass
    return x[..., 0], caches


def _as_batch(x: np.ndarray, config: FcnConfig, dtype) -> np.ndarray:
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] != config.input_channels:
        raise ConfigError(
            f"input has {x.shape[-1]} channels, network expects {config.input_channels}"
        )
    return np.ascontiguousarray(x, dtype=dtype)


def forward(params: Params, x: np.ndarray) -> np.ndarray:
    """Probabilities for an ``(H, W, C)`` patch or ``(N, H, W, C)`` batch."""
    single = x.ndim == 3
    xb = _as_batch(x, params.config, params.vector.dtype)
    logits, _ = _run(params, xb)
    p = _sigmoid(logits)
    return p[0] if single else p


def loss_and_grad(params: Params, x: np.ndarray, y: np.ndarray):
    """Mean pixelwise binary cross-entropy and its gradient w.r.t. the vector."""
    if len(x) == 0:
        raise ValueError("empty batch")
    xb = _as_batch(x, params.config, params.vector.dtype)
    yb = np.asarray(y, dtype=params.vector.dtype).reshape(xb.shape[:3])
    logits, caches = _run(params, xb, keep=True)
    p = _sigmoid(logits)
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    p64, y64 = pc.astype(np.float64), yb.astype(np.float64)
    loss = float(-np.mean(y64 * np.log(p64) + (1 - y64) * np.log(1 - p64)))
    inside = (p > P_CLAMP) & (p < 1 - P_CLAMP)
    d = np.where(inside, (p - yb) / yb.size, 0).astype(xb.dtype)[..., None]

    tensors = params.tensors()
    conv_i = len(tensors)
    grads = []
    for pos in range(len(caches) - 1, -1, -1):
        cache = caches[pos]
        kind = cache[0]
        if kind == "conv":
            _, cols, shape = cache
            conv_i -= 1
            cout = d.shape[-1]
            d2 = d.reshape(-1, cout)
            grads.append((cols.T @ d2, d2.sum(axis=0)))
            if pos > 0:  # no input gradient needed below the first layer
                d = _conv_input_grad(d, tensors[conv_i][0])
        elif kind == "relu":
            d = d * cache[1]
        elif kind == "maxpool2":
            _, idx, shape = cache
            d = _unpool(d, idx, shape)
        elif kind == "upsample2":
            d = _upsample_back(d, cache[1])
    grad = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)])
    return loss, grad


def sgd_step(params: Params, grad: np.ndarray, lr: float, momentum: float, velocity: np.ndarray):
    """Heavy-ball step; returns ``(new_params, new_velocity)``."""
    if not lr > 0 or not 0.0 <= momentum < 1.0:
        raise ValueError("need lr > 0 and momentum in [0, 1)")
    if grad.shape != params.vector.shape or velocity.shape != params.vector.shape:
        raise ValueError("shape mismatch between params, grad and velocity")
    v = momentum * velocity - lr * grad
    return Params(params.config, (params.vector + v).astype(params.vector.dtype), params.seed), v.astype(
        params.vector.dtype
    )


def activation_pattern(params: Params, x: np.ndarray, vector=None) -> tuple:
    """ReLU on/off and pool-argmax choices; constant where the net is smooth."""
    xb = _as_batch(x, params.config, np.float64 if vector is None else vector.dtype)
    _, caches = _run(params, xb, vector, keep=True)
    return tuple(c[1].tobytes() for c in caches if c[0] in ("relu", "maxpool2"))


def predict_array(params: Params, image: np.ndarray, tile: int = 256, halo: int | None = None, threads: int = 1):
    """Tiled inference over an ``(H, W, C)`` array in [0, 1].

    Tiles overlap by ``halo`` pixels and only their interiors are kept, so
    the result equals a single whole-image forward pass whenever ``halo``
    covers the receptive field.
    """
    cfg = params.config
    radius = receptive_radius(cfg)
    halo = radius if halo is None else halo
    if halo < radius:
        raise ValueError(f"halo too small: {halo} < receptive-field radius {radius}")
    if tile <= 2 * halo:
        raise ValueError(f"tile {tile} must exceed twice the halo {halo}")
    align = alignment(cfg)
    step = max(align, ((tile - 2 * halo) // align) * align)
    pad = -(-halo // align) * align
    h, w = image.shape[:2]
    out = np.empty((h, w), dtype=params.vector.dtype)
    jobs = [(y, x) for y in range(0, h, step) for x in range(0, w, step)]

    def run(job):
        y0, x0 = job
        wy0, wx0 = max(0, y0 - pad), max(0, x0 - pad)
        wy1, wx1 = min(h, y0 + step + pad), min(w, x0 + step + pad)
        p = forward(params, image[wy0:wy1, wx0:wx1])
        cy1, cx1 = min(h, y0 + step), min(w, x0 + step)
        out[y0:cy1, x0:cx1] = p[y0 - wy0:cy1 - wy0, x0 - wx0:cx1 - wx0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, jobs))
    else:
        for job in jobs:
            run(job)
    return out


def slide_input(slide: Slide, level_index: int, dtype=np.float32) -> np.ndarray:
    dtype = np.dtype(dtype)
    return slide.rgb(level_index).astype(dtype) / dtype.type(255.0)


def predict_slide(params: Params, slide: Slide, level_mpp: float = 1.0, tile: int = 256, halo=None, threads=1):
    try:
        li = slide.level_index(level_mpp)
    except KeyError as exc:
        raise ValueError(str(exc)) from None
    return predict_array(params, slide_input(slide, li, params.vector.dtype), tile, halo, threads)


def compound_input(base: Params, slide: Slide, tile: int = 256, threads: int = 1) -> np.ndarray:
    """2 mpp RGB stacked with the downsampled 1 mpp base prediction."""
    try:
        l1, l2 = slide.level_index(1.0), slide.level_index(2.0)
    except KeyError as exc:
        raise ValueError(f"compound prediction needs 1 and 2 mpp levels: {exc}") from None
    prob = predict_array(base, slide_input(slide, l1, base.vector.dtype), tile, None, threads)
    prob2 = downsample2(prob)
    rgb = slide_input(slide, l2, base.vector.dtype)
    return np.concatenate([rgb, prob2[:, :, None].astype(rgb.dtype)], axis=2)


def compound_predict(base: Params, head: Params, slide: Slide, tile: int = 256, threads: int = 1):
    if base.config.input_channels != 3 or head.config.input_channels != 4:
        raise ConfigError("compound prediction needs a 3-channel base and a 4-channel head")
    x = compound_input(base, slide, tile, threads)
    return predict_array(head, x.astype(head.vector.dtype), tile, None, threads)


def save_params(params: Params, path) -> None:
    """Header (magic, version, config digest, count, config JSON) + LE float32."""
    cfg_json = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    vec = np.asarray(params.vector, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FILE_VERSION))
        fh.write(params.config.digest())
        fh.write(struct.pack("<QI", vec.size, len(cfg_json)))
        fh.write(cfg_json)
        fh.write(vec.tobytes())


def load_params(path, config: FcnConfig | None = None) -> Params:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:4] != MAGIC:
            raise ConfigError(f"{path}: not a parameter file")
        (version,) = struct.unpack_from("<H", blob, 4)
        digest = blob[6:38]
        count, jlen = struct.unpack_from("<QI", blob, 38)
        stored = FcnConfig.from_dict(json.loads(blob[50:50 + jlen]))
        body = blob[50 + jlen:]
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: corrupt parameter file ({exc})") from None
    if version != FILE_VERSION or stored.digest() != digest:
        raise ConfigError(f"{path}: corrupt parameter file header")
    if len(body) != 4 * count:
        raise ConfigError(f"{path}: corrupt parameter file, expected {count} floats")
    if config is not None and config.digest() != digest:
        raise ConfigError(f"{path}: config hash mismatch")
    vec = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return Params(stored, vec)
