"""Text-configured augmentation of (patch, mask) pairs.

Config format, one operator per line::

    # comment
    rot90 k=random
    mirror axis=random p=0.5
    elastic alpha=10 sigma=4
    color brightness=0.1 contrast=0.1 gray_mix=0.1

Patches are ``(H, W, C)`` float arrays; the first three channels are RGB
and extra channels only receive geometric transforms. Masks are ``(H, W)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .filters import gaussian_blur


class PipelineError(ValueError):
    pass


# kind -> default parameters
_DEFAULTS: Dict[str, Dict[str, object]] = {
    "rot90": {"k": "random"},
    "mirror": {"axis": "random", "p": 0.5},
    "elastic": {"alpha": 10.0, "sigma": 4.0},
    "color": {"brightness": 0.1, "contrast": 0.1, "gray_mix": 0.1},
}


def _check_param(kind: str, key: str, value):
    if kind == "rot90" and key == "k":
        if value == "random":
            return value
        k = int(value)
        if k not in (0, 1, 2, 3):
            raise ValueError("k out of range")
        return k
    if kind == "mirror" and key == "axis":
        if value not in ("h", "v", "random"):
            raise ValueError("axis out of range")
        return value
    v = float(value)
    if kind == "mirror" and key == "p" and not 0.0 <= v <= 1.0:
        raise ValueError("p out of range")
    if kind == "elastic" and key == "alpha" and not v >= 0.0:
        raise ValueError("alpha out of range")
    if kind == "elastic" and key == "sigma" and not v > 0.0:
        raise ValueError("sigma out of range")
    if kind == "color" and not 0.0 <= v <= 1.0:
        raise ValueError(f"{key} out of range")
    return v


@dataclass(frozen=True)
class AugmentOp:
    kind: str
    params: Tuple[Tuple[str, object], ...]

    @classmethod
    def make(cls, kind: str, **params) -> "AugmentOp":
        if kind not in _DEFAULTS:
            raise PipelineError(f"unknown augmentation kind {kind!r}")
        merged = dict(_DEFAULTS[kind])
        for key, value in params.items():
            if key not in merged:
                raise PipelineError(f"unknown parameter {key!r} for {kind}")
            try:
                merged[key] = _check_param(kind, key, value)
            except ValueError as exc:
                raise PipelineError(str(exc)) from None
        return cls(kind, tuple(merged.items()))

    def get(self, key):
        return dict(self.params)[key]

    def render(self) -> str:
        args = " ".join(f"{k}={_fmt(v)}" for k, v in self.params)
        return f"{self.kind} {args}".strip()


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class AugmentPipeline:
    ops: List[AugmentOp] = field(default_factory=list)
    source: str = ""

    def render(self) -> str:
        return "".join(op.render() + "\n" for op in self.ops)

    def __eq__(self, other) -> bool:
        return isinstance(other, AugmentPipeline) and self.ops == other.ops


def parse_pipeline(text: str) -> AugmentPipeline:
    ops = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        params = {}
        for arg in args:
            if arg.count("=") != 1:
                raise PipelineError(f"malformed argument {arg!r}, line {lineno}")
            key, value = arg.split("=")
            if not key or not value:
                raise PipelineError(f"malformed argument {arg!r}, line {lineno}")
            params[key] = value
        try:
            ops.append(AugmentOp.make(kind, **params))
        except PipelineError as exc:
            raise PipelineError(f"{exc}, line {lineno}") from None
    return AugmentPipeline(ops, text)


def load_pipeline(path) -> AugmentPipeline:
    with open(path, encoding="utf-8") as fh:
        return parse_pipeline(fh.read())


def _bilinear(img: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    yy = np.clip(yy, 0, h - 1)
    xx = np.clip(xx, 0, w - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yy - y0)[..., None]
    fx = (xx - x0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    if img.dtype.kind in "ui":
        out = np.floor(out + 0.5)
    return out.astype(img.dtype)


def elastic_transform(patch, mask, alpha, sigma, rng):
    """Warp patch (bilinear) and mask (nearest) with a smoothed random field.

    ``alpha`` is the peak displacement in pixels.
    """
    h, w = mask.shape
    fields = []
    for _ in range(2):
        raw = rng.uniform(-1.0, 1.0, (h, w))
        smooth = gaussian_blur(raw, sigma)
        peak = np.abs(smooth).max()
        fields.append(smooth / peak * alpha if peak > 0 else smooth * 0.0)
    dy, dx = fields
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    yy, xx = gy + dy, gx + dx
    warped = _bilinear(patch, yy, xx)
    ny = np.clip(np.floor(yy + 0.5), 0, h - 1).astype(int)
    nx = np.clip(np.floor(xx + 0.5), 0, w - 1).astype(int)
    return warped, mask[ny, nx]


def color_jitter(patch, brightness, contrast, gray_mix, rng, value_max=255.0):
    """Brightness/contrast/grey-mix jitter on the RGB channels.

    With ``value_max=255`` this is
    ``clamp((1-g) * (c*(v-128) + 128 + 255*b) + g*luma, 0, 255)``.
    """
    b = rng.uniform(-brightness, brightness)
    c = rng.uniform(1.0 - contrast, 1.0 + contrast)
    g = rng.uniform(0.0, gray_mix)
    return _jitter(patch, b, c, g, value_max)


def _jitter(patch, b, c, g, value_max=255.0):
    mid = 128.0 / 255.0 * value_max
    rgb = patch[..., :3]
    luma = (0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2])[..., None]
    # c*v + (1-c)*mid keeps c=1 bit-exact
    out = (1.0 - g) * (c * rgb + (1.0 - c) * mid + b * value_max) + g * luma
    result = patch.copy()
    result[..., :3] = np.clip(out, 0.0, value_max)
    return result


def apply(pipeline: AugmentPipeline, patch, mask, rng, value_max=255.0):
    """Run every op in order; ``rng`` (a numpy Generator) is advanced in place."""
    if patch.shape[:2] != mask.shape:
        raise ValueError(f"dimension mismatch: patch {patch.shape[:2]} vs mask {mask.shape}")
    for op in pipeline.ops:
        if op.kind == "rot90":
            k = op.get("k")
            k = int(rng.integers(4)) if k == "random" else k
            patch = np.rot90(patch, k, axes=(0, 1))
            mask = np.rot90(mask, k, axes=(0, 1))
        elif op.kind == "mirror":
            axis = op.get("axis")
            flip = rng.random() < op.get("p")
            if axis == "random":
                axis = "h" if rng.random() < 0.5 else "v"
            if flip:
                ax = 1 if axis == "h" else 0
                patch = np.flip(patch, axis=ax)
                mask = np.flip(mask, axis=ax)
        elif op.kind == "elastic":
            patch, mask = elastic_transform(patch, mask, op.get("alpha"), op.get("sigma"), rng)
        elif op.kind == "color":
            patch = color_jitter(
                patch, op.get("brightness"), op.get("contrast"), op.get("gray_mix"), rng, value_max
            )
    return np.ascontiguousarray(patch), np.ascontiguousarray(mask)
