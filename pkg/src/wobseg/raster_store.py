"""Multi-resolution slide container (``.slab`` directories) and pyramid helpers.

A slab directory holds ``manifest.json`` plus raw, row-major,
channel-interleaved ``uint8`` planes, one per level and one per mask level.
Rasters are plain numpy arrays shaped ``(H, W, C)`` for images and
``(H, W)`` for masks.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

MANIFEST = "manifest.json"

CHANNEL_ROLES = (
    "red",
    "green",
    "blue",
    "CK8/18-epithelial",
    "CK5/6+p63-basal",
    "AMACR",
    "DAPI",
)
RGB_ROLES = ("red", "green", "blue")


class SlabError(ValueError):
    """Malformed or inconsistent slab container."""


class RegionError(ValueError):
    """Requested region falls outside the level bounds."""


@dataclass
class Level:
    mpp: float
    image: np.ndarray  # (H, W, C) uint8

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def channels(self) -> int:
        return self.image.shape[2]


@dataclass
class Slide:
    """A raster pyramid, finest level first, with aligned mask layers.

    ``masks`` maps a mask name to a list with one entry per level; an entry
    is ``None`` when that level carries no plane for the mask. Names listed
    in ``prob_masks`` hold quantized probabilities (0..255) instead of 0/1.
    """

    id: str
    levels: List[Level]
    channel_roles: Dict[int, str]
    masks: Dict[str, List[Optional[np.ndarray]]] = field(default_factory=dict)
    prob_masks: frozenset = frozenset()

    def level_index(self, mpp: float) -> int:
        for i, level in enumerate(self.levels):
            if math.isclose(level.mpp, mpp, rel_tol=1e-9):
                return i
        raise KeyError(f"slide {self.id!r} has no level at {mpp} mpp")

    def level_at(self, mpp: float) -> Level:
        return self.levels[self.level_index(mpp)]

    def channel(self, role: str) -> int:
        for idx, r in self.channel_roles.items():
            if r == role:
                return idx
        raise KeyError(f"slide {self.id!r} has no {role!r} channel")

    def rgb(self, level_index: int) -> np.ndarray:
        idx = [self.channel(r) for r in RGB_ROLES]
        return self.levels[level_index].image[:, :, idx]

    def mask(self, name: str, level_index: int) -> np.ndarray:
        planes = self.masks.get(name)
        if planes is None or level_index >= len(planes) or planes[level_index] is None:
            raise KeyError(f"slide {self.id!r} has no {name!r} mask at level {level_index}")
        return planes[level_index]

    def validate(self) -> None:
        if not self.levels:
            raise SlabError("slide has no levels")
        for prev, nxt in zip(self.levels, self.levels[1:]):
            if nxt.mpp != prev.mpp * 2:
                raise SlabError(
                    f"mpp chain must double between levels, got {prev.mpp} -> {nxt.mpp}"
                )
            if (nxt.height, nxt.width) != (-(-prev.height // 2), -(-prev.width // 2)):
                raise SlabError("level dimensions must halve (ceiling) along the pyramid")
        for level in self.levels:
            if level.image.dtype != np.uint8 or level.image.ndim != 3:
                raise SlabError("level images must be (H, W, C) uint8 arrays")
            if level.mpp <= 0:
                raise SlabError("mpp must be positive")
        for name, planes in self.masks.items():
            if len(planes) != len(self.levels):
                raise SlabError(f"mask {name!r} must list one entry per level")
            for level, plane in zip(self.levels, planes):
                if plane is None:
                    continue
                if plane.shape != (level.height, level.width):
                    raise SlabError(f"mask {name!r} does not match its level dimensions")
                if plane.dtype != np.uint8 or (name not in self.prob_masks and plane.max(initial=0) > 1):
                    raise SlabError(f"mask {name!r} must hold uint8 values in {{0, 1}}")


@dataclass(frozen=True)
class Region:
    level_index: int
    x: int
    y: int
    width: int
    height: int


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _read_plane(path: Path, shape: tuple) -> np.ndarray:
    expected = int(np.prod(shape))
    size = path.stat().st_size
    if size != expected:
        raise SlabError(f"corrupt plane {path.name}: expected {expected} bytes, found {size}")
    return _readonly(np.fromfile(path, dtype=np.uint8).reshape(shape))


def open_slide(path) -> Slide:
    """Load a slab directory written by :func:`save_slide`."""
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    meta = json.loads(manifest_path.read_text(encoding="utf-8"))
    try:
        level_meta = meta["levels"]
        levels = []
        for entry in level_meta:
            shape = (int(entry["height"]), int(entry["width"]), int(entry["channels"]))
            levels.append(Level(float(entry["mpp"]), _read_plane(path / entry["file"], shape)))
        roles = {int(k): v for k, v in meta.get("channel_roles", {}).items()}
        masks: Dict[str, List[Optional[np.ndarray]]] = {}
        probs = set()
        for entry in meta.get("masks", []):
            if entry.get("kind", "binary") == "prob":
                probs.add(entry["name"])
            li = int(entry["level"])
            planes = masks.setdefault(entry["name"], [None] * len(levels))
            lv = levels[li]
            planes[li] = _read_plane(path / entry["file"], (lv.height, lv.width))
        slide = Slide(str(meta["id"]), levels, roles, masks, frozenset(probs))
    except (KeyError, TypeError, IndexError) as exc:
        raise SlabError(f"malformed manifest {manifest_path}: {exc}") from exc
    slide.validate()
    return slide


def _manifest(slide: Slide) -> dict:
    levels = [
        {
            "mpp": lv.mpp,
            "width": lv.width,
            "height": lv.height,
            "channels": lv.channels,
            "file": f"level_{i}.raw",
        }
        for i, lv in enumerate(slide.levels)
    ]
    masks = []
    for name in sorted(slide.masks):
        for li, plane in enumerate(slide.masks[name]):
            if plane is not None:
                entry = {"name": name, "level": li, "file": f"mask_{name}_{li}.raw"}
                if name in slide.prob_masks:
                    entry["kind"] = "prob"
                masks.append(entry)
    return {
        "id": slide.id,
        "levels": levels,
        "masks": masks,
        "channel_roles": {str(k): v for k, v in sorted(slide.channel_roles.items())},
    }


def save_slide(slide: Slide, path, overwrite: bool = False) -> None:
    """Write ``slide`` as a slab directory.

    Raises ``FileExistsError`` when ``path`` already holds a manifest and
    ``overwrite`` is false.
    """
    slide.validate()
    path = Path(path)
    if (path / MANIFEST).exists() and not overwrite:
        raise FileExistsError(f"{path} already contains a slide")
    path.mkdir(parents=True, exist_ok=True)
    meta = _manifest(slide)
    for entry, lv in zip(meta["levels"], slide.levels):
        np.ascontiguousarray(lv.image).tofile(path / entry["file"])
    for entry in meta["masks"]:
        plane = slide.masks[entry["name"]][entry["level"]]
        np.ascontiguousarray(plane).tofile(path / entry["file"])
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path / MANIFEST)


def read_region(slide: Slide, region: Region) -> np.ndarray:
    if not 0 <= region.level_index < len(slide.levels):
        raise RegionError(f"level {region.level_index} does not exist")
    lv = slide.levels[region.level_index]
    if (
        region.width <= 0
        or region.height <= 0
        or region.x < 0
        or region.y < 0
        or region.x + region.width > lv.width
        or region.y + region.height > lv.height
    ):
        raise RegionError(f"{region} lies outside the {lv.width}x{lv.height} level")
    return lv.image[region.y:region.y + region.height, region.x:region.x + region.width].copy()


def downsample2(raster: np.ndarray, mask: bool = False) -> np.ndarray:
    """Halve a raster with 2x2 block means (ceil dims, partial edge blocks).

    Bytes round half up; float rasters keep the exact mean. With
    ``mask=True`` a block becomes 1 when at least half its pixels are 1.
    """
    if raster.size == 0:
        raise ValueError("cannot downsample an empty raster")
    squeeze = raster.ndim == 2
    src = raster[:, :, None] if squeeze else raster
    h, w, c = src.shape
    oh, ow = -(-h // 2), -(-w // 2)
    acc = np.zeros((oh * 2, ow * 2, c), dtype=np.float64 if src.dtype.kind == "f" else np.int64)
    cnt = np.zeros((oh * 2, ow * 2, 1), dtype=np.int64)
    acc[:h, :w] = src
    cnt[:h, :w] = 1
    sums = acc.reshape(oh, 2, ow, 2, c).sum(axis=(1, 3))
    n = cnt.reshape(oh, 2, ow, 2, 1).sum(axis=(1, 3))
    if mask:
        out = (2 * sums >= n).astype(np.uint8)
    elif src.dtype == np.uint8:
        out = ((2 * sums + n) // (2 * n)).astype(np.uint8)
    else:
        out = (sums / n).astype(src.dtype)
    return out[:, :, 0] if squeeze else out


def build_pyramid(base: np.ndarray, mpp: float, n_levels: int) -> List[Level]:
    levels = [Level(mpp, base)]
    for _ in range(n_levels - 1):
        prev = levels[-1]
        levels.append(Level(prev.mpp * 2, downsample2(prev.image)))
    return levels


def mask_pyramid(base: np.ndarray, n_levels: int) -> List[np.ndarray]:
    planes = [base]
    for _ in range(n_levels - 1):
        planes.append(downsample2(planes[-1], mask=True))
    return planes


def map_coords(slide: Slide, from_level: int, to_level: int, x: int, y: int) -> tuple:
    scale = slide.levels[from_level].mpp / slide.levels[to_level].mpp
    return math.floor(x * scale), math.floor(y * scale)
