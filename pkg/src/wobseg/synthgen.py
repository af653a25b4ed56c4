"""Deterministic synthetic prostate slides with exact WOB ground truth.

Geometry is rasterized once at 0.5 mpp; the 1 and 2 mpp levels are derived
with :func:`raster_store.downsample2`. Every output is a pure function of the
parameters (including the seed).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .raster_store import CHANNEL_ROLES, Slide, build_pyramid, mask_pyramid, save_slide

BASE_MPP = 0.5
N_LEVELS = 3  # 0.5, 1 and 2 mpp
EPI_LEVEL = 0.55

# H&E-like palette, RGB bytes
GLASS = (242.0, 241.0, 245.0)
STROMA = (230.0, 158.0, 188.0)
HALO = (196.0, 120.0, 178.0)
BENIGN_EPI = (222.0, 182.0, 220.0)
WOB_EPI = (150.0, 92.0, 172.0)
BASAL_RING = (96.0, 58.0, 140.0)
BENIGN_LUMEN = (250.0, 244.0, 250.0)
WOB_LUMEN = (198.0, 188.0, 232.0)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GlandSpec:
    center: Tuple[float, float]  # um
    radii: Tuple[float, float]  # um, ellipse semi-axes
    rotation: float
    has_basal_rim: bool
    rim_thickness: float  # um
    is_idcp: bool
    amacr_level: float
    epi_width: float = 3.0  # um, epithelial band inside the outline
    mimic: bool = False  # benign gland rendered with WOB-like colour

    @property
    def is_wob(self) -> bool:
        return (not self.has_basal_rim) or self.is_idcp


@dataclass
class SynthParams:
    width_um: float = 512.0
    height_um: float = 512.0
    gland_count: Tuple[int, int] = (55, 70)
    radius_um: Tuple[float, float] = (9.0, 20.0)
    rim_prob: float = 0.5
    idcp_prob: float = 0.08
    mimic_prob: float = 0.2
    mimic_radius_um: Tuple[float, float] = (3.5, 5.5)
    rim_thickness_um: float = 3.0
    gland_gap_um: float = 6.0
    amacr_spurious_prob: float = 0.2
    noise: dict = field(
        default_factory=lambda: {"rgb": 10.0, "epithelial": 0.2, "basal": 0.25, "amacr": 0.5}
    )
    context_cue_scale_um: float = 10.0
    tissue: str = "section"  # "section" (prostatectomy-like) or "core" (biopsy-like)
    core_width_um: float = 220.0
    stain_shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self) -> None:
        for name in ("rim_prob", "idcp_prob", "mimic_prob", "amacr_spurious_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 < self.context_cue_scale_um <= 20.0:
            raise ValueError("context_cue_scale_um must lie in (0, 20]")
        if self.width_um <= 0 or self.height_um <= 0:
            raise ValueError("slide dimensions must be positive")
        lo, hi = self.gland_count
        if not 0 <= lo <= hi:
            raise ValueError("gland_count must be an ordered (min, max) pair")
        if self.tissue not in ("section", "core"):
            raise ValueError(f"unknown tissue kind {self.tissue!r}")
        for key in ("rgb", "epithelial", "basal", "amacr"):
            if self.noise.get(key, 0.0) < 0:
                raise ValueError(f"noise amplitude {key!r} must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth parameters: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("gland_count", "radius_um", "mimic_radius_um", "stain_shift"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "noise" in kwargs:
            kwargs["noise"] = {**cls().noise, **kwargs["noise"]}
        params = cls(**kwargs)
        params.validate()
        return params

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("gland_count", "radius_um", "mimic_radius_um", "stain_shift"):
            d[key] = list(d[key])
        return d


def _value_noise(rng, shape, cell_px: float) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice values, cubic interpolation."""
    gh = int(math.ceil(shape[0] / cell_px)) + 4
    gw = int(math.ceil(shape[1] / cell_px)) + 4
    grid = rng.random((gh, gw))
    ys = np.arange(shape[0]) / cell_px + 1.5
    xs = np.arange(shape[1]) / cell_px + 1.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.clip(ndimage.map_coordinates(grid, [yy, xx], order=3, mode="nearest"), 0.0, 1.0)


def _tissue_region(params: SynthParams, rng, shape) -> np.ndarray:
    h, w = shape
    if params.tissue == "section":
        noise = _value_noise(rng, shape, 160.0 / BASE_MPP)
        return noise > 0.22
    ys = (np.arange(h) + 0.5) * BASE_MPP
    xs = (np.arange(w) + 0.5) * BASE_MPP
    phase = rng.uniform(0, 2 * np.pi)
    centre = params.height_um / 2 + 0.12 * params.height_um * np.sin(
        2 * np.pi * xs / params.width_um + phase
    )
    wobble = (_value_noise(rng, shape, 40.0 / BASE_MPP) - 0.5) * 24.0
    return np.abs(ys[:, None] - centre[None, :]) + wobble < params.core_width_um / 2


def _sample_glands(params: SynthParams, rng, tissue: np.ndarray) -> List[GlandSpec]:
    n_target = int(rng.integers(params.gland_count[0], params.gland_count[1] + 1))
    glands: List[GlandSpec] = []
    extents: List[float] = []
    h, w = tissue.shape
    tries = 0
    max_tries = 400 * max(n_target, 1)
    while len(glands) < n_target:
        tries += 1
        if tries > max_tries:
            raise GenerationError(
                f"placed {len(glands)} of {n_target} glands after {max_tries} attempts"
            )
        has_rim = bool(rng.random() < params.rim_prob)
        is_idcp = has_rim and bool(rng.random() < params.idcp_prob)
        mimic = has_rim and not is_idcp and bool(rng.random() < params.mimic_prob)
        lo, hi = params.mimic_radius_um if mimic else params.radius_um
        a = float(rng.uniform(lo, hi))
        b = a * float(rng.uniform(0.7, 1.0))
        rot = float(rng.uniform(0, np.pi))
        wob = (not has_rim) or is_idcp
        if wob:
            amacr = float(rng.uniform(0.6, 1.0))
        elif rng.random() < params.amacr_spurious_prob:
            amacr = 0.5 * float(rng.uniform(0.6, 1.0))
        else:
            amacr = 0.0
        epi_width = max(3.0, 0.65 * b) if wob else 3.0
        cx = float(rng.uniform(0, params.width_um))
        cy = float(rng.uniform(0, params.height_um))
        extent = a + params.rim_thickness_um
        if not _inside_tissue(tissue, cx, cy, extent + 2.0):
            continue
        clash = any(
            math.hypot(cx - g.center[0], cy - g.center[1]) < extent + e + params.gland_gap_um
            for g, e in zip(glands, extents)
        )
        if clash:
            continue
        glands.append(
            GlandSpec(
                center=(cx, cy),
                radii=(a, b),
                rotation=rot,
                has_basal_rim=has_rim,
                rim_thickness=params.rim_thickness_um,
                is_idcp=is_idcp,
                amacr_level=amacr,
                epi_width=epi_width,
                mimic=mimic,
            )
        )
        extents.append(extent)
    return glands


def _inside_tissue(tissue: np.ndarray, cx: float, cy: float, r: float) -> bool:
    h, w = tissue.shape
    for ang in np.linspace(0, 2 * np.pi, 12, endpoint=False):
        px = int((cx + r * np.cos(ang)) / BASE_MPP)
        py = int((cy + r * np.sin(ang)) / BASE_MPP)
        if not (0 <= px < w and 0 <= py < h) or not tissue[py, px]:
            return False
    return bool(tissue[min(int(cy / BASE_MPP), h - 1), min(int(cx / BASE_MPP), w - 1)])


def _gland_geometry(g: GlandSpec, shape):
    """Bounding-box slices plus signed distance (um) along the centre ray."""
    h, w = shape
    reach = g.radii[0] + g.rim_thickness + 1.0
    x0 = max(0, int((g.center[0] - reach) / BASE_MPP))
    x1 = min(w, int((g.center[0] + reach) / BASE_MPP) + 2)
    y0 = max(0, int((g.center[1] - reach) / BASE_MPP))
    y1 = min(h, int((g.center[1] + reach) / BASE_MPP) + 2)
    ys = (np.arange(y0, y1) + 0.5) * BASE_MPP - g.center[1]
    xs = (np.arange(x0, x1) + 0.5) * BASE_MPP - g.center[0]
    dy, dx = np.meshgrid(ys, xs, indexing="ij")
    c, s = math.cos(g.rotation), math.sin(g.rotation)
    u = (dx * c + dy * s) / g.radii[0]
    v = (-dx * s + dy * c) / g.radii[1]
    rho = np.sqrt(u * u + v * v)
    dist = np.hypot(dx, dy) * (1.0 - 1.0 / np.maximum(rho, 1e-12))
    return (slice(y0, y1), slice(x0, x1)), rho, dist


def generate_slide(params: SynthParams, slide_id: str) -> Slide:
    params.validate()
    rng = np.random.default_rng(params.seed)
    shape = (int(math.ceil(params.height_um / BASE_MPP)), int(math.ceil(params.width_um / BASE_MPP)))
    tissue_region = _tissue_region(params, rng, shape)
    glands = _sample_glands(params, rng, tissue_region)

    wob = np.zeros(shape, bool)
    idcp = np.zeros(shape, bool)
    interior_all = np.zeros(shape, bool)
    rim_all = np.zeros(shape, bool)
    epi = np.zeros(shape)
    basal = np.zeros(shape)
    amacr = np.zeros(shape)
    rgb = np.zeros(shape + (3,))
    paint = np.zeros(shape, bool)
    noise = params.noise

    layers = []
    for g in glands:
        sl, rho, dist = _gland_geometry(g, shape)
        inside = rho <= 1.0
        band = inside & (dist >= -g.epi_width)
        lumen = inside & ~band
        rim = (~inside) & (dist <= g.rim_thickness)
        layers.append((sl, inside, band, lumen, rim))
        interior_all[sl] |= inside
        if g.is_wob:
            wob[sl] |= inside
        if g.is_idcp:
            idcp[sl] |= inside
        rng_e = rng.uniform(-1, 1, band.shape)
        epi[sl] = np.where(band, EPI_LEVEL * (1 + noise["epithelial"] * rng_e), epi[sl])
        if g.amacr_level > 0:
            rng_a = rng.uniform(-1, 1, band.shape)
            amacr[sl] = np.where(band, g.amacr_level * (1 + noise["amacr"] * rng_a), amacr[sl])
        if g.has_basal_rim:
            rim_all[sl] |= rim
            dots = rng.random(rim.shape) < 0.85
            rng_b = rng.uniform(-1, 1, rim.shape)
            basal[sl] = np.where(rim & dots, 0.95 * (1 + noise["basal"] * rng_b), basal[sl])

    # stroma with value-noise texture and a reactive halo around WOB glands
    texture = _value_noise(rng, shape, 6.0 / BASE_MPP) - 0.5
    grain = _value_noise(rng, shape, 2.0 / BASE_MPP) - 0.5
    for c in range(3):
        rgb[:, :, c] = STROMA[c] + 34.0 * texture + 18.0 * grain
    if wob.any():
        dist_wob = ndimage.distance_transform_edt(~wob) * BASE_MPP
        halo_w = np.clip(1.25 - dist_wob / params.context_cue_scale_um, 0.0, 1.0)[:, :, None]
        rgb = rgb * (1 - halo_w) + (np.asarray(HALO) + 20.0 * texture[:, :, None]) * halo_w
    for c in range(3):
        rgb[:, :, c] = np.where(tissue_region, rgb[:, :, c], GLASS[c])

    for g, (sl, inside, band, lumen, rim) in zip(glands, layers):
        cancer_look = g.is_wob or g.mimic
        epi_col = WOB_EPI if cancer_look else BENIGN_EPI
        lumen_col = WOB_LUMEN if cancer_look else BENIGN_LUMEN
        sub = rgb[sl]
        for c in range(3):
            ch = sub[:, :, c]
            ch[band] = epi_col[c]
            ch[lumen] = lumen_col[c]
            if g.has_basal_rim and not g.mimic:
                ch[rim] = BASAL_RING[c]
        paint[sl] |= inside | (rim if g.has_basal_rim else False)

    rgb += rng.normal(0.0, noise["rgb"], rgb.shape)
    rgb += np.asarray(params.stain_shift, dtype=float)
    rgb_bytes = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)

    basal = np.where(basal > 0, basal, rng.uniform(0.0, 0.02, shape))
    planes = [
        rgb_bytes[:, :, 0],
        rgb_bytes[:, :, 1],
        rgb_bytes[:, :, 2],
        _to_byte(epi),
        _to_byte(basal),
        _to_byte(amacr),
        np.full(shape, 128, np.uint8),
    ]
    image = np.stack(planes, axis=-1)
    tissue = tissue_region | interior_all | rim_all

    levels = build_pyramid(image, BASE_MPP, N_LEVELS)
    masks = {
        "wob": mask_pyramid(wob.astype(np.uint8), N_LEVELS),
        "idcp_override": mask_pyramid(idcp.astype(np.uint8), N_LEVELS),
        "tissue": mask_pyramid(tissue.astype(np.uint8), N_LEVELS),
    }
    slide = Slide(slide_id, levels, dict(enumerate(CHANNEL_ROLES)), masks)
    slide.glands = glands  # not persisted; convenient for tests
    return slide


def _to_byte(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.clip(x, 0.0, 1.0) * 255 + 0.5), 0, 255).astype(np.uint8)


def derive_seeds(master: int, n: int) -> List[int]:
    children = np.random.SeedSequence(master).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def generate_dataset(params: SynthParams, n_train: int, n_test: int, out_dir, overwrite=False) -> dict:
    """Write ``n_train + n_test`` slides and a ``dataset.json`` split listing."""
    if n_train < 1 or n_test < 1:
        raise ValueError("empty split: n_train and n_test must both be >= 1")
    params.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = derive_seeds(params.seed, n_train + n_test)
    entries = []
    for i, seed in enumerate(seeds):
        split = "train" if i < n_train else "test"
        sid = f"{split}_{i:03d}"
        slide = generate_slide(replace(params, seed=seed), sid)
        save_slide(slide, out / f"{sid}.slab", overwrite=overwrite)
        entries.append({"id": sid, "path": f"{sid}.slab", "split": split, "seed": seed})
    listing = {"params": params.to_dict(), "slides": entries}
    (out / "dataset.json").write_text(json.dumps(listing, indent=2, sort_keys=True) + "\n")
    return listing


def load_listing(path) -> Tuple[dict, Path]:
    path = Path(path)
    listing = json.loads(path.read_text())
    return listing, path.parent
