"""WOB ground-truth masks from immunofluorescence channels.

Each marker is spread over the gland with a density filter, turned into two
ratio heatmaps (epithelium against basal cells, AMACR against epithelium),
merged with basal priority, thresholded and merged with the manual IDC-P
override.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .filters import gaussian_blur
from .raster_store import Slide, mask_pyramid

EPITHELIAL = "CK8/18-epithelial"
BASAL = "CK5/6+p63-basal"
AMACR = "AMACR"


@dataclass
class AnnotationConfig:
    sigma_um: float = 15.0
    gate_sigma_um: float = 0.5
    eps: float = 1e-6
    tissue_tau: float = 0.25
    agree_delta: float = 0.25
    tau: float = 0.5
    min_area_um2: float = 100.0
    fill_holes: bool = True


def _check_same(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"dimension mismatch: {shape} vs {a.shape}")


def density_filter(channel: np.ndarray, sigma_um: float, mpp: float) -> np.ndarray:
    if not sigma_um > 0:
        raise ValueError(f"sigma_um must be positive, got {sigma_um}")
    if channel.dtype == np.uint8:
        channel = channel / 255.0
    return np.clip(gaussian_blur(channel, sigma_um / mpp), 0.0, 1.0)


def heatmap_basal(d_epi: np.ndarray, d_basal: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Epithelium without basal signal scores high."""
    _check_same(d_epi, d_basal)
    return d_epi / (d_epi + d_basal + eps)


def heatmap_amacr(d_amacr: np.ndarray, d_epi: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    _check_same(d_amacr, d_epi)
    return d_amacr / (d_amacr + d_epi + eps)


def combine_heatmaps(h_basal, h_amacr, d_epi, tissue_tau=0.05, agree_delta=0.25) -> np.ndarray:
    """Average the heatmaps where they agree, otherwise trust the basal one.

    Pixels whose epithelial density is at most ``tissue_tau`` are zeroed.
    """
    _check_same(h_basal, h_amacr, d_epi)
    agree = np.abs(h_basal - h_amacr) <= agree_delta
    out = np.where(agree, 0.5 * (h_basal + h_amacr), h_basal)
    return np.where(d_epi > tissue_tau, out, 0.0)


def binarize_mask(heat, tau=0.5, min_area_um2=100.0, mpp=1.0, fill_holes=False) -> np.ndarray:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    mask = heat > tau
    if fill_holes:
        # lumens are enclosed by epithelium but carry no epithelial signal
        mask = ndimage.binary_fill_holes(mask)
    labels, n = ndimage.label(mask)  # default structure is 4-connected
    if n:
        areas = np.bincount(labels.ravel())
        keep = areas >= min_area_um2 / (mpp * mpp)
        keep[0] = False
        mask = keep[labels]
    return mask.astype(np.uint8)


def apply_idcp_override(mask: np.ndarray, override: np.ndarray) -> np.ndarray:
    _check_same(mask, override)
    return (mask.astype(bool) | override.astype(bool)).astype(np.uint8)


def generate_wob_mask(slide: Slide, config: AnnotationConfig | None = None, level_index: int = 0,
                      override: str | None = "idcp_override"):
    """Derive a WOB mask from the slide's IF channels at ``level_index``.

    The ratio heatmaps use densities at ``sigma_um`` so that rim and
    epithelium signals reach the whole gland; the epithelium gate uses a
    near-pixel density at ``gate_sigma_um`` so that the mask keeps the
    gland outline. The ``override`` mask, when the slide has it, is OR-ed
    in. Returns the mask at ``level_index``.
    """
    cfg = config or AnnotationConfig()
    try:
        roles = [slide.channel(r) for r in (EPITHELIAL, BASAL, AMACR)]
    except KeyError as exc:
        raise ValueError(f"missing channel role: {exc}") from exc
    level = slide.levels[level_index]
    epi, basal, amacr = (level.image[:, :, c] for c in roles)
    d_epi = density_filter(epi, cfg.sigma_um, level.mpp)
    d_basal = density_filter(basal, cfg.sigma_um, level.mpp)
    d_amacr = density_filter(amacr, cfg.sigma_um, level.mpp)
    gate = density_filter(epi, cfg.gate_sigma_um, level.mpp)
    hb = heatmap_basal(d_epi, d_basal, cfg.eps)
    ha = heatmap_amacr(d_amacr, d_epi, cfg.eps)
    heat = combine_heatmaps(hb, ha, gate, cfg.tissue_tau, cfg.agree_delta)
    mask = binarize_mask(heat, cfg.tau, cfg.min_area_um2, level.mpp, cfg.fill_holes)
    planes = slide.masks.get(override) if override else None
    if planes is not None and planes[level_index] is not None:
        mask = apply_idcp_override(mask, planes[level_index])
    return mask


def annotate_slide(slide: Slide, config: AnnotationConfig | None = None, override: str | None = "idcp_override") -> Slide:
    """Return a copy of ``slide`` carrying a ``wob_generated`` mask pyramid."""
    mask = generate_wob_mask(slide, config, 0, override)
    masks = dict(slide.masks)
    masks["wob_generated"] = mask_pyramid(mask, len(slide.levels))
    return Slide(slide.id, slide.levels, dict(slide.channel_roles), masks, slide.prob_masks)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
