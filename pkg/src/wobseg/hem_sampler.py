"""Quasi-online hard example mining.

Two workers cooperate in cycles. The error worker picks the next slide and
computes its error map with the parameters received at the last rendezvous.
Meanwhile the training worker draws patches from the previous error map into
a pool and trains on batches taken from that pool. At the rendezvous the
training worker hands a parameter snapshot to the error worker and the patch
quota ``k`` is retuned so that neither side waits long for the other.

``clock="simulated"`` runs both phases in one thread and charges time from a
cost model, which makes whole runs reproducible. ``clock="real"`` runs the
phases on two threads and measures wall time.
"""
from __future__ import annotations

import csv
import hashlib
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import augment as aug
from .predictor import FcnConfig, Params, compound_input, init_params, loss_and_grad, predict_array, sgd_step, slide_input
from .raster_store import Slide

WOB, NOT_WOB = 1, 0


class InfeasibleError(RuntimeError):
    """The pool can never fill up to ``n_min``."""


@dataclass(frozen=True)
class TrainingView:
    """What the model sees of one slide: an input stack and its labels."""

    slide_id: str
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8
    domain: Optional[np.ndarray] = None  # pixels eligible as patch centers


def make_view(slide: Slide, level_mpp: float = 1.0, mask_name: str = "wob", base: Params | None = None,
              restrict_to_tissue: bool = False) -> TrainingView:
    """Build a view at ``level_mpp``; with ``base`` the input is the compound stack at 2 mpp."""
    if base is not None:
        level_mpp = 2.0
    try:
        li = slide.level_index(level_mpp)
    except KeyError as exc:
        raise ValueError(f"slide {slide.id}: {exc}") from None
    if mask_name not in slide.masks:
        raise ValueError(f"slide {slide.id}: missing mask {mask_name!r}")
    image = compound_input(base, slide) if base is not None else slide_input(slide, li)
    domain = slide.mask("tissue", li).astype(bool) if restrict_to_tissue else None
    return TrainingView(slide.id, image.astype(np.float32), slide.mask(mask_name, li).astype(np.uint8), domain)


@dataclass
class SamplerConfig:
    patch_size: int = 64
    batch_size: int = 8
    k0: Optional[int] = None  # default 8 * batch_size
    n_min: Optional[int] = None  # default 8 * batch_size
    capacity: Optional[int] = None  # default 16 * n_min
    eps_floor: float = 0.01
    class_balance: float = 0.5
    level_mpp: float = 1.0
    total_iterations: int = 2000
    sampling: str = "error"  # "error" or "uniform"
    restrict_to_tissue: bool = False
    lr: float = 0.05
    momentum: float = 0.9
    clock: str = "simulated"
    cost_error_px: float = 5e-7  # simulated seconds per error-map pixel
    cost_train_patch: float = 3.5e-3  # simulated seconds per training patch
    k_min: Optional[int] = None
    k_max: Optional[int] = None

    # the original full-scale setting; desk runs use the defaults above
    FULL_SCALE = {"patch_size": 188, "batch_size": 32, "total_iterations": 1_000_000}

    def __post_init__(self):
        b = self.batch_size
        if self.k0 is None:
            self.k0 = 8 * b
        if self.n_min is None:
            self.n_min = 8 * b
        if self.capacity is None:
            self.capacity = 16 * self.n_min
        if self.k_min is None:
            self.k_min = b
        if self.k_max is None:
            self.k_max = 64 * b

    def validate(self) -> None:
        if self.patch_size < 1 or self.batch_size < 1:
            raise ValueError("patch_size and batch_size must be >= 1")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError(f"class_balance must lie in [0, 1], got {self.class_balance}")
        if self.n_min < self.batch_size:
            raise ValueError("n_min must be at least one batch")
        if not 1 <= self.k_min <= self.k0 <= self.k_max:
            raise ValueError("need 1 <= k_min <= k0 <= k_max")
        if self.eps_floor < 0:
            raise ValueError("eps_floor must be non-negative")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        if self.sampling not in ("error", "uniform"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.clock not in ("simulated", "real"):
            raise ValueError(f"unknown clock {self.clock!r}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SamplerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sampler fields: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ErrorMap:
    slide_id: str
    level_mpp: float
    error: np.ndarray
    cum: Dict[int, np.ndarray]  # class -> cumulative weights over that class's pixels
    index: Dict[int, np.ndarray]  # class -> flat pixel indices matching ``cum``
    fp_count: int
    param_version: int = 0

    @property
    def shape(self):
        return self.error.shape


def _build_tables(weight: np.ndarray, labels: np.ndarray, domain):
    cum, index = {}, {}
    for cls in (NOT_WOB, WOB):
        sel = labels.ravel() == cls
        if domain is not None:
            sel &= domain.ravel()
        idx = np.flatnonzero(sel)
        c = np.cumsum(weight.ravel()[idx], dtype=np.float64)
        cum[cls], index[cls] = c, idx
    return cum, index


def error_map_from_probs(probs, labels, eps_floor=0.01, slide_id="", level_mpp=1.0, domain=None, version=0):
    if probs.shape != labels.shape:
        raise ValueError(f"dimension mismatch: {probs.shape} vs {labels.shape}")
    y = labels.astype(np.float64)
    err = np.abs(probs.astype(np.float64) - y)
    cum, index = _build_tables(err + eps_floor, labels, domain)
    fp = int(np.count_nonzero((probs >= 0.5) & (labels == 0)))
    return ErrorMap(slide_id, level_mpp, err, cum, index, fp, version)


def uniform_map(view: TrainingView, level_mpp=1.0) -> ErrorMap:
    """Flat weights over every pixel, ignoring classes (the uniform baseline)."""
    labels = view.labels
    idx = np.arange(labels.size) if view.domain is None else np.flatnonzero(view.domain)
    cum = np.arange(1, idx.size + 1, dtype=np.float64)
    return ErrorMap(view.slide_id, level_mpp, np.zeros(labels.shape), {-1: cum}, {-1: idx}, 0)


def compute_error_map(params: Params, view: TrainingView, eps_floor=0.01, level_mpp=1.0, version=0) -> ErrorMap:
    probs = predict_array(params, view.image)
    return error_map_from_probs(probs, view.labels, eps_floor, view.slide_id, level_mpp, view.domain, version)


def _draw(cum: np.ndarray, idx: np.ndarray, n: int, rng) -> np.ndarray:
    u = rng.random(n) * cum[-1]
    pos = np.minimum(np.searchsorted(cum, u, side="right"), cum.size - 1)
    return idx[pos]


def sample_centers(emap: ErrorMap, n: int, class_balance: float, rng) -> List[tuple]:
    """Inverse-CDF draws of ``(x, y, class)`` centers.

    ``round(n * class_balance)`` come from WOB pixels and the rest from the
    other class; an empty class hands its share to the other one.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    w = emap.shape[1]
    live = {c: emap.cum[c].size > 0 and emap.cum[c][-1] > 0 for c in emap.cum}
    if not any(live.values()):
        raise ValueError("empty error map")
    if -1 in emap.cum:
        plan = [(-1, n)]
    else:
        n_wob = int(math.floor(n * class_balance + 0.5))
        if not live[WOB]:
            n_wob = 0
        elif not live[NOT_WOB]:
            n_wob = n
        plan = [(WOB, n_wob), (NOT_WOB, n - n_wob)]
    out = []
    for cls, count in plan:
        if count == 0:
            continue
        flat = _draw(emap.cum[cls], emap.index[cls], count, rng)
        out.extend((int(f % w), int(f // w), cls) for f in flat)
    return out


def extract_training_patch(image: np.ndarray, labels: np.ndarray, center, patch_size: int):
    """Crop a square around ``center`` (x, y), shifted inward at the borders."""
    h, w = labels.shape
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch_size {patch_size} exceeds level size {w}x{h}")
    half = patch_size // 2
    x0 = min(max(center[0] - half, 0), w - patch_size)
    y0 = min(max(center[1] - half, 0), h - patch_size)
    return (image[y0:y0 + patch_size, x0:x0 + patch_size].copy(),
            labels[y0:y0 + patch_size, x0:x0 + patch_size].copy())


def choose_next_slide(fp_counts: Mapping[str, Optional[int]], rng) -> str:
    """Unvisited slides (count ``None``) first in listing order, then weight fp + 1."""
    if not fp_counts:
        raise ValueError("empty dataset")
    ids = list(fp_counts)
    for sid in ids:
        if fp_counts[sid] is None:
            return sid
    weights = np.array([fp_counts[s] + 1.0 for s in ids])
    cdf = np.cumsum(weights)
    pos = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return ids[min(pos, len(ids) - 1)]


def adjust_k(k_prev: int, t_error: float, t_train: float, k_min: int = 1, k_max: int = 1 << 30, eps_t: float = 1e-9) -> int:
    ratio = min(max(t_error / max(t_train, eps_t), 0.5), 2.0)
    k = int(math.floor(k_prev * ratio + 0.5))
    return min(max(k, k_min), k_max)


class PatchPool:
    """Ring buffer of ``(patch, mask, slide_id, digest)``; the oldest entry is overwritten."""

    def __init__(self, capacity: int, n_min: int):
        if not 0 < n_min:
            raise ValueError("n_min must be positive")
        if capacity < n_min:
            raise InfeasibleError(f"pool capacity {capacity} is below n_min {n_min}")
        self.capacity = capacity
        self.n_min = n_min
        self.entries: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.entries)

    @property
    def ready(self) -> bool:
        return len(self.entries) >= self.n_min

    def add(self, patch, mask, slide_id):
        digest = hashlib.blake2b(patch.tobytes() + mask.tobytes(), digest_size=16).digest()
        self.entries.append((patch, mask, slide_id, digest))

    def batch(self, size: int, rng):
        """Draw without replacement, skipping entries whose bytes repeat an earlier pick."""
        order = rng.permutation(len(self.entries))
        pick, seen = [], set()
        for i in order:
            d = self.entries[i][3]
            if d not in seen:
                seen.add(d)
                pick.append(int(i))
                if len(pick) == size:
                    break
        if len(pick) < size:
            raise InfeasibleError(f"pool holds only {len(pick)} distinct patches, batch needs {size}")
        x = np.stack([self.entries[i][0] for i in pick])
        y = np.stack([self.entries[i][1] for i in pick]).astype(x.dtype)
        return x, y, pick


@dataclass
class CycleStats:
    cycle: int
    k_n: int
    T_error: float
    T_train: float
    idle_error: float
    idle_train: float
    pool_fill: int
    loss_mean: float
    iterations: int = 0  # cumulative

    def row(self) -> dict:
        return asdict(self)


STATS_COLUMNS = [f.name for f in fields(CycleStats)]


def write_stats(stats: Sequence[CycleStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        writer.writeheader()
        for s in stats:
            writer.writerow(s.row())


@dataclass
class ProtocolResult:
    params: Params
    stats: List[CycleStats]
    error_map_versions: List[tuple] = field(default_factory=list)  # (map version, version at last rendezvous)
    first_train_pool: Optional[int] = None


class _Trainer:
    """Training worker state: params, momentum, pool and its own rng stream."""

    def __init__(self, params, cfg: SamplerConfig, pipeline, rng):
        self.params = params
        self.cfg = cfg
        self.pipeline = pipeline
        self.rng = rng
        self.velocity = np.zeros_like(params.vector)
        self.pool = PatchPool(cfg.capacity, cfg.n_min)
        self.version = 0

    def fill(self, emap: ErrorMap, view: TrainingView, k: int) -> None:
        for cx, cy, _ in sample_centers(emap, k, self.cfg.class_balance, self.rng):
            patch, mask = extract_training_patch(view.image, view.labels, (cx, cy), self.cfg.patch_size)
            if self.pipeline is not None and self.pipeline.ops:
                patch, mask = aug.apply(self.pipeline, patch, mask, self.rng, value_max=1.0)
            self.pool.add(patch, mask, view.slide_id)

    def train(self, n_iter: int) -> List[float]:
        losses = []
        for _ in range(n_iter):
            x, y, _ = self.pool.batch(self.cfg.batch_size, self.rng)
            loss, grad = loss_and_grad(self.params, x, y)
            self.params, self.velocity = sgd_step(self.params, grad, self.cfg.lr, self.cfg.momentum, self.velocity)
            losses.append(loss)
        return losses

    def snapshot(self):
        self.version += 1
        return self.params.copy(), self.version


def run_protocol(views: Sequence[TrainingView], cfg: SamplerConfig, pipeline=None,
                 predictor_config: FcnConfig | None = None, rng=None, init: Params | None = None,
                 on_cycle=None) -> ProtocolResult:
    """Run the two-worker cycle until ``cfg.total_iterations`` training steps are done."""
    cfg.validate()
    if not views:
        raise ValueError("empty dataset")
    if cfg.capacity < cfg.n_min:
        raise InfeasibleError(f"pool capacity {cfg.capacity} is below n_min {cfg.n_min}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if init is None:
        if predictor_config is None:
            raise ValueError("need predictor_config or init params")
        init = init_params(predictor_config, int(rng.integers(2**31)))
    if cfg.total_iterations == 0:
        return ProtocolResult(init.copy(), [])
    err_rng, train_rng = rng.spawn(2)
    by_id = {v.slide_id: v for v in views}
    if len(by_id) != len(views):
        raise ValueError("duplicate slide ids")
    trainer = _Trainer(init.copy(), cfg, pipeline, train_rng)
    snap, snap_version = trainer.params.copy(), 0
    fp_counts: Dict[str, Optional[int]] = {v.slide_id: None for v in views}
    uniform = cfg.sampling == "uniform"

    def next_slide() -> str:
        if uniform:
            ids = list(by_id)
            return ids[int(err_rng.integers(len(ids)))]
        return choose_next_slide(fp_counts, err_rng)

    def error_job(sid, params, version):
        t0 = time.perf_counter()
        view = by_id[sid]
        if uniform:
            emap = uniform_map(view, cfg.level_mpp)
        else:
            emap = compute_error_map(params, view, cfg.eps_floor, cfg.level_mpp, version)
        return emap, time.perf_counter() - t0

    def train_job(emap, k, remaining):
        t0 = time.perf_counter()
        trainer.fill(emap, by_id[emap.slide_id], k)
        losses, n_iter = [], 0
        if trainer.pool.ready:
            n_iter = min(-(-k // cfg.batch_size), remaining)
            losses = trainer.train(n_iter)
        return losses, n_iter, time.perf_counter() - t0

    def sim_error_time(emap):
        return cfg.cost_error_px * emap.error.size

    def sim_train_time(k, n_iter):
        return cfg.cost_train_patch * max(k, n_iter * cfg.batch_size)

    result = ProtocolResult(init, [])
    executor = ThreadPoolExecutor(2) if cfg.clock == "real" else None
    try:
        # bootstrap: the first error map, nothing to train on yet
        sid = next_slide()
        current, t_err = error_job(sid, snap, snap_version)
        fp_counts[sid] = current.fp_count
        result.error_map_versions.append((current.param_version, snap_version))
        if cfg.clock == "simulated":
            t_err = sim_error_time(current)
        result.stats.append(CycleStats(0, 0, t_err, 0.0, 0.0, t_err, 0, float("nan"), 0))

        k, done, cycle = cfg.k0, 0, 0
        while done < cfg.total_iterations:
            cycle += 1
            sid = next_slide()
            remaining = cfg.total_iterations - done
            if executor is None:
                nxt, t_err = error_job(sid, snap, snap_version)
                losses, n_iter, t_tr = train_job(current, k, remaining)
                t_err = sim_error_time(nxt)
                t_tr = sim_train_time(k, n_iter)
            else:
                f_err = executor.submit(error_job, sid, snap, snap_version)
                f_tr = executor.submit(train_job, current, k, remaining)
                (nxt, t_err), (losses, n_iter, t_tr) = f_err.result(), f_tr.result()
            if n_iter and result.first_train_pool is None:
                result.first_train_pool = len(trainer.pool)
            result.error_map_versions.append((nxt.param_version, snap_version))
            # rendezvous: parameters flow from the training worker to the error worker
            snap, snap_version = trainer.snapshot()
            fp_counts[nxt.slide_id] = nxt.fp_count
            done += n_iter
            cycle_len = max(t_err, t_tr)
            stats = CycleStats(cycle, k, t_err, t_tr, cycle_len - t_err, cycle_len - t_tr, len(trainer.pool),
                               float(np.mean(losses)) if losses else float("nan"), done)
            result.stats.append(stats)
            if on_cycle is not None:
                on_cycle(stats)
            if n_iter:  # warmup cycles keep k0
                k = adjust_k(k, t_err, t_tr, cfg.k_min, cfg.k_max)
            current = nxt
    finally:
        if executor is not None:
            executor.shutdown()
    result.params = trainer.params
    return result
