"""Slow reference implementations used as test oracles."""
import math

import numpy as np

from wobseg.predictor import FcnConfig, Params, activation_pattern, loss_and_grad


def naive_forward(params: Params, image: np.ndarray) -> np.ndarray:
    """Explicit per-pixel loops for every layer of a single (H, W, C) image."""
    x = image.astype(np.float64)
    sizes = []
    ti = 0
    tensors = params.tensors()
    for layer in params.config.layers:
        kind = layer[0]
        if kind == "conv":
            wt, b = (t.astype(np.float64) for t in tensors[ti])
            ti += 1
            h, w, _ = x.shape
            out = np.zeros((h, w, wt.shape[3]))
            for i in range(h):
                for j in range(w):
                    acc = b.copy()
                    for di in range(3):
                        for dj in range(3):
                            yi, xj = i + di - 1, j + dj - 1
                            if 0 <= yi < h and 0 <= xj < w:
                                acc += x[yi, xj] @ wt[di, dj]
                    out[i, j] = acc
            x = out
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "maxpool2":
            h, w, c = x.shape
            sizes.append((h, w))
            out = np.empty((-(-h // 2), -(-w // 2), c))
            for i in range(out.shape[0]):
                for j in range(out.shape[1]):
                    out[i, j] = x[2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1, c).max(axis=0)
            x = out
        elif kind == "upsample2":
            h, w = sizes.pop()
            out = np.empty((h, w, x.shape[2]))
            for i in range(h):
                for j in range(w):
                    out[i, j] = x[i // 2, j // 2]
            x = out
        elif kind == "sigmoid":
            x = 1.0 / (1.0 + np.exp(-x))
    return x[:, :, 0]


def random_config(rng) -> FcnConfig:
    """At most three convs and eight channels, optionally a pool/upsample pair."""
    n_conv = int(rng.integers(1, 4))
    cin = int(rng.choice([3, 4]))
    widths = [int(rng.integers(1, 9)) for _ in range(n_conv - 1)] + [1]
    pool = n_conv == 3 and rng.random() < 0.5
    layers, c = [], cin
    for i, w in enumerate(widths):
        if pool and i == 1:
            layers.append(("maxpool2",))
        layers.append(("conv", c, w))
        if i < n_conv - 1:
            layers.append(("relu",))
        if pool and i == 1:
            layers.append(("upsample2",))
        c = w
    layers.append(("sigmoid",))
    return FcnConfig(layers, cin)


def gradcheck(params: Params, x, y, n_coords, rng, h=1e-4, floor=1e-7):
    """Max relative error of the analytic gradient against central differences.

    Coordinates whose +/-h perturbation flips a ReLU or a pool choice are
    skipped (the loss is not differentiable across such kinks) and replaced
    by further draws until ``n_coords`` smooth coordinates are checked.
    """
    _, grad = loss_and_grad(params, x, y)
    base_vec = params.vector
    worst, checked, skipped = 0.0, 0, 0
    order = rng.permutation(base_vec.size)
    pos = 0
    while checked < n_coords:
        i = order[pos % order.size]
        pos += 1
        if pos > 20 * order.size:
            raise RuntimeError("too few smooth coordinates")
        vp, vm = base_vec.copy(), base_vec.copy()
        vp[i] += h
        vm[i] -= h
        if activation_pattern(params, x, vp) != activation_pattern(params, x, vm):
            skipped += 1
            continue
        lp, _ = loss_and_grad(Params(params.config, vp), x, y)
        lm, _ = loss_and_grad(Params(params.config, vm), x, y)
        num = (lp - lm) / (2 * h)
        worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), floor))
        checked += 1
    return worst, skipped


def average_precision_oracle(scores, labels) -> float:
    """Sort by score, walk distinct thresholds high to low, sum dR * P."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    total = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = np.sum(pred & labels)
        fp = np.sum(pred & ~labels)
        recall = tp / total
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def max_f1_oracle(bins, labels):
    """Best F1 over every threshold k/255 (and the all-negative sentinel)."""
    labels = np.asarray(labels).astype(bool)
    best, best_t = 0.0, math.inf
    for t in [256] + list(range(255, -1, -1)):
        pred = np.asarray(bins) >= t
        tp = np.sum(pred & labels)
        fp = np.sum(pred & ~labels)
        fn = np.sum(~pred & labels)
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn)
        f = 2 * p * r / (p + r) if p + r else 0.0
        if f > best:
            best, best_t = f, t
    return best, best_t


def quantiles_oracle(values):
    """Linear interpolation between order statistics at (n - 1) * q."""
    v = sorted(values)
    n = len(v)

    def q(frac):
        pos = (n - 1) * frac
        lo = math.floor(pos)
        hi = min(lo + 1, n - 1)
        return v[lo] + (v[hi] - v[lo]) * (pos - lo)

    return v[0], q(0.25), q(0.5), q(0.75), v[-1]
