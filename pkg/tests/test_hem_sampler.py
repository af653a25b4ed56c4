import pickle

import numpy as np
import pytest
from scipy.stats import chisquare

from wobseg.hem_sampler import (
    NOT_WOB,
    WOB,
    InfeasibleError,
    PatchPool,
    SamplerConfig,
    TrainingView,
    adjust_k,
    choose_next_slide,
    compute_error_map,
    error_map_from_probs,
    extract_training_patch,
    make_view,
    run_protocol,
    sample_centers,
    write_stats,
)
from wobseg.predictor import BASE_CONFIG, FcnConfig, Params, forward, init_params

TINY = FcnConfig([("conv", 3, 2), ("relu",), ("conv", 2, 1), ("sigmoid",)], 3)


def toy_views(n=3, size=40, seed=0):
    rng = np.random.default_rng(seed)
    views = []
    for i in range(n):
        labels = np.zeros((size, size), np.uint8)
        cy, cx = rng.integers(8, size - 8, 2)
        labels[cy - 5:cy + 5, cx - 5:cx + 5] = 1
        image = rng.random((size, size, 3)).astype(np.float32) * 0.3
        image[labels == 1, 0] += 0.6
        views.append(TrainingView(f"v{i}", image, labels))
    return views


def toy_config(**kw):
    base = dict(patch_size=16, batch_size=4, total_iterations=40, lr=0.1)
    base.update(kw)
    return SamplerConfig(**base)


def test_perfect_prediction_gives_floor_tables():
    y = np.zeros((6, 6), np.uint8)
    y[:2] = 1
    em = error_map_from_probs(y.astype(float), y, eps_floor=0.01)
    assert not em.error.any()
    for cls, n in ((WOB, 12), (NOT_WOB, 24)):
        assert np.allclose(em.cum[cls], 0.01 * np.arange(1, n + 1))
        assert np.all(np.diff(em.cum[cls]) > 0)


def test_half_prediction_is_uniform(small_slide):
    view = make_view(small_slide)
    p = Params(BASE_CONFIG, np.zeros(881, np.float32))
    em = compute_error_map(p, view, eps_floor=0.01)
    assert np.all(em.error == 0.5)
    for cls in (WOB, NOT_WOB):
        steps = np.diff(em.cum[cls])
        assert np.allclose(steps, 0.51)


def test_fp_count_matches_direct_count(rng):
    for _ in range(20):
        p = rng.random((16, 16))
        y = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        em = error_map_from_probs(p, y)
        expect = sum(1 for i in range(16) for j in range(16) if p[i, j] >= 0.5 and y[i, j] == 0)
        assert em.fp_count == expect


def test_error_map_is_serializable():
    y = np.eye(5, dtype=np.uint8)
    em = error_map_from_probs(np.full((5, 5), 0.2), y)
    back = pickle.loads(pickle.dumps(em))
    assert np.array_equal(back.error, em.error) and back.fp_count == em.fp_count


def test_all_mass_on_one_pixel(rng):
    y = np.zeros((10, 10), np.uint8)
    y[5:, :] = 1
    p = y.astype(float)
    p[7, 3] = 0.0  # a missed WOB pixel
    p[1, 8] = 1.0  # a false positive
    em = error_map_from_probs(p, y, eps_floor=0.0)
    for x, yy, cls in sample_centers(em, 200, 0.5, rng):
        assert (x, yy) == ((3, 7) if cls == WOB else (8, 1))


def test_uniform_centres_chi_square(rng):
    y = np.zeros((32, 32), np.uint8)
    em = error_map_from_probs(np.zeros((32, 32)), y, eps_floor=0.01)
    centres = sample_centers(em, 10_000, 0.5, rng)  # no WOB pixels: all from the other class
    counts = np.zeros((4, 4))
    for x, yy, _ in centres:
        counts[yy // 8, x // 8] += 1
    assert chisquare(counts.ravel()).pvalue > 0.001


def test_class_balance(rng):
    y = np.zeros((12, 12), np.uint8)
    y[:3] = 1
    em = error_map_from_probs(np.full((12, 12), 0.3), y)
    assert all(y[yy, x] == 1 for x, yy, _ in sample_centers(em, 300, 1.0, rng))
    got = sample_centers(em, 10, 0.3, rng)
    assert sum(c == WOB for *_, c in got) == 3


def test_empty_error_map(rng):
    em = error_map_from_probs(np.zeros((4, 4)), np.zeros((4, 4), np.uint8), eps_floor=0.0)
    with pytest.raises(ValueError, match="empty error map"):
        sample_centers(em, 5, 0.5, rng)


def test_hard_examples_stay_in_region(rng):
    y = (rng.random((30, 30)) < 0.4).astype(np.uint8)
    p = y.astype(float)
    region = np.zeros((30, 30), bool)
    region[10:20, 5:12] = True
    p[region] = rng.random(region.sum())
    em = error_map_from_probs(p, y, eps_floor=0.0)
    for x, yy, _ in sample_centers(em, 500, 0.5, rng):
        assert region[yy, x]


def test_extract_patch_clamps():
    img = np.arange(20 * 30 * 3, dtype=float).reshape(20, 30, 3)
    lab = np.zeros((20, 30), np.uint8)
    patch, mask = extract_training_patch(img, lab, (15, 10), 10)
    assert np.array_equal(patch, img[5:15, 10:20])
    patch, _ = extract_training_patch(img, lab, (0, 0), 8)
    assert np.array_equal(patch, img[:8, :8])
    patch, _ = extract_training_patch(img, lab, (29, 19), 8)
    assert np.array_equal(patch, img[12:, 22:])
    with pytest.raises(ValueError):
        extract_training_patch(img, lab, (5, 5), 21)


def test_choose_slide_rules(rng):
    assert choose_next_slide({"a": 3}, rng) == "a"
    assert choose_next_slide({"a": 3, "b": None, "c": None}, rng) == "b"
    with pytest.raises(ValueError):
        choose_next_slide({}, rng)
    ids = [choose_next_slide({"a": 5, "b": 5, "c": 5, "d": 5}, rng) for _ in range(10_000)]
    counts = [ids.count(k) for k in "abcd"]
    assert chisquare(counts).pvalue > 0.001
    ids = [choose_next_slide({"hot": 999, "cold": 0}, rng) for _ in range(200_000)]
    ratio = ids.count("hot") / max(ids.count("cold"), 1)
    assert 700 < ratio < 1400


def test_adjust_k_examples():
    assert adjust_k(40, 1.0, 1.0) == 40
    assert adjust_k(40, 4.0, 1.0) == 80
    assert adjust_k(41, 1.0, 4.0) == 21
    assert adjust_k(40, 1.5, 1.0) == 60
    assert adjust_k(40, 100.0, 1.0, k_max=64) == 64
    assert adjust_k(5, 0.0, 1.0, k_min=4) == 4


def test_pool_ring_buffer(rng):
    pool = PatchPool(capacity=3, n_min=2)
    for i in range(5):
        pool.add(np.full((2, 2, 1), i, np.float32), np.zeros((2, 2), np.uint8), f"s{i}")
    assert len(pool) == 3 and [e[2] for e in pool.entries] == ["s2", "s3", "s4"]
    with pytest.raises(InfeasibleError):
        PatchPool(capacity=2, n_min=3)


def test_batches_have_no_duplicate_bytes(rng):
    pool = PatchPool(capacity=50, n_min=4)
    for i in range(30):
        pool.add(np.full((2, 2, 1), i % 6, np.float32), np.zeros((2, 2), np.uint8), "s")
    for _ in range(50):
        x, _, pick = pool.batch(6, rng)
        assert len({x[k].tobytes() for k in range(6)}) == 6
    with pytest.raises(InfeasibleError):
        pool.batch(7, rng)


def test_zero_iterations_returns_init():
    init = init_params(TINY, 3)
    res = run_protocol(toy_views(), toy_config(total_iterations=0), None, TINY, init=init)
    assert res.stats == [] and np.array_equal(res.params.vector, init.vector)


def test_protocol_errors():
    with pytest.raises(ValueError, match="empty dataset"):
        run_protocol([], toy_config(), None, TINY)
    with pytest.raises(InfeasibleError):
        run_protocol(toy_views(), toy_config(n_min=64, capacity=32), None, TINY)


def test_protocol_invariants():
    cfg = toy_config(k0=6, n_min=20, total_iterations=37)
    res = run_protocol(toy_views(), cfg, None, TINY, np.random.default_rng(1))
    # training waits for the pool
    assert res.first_train_pool >= cfg.n_min
    for s in res.stats:
        if s.iterations > 0 and s.loss_mean == s.loss_mean:
            assert s.pool_fill >= cfg.n_min
    # the error map of cycle n uses the snapshot from rendezvous n - 1 (the bootstrap and
    # first cycle both start from the initial parameters, version 0)
    versions = [v for v, _ in res.error_map_versions]
    assert versions == [0] + list(range(len(versions) - 1))
    assert all(a == b for a, b in res.error_map_versions)
    iters = [s.iterations for s in res.stats]
    assert iters == sorted(iters) and iters[-1] == 37
    for s in res.stats:
        assert min(s.idle_error, s.idle_train) == 0.0


def test_quota_covers_budget():
    cfg = toy_config(total_iterations=50)
    res = run_protocol(toy_views(), cfg, None, TINY, np.random.default_rng(2))
    trained = [s for s in res.stats if s.loss_mean == s.loss_mean]
    quota = sum(-(-s.k_n // cfg.batch_size) * cfg.batch_size for s in trained)
    assert quota >= cfg.total_iterations * cfg.batch_size
    assert res.stats[-1].iterations == cfg.total_iterations


def test_simulated_runs_are_reproducible(tmp_path):
    cfg = toy_config()
    a = run_protocol(toy_views(), cfg, None, TINY, np.random.default_rng(5))
    b = run_protocol(toy_views(), cfg, None, TINY, np.random.default_rng(5))
    assert [repr(s.row()) for s in a.stats] == [repr(s.row()) for s in b.stats]
    assert np.array_equal(a.params.vector, b.params.vector)
    write_stats(a.stats, tmp_path / "a.csv")
    write_stats(b.stats, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header.startswith("cycle,k_n,T_error,T_train,idle_error,idle_train,pool_fill,loss_mean")


def test_training_lowers_loss():
    cfg = toy_config(total_iterations=150, lr=0.5)
    views = toy_views()
    init = init_params(TINY, 0)
    res = run_protocol(views, cfg, None, TINY, np.random.default_rng(0), init=init)

    def bce(params):
        tot = 0.0
        for v in views:
            p = np.clip(forward(params, v.image), 1e-7, 1 - 1e-7)
            tot += -np.mean(v.labels * np.log(p) + (1 - v.labels) * np.log(1 - p))
        return tot

    assert bce(res.params) < bce(init)


def test_uniform_mode_runs():
    res = run_protocol(toy_views(), toy_config(sampling="uniform"), None, TINY, np.random.default_rng(0))
    assert res.stats[-1].iterations == 40


def test_restricted_to_tissue(small_slide, rng):
    view = make_view(small_slide, restrict_to_tissue=True)
    em = compute_error_map(Params(BASE_CONFIG, np.zeros(881, np.float32)), view)
    for x, y, _ in sample_centers(em, 300, 0.5, rng):
        assert view.domain[y, x]


def test_real_clock_smoke():
    cfg = toy_config(clock="real", total_iterations=12)
    res = run_protocol(toy_views(), cfg, None, TINY, np.random.default_rng(0))
    assert res.stats[-1].iterations == 12
    for s in res.stats:
        assert min(s.idle_error, s.idle_train) == 0.0 and s.T_error >= 0 and s.T_train >= 0


def test_sampler_config_defaults_and_validation():
    cfg = SamplerConfig()
    assert (cfg.patch_size, cfg.batch_size, cfg.total_iterations) == (64, 8, 2000)
    assert cfg.n_min == 64 and cfg.capacity == 1024 and cfg.k_min == 8 and cfg.k_max == 512
    assert SamplerConfig.FULL_SCALE == {"patch_size": 188, "batch_size": 32, "total_iterations": 1_000_000}
    with pytest.raises(ValueError):
        SamplerConfig.from_dict({"class_balance": 1.5})
    with pytest.raises(ValueError):
        SamplerConfig.from_dict({"unknown": 1})
