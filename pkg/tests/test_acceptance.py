"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line.  Criterion 6 trains the full ablation grid at desk scale
(2000 train / 500 test pairs, 200 epochs, 5 seeds) and takes most of the
suite's runtime; everything else completes in seconds to minutes.

Run with `pytest tests/test_acceptance.py -v` (add -s to stream the
per-criterion lines while they happen).
"""
import math
import time

import numpy as np
import numpy.testing as npt
import pytest

from halu.data import Dataset, ScanPair, augment_flip, denormalize, load_dataset, normalize, save_dataset
from halu.layers import LAYER_KINDS, gamma_scale_forward, gradient_check_all
from halu.model import AutoencoderConfig, build, load, save
from halu.optim import rmsle
from halu.simulator import (
    LaserSpec,
    Obstacle,
    SCENE_KINDS,
    Scene,
    cast_ray,
    generate_dataset,
    generate_scene,
    ground_truth_scan,
    laser_scan,
    make_box,
    make_table,
    make_wall,
)
from halu.training import (
    TrainConfig,
    default_grid,
    evaluate,
    relative_percent,
    run_ablation,
    train,
)

from _oracles import central_diff, march_ray, rel_err

ALL_KINDS = list(SCENE_KINDS)
SENSOR_NOISE = 0.02  # meters; matches the modeled range finder's resolution


def report(capsys, number, passed, detail):
    with capsys.disabled():
        status = "PASS" if passed else "FAIL"
        print(f"[acceptance] criterion {number}: {status} ({detail})")
    assert passed, f"criterion {number}: {detail}"


# -- 1. gradient correctness -------------------------------------------------


def test_criterion_1_gradient_correctness(capsys):
    t0 = time.monotonic()
    reports = gradient_check_all(trials=10, step=1e-5, tolerance=1e-4, seed=0)
    layer_worst = max(max(r["errors"].values()) for r in reports.values())
    layers_ok = all(r["passed"] for r in reports.values())

    rng = np.random.default_rng(7)
    model = build(AutoencoderConfig(n_points=16, n_levels=2, channels=(2, 4)), seed=3)
    x = rng.uniform(0.5, 29.5, (2, 16))
    r = rng.normal(size=(2, 16))

    def f():
        y, _ = model.forward(x, train=True)
        return float(np.sum(y * r))

    _, cache = model.forward(x, train=True)
    store = model.backward(cache, r)
    model_worst = max(
        rel_err(store[name], central_diff(f, p, 1e-5)) for name, p in model.parameters().items()
    )
    elapsed = time.monotonic() - t0
    ok = layers_ok and model_worst < 1e-4 and elapsed < 60.0
    report(
        capsys, 1, ok,
        f"{len(LAYER_KINDS)} layer kinds worst {layer_worst:.2e}, whole model {model_worst:.2e}, "
        f"{elapsed:.1f}s < 60s",
    )


# -- 2. closed-form loss/activation values -----------------------------------


def test_criterion_2_closed_forms(capsys):
    loss = rmsle(np.array([math.e - 1.0]), np.array([0.0]))
    rmsle_ok = abs(loss - 1.0) < 1e-12
    gamma_val = gamma_scale_forward(np.array([0.5]), 2.0, 30.0)[0]
    gamma_ok = gamma_val == 7.5
    u = np.random.default_rng(0).uniform(0.0, 1.0, 1000)
    linear_dev = float(np.max(np.abs(gamma_scale_forward(u, 1.0, 30.0) - 30.0 * u)))
    linear_ok = linear_dev < 1e-12
    report(
        capsys, 2, rmsle_ok and gamma_ok and linear_ok,
        f"rmsle([e-1],[0])={loss:.15f}, scale(0.5,2,30)={gamma_val}, gamma=1 max dev {linear_dev:.1e}",
    )


# -- 3. geometry oracle -------------------------------------------------------


def test_criterion_3_geometry_oracle(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    max_range = 12.0
    n_scenes, rays_per_scene = 100, 100
    worst = 0.0
    checked = 0
    for i in range(n_scenes):
        scene = generate_scene(ALL_KINDS[i % len(ALL_KINDS)], 10_000 + i)
        segments = np.concatenate([ob.segments for ob in scene.obstacles], axis=0)
        origin = rng.uniform(-0.8, 0.8, 2)
        angles = rng.uniform(0.0, 2.0 * math.pi, rays_per_scene)
        for ang in angles:
            direction = (math.cos(ang), math.sin(ang))
            analytic = cast_ray(scene, origin, direction, max_range=max_range)
            marched = march_ray(
                segments, origin, direction, max_range=max_range, bound=analytic + 0.05
            )
            worst = max(worst, abs(analytic - marched))
            checked += 1
    elapsed = time.monotonic() - t0
    ok = worst < 2e-3 and elapsed < 30.0
    report(capsys, 3, ok, f"{checked} rays, worst |analytic-marched| {worst*1000:.3f} mm, {elapsed:.1f}s < 30s")


# -- 4. height-band semantics and fusion -------------------------------------


def test_criterion_4_band_semantics_and_fusion(capsys):
    spec = LaserSpec(n_rays=129)
    # table: laser sees only the legs, the band scan sees the whole top
    table = Scene(obstacles=[make_wall((6.0, -8.0), (6.0, 8.0)), *make_table(2.0, 0.0, 0.6, 0.35, 0.6)])
    x_t = laser_scan(table, spec)
    y_t = ground_truth_scan(table, spec)
    table_ok = (y_t < 4.0).sum() > 2 * (x_t < 4.0).sum() and np.all(y_t <= x_t + 1e-9)
    # glass: laser reads through, the band scan stops at the pane
    glass = Scene(obstacles=[
        make_wall((3.0, -8.0), (3.0, 8.0), visible=False),
        make_wall((9.0, -10.0), (9.0, 10.0)),
    ])
    x_g = laser_scan(glass, spec)
    y_g = ground_truth_scan(glass, spec)
    mid = spec.n_rays // 2
    glass_ok = abs(x_g[mid] - 9.0) < 1e-9 and abs(y_g[mid] - 3.0) < 1e-9
    # fusion invariant on generated data: 100% of pairs satisfy y <= x
    pairs = generate_dataset(500, ALL_KINDS, LaserSpec(), 77, sensor_noise=SENSOR_NOISE)
    holds = sum(np.all(p.y <= p.x + 1e-9) for p in pairs)
    fusion_ok = holds == len(pairs)
    report(
        capsys, 4, table_ok and glass_ok and fusion_ok,
        f"table near-rays {int((y_t < 4).sum())} vs laser {int((x_t < 4).sum())}, "
        f"glass x={x_g[mid]:.1f}/y={y_g[mid]:.1f}, fusion {holds}/{len(pairs)}",
    )


# -- 5. overfit smoke ---------------------------------------------------------


def test_criterion_5_overfit_smoke(capsys):
    t0 = time.monotonic()
    pairs = generate_dataset(32, ["glass_room", "table_room", "mixed"], LaserSpec(), 42)
    train_set = Dataset(pairs=pairs, n_points=128, max_range=30.0)
    model = build(AutoencoderConfig(), seed=0)
    cfg = TrainConfig(epochs=2000, batch_size=32, seed=0, sigma_noise=0.0, flip=False)
    model, history = train(model, train_set, cfg)
    score = evaluate(model, train_set)
    elapsed = time.monotonic() - t0
    ok = score < 0.01 and elapsed < 300.0
    report(capsys, 5, ok, f"train rmsle {score:.5f} < 0.01 after {len(history.losses)} epochs, {elapsed:.0f}s < 300s")


# -- 6. ablation trends at desk scale -----------------------------------------


@pytest.fixture(scope="module")
def desk_scale_ablation():
    spec = LaserSpec()
    train_set = Dataset(
        pairs=generate_dataset(2000, ALL_KINDS, spec, 1000, sensor_noise=SENSOR_NOISE),
        n_points=128,
        max_range=30.0,
    )
    test_set = Dataset(
        pairs=generate_dataset(500, ALL_KINDS, spec, 5000, sensor_noise=SENSOR_NOISE),
        n_points=128,
        max_range=30.0,
    )
    t0 = time.monotonic()
    report_obj = run_ablation(
        default_grid(repeats=5),
        train_set,
        test_set,
        base_seed=0,
        train_config=TrainConfig(epochs=200),
        workers=2,
    )
    return report_obj, time.monotonic() - t0


def _row(report_obj, name):
    return next(r for r in report_obj.rows if r.name == name)


def test_criterion_6a_skip_connections_reduce_error(capsys, desk_scale_ablation):
    rep, _ = desk_scale_ablation
    base, noskip = _row(rep, "0"), _row(rep, "1")
    ok = base.mean < noskip.mean
    report(capsys, "6a", ok, f"skip mean {base.mean:.4f} < no-skip mean {noskip.mean:.4f}")


def test_criterion_6b_gamma_two_not_worse_than_linear(capsys, desk_scale_ablation):
    rep, _ = desk_scale_ablation
    base, gamma1 = _row(rep, "0"), _row(rep, "4")
    ok = base.mean <= gamma1.mean
    report(capsys, "6b", ok, f"gamma=2 mean {base.mean:.4f} <= gamma=1 mean {gamma1.mean:.4f}")


def test_criterion_6c_noise_shrinks_seed_variance(capsys, desk_scale_ablation):
    rep, _ = desk_scale_ablation
    base, nonoise = _row(rep, "0"), _row(rep, "2")
    ok = base.std <= nonoise.std
    report(capsys, "6c", ok, f"noisy std {base.std:.5f} <= noise-free std {nonoise.std:.5f}")


def test_criterion_6d_all_disabled_is_worst(capsys, desk_scale_ablation):
    rep, elapsed = desk_scale_ablation
    alloff = _row(rep, "6")
    others = [r.mean for r in rep.rows if r.name != "6"]
    ok = alloff.mean >= max(others) and elapsed < 3900.0
    report(
        capsys, "6d", ok,
        f"all-disabled mean {alloff.mean:.4f} vs worst other {max(others):.4f}; grid took {elapsed/60:.0f} min",
    )


# -- 7. reference-table relative-delta arithmetic ------------------------------


def test_criterion_7_relative_delta_vs_reference_value(capsys):
    # The reference study table prints +6.79% for 2.865e-2 -> 3.059e-2, but
    # exact arithmetic on those rounded means gives +6.77%, so this check
    # misses its 0.01 pp tolerance by construction (the printed relatives
    # evidently came from unrounded data).  Kept as stated and expected to
    # fail; the unit tests validate the same formula on the four reference
    # rows that are consistent with their rounded means.
    delta = relative_percent(2.865e-2, 3.059e-2)
    ok = abs(delta - 6.79) <= 0.01
    report(capsys, 7, ok, f"computed {delta:+.4f}% vs reference +6.79% (tolerance 0.01 pp)")


# -- 8. chunked wide-scan inference --------------------------------------------


def test_criterion_8_chunked_inference(capsys):
    rng = np.random.default_rng(11)
    model = build(AutoencoderConfig(), seed=8)
    scan = rng.uniform(0.0, 30.0, 720)
    out = model.infer_chunked(scan)
    shape_ok = out.shape == (720,)
    bitwise_ok = all(
        np.array_equal(out[w * 128 : (w + 1) * 128], model.predict(scan[w * 128 : (w + 1) * 128]))
        for w in range(5)
    )
    range_ok = out.min() >= 0.0 and out.max() <= 30.0
    report(
        capsys, 8, shape_ok and bitwise_ok and range_ok,
        f"720 -> {out.shape[0]} points, 5 full chunks bit-identical, range [{out.min():.2f}, {out.max():.2f}]",
    )


# -- 9. round trips -------------------------------------------------------------


def test_criterion_9_round_trips(capsys, tmp_path):
    rng = np.random.default_rng(13)
    # checkpoint: bit-exact eval outputs
    model = build(AutoencoderConfig(), seed=9)
    model.forward(rng.uniform(0, 30, (8, 128)), train=True)  # non-trivial running stats
    x = rng.uniform(0, 30, (4, 128))
    expected = model.predict(x)
    ckpt = tmp_path / "model.halu"
    save(model, ckpt)
    ckpt_ok = np.array_equal(load(ckpt).predict(x), expected)

    # dataset: lossless binary round trip
    pairs = generate_dataset(20, ALL_KINDS, LaserSpec(), 5)
    ds = Dataset(pairs=pairs, n_points=128, max_range=30.0, note="round trip")
    dpath = tmp_path / "pairs.hald"
    save_dataset(ds, dpath)
    loaded = load_dataset(dpath)
    data_ok = all(
        np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
        for a, b in zip(ds.pairs, loaded.pairs)
    )

    # flip involution and normalize/denormalize identity
    pair = pairs[0]
    flip_rng = np.random.default_rng(1)
    flipped = ScanPair(x=pair.x[::-1].copy(), y=pair.y[::-1].copy())
    unflipped = ScanPair(x=flipped.x[::-1].copy(), y=flipped.y[::-1].copy())
    flip_ok = np.array_equal(unflipped.x, pair.x) and np.array_equal(unflipped.y, pair.y)
    # augment_flip applied twice with forced flips is the same statement; the
    # randomized form is exercised via its involution on a long stream
    stream_pair = pair
    for _ in range(10):
        stream_pair = augment_flip(stream_pair, flip_rng)
    order_preserved = np.array_equal(stream_pair.x, pair.x) or np.array_equal(stream_pair.x, pair.x[::-1])

    u = rng.uniform(0, 1, 256)
    norm_ok = np.max(np.abs(normalize(denormalize(u, 30.0), 30.0) - u)) < 1e-15

    ok = ckpt_ok and data_ok and flip_ok and order_preserved and norm_ok
    report(
        capsys, 9, ok,
        f"checkpoint bit-exact {ckpt_ok}, dataset lossless {data_ok}, flip involution {flip_ok}, "
        f"normalize round trip {norm_ok}",
    )
