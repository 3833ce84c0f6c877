"""Training loop, evaluation, and the repeated-seed ablation harness."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, replace

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def _single_threaded_blas():
    # the model's matrices are too small for BLAS threading to help; forcing
    # one thread avoids sync overhead and keeps parallel ablation workers
    # from oversubscribing the machine
    if threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=1)

from .data import Dataset, augment_noise
from .errors import ConfigError, HaluError, ShapeError, TrainingDiverged
from .model import Autoencoder, AutoencoderConfig, build
from .optim import adam_init, adam_step, mse_batch_grad, rmsle, rmsle_batch_grad


@dataclass
class TrainConfig:
    """Knobs for one training run.  Defaults are sized for desk-scale runs;
    long-profile studies raise epochs and dataset size."""

    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma_noise: float = 0.02  # meters; 0 disables noise augmentation
    flip: bool = True
    shuffle: bool = True
    loss: str = "rmsle"
    log_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (train-mode batch norm), got {self.batch_size}")
        if not self.sigma_noise >= 0.0:
            raise ConfigError(f"sigma_noise must be nonnegative, got {self.sigma_noise}")
        if self.loss not in ("rmsle", "mse"):
            raise ConfigError(f"loss must be 'rmsle' or 'mse', got {self.loss!r}")


@dataclass
class TrainHistory:
    """Per-epoch mean training loss plus run bookkeeping."""

    losses: list
    steps: int
    epochs: int
    seed: int


def _batch_grad(loss_kind, y_hat, y):
    if loss_kind == "rmsle":
        return rmsle_batch_grad(y_hat, y)
    return mse_batch_grad(y_hat, y)


def train(model: Autoencoder, train_set: Dataset, config: TrainConfig):
    """Train in place; returns (model, TrainHistory).

    Each epoch shuffles (seeded), then per batch: joint flip, input noise,
    forward in train mode, loss in meters, backward, Adam step.  A non-finite
    loss aborts with epoch/batch/grad-norm diagnostics.
    """
    if train_set.n_points != model.config.n_points:
        raise ShapeError(
            f"dataset scans have {train_set.n_points} points, model expects {model.config.n_points}"
        )
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    x_all, y_all = train_set.stacked()
    n_pairs = x_all.shape[0]
    rng = np.random.default_rng(config.seed)
    # all parameters are views into one flat buffer; Adam updates it as a
    # single vector (elementwise, so identical to per-parameter updates)
    flat_params = {"theta": model.param_flat}
    adam = adam_init(
        flat_params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps
    )
    s = model.config.max_range

    log_fh = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    losses = []
    steps = 0
    t0 = time.monotonic()

    def run_epoch(epoch):
        nonlocal steps
        order = rng.permutation(n_pairs) if config.shuffle else np.arange(n_pairs)
        epoch_loss = 0.0
        for b_idx, start in enumerate(range(0, n_pairs, config.batch_size)):
            idx = order[start : start + config.batch_size]
            xb = x_all[idx]
            yb = y_all[idx]
            if config.flip:
                flip_mask = rng.random(idx.size) < 0.5
                if flip_mask.any():
                    xb[flip_mask] = xb[flip_mask, ::-1]
                    yb[flip_mask] = yb[flip_mask, ::-1]
            if config.sigma_noise > 0.0:
                xb = augment_noise(xb, config.sigma_noise, rng, max_range=s)
            y_hat, cache = model.forward(xb, train=True)
            loss, grad = _batch_grad(config.loss, y_hat, yb)
            store = model.backward(cache, grad)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch {b_idx}",
                    epoch=epoch,
                    batch=b_idx,
                    grad_norms=store.norms(),
                )
            adam_step(flat_params, {"theta": store.flat}, adam)
            steps += 1
            epoch_loss += loss * idx.size
        return epoch_loss / n_pairs

    try:
        with _single_threaded_blas():
            for epoch in range(config.epochs):
                epoch_loss = run_epoch(epoch)
                losses.append(epoch_loss)
                if log_fh is not None:
                    log_fh.write(
                        json.dumps(
                            {"epoch": epoch, "loss": epoch_loss, "wall_time": time.monotonic() - t0}
                        )
                        + "\n"
                    )
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, TrainHistory(losses=losses, steps=steps, epochs=config.epochs, seed=config.seed)


def evaluate(model, test_set: Dataset, batch_size=256):
    """Mean per-scan rmsle over the test set, eval mode, no augmentation.

    `model` only needs a predict(x_batch) method, so stubs work too.
    """
    if len(test_set) == 0:
        raise ConfigError("test set is empty")
    x_all, y_all = test_set.stacked()
    total = 0.0
    for start in range(0, x_all.shape[0], batch_size):
        xb = x_all[start : start + batch_size]
        yb = y_all[start : start + batch_size]
        y_hat = model.predict(xb)
        total += sum(rmsle(y_hat[i], yb[i]) for i in range(xb.shape[0]))
    return total / x_all.shape[0]


# ---------------------------------------------------------------------------
# Ablation harness


@dataclass
class AblationVariant:
    """One grid row: which architecture/augmentation switches are active."""

    name: str
    skip_connections: bool
    gamma: float
    sigma_noise: float


@dataclass
class AblationGrid:
    configs: list
    repeats: int = 5
    baseline: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not 0 <= self.baseline < len(self.configs):
            raise ConfigError(f"baseline index {self.baseline} outside grid of {len(self.configs)}")


def default_grid(repeats=5):
    """Baseline, five single-switch variants, and an all-disabled row."""
    rows = [
        AblationVariant("0", True, 2.0, 0.02),
        AblationVariant("1", False, 2.0, 0.02),
        AblationVariant("2", True, 2.0, 0.0),
        AblationVariant("3", True, 0.5, 0.02),
        AblationVariant("4", True, 1.0, 0.02),
        AblationVariant("5", True, 4.0, 0.02),
        AblationVariant("6", False, 1.0, 0.0),
    ]
    return AblationGrid(configs=rows, repeats=repeats, baseline=0)


@dataclass
class AblationRow:
    name: str
    skip_connections: bool
    gamma: float
    sigma_noise: float
    scores: list
    mean: float
    std: float
    rel_mean: float  # percent vs baseline; 0 for the baseline row
    rel_std: float
    failed: bool = False


@dataclass
class AblationReport:
    rows: list
    baseline: int
    repeats: int
    base_seed: int


def relative_percent(baseline, value):
    """Percent change of `value` versus `baseline`."""
    if baseline == 0.0:
        return math.nan
    return (value - baseline) / baseline * 100.0


def _aggregate(scores):
    arr = np.asarray(scores, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def build_report(variants, score_lists, baseline, repeats, base_seed):
    """Aggregate per-variant score lists into the relative-delta report."""
    rows = []
    for variant, scores in zip(variants, score_lists):
        failed = scores is None
        mean, std = (math.nan, math.nan) if failed else _aggregate(scores)
        rows.append(
            AblationRow(
                name=variant.name,
                skip_connections=variant.skip_connections,
                gamma=variant.gamma,
                sigma_noise=variant.sigma_noise,
                scores=[] if failed else list(scores),
                mean=mean,
                std=std,
                rel_mean=0.0,
                rel_std=0.0,
                failed=failed,
            )
        )
    base = rows[baseline]
    for i, row in enumerate(rows):
        if i == baseline:
            row.rel_mean = 0.0
            row.rel_std = 0.0
        elif row.failed or base.failed:
            row.rel_mean = math.nan
            row.rel_std = math.nan
        else:
            row.rel_mean = relative_percent(base.mean, row.mean)
            row.rel_std = relative_percent(base.std, row.std) if base.std > 0.0 else math.nan
    return AblationReport(rows=rows, baseline=baseline, repeats=repeats, base_seed=base_seed)


def _single_run(variant: AblationVariant, seed, model_config, train_config, train_set, test_set):
    cfg = replace(model_config, skip_connections=variant.skip_connections, gamma=variant.gamma)
    run_cfg = replace(train_config, seed=seed, sigma_noise=variant.sigma_noise)
    model = build(cfg, seed=seed)
    train(model, train_set, run_cfg)
    return evaluate(model, test_set)


def _worker_count(workers):
    cap = os.environ.get("HALU_THREADS", "").strip()
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, workers)


def run_ablation(
    grid: AblationGrid,
    train_set: Dataset,
    test_set: Dataset,
    base_seed=0,
    model_config=None,
    train_config=None,
    workers=1,
):
    """Train/evaluate every (variant, repeat), repeat seeds base_seed + r.

    A run that raises a package error marks its variant as failed; the other
    variants still complete.  Independent runs may execute in a process pool
    (capped by the HALU_THREADS environment variable).
    """
    model_config = model_config or AutoencoderConfig()
    train_config = train_config or TrainConfig()
    workers = _worker_count(workers)

    jobs = [
        (ci, variant, base_seed + r)
        for ci, variant in enumerate(grid.configs)
        for r in range(grid.repeats)
    ]
    results: dict = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(
                    _single_run, variant, seed, model_config, train_config, train_set, test_set
                ): (ci, seed)
                for ci, variant, seed in jobs
            }
            for fut, (ci, seed) in futures.items():
                try:
                    results[(ci, seed)] = fut.result()
                except HaluError:
                    results[(ci, seed)] = None
    else:
        for ci, variant, seed in jobs:
            try:
                results[(ci, seed)] = _single_run(
                    variant, seed, model_config, train_config, train_set, test_set
                )
            except HaluError:
                results[(ci, seed)] = None

    score_lists = []
    for ci in range(len(grid.configs)):
        scores = [results[(ci, base_seed + r)] for r in range(grid.repeats)]
        score_lists.append(None if any(s is None for s in scores) else scores)
    return build_report(grid.configs, score_lists, grid.baseline, grid.repeats, base_seed)


# ---------------------------------------------------------------------------
# Report emission


def _fmt(value, scale=1.0, digits=3):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value * scale:.{digits}f}"


def emit_report(report: AblationReport, fmt="markdown"):
    """Render an AblationReport as markdown, csv, or json text."""
    if fmt == "markdown":
        lines = [
            "| n | skip | gamma | sigma_n | mean rmsle (x1e-2) | std (x1e-3) | mean vs baseline | std vs baseline |",
            "|---|------|-------|---------|--------------------|-------------|------------------|-----------------|",
        ]
        for i, row in enumerate(report.rows):
            if row.failed:
                tail = "failed | failed | failed | failed"
            else:
                rel = (
                    " | "
                    if i == report.baseline
                    else f"{row.rel_mean:+.2f}% | "
                    + ("-" if math.isnan(row.rel_std) else f"{row.rel_std:+.2f}%")
                )
                tail = f"{_fmt(row.mean, 100.0)} | {_fmt(row.std, 1000.0, 2)} | {rel}"
            skip = "yes" if row.skip_connections else ""
            sigma = f"{row.sigma_noise:g}" if row.sigma_noise else ""
            lines.append(f"| {row.name} | {skip} | {row.gamma:g} | {sigma} | {tail} |")
        return "\n".join(lines) + "\n"

    if fmt == "csv":
        lines = ["name,skip_connections,gamma,sigma_noise,mean,std,rel_mean_pct,rel_std_pct,failed,scores"]
        for row in report.rows:
            scores = ";".join(repr(s) for s in row.scores)
            lines.append(
                ",".join(
                    [
                        row.name,
                        str(row.skip_connections),
                        repr(row.gamma),
                        repr(row.sigma_noise),
                        repr(row.mean),
                        repr(row.std),
                        repr(row.rel_mean),
                        repr(row.rel_std),
                        str(row.failed),
                        scores,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    if fmt == "json":
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        payload = {
            "format": "halu-ablation-report",
            "version": 1,
            "baseline": report.baseline,
            "repeats": report.repeats,
            "base_seed": report.base_seed,
            "rows": [
                {
                    "name": row.name,
                    "skip_connections": row.skip_connections,
                    "gamma": row.gamma,
                    "sigma_noise": row.sigma_noise,
                    "scores": row.scores,
                    "mean": clean(row.mean),
                    "std": clean(row.std),
                    "rel_mean_pct": clean(row.rel_mean),
                    "rel_std_pct": clean(row.rel_std),
                    "failed": row.failed,
                }
                for row in report.rows
            ],
        }
        return json.dumps(payload, indent=2) + "\n"

    raise ConfigError(f"unknown report format {fmt!r}; choose markdown, csv, or json")
