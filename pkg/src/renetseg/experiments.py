"""Desk-scale experiments: the long-range task, ablations and the sweep benchmark."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models, renet
from .data import LongRangeTaskConfig, SegSample, generate_longrange_task
from .layers import ConfigError
from .metrics import EvalReport
from .models import NetworkSpec
from .training import SgdConfig, TrainResult, evaluate, init_params, train

log = logging.getLogger(__name__)

ABLATIONS = ("lstm_vs_irnn", "crop_size", "mlfb", "norm")
# training crops mirroring (256,320), (320,400), (400,500) on a 500-pixel image, scaled to the canvas
REFERENCE_CROPS = ((256, 320), (320, 400), (400, 500))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that fixes one desk-scale run: data, model widths and the SGD budget."""

    task: LongRangeTaskConfig = LongRangeTaskConfig(seed=1)
    n_train: int = 400
    n_test: int = 100
    test_seed: int = 2
    widths: tuple[int, int, int] = (8, 16, 32)
    hidden: int = 16
    norm: str = "batch"
    mlfb: bool = True
    l2_scale: float = 1000.0
    cell: str = "lstm"
    patch: int = 2
    init_seed: int = 0
    sgd: SgdConfig = SgdConfig(lr=0.1, iterations=3000, batch=10, crop=(64, 64), clip=1.0)

    def datasets(self) -> tuple[list[SegSample], list[SegSample]]:
        train_set = generate_longrange_task(self.n_train, self.task)
        test_set = generate_longrange_task(self.n_test, replace(self.task, seed=self.test_seed))
        return train_set, test_set


@dataclass
class ResultRow:
    variant: str
    params: int
    report: EvalReport
    final_loss: float
    seconds: float
    result: TrainResult | None = field(default=None, repr=False)

    def as_row(self) -> dict:
        row = {"variant": self.variant, "params": self.params, "final_loss": self.final_loss,
               "seconds": round(self.seconds, 2)}
        row.update(self.report.as_row())
        return row


def hrenet_spec(cfg: ExperimentConfig, **overrides) -> NetworkSpec:
    kw = dict(widths=cfg.widths, hidden=cfg.hidden, labels=cfg.task.labels, mlfb=cfg.mlfb, norm=cfg.norm,
              l2_scale=cfg.l2_scale, cell=cfg.cell, patch=cfg.patch)
    kw.update(overrides)
    return models.build_compact_hrenet(**kw)


def parity_head(target: int, widths, labels: int) -> int:
    """Head width of the local baseline whose parameter count is closest to ``target``."""
    def count(m):
        return models.param_count(models.build_compact_fcn(widths, labels, head=m))

    best = min(range(1, 4096), key=lambda m: (abs(count(m) - target), m))
    return best


def baseline_spec(cfg: ExperimentConfig, target: int) -> NetworkSpec:
    return models.build_compact_fcn(cfg.widths, cfg.task.labels, head=parity_head(target, cfg.widths, cfg.task.labels))


def check_separation(task: LongRangeTaskConfig, spec: NetworkSpec) -> float:
    """Raise unless the cue-to-band gap exceeds the local network's receptive field."""
    rf = models.receptive_field(spec)
    if not task.separation > rf:
        raise ConfigError(f"cue-band separation {task.separation} does not exceed receptive field {rf}")
    return rf


def irnn_hidden_for_parity(cfg: ExperimentConfig) -> int:
    """IRNN hidden width whose network has the parameter count closest to the LSTM one."""
    target = models.param_count(hrenet_spec(cfg, cell="lstm"))
    return min(range(1, 16 * cfg.hidden + 1),
               key=lambda d: (abs(models.param_count(hrenet_spec(cfg, cell="irnn", hidden=d)) - target), d))


def fit(spec: NetworkSpec, cfg: ExperimentConfig, train_set, test_set, variant: str, sgd: SgdConfig | None = None,
        keep_result: bool = False) -> ResultRow:
    sgd = sgd or cfg.sgd
    start = time.perf_counter()
    result = train(spec, init_params(spec, cfg.init_seed), train_set, sgd)
    report = evaluate(spec, result.params, test_set, result.buffers, sgd.workers)
    seconds = time.perf_counter() - start
    tail = result.losses[-10:] or [math.nan]
    row = ResultRow(variant, models.param_count(spec), report, float(np.mean(tail)), seconds,
                    result if keep_result else None)
    log.info("%s: params %d pixel acc %.4f mIoU %.4f (%.0fs)", variant, row.params,
             report.pixel_accuracy, report.mean_iou, seconds)
    return row


def run_longrange(cfg: ExperimentConfig = ExperimentConfig(), keep_result: bool = False) -> list[ResultRow]:
    """Local baseline versus the recurrent model at matched parameter count, same seeds and budget."""
    train_set, test_set = cfg.datasets()
    hybrid = hrenet_spec(cfg)
    base = baseline_spec(cfg, models.param_count(hybrid))
    check_separation(cfg.task, base)
    return [
        fit(base, cfg, train_set, test_set, "baseline", keep_result=keep_result),
        fit(hybrid, cfg, train_set, test_set, "hrenet", keep_result=keep_result),
    ]


def scaled_crops(canvas: tuple[int, int], reference: int = 500) -> list[tuple[int, int]]:
    """The three reference crops rescaled so the largest side of the largest one matches the canvas."""
    factor = max(canvas) / reference
    return [(min(canvas[0], round(h * factor)), min(canvas[1], round(w * factor))) for h, w in REFERENCE_CROPS]


def run_ablation(kind: str, cfg: ExperimentConfig = ExperimentConfig()) -> list[ResultRow]:
    """Train each variant of one ablation under the same seeds and budget."""
    if kind not in ABLATIONS:
        raise ConfigError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    train_set, test_set = cfg.datasets()
    if kind == "lstm_vs_irnn":
        specs = [("lstm", hrenet_spec(cfg, cell="lstm")),
                 ("irnn", hrenet_spec(cfg, cell="irnn", hidden=irnn_hidden_for_parity(cfg)))]
        return [fit(s, cfg, train_set, test_set, name) for name, s in specs]
    if kind == "crop_size":
        rows = []
        for crop in scaled_crops(cfg.task.canvas):
            sgd = replace(cfg.sgd, crop=crop)
            rows.append(fit(hrenet_spec(cfg), cfg, train_set, test_set, f"crop {crop[0]}x{crop[1]}", sgd))
        return rows
    if kind == "mlfb":
        variants = [("(b) renet", "none", False), ("(c) renet+bn", "batch", False), ("(d) renet+bn+mlfb", "batch", True)]
    else:
        variants = [(f"mlfb+{n}", n, True) for n in ("none", "batch", "l2")]
    return [fit(hrenet_spec(cfg, norm=n, mlfb=m), cfg, train_set, test_set, name) for name, n, m in variants]


def format_table(rows: Sequence[ResultRow]) -> str:
    head = f"{'variant':<22}{'params':>8}{'pixel':>8}{'class':>8}{'mIoU':>8}{'loss':>8}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.variant:<22}{r.params:>8}{r.report.pixel_accuracy:>8.4f}{r.report.class_accuracy:>8.4f}"
                     f"{r.report.mean_iou:>8.4f}{r.final_loss:>8.4f}")
    return "\n".join(lines)


def write_csv(path, rows: Sequence[dict]) -> None:
    rows = list(rows)
    if not rows:
        return
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


# -- sweep benchmark -------------------------------------------------------------------------


@dataclass
class BenchRow:
    size: int
    hidden: int
    workers: int
    seconds: float
    sequential_seconds: float
    identical: bool

    @property
    def speedup(self) -> float:
        return self.sequential_seconds / self.seconds

    def as_row(self) -> dict:
        return {"size": self.size, "hidden": self.hidden, "workers": self.workers, "seconds": self.seconds,
                "sequential_seconds": self.sequential_seconds, "speedup": self.speedup, "identical": self.identical}


def _median_time(fn, repeats: int) -> tuple[float, np.ndarray]:
    out = fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def bench_sweeps(sizes=(32, 64, 128), widths=(16, 32), workers=(1, 2, 4, 8), channels: int = 8,
                 repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Median-of-``repeats`` timings of one recurrent group forward, sequential vs lane-parallel.

    Every parallel output is checked for bit equality with the sequential one.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        x = rng.standard_normal((channels, size, size))
        for d in widths:
            group = renet.ReNetGroupConfig(
                renet.ReNetLayerConfig("vertical", renet.LstmParams.uniform(channels, d, rng),
                                       renet.LstmParams.uniform(channels, d, rng)),
                renet.ReNetLayerConfig("horizontal", renet.LstmParams.uniform(2 * d, d, rng),
                                       renet.LstmParams.uniform(2 * d, d, rng)))
            seq_t, seq_out = _median_time(lambda: renet.renet_group(x, group, workers=1), repeats)
            for k in workers:
                t, out = _median_time(lambda: renet.renet_group(x, group, workers=k), repeats)
                same = bool(np.array_equal(out, seq_out))
                if not same:
                    raise AssertionError(f"parallel output differs at size {size}, width {d}, workers {k}")
                rows.append(BenchRow(size, d, k, t, seq_t, same))
    return rows
