"""Initialization, momentum SGD training and dataset evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import models
from .data import SegSample, augment
from .layers import IGNORE_LABEL, ConfigError
from .metrics import EvalReport, confusion_matrix, report_from_confusion
from .models import NetworkSpec
from .tensor import TRAIN_DTYPE

log = logging.getLogger(__name__)

CONV_STD = 0.1
RENET_LIMIT = 0.2


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.001
    iterations: int = 400
    batch: int = 10
    momentum: float = 0.9
    seed: int = 0
    crop: tuple[int, int] | None = None  # defaults to the network's minimum size
    flip: bool = True
    workers: int = 1
    clip: float | None = None  # global gradient-norm ceiling

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be positive")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based ``iteration``; drops 10x after ``iterations // 2``."""
        return self.lr if iteration <= self.iterations // 2 else self.lr / 10


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    losses: list[float] = field(default_factory=list)


def init_params(spec: NetworkSpec, seed: int = 0, dtype=TRAIN_DTYPE, conv_std: float = CONV_STD) -> dict[str, np.ndarray]:
    """Gaussian conv weights, uniform recurrent weights, identity IRNN recurrences.

    Conv biases start at 0, batch-norm scales at 1 and shifts at 0.  Draws
    are made in parameter order from one seeded generator.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in models.param_shapes(spec).items():
        layer = spec.layer(models.layer_of(name))
        leaf = name.rsplit(".", 1)[1]
        if layer.kind == "conv":
            v = rng.normal(0.0, conv_std, shape) if leaf == "w" else np.zeros(shape)
        elif layer.kind == "renet":
            if layer.cell == "irnn" and leaf == "U":
                v = np.eye(shape[0])
            elif layer.cell == "irnn" and leaf == "b":
                v = np.zeros(shape)
            else:
                v = rng.uniform(-RENET_LIMIT, RENET_LIMIT, shape)
        elif leaf == "gamma":
            v = np.ones(shape)
        else:
            v = np.zeros(shape)
        out[name] = v.astype(dtype)
    return out


def _batch(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    return images, labels


def _minibatch(dataset, order, it: int, cfg: SgdConfig, crop) -> tuple[np.ndarray, np.ndarray]:
    picks = []
    for slot in range(cfg.batch):
        k = (it - 1) * cfg.batch + slot
        epoch, pos = divmod(k, len(dataset))
        idx = order(epoch)[pos]
        rng = np.random.default_rng([cfg.seed, it, slot])
        flip = None if cfg.flip else False
        picks.append(augment(dataset[idx], crop, rng, flip=flip))
    return _batch(picks)


def train(
    spec: NetworkSpec,
    params: dict[str, np.ndarray],
    dataset: Sequence[SegSample],
    cfg: SgdConfig,
    buffers: dict[str, np.ndarray] | None = None,
    diagnostic_dir: str | Path | None = None,
    ignore: int = IGNORE_LABEL,
    log_every: int = 0,
) -> TrainResult:
    """Momentum SGD on randomly cropped and flipped minibatches.

    Samples are visited in a fresh seeded permutation each epoch; each slot
    of each minibatch has its own augmentation stream, so the run depends
    only on the seed.  Parameters of frozen layers are never updated.  With
    ``cfg.clip`` set, gradients whose global norm exceeds it are rescaled.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    crop = tuple(cfg.crop) if cfg.crop else tuple(spec.min_size)
    params = {k: v.copy() for k, v in params.items()}
    buffers = {k: v.copy() for k, v in (buffers or models.fresh_buffers(spec, next(iter(params.values())).dtype)).items()}
    frozen = [n for n in params if models.layer_of(n) in spec.frozen]
    velocity = {k: np.zeros_like(v) for k, v in params.items() if k not in frozen}
    graph = models.build_graph(spec, training=True, buffers=buffers, workers=cfg.workers, ignore=ignore)
    perms: dict[int, np.ndarray] = {}

    def order(epoch):
        if epoch not in perms:
            perms.clear()
            perms[epoch] = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(len(dataset))
        return perms[epoch]

    losses = []
    for it in range(1, cfg.iterations + 1):
        images, labels = _minibatch(dataset, order, it, cfg, crop)
        tape = graph.forward({"image": images.astype(next(iter(params.values())).dtype), "labels": labels},
                             params, frozen=frozen)
        loss = float(tape.loss.value.reshape(-1)[0])
        if not np.isfinite(loss):
            if diagnostic_dir is not None:
                models.save_checkpoint(diagnostic_dir, spec, params, buffers)
            raise NumericError(f"non-finite loss {loss} at iteration {it}"
                               + (f"; state saved to {diagnostic_dir}" if diagnostic_dir else ""))
        losses.append(loss)
        grads = tape.backward()
        tape.release()
        lr = cfg.lr_at(it)
        scale = 1.0
        if cfg.clip is not None:
            norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
            if norm > cfg.clip:
                scale = cfg.clip / norm
        for name, g in grads.items():
            v = velocity[name]
            v *= cfg.momentum
            v -= (lr * scale) * g.astype(v.dtype)
            params[name] += v
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.5f lr %g", it, loss, lr)
    return TrainResult(params, buffers, losses)


def predict(spec: NetworkSpec, params, image: np.ndarray, buffers=None, workers: int = 1) -> np.ndarray:
    """Label map ``[H, W]`` for one image of any size."""
    probs = models.forward_variable_size(spec, params, image, buffers, workers)
    return probs.argmax(axis=0)


def evaluate(spec: NetworkSpec, params, dataset: Sequence[SegSample], buffers=None, workers: int = 1,
             ignore: int = IGNORE_LABEL, chunk: int = 16) -> EvalReport:
    """Pooled-count scores of the network's predictions over ``dataset``.

    Samples at least the minimum size that share a shape are run in
    batches of ``chunk``; the rest go through variable-size inference.
    """
    if not dataset:
        raise ConfigError("empty dataset")
    cm = np.zeros((spec.labels, spec.labels), np.int64)
    groups: dict[tuple, list[SegSample]] = {}
    for s in dataset:
        h, w = s.labels.shape
        if h >= spec.min_size[0] and w >= spec.min_size[1]:
            groups.setdefault(s.image.shape, []).append(s)
        else:
            cm += confusion_matrix(predict(spec, params, s.image, buffers, workers), s.labels, spec.labels, ignore)
    for members in groups.values():
        for k in range(0, len(members), chunk):
            part = members[k:k + chunk]
            logits = models.run(spec, params, np.stack([s.image for s in part]), buffers, workers)
            pred = logits.outputs["logits"].value.argmax(axis=1)
            for p, s in zip(pred, part):
                cm += confusion_matrix(p, s.labels, spec.labels, ignore)
    return report_from_confusion(cm)
