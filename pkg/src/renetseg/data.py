"""Images, label maps, augmentation and the synthetic long-range task."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import IGNORE_LABEL, ConfigError
from .models import reflect_pad


class NetpbmError(ValueError):
    pass


@dataclass
class SegSample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    labels: np.ndarray  # [H, W] uint8, IGNORE_LABEL for unannotated pixels

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} disagree")


# -- NetPBM ---------------------------------------------------------------------


def _parse_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    if data[:2] != magic:
        raise NetpbmError(f"expected magic {magic!r} at byte 0, found {data[:2]!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"malformed header at byte {pos}")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError(f"malformed header at byte {pos}: missing separator before raster")
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise NetpbmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise NetpbmError(f"maxval must be 255, got {maxval}")
    return width, height, pos + 1


def _read_raster(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, offset = _parse_header(data, magic)
    need = width * height * channels
    if len(data) - offset < need:
        raise NetpbmError(
            f"{path}: truncated payload at byte {len(data)}, expected {offset + need} bytes")
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return raw.reshape(height, width, channels) if channels > 1 else raw.reshape(height, width)


def load_ppm(path) -> np.ndarray:
    """Binary P6 image as a float ``[3, H, W]`` array in ``[0, 1]``."""
    raster = _read_raster(path, b"P6", 3)
    return raster.transpose(2, 0, 1).astype(np.float32) / 255.0


def save_ppm(path, image: np.ndarray) -> None:
    rgb = np.clip(np.round(np.asarray(image, np.float64) * 255), 0, 255).astype(np.uint8)
    _, h, w = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.transpose(1, 2, 0).tobytes())


def save_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8:
        if gray.min() < 0 or gray.max() > 255:
            raise ValueError("PGM values must fit in 0..255")
        gray = gray.astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def load_pgm(path) -> np.ndarray:
    return _read_raster(path, b"P5", 1).copy()


def save_pgm_labels(path, labels: np.ndarray) -> None:
    save_pgm(path, np.asarray(labels).astype(np.uint8))


def load_pgm_labels(path) -> np.ndarray:
    return load_pgm(path)


# -- augmentation --------------------------------------------------------------------


def hflip(sample: SegSample) -> SegSample:
    return SegSample(np.ascontiguousarray(sample.image[:, :, ::-1]), np.ascontiguousarray(sample.labels[:, ::-1]))


def augment(sample: SegSample, crop: tuple[int, int], rng: np.random.Generator,
            flip: bool | None = None, ignore: int = IGNORE_LABEL) -> SegSample:
    """Reflection-pad up to ``crop`` if needed, take a uniform random crop, maybe flip.

    Labels are padded with ``ignore``.  ``flip=None`` tosses a fair coin.
    """
    ch, cw = crop
    if ch < 1 or cw < 1:
        raise ConfigError(f"invalid crop {crop}")
    h, w = sample.labels.shape
    image = reflect_pad(sample.image, max(h, ch), max(w, cw))
    labels = reflect_pad(sample.labels, max(h, ch), max(w, cw), fill=ignore)
    H, W = labels.shape
    if ch > H or cw > W:
        raise ConfigError(f"crop {crop} exceeds padded sample {H}x{W}")
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    out = SegSample(np.ascontiguousarray(image[:, top:top + ch, left:left + cw]),
                    np.ascontiguousarray(labels[top:top + ch, left:left + cw]))
    return hflip(out) if flip else out


# -- synthetic long-range task ----------------------------------------------------------


@dataclass(frozen=True)
class LongRangeTaskConfig:
    """A corner cue decides the class of a distant, class-agnostic band.

    The band is a horizontal stripe ``band_rows = (top, bottom)`` spanning
    the full width; its texture is drawn from one distribution whatever the
    class, so the cue colour is the only evidence for the band label.
    Cue and band are separated by ``band_rows[0] - cue_size`` rows.
    """

    canvas: tuple[int, int] = (64, 64)
    labels: int = 4
    cue_size: int = 8
    corners: tuple[str, ...] = ("top-left", "top-right")
    band_rows: tuple[int, int] = (40, 56)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.canvas
        top, bottom = self.band_rows
        if self.labels < 2:
            raise ConfigError("need at least two classes")
        if not 0 <= top < bottom <= h:
            raise ConfigError(f"band rows {self.band_rows} outside canvas {self.canvas}")
        if self.cue_size < 1 or self.cue_size > w:
            raise ConfigError("bad cue size")
        if self.cue_size > top:
            raise ConfigError("cue overlaps the band")
        for c in self.corners:
            if c not in ("top-left", "top-right"):
                raise ConfigError(f"unknown cue corner {c!r}")

    @property
    def separation(self) -> int:
        """Rows strictly between the cue and the band."""
        return self.band_rows[0] - self.cue_size


def cue_palette(labels: int) -> np.ndarray:
    """Distinct, saturated RGB colours, one per class."""
    hues = np.arange(labels) / labels
    k = (np.stack([hues + 0.0, hues + 2 / 3, hues + 1 / 3], axis=1) * 6) % 6
    rgb = np.clip(np.minimum(k, 4 - k), 0, 1)
    return rgb.astype(np.float32)


def _render(cfg: LongRangeTaskConfig, cls: int, rng: np.random.Generator, band_rng: np.random.Generator):
    h, w = cfg.canvas
    top, bottom = cfg.band_rows
    image = np.empty((3, h, w), np.float32)
    # background: dim smooth gray with mild noise
    image[:] = 0.25 + cfg.noise * rng.standard_normal((1, h, w)).astype(np.float32)
    # band: high-contrast binary texture, class-independent stream
    tex = band_rng.random((bottom - top, w)) < 0.5
    image[:, top:bottom] = np.where(tex, 0.85, 0.55).astype(np.float32)[None]
    corner = cfg.corners[int(rng.integers(len(cfg.corners)))]
    c0 = 0 if corner == "top-left" else w - cfg.cue_size
    s = cfg.cue_size
    cue = cue_palette(cfg.labels)[cls][:, None, None]
    image[:, :s, c0:c0 + s] = cue + cfg.noise * rng.standard_normal((3, s, s)).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)
    labels = np.zeros((h, w), np.uint8)
    labels[top:bottom] = cls
    return SegSample(image, labels)


def generate_longrange_task(n: int, cfg: LongRangeTaskConfig, classes: Sequence[int] | None = None) -> list[SegSample]:
    """``n`` samples; a pure function of ``(n, cfg)``.

    Classes are balanced (``i mod L`` in shuffled order) unless ``classes``
    overrides them.  Band textures come from per-sample streams that never
    see the class, so they are identical under any class assignment.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    root = np.random.SeedSequence(cfg.seed)
    master_seq, *sample_seqs = root.spawn(n + 1)
    master = np.random.default_rng(master_seq)
    if classes is None:
        classes = master.permutation(np.arange(n) % cfg.labels)
    elif len(classes) != n:
        raise ConfigError("one class per sample required")
    out = []
    for k, seq in enumerate(sample_seqs):
        body, band = seq.spawn(2)
        out.append(_render(cfg, int(classes[k]), np.random.default_rng(body), np.random.default_rng(band)))
    return out


def sample_class(sample: SegSample, cfg: LongRangeTaskConfig) -> int:
    return int(sample.labels[cfg.band_rows[0], 0])


def cue_oracle(sample: SegSample, cfg: LongRangeTaskConfig) -> np.ndarray:
    """Reads the corner cue and paints the band: the reference long-range predictor."""
    s = cfg.cue_size
    h, w = cfg.canvas
    palette = cue_palette(cfg.labels)
    best, cls = np.inf, 0
    for c0 in (0, w - s):
        mean = sample.image[:, :s, c0:c0 + s].mean(axis=(1, 2))
        dist = ((palette - mean) ** 2).sum(axis=1)
        if dist.min() < best:
            best, cls = dist.min(), int(dist.argmin())
    pred = np.zeros((h, w), np.uint8)
    pred[cfg.band_rows[0]:cfg.band_rows[1]] = cls
    return pred


# -- dataset directories ---------------------------------------------------------------------


def save_dataset(root, samples: Sequence[SegSample], labels: int, splits: dict[str, Sequence[int]] | None = None,
                 ignore: int = IGNORE_LABEL) -> None:
    """``images/NNNN.ppm``, ``labels/NNNN.pgm`` and a key=value ``meta.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for k, s in enumerate(samples):
        save_ppm(root / "images" / f"{k:04d}.ppm", s.image)
        save_pgm_labels(root / "labels" / f"{k:04d}.pgm", s.labels)
    splits = splits or {"train": range(len(samples))}
    lines = [f"labels={labels}", f"ignore={ignore}", f"count={len(samples)}"]
    lines += [f"{name}={','.join(str(i) for i in idx)}" for name, idx in splits.items()]
    (root / "meta.txt").write_text("\n".join(lines) + "\n")


def load_dataset(root, split: str | None = None) -> tuple[list[SegSample], dict[str, str]]:
    root = Path(root)
    meta = {}
    for line in (root / "meta.txt").read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    count = int(meta["count"])
    idx = range(count)
    if split is not None:
        if split not in meta:
            raise KeyError(f"split {split!r} not listed in {root / 'meta.txt'}")
        idx = [int(i) for i in meta[split].split(",") if i]
    samples = [SegSample(load_ppm(root / "images" / f"{k:04d}.ppm"), load_pgm_labels(root / "labels" / f"{k:04d}.pgm"))
               for k in idx]
    return samples, meta
