"""Network descriptions and their execution.

A :class:`NetworkSpec` is an ordered list of :class:`LayerSpec` rows, each
consuming the previous row's output unless it names its inputs.  Builders
produce the naive deep ReNet, the dilated baseline FCN and the hybrid
FCN + ReNet network; :func:`build_graph` turns a spec into a differentiable
:class:`~renetseg.autograd.Graph`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from . import layers as L
from . import renet
from .layers import BatchNormState, ConfigError, ConvConfig, NormConfig
from .tensor import ShapeError, load_tensors, save_tensors

FULL_FCN_WIDTHS = (64, 128, 256, 512, 512, 1024, 1024)
FULL_NRENET_WIDTHS = (256, 512, 1024)
FULL_GROUP_HIDDEN = 120
DESK_SCALE = 1 / 16
DESK_MIN_SIZE = (48, 48)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | pool | renet | concat | upsample
    channels: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    relu: bool = False
    patch: tuple[int, int] = (1, 1)
    hidden: int = 0
    cell: str = "lstm"
    factor: int = 1
    inputs: tuple[str, ...] = ()
    norm: str = "none"
    norm_scale: float | None = None

    def config_tuple(self) -> str:
        if self.kind == "conv":
            return f"{self.kernel},{self.stride},{self.dilation}"
        if self.kind == "pool":
            return f"{self.kernel},{self.stride}"
        if self.kind == "renet":
            return f"{self.patch[0]}x{self.patch[1]}"
        if self.kind == "upsample":
            return f"{self.factor}x"
        return self.norm


@dataclass
class NetworkSpec:
    name: str
    layers: list[LayerSpec]
    labels: int
    in_channels: int = 3
    min_size: tuple[int, int] = DESK_MIN_SIZE
    mlfb: bool = False
    norm: str = "none"
    frozen: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        names = [ly.name for ly in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate layer names")
        unknown = set(self.frozen) - set(names)
        if unknown:
            raise ConfigError(f"frozen layers not in network: {sorted(unknown)}")

    def layer(self, name: str) -> LayerSpec:
        for ly in self.layers:
            if ly.name == name:
                return ly
        raise KeyError(f"unknown layer {name!r}")

    def resolved_inputs(self) -> dict[str, tuple[str, ...]]:
        out, prev = {}, "image"
        for ly in self.layers:
            out[ly.name] = ly.inputs or (prev,)
            prev = ly.name
        return out

    def with_frozen(self, names: Iterable[str]) -> "NetworkSpec":
        return replace(self, frozen=frozenset(names))


def _scaled(c: float, scale: float) -> int:
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    return max(1, int(math.floor(c * scale + 0.5)))


# -- builders -----------------------------------------------------------------------


def build_nrenet(scale: float = DESK_SCALE, labels: int = 8, min_size=DESK_MIN_SIZE, cell: str = "lstm") -> NetworkSpec:
    """Three recurrent layer groups (2x2 patches, then 1x1, 1x1), a 1x1 classifier and 2x upsampling."""
    widths = [_scaled(w, scale) for w in FULL_NRENET_WIDTHS]
    for a, b in zip(widths, widths[1:]):
        if b <= a:
            raise ConfigError(f"scale {scale} collapses the increasing group widths {widths}")
    layers = [
        LayerSpec("renet1", "renet", 2 * widths[0], patch=(2, 2), hidden=widths[0], cell=cell),
        LayerSpec("renet2", "renet", 2 * widths[1], hidden=widths[1], cell=cell),
        LayerSpec("renet3", "renet", 2 * widths[2], hidden=widths[2], cell=cell),
        LayerSpec("conv", "conv", labels, kernel=1),
        LayerSpec("upsample", "upsample", labels, factor=2),
    ]
    return NetworkSpec("nrenet", layers, labels, min_size=tuple(min_size))


def _fcn_trunk(scale: float) -> list[LayerSpec]:
    c1, c2, c3, c4, c5, c6, c7 = (_scaled(c, scale) for c in FULL_FCN_WIDTHS)
    layers = []

    def convs(block, n, ch, dilation=1):
        for i in range(1, n + 1):
            layers.append(LayerSpec(f"conv{block}_{i}", "conv", ch, kernel=3, dilation=dilation, relu=True))

    convs(1, 2, c1)
    layers.append(LayerSpec("pool1", "pool", c1, kernel=2, stride=2))
    convs(2, 2, c2)
    layers.append(LayerSpec("pool2", "pool", c2, kernel=2, stride=2))
    convs(3, 3, c3)
    layers.append(LayerSpec("pool3", "pool", c3, kernel=2, stride=2))
    convs(4, 3, c4)
    layers.append(LayerSpec("pool4", "pool", c4, kernel=3, stride=1))
    convs(5, 3, c5, dilation=2)
    layers.append(LayerSpec("pool5", "pool", c5, kernel=3, stride=1))
    layers.append(LayerSpec("conv6", "conv", c6, kernel=3, dilation=12, relu=True))
    layers.append(LayerSpec("conv7", "conv", c7, kernel=3, relu=True))
    return layers


def build_baseline_fcn(scale: float = DESK_SCALE, labels: int = 21, min_size=DESK_MIN_SIZE) -> NetworkSpec:
    """Dilated FCN: pool4/pool5 keep resolution, so the output stride is 8."""
    layers = _fcn_trunk(scale)
    layers.append(LayerSpec("conv8", "conv", labels, kernel=1))
    layers.append(LayerSpec("upsample", "upsample", labels, factor=8))
    return NetworkSpec("baseline_fcn", layers, labels, min_size=tuple(min_size))


def build_hrenet(
    scale: float = DESK_SCALE,
    labels: int = 21,
    mlfb: bool = False,
    norm: str = "none",
    l2_scale: float | None = 1000.0,
    min_size=DESK_MIN_SIZE,
    cell: str = "lstm",
    hidden: int | None = None,
) -> NetworkSpec:
    """Baseline FCN with one recurrent layer group between conv7 and conv8.

    With ``mlfb`` the group reads the normalized concatenation of pool4,
    pool5 and conv7; otherwise it reads conv7 (normalized when ``norm`` is
    not ``"none"``).
    """
    if norm not in ("batch", "l2", "none"):
        raise ConfigError(f"unknown norm mode {norm!r}")
    if norm == "l2" and (l2_scale is None or l2_scale <= 0):
        raise ConfigError("l2 normalization needs a positive scale")
    layers = _fcn_trunk(scale)
    group_in = ()
    if mlfb or norm != "none":
        sources = ("pool4", "pool5", "conv7") if mlfb else ("conv7",)
        width = sum(next(ly.channels for ly in layers if ly.name == s) for s in sources)
        layers.append(LayerSpec("concat", "concat", width, inputs=sources, norm=norm,
                                norm_scale=l2_scale if norm == "l2" else None))
        group_in = ("concat",)
    d = hidden if hidden is not None else _scaled(FULL_GROUP_HIDDEN, scale)
    layers.append(LayerSpec("renet1", "renet", 2 * d, hidden=d, cell=cell, inputs=group_in))
    layers.append(LayerSpec("conv8", "conv", labels, kernel=1))
    layers.append(LayerSpec("upsample", "upsample", labels, factor=8))
    return NetworkSpec("hrenet", layers, labels, min_size=tuple(min_size), mlfb=mlfb, norm=norm)


def build_compact_fcn(widths=(8, 16, 32), labels: int = 4, head: int | None = 64, min_size=(16, 16)) -> NetworkSpec:
    """Local-context model for the long-range task: output stride 4, small receptive field.

    conv1 (3x3) - pool1 (2,2) - conv2 (3x3) - pool2 (2,2) - conv3 (3x3) -
    conv4 (1x1), then an optional two-layer 1x1 head (conv6, conv7) sized for
    parameter parity with the recurrent variant, then conv8 (1x1) and 4x
    upsampling.
    """
    w1, w2, w3 = widths
    layers = [
        LayerSpec("conv1", "conv", w1, kernel=3, relu=True),
        LayerSpec("pool1", "pool", w1, kernel=2, stride=2),
        LayerSpec("conv2", "conv", w2, kernel=3, relu=True),
        LayerSpec("pool2", "pool", w2, kernel=2, stride=2),
        LayerSpec("conv3", "conv", w3, kernel=3, relu=True),
        LayerSpec("conv4", "conv", w3, kernel=1, relu=True),
    ]
    if head:
        layers.append(LayerSpec("conv6", "conv", head, kernel=1, relu=True))
        layers.append(LayerSpec("conv7", "conv", w3, kernel=1, relu=True))
    layers.append(LayerSpec("conv8", "conv", labels, kernel=1))
    layers.append(LayerSpec("upsample", "upsample", labels, factor=4))
    return NetworkSpec("compact_fcn", layers, labels, min_size=tuple(min_size))


def build_compact_hrenet(
    widths=(8, 16, 32),
    hidden: int = 16,
    labels: int = 4,
    mlfb: bool = False,
    norm: str = "none",
    l2_scale: float | None = 1000.0,
    cell: str = "lstm",
    min_size=(16, 16),
    patch: int = 1,
) -> NetworkSpec:
    """The compact local trunk with a recurrent layer group before the classifier.

    The multi-layer sources are pool2, conv3 and conv4, all at stride 4.
    A group ``patch`` above 1 coarsens the grid and the upsampling follows.
    """
    trunk = build_compact_fcn(widths, labels, head=None, min_size=min_size).layers[:-2]
    if norm == "l2" and (l2_scale is None or l2_scale <= 0):
        raise ConfigError("l2 normalization needs a positive scale")
    layers = list(trunk)
    group_in = ()
    if mlfb or norm != "none":
        sources = ("pool2", "conv3", "conv4") if mlfb else ("conv4",)
        width = sum(next(ly.channels for ly in layers if ly.name == s) for s in sources)
        layers.append(LayerSpec("concat", "concat", width, inputs=sources, norm=norm,
                                norm_scale=l2_scale if norm == "l2" else None))
        group_in = ("concat",)
    layers.append(LayerSpec("renet1", "renet", 2 * hidden, hidden=hidden, cell=cell, inputs=group_in,
                            patch=(patch, patch)))
    layers.append(LayerSpec("conv8", "conv", labels, kernel=1))
    layers.append(LayerSpec("upsample", "upsample", labels, factor=4 * patch))
    return NetworkSpec("compact_hrenet", layers, labels, min_size=tuple(min_size), mlfb=mlfb, norm=norm)


BUILDERS = {
    "nrenet": build_nrenet,
    "baseline_fcn": build_baseline_fcn,
    "hrenet": build_hrenet,
    "compact_fcn": build_compact_fcn,
    "compact_hrenet": build_compact_hrenet,
}


# -- shapes, parameters, receptive fields -------------------------------------------------


def infer_shapes(spec: NetworkSpec, height: int, width: int) -> dict[str, tuple[int, int, int]]:
    """Symbolic ``(C, H, W)`` of every layer output for an ``height x width`` input."""
    shapes = {"image": (spec.in_channels, height, width)}
    inputs = spec.resolved_inputs()
    for ly in spec.layers:
        srcs = [shapes[s] for s in inputs[ly.name]]
        c, h, w = srcs[0]
        if ly.kind == "conv":
            cfg = ConvConfig(c, ly.channels, ly.kernel, ly.stride, ly.dilation)
            h, w = cfg.out_size(h), cfg.out_size(w)
        elif ly.kind == "pool":
            h, w = -(-h // ly.stride), -(-w // ly.stride)
        elif ly.kind == "renet":
            h, w = -(-h // ly.patch[0]), -(-w // ly.patch[1])
        elif ly.kind == "upsample":
            h, w = h * ly.factor, w * ly.factor
        elif ly.kind == "concat":
            if any(s[1:] != (h, w) for s in srcs):
                raise ShapeError(f"{ly.name}: sources differ in resolution {srcs}")
            c = sum(s[0] for s in srcs)
        if h < 1 or w < 1:
            raise ShapeError(f"{ly.name}: input {height}x{width} too small")
        shapes[ly.name] = (ly.channels if ly.kind != "concat" else c, h, w)
    return shapes


def param_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(spec, *spec.min_size)
    inputs = spec.resolved_inputs()
    out = {}
    for ly in spec.layers:
        cin = shapes[inputs[ly.name][0]][0]
        if ly.kind == "conv":
            out[f"{ly.name}.w"] = (ly.channels, cin, ly.kernel, ly.kernel)
            out[f"{ly.name}.b"] = (ly.channels,)
        elif ly.kind == "renet":
            d = ly.hidden
            p_v = cin * ly.patch[0] * ly.patch[1]
            for axis, p in (("V", p_v), ("H", 2 * d)):
                for side, names in renet.layer_param_names(ly.name, axis, ly.cell).items():
                    for n in names:
                        kind = n.rsplit(".", 1)[1]
                        out[n] = {"W": (d, p), "U": (d, d), "b": (d,)}[kind]
        elif ly.kind == "concat" and ly.norm == "batch":
            for k, src in enumerate(ly.inputs):
                c = shapes[src][0]
                out[f"{ly.name}.bn{k}.gamma"] = (c,)
                out[f"{ly.name}.bn{k}.beta"] = (c,)
    return out


def buffer_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(spec, *spec.min_size)
    out = {}
    for ly in spec.layers:
        if ly.kind == "concat" and ly.norm == "batch":
            for k, src in enumerate(ly.inputs):
                out[f"{ly.name}.bn{k}.mean"] = (shapes[src][0],)
                out[f"{ly.name}.bn{k}.var"] = (shapes[src][0],)
    return out


def fresh_buffers(spec: NetworkSpec, dtype=np.float32) -> dict[str, np.ndarray]:
    return {k: (np.ones(s, dtype) if k.endswith(".var") else np.zeros(s, dtype)) for k, s in buffer_shapes(spec).items()}


def param_count(spec: NetworkSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def layer_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def receptive_fields(spec: NetworkSpec) -> dict[str, float]:
    """Theoretical receptive-field extent (input pixels) of every layer output.

    Recurrent groups make the field unbounded (``inf``).  Bilinear
    upsampling reads two neighbouring cells, adding one input stride.
    """
    rf, jump = {"image": 1.0}, {"image": 1.0}
    inputs = spec.resolved_inputs()
    for ly in spec.layers:
        srcs = inputs[ly.name]
        r, j = max(rf[s] for s in srcs), jump[srcs[0]]
        if ly.kind == "conv":
            r += (ly.kernel - 1) * ly.dilation * j
            j *= ly.stride
        elif ly.kind == "pool":
            r += (ly.kernel - 1) * j
            j *= ly.stride
        elif ly.kind == "renet":
            r = math.inf
        elif ly.kind == "upsample":
            r += j
            j /= ly.factor
        rf[ly.name], jump[ly.name] = r, j
    return rf


def receptive_field(spec: NetworkSpec) -> float:
    return receptive_fields(spec)[spec.layers[-1].name]


def output_stride(spec: NetworkSpec) -> int:
    stride = 1
    for ly in spec.layers:
        if ly.kind in ("conv", "pool"):
            stride *= ly.stride
        elif ly.kind == "renet":
            stride *= ly.patch[0]
        elif ly.kind == "upsample":
            break
    return stride


# -- execution -----------------------------------------------------------------------------


def build_graph(
    spec: NetworkSpec,
    training: bool = False,
    buffers: Mapping[str, np.ndarray] | None = None,
    workers: int = 1,
    with_loss: bool = True,
    keep: Iterable[str] = (),
    ignore: int = L.IGNORE_LABEL,
) -> ag.Graph:
    """Differentiable program ``image [N,3,H,W] (+ labels [N,H,W]) -> logits, loss``.

    Logits are cropped back to the input size after upsampling.  Layer
    outputs named in ``keep`` are exposed as extra outputs.  Batch-norm
    running statistics in ``buffers`` are updated in place in training mode.
    """
    inputs = spec.resolved_inputs()
    keep = tuple(keep)

    def fn(tape, ins, params):
        image = ins["image"]
        n, c, h, w = image.value.shape
        if c != spec.in_channels:
            raise ShapeError(f"expected {spec.in_channels} input channels, got {c}")
        vals = {"image": image}
        for ly in spec.layers:
            x = vals[inputs[ly.name][0]]
            if ly.kind == "conv":
                cfg = ConvConfig(x.value.shape[1], ly.channels, ly.kernel, ly.stride, ly.dilation)
                y = L.conv2d_op(x, params[f"{ly.name}.w"], params[f"{ly.name}.b"], cfg)
                if ly.relu:
                    y = ag.relu(y)
            elif ly.kind == "pool":
                y = L.maxpool_op(x, ly.kernel, ly.stride)
            elif ly.kind == "renet":
                y = renet.group_op(x, params, ly.name, ly.patch, ly.cell, workers)
            elif ly.kind == "upsample":
                y = L.upsample_op(x, ly.factor)
            elif ly.kind == "concat":
                parts = []
                for k, src in enumerate(ly.inputs):
                    part = vals[src]
                    if ly.norm == "batch":
                        key = f"{ly.name}.bn{k}"
                        state = _bn_state(buffers, key, part.value.shape[1], part.value.dtype)
                        part = L.batch_norm_op(part, params[f"{key}.gamma"], params[f"{key}.beta"],
                                               state, NormConfig("batch"), training)
                    elif ly.norm == "l2":
                        part = L.l2_normalize_op(part, ly.norm_scale)
                    parts.append(part)
                y = ag.concat(parts, axis=1) if len(parts) > 1 else parts[0]
            else:
                raise ConfigError(f"unknown layer kind {ly.kind!r}")
            vals[ly.name] = y
        logits = ag.crop(vals[spec.layers[-1].name], h, w)
        out = {"logits": logits}
        out.update({k: vals[k] for k in keep})
        if with_loss and "labels" in ins:
            out["loss"] = L.softmax_cross_entropy_op(logits, ins["labels"], ignore)
        return out

    names = ["image", "labels"] if with_loss else ["image"]
    return ag.Graph(fn, names)


def _bn_state(buffers, key, channels, dtype) -> BatchNormState:
    if buffers is None:
        return BatchNormState.fresh(channels, dtype)
    return BatchNormState(buffers[f"{key}.mean"], buffers[f"{key}.var"])


def run(spec: NetworkSpec, params, images: np.ndarray, buffers=None, workers: int = 1, keep=()) -> ag.Tape:
    """Inference-mode forward pass on a batch ``[N, 3, H, W]``."""
    dtype = next(iter(params.values())).dtype
    graph = build_graph(spec, training=False, buffers=buffers, workers=workers, with_loss=False, keep=keep)
    return graph.forward({"image": images.astype(dtype, copy=False)}, params)


def reflect_pad(image: np.ndarray, height: int, width: int, fill=None) -> np.ndarray:
    """Pad ``[..., H, W]`` at the bottom/right by mirroring without repeating the edge.

    With ``fill`` set (label maps), padded pixels take that constant instead.
    """
    h, w = image.shape[-2:]
    ph, pw = max(height - h, 0), max(width - w, 0)
    if not ph and not pw:
        return image
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    if fill is not None:
        return np.pad(image, widths, constant_values=fill)
    return np.pad(image, widths, mode="reflect")


def forward_variable_size(spec: NetworkSpec, params, image: np.ndarray, buffers=None, workers: int = 1) -> np.ndarray:
    """Per-pixel class distribution ``[L, H, W]`` for an image of any size."""
    if image.ndim != 3 or image.shape[0] != spec.in_channels:
        raise ShapeError(f"expected a [{spec.in_channels}, H, W] image, got {image.shape}")
    _, h, w = image.shape
    padded = reflect_pad(image, max(h, spec.min_size[0]), max(w, spec.min_size[1]))
    tape = run(spec, params, padded[None], buffers, workers)
    probs = L.softmax_pixelwise(tape.outputs["logits"].value[0], axis=0)
    return np.ascontiguousarray(probs[:, :h, :w])


def dump_feature_maps(spec: NetworkSpec, params, image: np.ndarray, layer: str, count: int = 4,
                      out_dir: str | Path | None = None, buffers=None) -> list[np.ndarray]:
    """First ``count`` channels of ``layer`` as 8-bit grayscale images.

    Each channel is min-max scaled to ``[0, 255]``; a constant channel maps
    to all zeros.  With ``out_dir`` the images are also written as PGM.
    """
    from .data import save_pgm

    spec.layer(layer)
    tape = run(spec, params, image[None], buffers, keep=(layer,))
    fmap = tape.outputs[layer].value[0]
    images = []
    for k in range(min(count, fmap.shape[0])):
        ch = fmap[k].astype(np.float64)
        lo, hi = ch.min(), ch.max()
        if hi - lo <= 0:
            img = np.zeros(ch.shape, np.uint8)
        else:
            img = np.round((ch - lo) / (hi - lo) * 255).astype(np.uint8)
        images.append(img)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_pgm(Path(out_dir) / f"{layer}_{k}.pgm", img)
    return images


# -- manifests and checkpoints --------------------------------------------------------------


def manifest_text(spec: NetworkSpec) -> str:
    lines = [
        "# renetseg network manifest",
        f"name={spec.name}",
        f"labels={spec.labels}",
        f"in_channels={spec.in_channels}",
        f"min_size={spec.min_size[0]},{spec.min_size[1]}",
        f"mlfb={int(spec.mlfb)}",
        f"norm={spec.norm}",
        f"frozen={','.join(sorted(spec.frozen))}",
        "# layer | type | config | channels | activation | extra",
    ]
    for ly in spec.layers:
        act = "relu" if ly.relu else "idn"
        extra = [f"inputs={'+'.join(ly.inputs)}"] if ly.inputs else []
        if ly.kind == "renet":
            extra += [f"hidden={ly.hidden}", f"cell={ly.cell}"]
        if ly.norm_scale is not None:
            extra.append(f"scale={ly.norm_scale:g}")
        lines.append(" | ".join([ly.name, ly.kind, ly.config_tuple(), str(ly.channels), act, " ".join(extra)]))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> NetworkSpec:
    head, layers = {}, []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "|" not in line:
            k, _, v = line.partition("=")
            head[k.strip()] = v.strip()
            continue
        name, kind, conf, ch, act, extra = (p.strip() for p in line.split("|"))
        kw = dict(e.split("=", 1) for e in extra.split()) if extra else {}
        args = dict(name=name, kind=kind, channels=int(ch), relu=act == "relu")
        if "inputs" in kw:
            args["inputs"] = tuple(kw["inputs"].split("+"))
        if kind == "conv":
            k, s, d = (int(v) for v in conf.split(","))
            args.update(kernel=k, stride=s, dilation=d)
        elif kind == "pool":
            k, s = (int(v) for v in conf.split(","))
            args.update(kernel=k, stride=s)
        elif kind == "renet":
            s, t = (int(v) for v in conf.split("x"))
            args.update(patch=(s, t), hidden=int(kw["hidden"]), cell=kw.get("cell", "lstm"))
        elif kind == "upsample":
            args["factor"] = int(conf.rstrip("x"))
        elif kind == "concat":
            args["norm"] = conf
            if "scale" in kw:
                args["norm_scale"] = float(kw["scale"])
        layers.append(LayerSpec(**args))
    h, w = (int(v) for v in head["min_size"].split(","))
    frozen = frozenset(f for f in head.get("frozen", "").split(",") if f)
    return NetworkSpec(head["name"], layers, int(head["labels"]), int(head.get("in_channels", 3)),
                       (h, w), head.get("mlfb", "0") == "1", head.get("norm", "none"), frozen)


def save_checkpoint(path: str | Path, spec: NetworkSpec, params: Mapping[str, np.ndarray],
                    buffers: Mapping[str, np.ndarray] | None = None) -> None:
    """Write ``manifest.txt``, ``tensors.txt`` (names in record order) and ``weights.rnseg``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(params) + sorted(buffers or {})
    arrays = [params[n] if n in params else buffers[n] for n in names]
    (path / "manifest.txt").write_text(manifest_text(spec))
    (path / "tensors.txt").write_text("".join(
        f"{n} {'buffer' if n not in params else 'param'}\n" for n in names))
    save_tensors(path / "weights.rnseg", arrays)


def load_checkpoint(path: str | Path):
    path = Path(path)
    spec = parse_manifest((path / "manifest.txt").read_text())
    rows = [ln.split() for ln in (path / "tensors.txt").read_text().splitlines() if ln.strip()]
    arrays = load_tensors(path / "weights.rnseg")
    if len(rows) != len(arrays):
        raise ValueError(f"{path}: {len(rows)} names but {len(arrays)} tensors")
    params = {n: a for (n, kind), a in zip(rows, arrays) if kind == "param"}
    buffers = {n: a for (n, kind), a in zip(rows, arrays) if kind == "buffer"}
    expected = param_shapes(spec)
    for n, s in expected.items():
        if n not in params or params[n].shape != s:
            raise ValueError(f"{path}: parameter {n} missing or misshapen")
    return spec, params, buffers
