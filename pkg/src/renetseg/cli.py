"""Command-line entry point: ``renetseg <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import data, densecrf, experiments, models, training
from .layers import ConfigError
from .tensor import load_tensor, save_tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "model": "hrenet", "scale": 1 / 16, "L": 4, "crop": None, "lr": 0.001, "iters": 400, "batch": 10,
    "seed": 0, "momentum": 0.9, "workers": 1, "norm": "none", "mlfb": False, "l2_scale": 1000.0,
    "hidden": None, "cell": "lstm", "min_size": None, "widths": (8, 16, 32), "head": 64, "flip": True,
    "crf_w1": 4.0, "crf_w2": 3.0, "crf_theta_alpha": 10.0, "crf_theta_beta": 13.0, "crf_theta_gamma": 3.0,
    "crf_iters": 2, "clip": None, "patch": 1,
}


def _pair(v: str) -> tuple[int, int]:
    parts = v.replace("x", ",").split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected HxW, got {v!r}")
    return int(parts[0]), int(parts[1])


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


_PARSERS = {
    "model": str, "scale": float, "L": int, "crop": _pair, "lr": float, "iters": int, "batch": int,
    "seed": int, "momentum": float, "workers": int, "norm": str, "mlfb": _bool, "l2_scale": float,
    "hidden": int, "cell": str, "min_size": _pair, "widths": lambda v: tuple(int(x) for x in v.split(",")),
    "head": int, "flip": _bool, "crf_w1": float, "crf_w2": float, "crf_theta_alpha": float,
    "crf_theta_beta": float, "crf_theta_gamma": float, "crf_iters": int,
    "clip": lambda v: None if v.lower() in ("", "none", "off") else float(v), "patch": int,
}


def parse_config(lines, base: dict | None = None) -> dict:
    """``key=value`` lines (``#`` comments allowed) layered over ``base``."""
    conf = dict(DEFAULTS if base is None else base)
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in _PARSERS:
            raise ConfigError(f"line {n}: unknown or malformed setting {raw.strip()!r}")
        try:
            conf[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
    return conf


def load_config(path: str | None, overrides=(), base: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``KEY=VALUE`` overrides."""
    conf = dict(DEFAULTS if base is None else base)
    if path:
        try:
            text = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        conf = parse_config(text, conf)
    return parse_config(overrides, conf)


def build_model(conf: dict) -> models.NetworkSpec:
    name, L = conf["model"], conf["L"]
    extra = {"min_size": conf["min_size"]} if conf["min_size"] else {}
    if name == "nrenet":
        return models.build_nrenet(conf["scale"], L, cell=conf["cell"], **extra)
    if name == "baseline_fcn":
        return models.build_baseline_fcn(conf["scale"], L, **extra)
    if name == "hrenet":
        return models.build_hrenet(conf["scale"], L, conf["mlfb"], conf["norm"], conf["l2_scale"],
                                   cell=conf["cell"], hidden=conf["hidden"], **extra)
    if name == "compact_fcn":
        return models.build_compact_fcn(conf["widths"], L, head=conf["head"] or None, **extra)
    if name == "compact_hrenet":
        return models.build_compact_hrenet(conf["widths"], conf["hidden"] or 16, L, conf["mlfb"], conf["norm"],
                                           conf["l2_scale"], conf["cell"], patch=conf["patch"], **extra)
    raise ConfigError(f"unknown model {name!r}; choose from {sorted(models.BUILDERS)}")


def sgd_from(conf: dict) -> training.SgdConfig:
    return training.SgdConfig(lr=conf["lr"], iterations=conf["iters"], batch=conf["batch"],
                              momentum=conf["momentum"], seed=conf["seed"], crop=conf["crop"],
                              flip=conf["flip"], workers=conf["workers"], clip=conf["clip"])


def crf_from(conf: dict) -> densecrf.CrfParams:
    return densecrf.CrfParams(conf["crf_w1"], conf["crf_w2"], conf["crf_theta_alpha"], conf["crf_theta_beta"],
                              conf["crf_theta_gamma"], conf["crf_iters"])


# -- commands ----------------------------------------------------------------------------------


def cmd_gendata(args, conf):
    cfg = data.LongRangeTaskConfig(labels=conf["L"], seed=args.seed)
    samples = data.generate_longrange_task(args.n + args.test, cfg)
    splits = {"train": range(args.n), "test": range(args.n, args.n + args.test)}
    data.save_dataset(args.out, samples, cfg.labels, splits)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args, conf):
    spec = build_model(conf)
    samples, _ = data.load_dataset(args.data, args.split)
    params = training.init_params(spec, conf["seed"])
    out = Path(args.out)
    result = training.train(spec, params, samples, sgd_from(conf), diagnostic_dir=out / "diagnostic",
                            log_every=args.log_every)
    models.save_checkpoint(out, spec, result.params, result.buffers)
    experiments.write_csv(out / "losses.csv", ({"iteration": i + 1, "loss": v} for i, v in enumerate(result.losses)))
    print(f"trained {len(result.losses)} iterations, final loss {result.losses[-1] if result.losses else float('nan'):.6f}")


def cmd_eval(args, conf):
    spec, params, buffers = models.load_checkpoint(args.ckpt)
    samples, _ = data.load_dataset(args.data, args.split)
    report = training.evaluate(spec, params, samples, buffers, conf["workers"])
    print(f"pixel accuracy {report.pixel_accuracy:.4f}  class accuracy {report.class_accuracy:.4f}  "
          f"mean IoU {report.mean_iou:.4f}")
    if args.csv:
        experiments.write_csv(args.csv, [report.as_row()])


def cmd_predict(args, conf):
    spec, params, buffers = models.load_checkpoint(args.ckpt)
    image = data.load_ppm(args.image)
    probs = models.forward_variable_size(spec, params, image, buffers, conf["workers"])
    data.save_pgm_labels(args.out, densecrf.argmax_labels(probs))
    if args.probs:
        save_tensor(args.probs, probs.astype(np.float64))


def cmd_crf(args, conf):
    probs = load_tensor(args.probs)
    image = data.load_ppm(args.image)
    refined = densecrf.mean_field(probs, image, crf_from(conf))
    if args.out_probs:
        save_tensor(args.out_probs, refined)
    data.save_pgm_labels(args.out, densecrf.argmax_labels(refined))


def cmd_gradcheck(args, conf):
    spec = build_model(conf)
    h, w = args.size
    rng = np.random.default_rng(conf["seed"])
    params = {k: v.astype(np.float64) for k, v in training.init_params(spec, conf["seed"]).items()}
    image = rng.random((1, 3, h, w))
    labels = rng.integers(0, spec.labels, (1, h, w))
    tape = models.build_graph(spec, training=True).forward({"image": image, "labels": labels}, params)
    report = ag.grad_check(tape, args.epsilon, max_elements=args.max_elements, seed=conf["seed"])
    worst = max(report.values()) if report else 0.0
    for name, err in report.items():
        if args.verbose:
            print(f"{name:32s} {err:.3e}")
    print(f"max relative error {worst:.3e} over {len(report)} parameters (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_NUMERIC


_SGD_KEYS = {"lr": "lr", "iters": "iterations", "batch": "batch", "seed": "seed", "momentum": "momentum",
             "workers": "workers", "crop": "crop", "clip": "clip", "flip": "flip"}
_EXPERIMENT_KEYS = {"norm": "norm", "mlfb": "mlfb", "hidden": "hidden", "cell": "cell", "patch": "patch",
                    "widths": "widths", "l2_scale": "l2_scale", "seed": "init_seed"}


def _experiment_config(explicit: dict) -> experiments.ExperimentConfig:
    """The reference experiment with only the explicitly given settings replaced."""
    base = experiments.ExperimentConfig()
    sgd = replace(base.sgd, **{_SGD_KEYS[k]: v for k, v in explicit.items() if k in _SGD_KEYS})
    changes = {_EXPERIMENT_KEYS[k]: v for k, v in explicit.items() if k in _EXPERIMENT_KEYS}
    if "L" in explicit:
        changes["task"] = replace(base.task, labels=explicit["L"])
    return replace(base, sgd=sgd, **changes)


def cmd_ablate(args, conf):
    cfg = _experiment_config(load_config(args.config, args.set, base={}))
    kinds = experiments.ABLATIONS if args.kind == "all" else (args.kind,)
    rows = []
    for kind in kinds:
        if kind == "longrange":
            table = experiments.run_longrange(cfg)
        else:
            table = experiments.run_ablation(kind, cfg)
        print(f"== {kind}\n{experiments.format_table(table)}")
        rows += [{"ablation": kind, **r.as_row()} for r in table]
    if args.csv:
        experiments.write_csv(args.csv, rows)


def cmd_bench(args, conf):
    rows = experiments.bench_sweeps(args.sizes, args.widths, args.workers, repeats=args.repeats)
    print(f"{'size':>6}{'hidden':>8}{'workers':>9}{'median s':>11}{'seq s':>10}{'speedup':>9}  identical")
    for r in rows:
        print(f"{r.size:>6}{r.hidden:>8}{r.workers:>9}{r.seconds:>11.4f}{r.sequential_seconds:>10.4f}"
              f"{r.speedup:>9.2f}  {r.identical}")
    if args.csv:
        experiments.write_csv(args.csv, [r.as_row() for r in rows])


def cmd_dumpfeat(args, conf):
    spec, params, buffers = models.load_checkpoint(args.ckpt)
    image = data.load_ppm(args.image)
    maps = models.dump_feature_maps(spec, params, image, args.layer, args.count, args.out, buffers)
    print(f"wrote {len(maps)} maps of {args.layer} to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="renetseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gendata", cmd_gendata, "write the synthetic long-range dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=400, help="training samples")
    sp.add_argument("--test", type=int, default=100, help="test samples")
    sp.add_argument("--seed", type=int, default=1)

    sp = command("train", cmd_train, "train a network and write a checkpoint directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log-every", type=int, default=0)

    sp = command("eval", cmd_eval, "score a checkpoint on a dataset split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--csv")

    sp = command("predict", cmd_predict, "label one PPM image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="label map (PGM)")
    sp.add_argument("--probs", help="also write the probability tensor")

    sp = command("crf", cmd_crf, "refine a probability tensor with the dense CRF")
    sp.add_argument("--probs", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="refined label map (PGM)")
    sp.add_argument("--out-probs")

    sp = command("gradcheck", cmd_gradcheck, "central-difference check of a network's gradients")
    sp.add_argument("--size", type=_pair, default=(16, 16))
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--max-elements", type=int, default=None)

    sp = command("ablate", cmd_ablate, "run an ablation on the synthetic task")
    sp.add_argument("--kind", default="all", choices=(*experiments.ABLATIONS, "longrange", "all"))
    sp.add_argument("--csv")

    sp = command("bench", cmd_bench, "time sequential against lane-parallel sweeps")
    sp.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128])
    sp.add_argument("--widths", type=int, nargs="+", default=[16, 32])
    sp.add_argument("--workers", type=int, nargs="+", default=[1, 2, 4, 8])
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--csv")

    sp = command("dumpfeat", cmd_dumpfeat, "write feature maps of one layer as PGM images")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        conf = load_config(args.config, args.set)
        code = args.fn(args, conf)
    except (ValueError, KeyError, OSError) as exc:  # config, shape, file-format and checkpoint errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return code if isinstance(code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
