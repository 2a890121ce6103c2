"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, pipeline
from .evaluation import write_confusion_csv
from .errors import ConfigError, DataCorruptionError, DataError, FormatError, InvalidInputError, NumericalFailure

log = logging.getLogger("expquant")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the configured seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="expquant", parents=[common],
                                     description="Expand-and-quantize feature compression toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic Gaussian-mixture feature file")
    g.add_argument("--spec", help="JSON mixture spec: {classes: [{mean, std, count}], seed}")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--std", type=float, default=0.5, help="class std (base std when --ratio is set)")
    g.add_argument("--ratio", type=float, help="geometric std ratio between consecutive classes")
    g.add_argument("--separation", type=float, default=4.0, help="pairwise distance between class means")
    g.add_argument("-o", "--output", required=True)

    t = sub.add_parser("train", parents=[common], help="train expansion head and codebooks")
    t.add_argument("--features", help="feature file (defaults to the config's 'features')")

    for name, help_text in (("quantize", "quantize features with a trained model"),
                            ("entropy", "report feature entropy in bits"),
                            ("analyze", "write class distance matrices and codeword statistics"),
                            ("eval", "cluster quantized features and score against labels")):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.add_argument("--model", help="model directory (defaults to the output directory)")
        sp.add_argument("--features", help="feature file (defaults to the config's 'features')")
        if name == "quantize":
            sp.add_argument("-o", "--output", help="quantized feature file (default <out>/quantized.eqft)")
        elif name == "entropy":
            sp.add_argument("--per-class", action="store_true")
            sp.add_argument("--continuous", action="store_true",
                            help="histogram entropy of the raw features instead of code entropy")
            sp.add_argument("-o", "--output", help="report path (default <out>/entropy.json)")
        elif name == "analyze":
            sp.add_argument("--samples-per-class", type=int, default=10000)
        else:
            sp.add_argument("--clusters", type=int)
            sp.add_argument("--probe", action="store_true")

    s = sub.add_parser("sweep", parents=[common], help="train+eval over a grid of (M, K)")
    s.add_argument("--features")
    s.add_argument("--M-list", dest="m_list", type=_int_list, default=[1, 8, 16, 32])
    s.add_argument("--K-list", dest="k_list", type=_int_list, default=[32, 64])
    return parser


def _config(args) -> pipeline.RunConfig:
    path = getattr(args, "config", None)
    cfg = pipeline.RunConfig.load(path) if path else pipeline.RunConfig()
    overrides = {}
    if hasattr(args, "seed"):
        overrides["seed"] = args.seed
    if hasattr(args, "out"):
        overrides["out_dir"] = args.out
    return replace(cfg, **overrides) if overrides else cfg


def _features(args, cfg: pipeline.RunConfig) -> datagen.FeatureBatch:
    path = getattr(args, "features", None) or cfg.features
    if not path:
        raise CliError("no feature file given (use --features or the config's 'features')", EXIT_DATA)
    try:
        return datagen.read_features(path)
    except FileNotFoundError:
        raise CliError(f"feature file not found: {path}", EXIT_DATA)


def _model(args, cfg) -> pipeline.Model:
    path = getattr(args, "model", None) or cfg.out_dir
    try:
        return pipeline.load_model(path)
    except FileNotFoundError as exc:
        raise CliError(f"model not found in {path}: {exc.filename}", EXIT_DATA)


def _out(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text())
            classes = tuple(datagen.ClassSpec(tuple(float(v) for v in c["mean"]), float(c["std"]), int(c["count"]))
                            for c in raw["classes"])
            spec = datagen.MixtureSpec(classes, int(getattr(args, "seed", raw.get("seed", 0))))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(f"invalid mixture spec: {exc}", EXIT_CONFIG)
    else:
        seed = getattr(args, "seed", 0)
        try:
            if args.ratio is not None:
                spec = datagen.diversity_ladder(args.classes, args.dim, args.std, args.ratio, seed,
                                                per_class=args.per_class, separation=args.separation)
            else:
                spec = datagen.uniform_mixture(args.classes, args.dim, args.std, args.per_class, seed,
                                               separation=args.separation)
        except InvalidInputError as exc:
            raise CliError(str(exc), EXIT_CONFIG)
    batch = datagen.generate(spec)
    datagen.write_features(batch, args.output)
    print(f"N={len(batch)} D={batch.dim} C={len(spec.classes)}")
    print("stds: " + " ".join(repr(c.std) for c in spec.classes))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    batch = _features(args, cfg)
    if batch.dim != cfg.d_F:
        raise CliError(f"config d_F={cfg.d_F} does not match feature file D={batch.dim}", EXIT_DATA)
    outcome = pipeline.train_model(cfg, batch, _out(cfg))
    print(f"steps={len(outcome.history)} initial_loss={outcome.initial_loss!r} final_loss={outcome.final_loss!r}")
    print(f"model written to {cfg.out_dir}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    batch = _features(args, cfg)
    codes, q = model.encode(batch)
    out = _out(cfg)
    target = Path(args.output) if args.output else out / "quantized.eqft"
    datagen.write_features(datagen.FeatureBatch(q, batch.labels), target)
    np.savetxt(out / "codes.csv", codes, fmt="%d", delimiter=",",
               header=",".join(f"m{m}" for m in range(codes.shape[1])), comments="")
    print(f"quantized {len(batch)} rows -> {target}")
    return EXIT_OK


def cmd_entropy(args) -> int:
    cfg = _config(args)
    batch = _features(args, cfg)
    model = None if args.continuous else _model(args, cfg)
    report = pipeline.entropy_report(model, batch, per_class=args.per_class, continuous=args.continuous)
    target = Path(args.output) if args.output else _out(cfg) / "entropy.json"
    pipeline.dump_json(report, target)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    batch = _features(args, cfg)
    result = pipeline.analyze(model, batch, _out(cfg), samples_per_class=args.samples_per_class,
                              seed=cfg.seed, kmeans_restarts=cfg.kmeans_restarts)
    print(f"classes={list(result['hamming'].classes)} spearman={result['pairs'].spearman}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = _model(args, cfg)
    batch = _features(args, cfg)
    report, cm = pipeline.eval_report(model, batch, clusters=args.clusters, probe=args.probe, seed=cfg.seed,
                                      probe_lr=cfg.probe_lr, probe_epochs=cfg.probe_epochs,
                                      kmeans_restarts=cfg.kmeans_restarts)
    out = _out(cfg)
    pipeline.dump_json(report, out / "eval_report.json")
    write_confusion_csv(cm, out / "confusion.csv")
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    batch = _features(args, cfg)
    if batch.dim != cfg.d_F:
        raise CliError(f"config d_F={cfg.d_F} does not match feature file D={batch.dim}", EXIT_DATA)
    out = _out(cfg)
    rows = pipeline.sweep(cfg, batch, args.m_list, args.k_list, out / "sweep")
    pipeline.write_sweep_csv(rows, out / "sweep.csv")
    for r in rows:
        print(f"M={r['M']} K={r['K']} acc={r['accuracy']:.4f} miou={r['miou']:.4f} "
              f"macc={r['macc']:.4f} bits={r['bits']:g}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "quantize": cmd_quantize, "entropy": cmd_entropy,
    "analyze": cmd_analyze, "eval": cmd_eval, "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, DataCorruptionError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}; last good model kept", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
