"""Command line entry point: ``boxmil <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evalkit, segmodel, selfcheck, synthgen, trainer
from .boxbags import AngleSet, BoxError, category_bags

log = logging.getLogger("boxmil")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: byte {exc.pos}: invalid JSON ({exc.msg})") from None


def _echo(out: Path, command: str, args, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {"command": command, "flags": flags, **resolved}
    (out / "config_echo.json").write_text(json.dumps(doc, indent=1, default=str) + "\n")


def _experiment(args, base: dict | None = None) -> trainer.ExperimentConfig:
    cfg = trainer.ExperimentConfig()
    if base:
        cfg = cfg.with_overrides(base)
    overrides = {}
    if getattr(args, "model_kind", None):
        overrides["model_kind"] = args.model_kind
    if getattr(args, "bag_mode", None):
        overrides["bag_mode"] = args.bag_mode
    if getattr(args, "angles", None):
        overrides["angles"] = args.angles
    if getattr(args, "iterations", None) is not None:
        overrides["optim"] = {**overrides.get("optim", {}), "iterations": args.iterations}
    if args.seed is not None:
        overrides["optim"] = {**overrides.get("optim", {}), "seed": args.seed}
    return cfg.with_overrides(overrides) if overrides else cfg


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    raw = _load_json(args.spec, "dataset spec") if args.spec else {}
    if args.config:
        raw = {**raw, **_load_json(args.config, "config")}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = synthgen.DatasetSpec.from_json(raw)
    out = Path(args.out)
    samples = synthgen.generate(spec)
    synthgen.write_dataset(out, samples, spec)
    _echo(out, "gen-data", args, {"spec": spec.to_json()})
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = _load_json(args.config, "config") if args.config else None
    cfg = _experiment(args, base)
    samples = synthgen.read_dataset(args.data)
    fit = trainer.training_samples(samples, cfg)
    out = Path(args.out)
    _echo(out, "train", args, {"experiment": cfg.to_json(), "data": str(args.data),
                               "fitted_samples": [s.id for s in fit]})
    result = trainer.train(fit, cfg, threads=args.threads, log_every=args.log_every)
    trainer.save_run(out, result, cfg, {"command": "train", "data": str(args.data),
                                        "fitted_samples": [s.id for s in fit],
                                        "threads": args.threads})
    from . import plots

    plots.loss_curve(result.log, out / "loss_curve.png")
    print(f"trained {cfg.model_kind} on {len(fit)} samples; final loss "
          f"{result.log.final['final_loss']}; run in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    models = segmodel.load_checkpoint(run / "checkpoint.json")
    cfg = trainer.load_run_config(run)
    samples = synthgen.read_dataset(args.data, split=args.split)
    if not samples:
        raise UsageError(f"no samples in split {args.split!r}")
    out = Path(args.out) if args.out else run
    report = evalkit.evaluate(models, samples, cfg.name, args.threshold, cfg.to_json())
    _echo(out, "eval", args, {"experiment": cfg.to_json(), "fingerprint": report.fingerprint})
    (out / "report.csv").write_text(evalkit.report_csv([report], args.threshold))
    (out / "per_sample.csv").write_text(report.per_sample_csv())
    from . import plots

    plots.dice_bars([report], out / "dice.png", title=f"Dice on {args.split}")
    for s in samples[: args.figures]:
        plots.prediction_figure(s, evalkit.predict(models, s), out / f"pred_{s.id}.png",
                                args.threshold)
    print(f"{cfg.name}: mean Dice {report.mean:.4f} (std {report.std:.4f}, n={len(samples)})")
    return EXIT_OK


def _method_list(doc) -> list[trainer.ExperimentConfig]:
    if isinstance(doc, list):
        doc = {"methods": doc}
    base = doc.get("base", {})
    methods = doc.get("methods")
    if not methods:
        raise UsageError("compare config needs a non-empty 'methods' list")
    return [trainer.ExperimentConfig().with_overrides(base).with_overrides(m) for m in methods]


def cmd_compare(args) -> int:
    doc = _load_json(args.config, "compare config")
    cfgs = _method_list(doc)
    if args.seed is not None:
        cfgs = [c.with_overrides({"optim": {"seed": args.seed}}) for c in cfgs]
    samples = synthgen.read_dataset(args.data)
    out = Path(args.out)
    _echo(out, "compare", args, {"methods": [c.to_json() for c in cfgs]})
    reports = evalkit.compare(cfgs, samples, args.threshold, args.threads, args.split)
    (out / "report.csv").write_text(evalkit.report_csv(reports, args.threshold))
    for r in reports:
        (out / f"per_sample_{r.method}.csv").write_text(r.per_sample_csv())
    from . import plots

    plots.dice_bars(reports, out / "dice.png")
    for r in reports:
        print(f"{r.method:>24s}  {r.mean:.4f} ({r.std:.4f})")
    return EXIT_OK


def cmd_dump_bags(args) -> int:
    angles = AngleSet.parse(args.angles)
    samples = synthgen.read_dataset(args.data, split=args.split)
    out = Path(args.out)
    _echo(out, "dump-bags", args, {"angles": angles.values()})
    from . import plots

    n = 0
    for s in samples:
        for theta in angles.values():
            bags = []
            for c in range(1, s.n_categories + 1):
                pos, neg = category_bags(s.boxes, c, s.shape, "generalized", [theta])
                bags += pos + neg
            stem = f"{s.id}_theta{theta:+g}"
            overlay = evalkit.dump_bags(s, bags, out / f"{stem}.pgm")
            if args.figures:
                plots.overlay_figure(s.image, overlay, out / f"{stem}.png", f"{s.id}  theta={theta:g}")
            n += 1
    print(f"wrote {n} overlays to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selfcheck.gradient_suite(args.instances, seed=args.seed or 0)
    results += selfcheck.smoothmax_suite(args.vectors, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        _echo(out, "selftest", args, {})
        (out / "selftest.txt").write_text("\n".join(r.line() for r in results) + "\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="boxmil", description="Box-supervised MIL segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--config", default=None, help="JSON file overriding defaults")
        sp.add_argument("--out", required=out_required)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    sp.add_argument("--spec", default=None, help="dataset spec JSON")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one configuration")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model-kind", choices=segmodel.MODEL_KINDS)
    sp.add_argument("--bag-mode", choices=("baseline", "generalized"))
    sp.add_argument("--angles", help="theta1:theta2:step in degrees")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--log-every", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="Dice report for a trained run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--figures", type=int, default=3, help="prediction figures to render")
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("compare", help="train and compare several methods")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--threshold", type=float, default=0.5)
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("dump-bags", help="write bag overlays per angle and sample")
    sp.add_argument("--data", required=True)
    sp.add_argument("--angles", required=True, help="theta1:theta2:step in degrees")
    sp.add_argument("--split", default=None)
    sp.add_argument("--figures", action="store_true", help="also render PNG overlays")
    common(sp)
    sp.set_defaults(func=cmd_dump_bags)

    sp = sub.add_parser("selftest", help="gradient and smooth-max property checks")
    sp.add_argument("--instances", type=int, default=100)
    sp.add_argument("--vectors", type=int, default=10_000)
    common(sp, out_required=False)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print("boxmil: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "compare" and not args.config:
        print("boxmil: error: compare needs --config", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, BoxError) as exc:
        print(f"boxmil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError, ArithmeticError, KeyError) as exc:
        print(f"boxmil: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
