"""Command-line entry point: ``hinet <command> [options]``.

Every command exits 0 on success. Failures print ``error [stage]: message``
to stderr and exit with a nonzero code (2 for bad configs, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import datagen, experiment, metrics
from .errors import ConfigError
from .trainer import restore

log = logging.getLogger("hinet")


def _experiment_config(args) -> experiment.ExperimentConfig:
    cfg = experiment.ExperimentConfig.load(args.config) if args.config else experiment.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.for_seed(args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg


def cmd_config(args):
    cfg = _experiment_config(args).resolved()
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out and args.out.endswith(".json"):
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_generate(args):
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if "n_users" in d:  # a bare generator config
            gen = datagen.GeneratorConfig.from_dict(d)
        else:
            gen = experiment.ExperimentConfig.from_dict(d).generator_config()
    else:
        gen = experiment.ExperimentConfig().generator_config()
    if args.seed is not None:
        gen = datagen.GeneratorConfig.from_dict({**gen.to_dict(), "seed": args.seed})
    if args.n is not None:
        gen = datagen.GeneratorConfig.from_dict({**gen.to_dict(), "n_impressions": args.n})
    gen.validate()
    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    data = datagen.generate(gen)
    datagen.write_dataset(data, out / "data.tsv")
    gen.save(out / "generator.json")
    log.info("wrote %d impressions to %s", len(data), out / "data.tsv")


def cmd_train(args):
    res = experiment.run(_experiment_config(args))
    print(f"mean AUC {res.report.mean_auc():.4f}  params {res.n_params}  epochs {res.train_log.epochs}  "
          f"-> {res.output_dir}")


def cmd_evaluate(args):
    model, _, _ = restore(args.checkpoint)
    data = datagen.read_dataset(args.data)
    report = metrics.evaluate(model, data, meta={"checkpoint": str(args.checkpoint), "data": str(args.data)})
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    report.write(out, "eval")
    print(f"mean AUC {report.mean_auc():.4f} -> {out}")


def cmd_ablation(args):
    cfg = _experiment_config(args)
    res = experiment.ablation_suite(cfg, repeats=args.repeats, variants=args.variants)
    fr = res.friedman_mean
    for v, r in zip(res.variants, fr.mean_ranks):
        print(f"{v:<20} mean rank {r:.2f}")
    print(f"Friedman chi2 = {fr.statistic:.3f} (significant at 0.05: {fr.exceeds(0.05)})")


def cmd_sweep(args):
    cfg = _experiment_config(args)
    rows = experiment.sweep(cfg, args.axis, values=args.values, repeats=args.repeats)
    for r in rows:
        print(f"{args.axis}={r.value} seed={r.seed} params={r.n_params} train_objective={r.train_objective:.4f} "
              f"mean_auc={r.mean_auc:.4f}")


def cmd_attention(args):
    probe = datagen.read_dataset(args.data) if args.data else None
    out = args.out or "attention.csv"
    experiment.export_attention(args.checkpoint, out, probe)
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hinet", description="Hierarchical multi-scenario multi-task CTR/CTCVR models")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=False):
        sp.add_argument("--config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help="output directory")
        if workers:
            sp.add_argument("--workers", type=int, help="parallel training processes")

    sp = sub.add_parser("config", help="print the fully resolved experiment config")
    common(sp)
    sp.set_defaults(func=cmd_config, stage="config")

    sp = sub.add_parser("generate", help="sample a synthetic dataset")
    common(sp)
    sp.add_argument("-n", type=int, help="number of impressions")
    sp.set_defaults(func=cmd_generate, stage="generate")

    sp = sub.add_parser("train", help="train and evaluate one model")
    common(sp)
    sp.set_defaults(func=cmd_train, stage="train")

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate, stage="evaluate")

    sp = sub.add_parser("ablation", help="run the ablation suite and Friedman ranking")
    common(sp, workers=True)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--variants", nargs="+", choices=list(experiment.ABLATIONS))
    sp.set_defaults(func=cmd_ablation, stage="ablation")

    sp = sub.add_parser("sweep", help="vary an expert count")
    common(sp, workers=True)
    sp.add_argument("--axis", required=True, choices=list(experiment.SWEEP_AXES))
    sp.add_argument("--values", type=int, nargs="+")
    sp.add_argument("--repeats", type=int, default=1)
    sp.set_defaults(func=cmd_sweep, stage="sweep")

    sp = sub.add_parser("attention", help="export the SAN weight matrix as CSV")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="optional probe dataset")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_attention, stage="attention")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except experiment.StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2 if exc.stage == "config" else 1
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"error [{args.stage}/config]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error [{args.stage}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
