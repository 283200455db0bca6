"""Experiment plans: single runs, ablation suites, capacity sweeps, SAN export.

A run directory always contains ``config.json`` (the fully resolved config;
re-running it reproduces the run), and on success ``eval.csv``/``eval.json``,
``train_log.csv``, ``timing.csv`` and ``model.ckpt``. A failed run leaves a
``FAILED`` file naming the stage.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, metrics
from .errors import ConfigError, ContractError
from .models import ABLATIONS, MODEL_KINDS, HiNet, HiNetConfig, build_model
from .trainer import TrainConfig, checkpoint, dataset_loss, resolve_loss_weights, restore, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PRESETS = ("six_scenario", "aligned_orthogonal")
SWEEP_AXES = {"sub_experts": (1, 3, 5, 7), "cgc_experts": (1, 2, 3, 4, 5)}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run (or a suite of repeats).

    ``generator`` is a full :class:`GeneratorConfig` dict; when omitted it is
    built from ``preset``, ``n_impressions``, ``correlation`` and ``seed``.
    ``data_path`` (a dataset file) takes precedence over generation.
    """

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data_path: str | None = None
    preset: str = "six_scenario"
    n_impressions: int = 100_000
    correlation: float = 0.7
    generator: dict | None = None
    train_frac: float = 0.8
    valid_frac: float = 0.1
    model: str = "hinet"
    variant: str = "full"
    model_overrides: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    repeats: int = 5
    output_dir: str = "runs/default"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {d['schema_version']} unsupported (expected {SCHEMA_VERSION})")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **kw)

    def train_config(self) -> TrainConfig:
        d = {"seed": self.seed, **self.train}
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc

    def generator_config(self) -> datagen.GeneratorConfig:
        if self.generator is not None:
            return datagen.GeneratorConfig.from_dict(self.generator)
        if self.preset == "six_scenario":
            return datagen.six_scenario_config(self.n_impressions, seed=self.seed, correlation=self.correlation)
        if self.preset == "aligned_orthogonal":
            return datagen.aligned_orthogonal_config(self.n_impressions, seed=self.seed)
        raise ConfigError(f"unknown generator preset {self.preset!r}; expected one of {PRESETS}")

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.variant not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {self.variant!r}")
        if self.model != "hinet" and self.variant != "full":
            raise ConfigError("ablation variants apply to the hinet model only")
        if not 0 < self.train_frac < 1 or not 0 < self.valid_frac < 1:
            raise ConfigError("train_frac and valid_frac must lie in (0, 1)")
        if self.repeats < 1 or self.workers < 1:
            raise ConfigError("repeats and workers must be >= 1")
        if self.data_path is not None and not Path(self.data_path).is_file():
            raise ConfigError(f"dataset file not found: {self.data_path}")
        self.train_config().validate()

    def resolved(self) -> "ExperimentConfig":
        """Concrete plan: generator spelled out, train section complete."""
        self.validate()
        out = copy.deepcopy(self)
        out.train = self.train_config().to_dict()
        if out.data_path is None:
            out.generator = self.generator_config().to_dict()
        return out

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Same plan with every seed (data, init, shuffling) moved to ``seed``."""
        out = self.replace(seed=seed)
        out.train = {**self.train, "seed": seed}
        if self.generator is not None:
            out.generator = {**self.generator, "seed": seed}
        return out


@dataclass
class RunResult:
    report: metrics.EvalReport
    train_log: object
    model: object
    n_params: int
    train_objective: float
    seconds: float
    output_dir: Path | None = None


def load_data(cfg: ExperimentConfig):
    if cfg.data_path is not None:
        data = datagen.read_dataset(cfg.data_path)
    else:
        data = datagen.generate(cfg.generator_config())
    train_all, test = datagen.split(data, cfg.train_frac, cfg.seed)
    tr, va = datagen.split(train_all, 1.0 - cfg.valid_frac, cfg.seed + 1)
    return data, tr, va, test


def model_config(cfg: ExperimentConfig, meta: dict) -> HiNetConfig:
    overrides = dict(cfg.model_overrides)
    emb_dim = overrides.pop("emb_dim", 8)
    if cfg.model == "hinet":
        overrides.update(ABLATIONS[cfg.variant])
    try:
        mc = HiNetConfig.for_dataset(meta, emb_dim=emb_dim, **overrides)
    except TypeError as exc:
        raise ConfigError(f"bad model_overrides: {exc}") from exc
    mc.validate()
    return mc


def run(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Generate-or-load, split, train, evaluate, and write artifacts."""
    out = Path(cfg.output_dir)
    stage = "config"
    try:
        cfg = cfg.resolved()
        if write:
            out.mkdir(parents=True, exist_ok=True)
            (out / "FAILED").unlink(missing_ok=True)
            cfg.save(out / "config.json")
        stage = "data"
        data, tr, va, test = load_data(cfg)
        stage = "model"
        mc = model_config(cfg, data.meta)
        model = build_model(cfg.model, mc, seed=cfg.seed)
        stage = "train"
        tcfg = cfg.train_config()
        t0 = time.perf_counter()
        model, tlog = train(model, tr, va, tcfg)
        seconds = time.perf_counter() - t0
        lam = resolve_loss_weights(tcfg.loss_weights, tr, mc.n_scenarios)
        train_obj = dataset_loss(model, tr, lam)
        stage = "evaluate"
        report = metrics.evaluate(model, test, meta={"seed": cfg.seed, "model": cfg.model, "variant": cfg.variant,
                                                     "config_hash": config_hash(cfg)})
        if write:
            stage = "write"
            report.write(out, "eval")
            (out / "train_log.csv").write_text(tlog.to_csv())
            (out / "timing.csv").write_text(_timing_csv(tlog))
            checkpoint(model, out / "model.ckpt", extra_meta={"seed": cfg.seed, "variant": cfg.variant})
        return RunResult(report, tlog, model, model.num_parameters(), train_obj, seconds, out if write else None)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        if write and out.is_dir():
            (out / "FAILED").write_text(f"stage: {stage}\n{type(exc).__name__}: {exc}\n")
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


def config_hash(cfg: ExperimentConfig) -> str:
    import hashlib
    d = cfg.to_dict()
    d.pop("output_dir", None)
    d.pop("workers", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _timing_csv(tlog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "seconds"])
    for e, s in enumerate(tlog.epoch_seconds):
        w.writerow([e, f"{s:.3f}"])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# suites


def _run_summary(cfg_dict: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    res = run(cfg)
    return {"report": res.report.to_json(), "n_params": res.n_params, "train_objective": res.train_objective,
            "train_loss": res.train_log.train_loss[-1] if res.train_log.train_loss else float("nan"),
            "seconds": res.seconds, "epochs": res.train_log.epochs}


def _execute(plans: list, workers: int) -> list:
    dicts = [p.to_dict() for p in plans]
    if workers <= 1:
        return [_run_summary(d) for d in dicts]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_summary, dicts))


@dataclass
class AblationResult:
    variants: list
    seeds: list
    reports: dict  # (seed, variant) -> EvalReport
    mean_auc: np.ndarray  # [R, V]
    friedman_mean: metrics.FriedmanResult
    friedman_cells: dict  # (scenario, task) -> FriedmanResult | None


def ablation_suite(base: ExperimentConfig, repeats: int | None = None, variants=None, workers: int | None = None,
                   write: bool = True) -> AblationResult:
    """Train every variant under ``repeats`` seeds and rank them with the Friedman statistic."""
    repeats = base.repeats if repeats is None else repeats
    workers = base.workers if workers is None else workers
    variants = list(ABLATIONS) if variants is None else list(variants)
    if repeats < 2:
        raise ConfigError("an ablation suite needs at least 2 repeats")
    root = Path(base.output_dir)
    seeds = [base.seed + r for r in range(repeats)]
    plans = [base.for_seed(s).replace(model="hinet", variant=v, output_dir=str(root / v / f"seed_{s}"))
             for s in seeds for v in variants]
    summaries = _execute(plans, workers)
    reports = {}
    for plan, summ in zip(plans, summaries):
        reports[(plan.seed, plan.variant)] = metrics.EvalReport.from_json(summ["report"])
    result = _rank(variants, seeds, reports)
    if write:
        root.mkdir(parents=True, exist_ok=True)
        _write_ablation(root, result)
    return result


def _rank(variants, seeds, reports) -> AblationResult:
    mean_auc = np.array([[reports[(s, v)].mean_auc() for v in variants] for s in seeds])
    fr_mean = metrics.friedman(mean_auc)
    cells = sorted({c for r in reports.values() for c in r.cells},
                   key=lambda k: (k[0], datagen.TASK_NAMES.index(k[1])))
    per_cell = {}
    for c in cells:
        mat = np.array([[_cell_auc(reports[(s, v)], c) for v in variants] for s in seeds])
        try:
            per_cell[c] = metrics.friedman(mat)
        except ContractError:
            per_cell[c] = None
    return AblationResult(variants, seeds, reports, mean_auc, fr_mean, per_cell)


def _cell_auc(report, cell):
    c = report.cells.get(cell)
    return np.nan if c is None or c.auc is None else c.auc


def _write_ablation(root: Path, res: AblationResult):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "variant", "scenario", "task", "auc"])
    for s in res.seeds:
        for v in res.variants:
            for (sc, t), c in sorted(res.reports[(s, v)].cells.items(),
                                     key=lambda kv: (kv[0][0], datagen.TASK_NAMES.index(kv[0][1]))):
                w.writerow([s, v, sc, t, "" if c.auc is None else repr(c.auc)])
    (root / "ablation_auc.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "statistic", "significant_0.05"] + [f"mean_rank_{v}" for v in res.variants])
    rows = [("mean_auc", res.friedman_mean)] + [(f"{sc}/{t}", fr) for (sc, t), fr in res.friedman_cells.items()]
    for name, fr in rows:
        if fr is None:
            w.writerow([name, "", ""] + [""] * len(res.variants))
        else:
            w.writerow([name, repr(fr.statistic), int(fr.exceeds(0.05))] + [repr(x) for x in fr.mean_ranks])
    (root / "friedman.csv").write_text(buf.getvalue())

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed"] + res.variants)
    for s, row in zip(res.seeds, res.mean_auc):
        w.writerow([s] + [repr(x) for x in row])
    (root / "run_matrix_mean_auc.csv").write_text(buf.getvalue())


@dataclass
class SweepRow:
    value: int
    seed: int
    n_params: int
    train_loss: float
    train_objective: float
    mean_auc: float
    report: metrics.EvalReport


def sweep_overrides(axis: str, value: int) -> dict:
    if axis == "sub_experts":
        return {"shared_sub_experts": value, "specific_sub_experts": value}
    if axis == "cgc_experts":
        return {"cgc_shared": value, "cgc_specific": value}
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {list(SWEEP_AXES)}")


def sweep(base: ExperimentConfig, axis: str, values=None, repeats: int = 1, workers: int | None = None,
          write: bool = True) -> list[SweepRow]:
    """One run per (value, seed) with the chosen expert count overridden."""
    values = list(SWEEP_AXES.get(axis, ()) if values is None else values)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {list(SWEEP_AXES)}")
    if not values or min(values) < 1:
        raise ConfigError("sweep values must be positive")
    workers = base.workers if workers is None else workers
    root = Path(base.output_dir)
    plans = []
    for v in values:
        for r in range(repeats):
            p = base.for_seed(base.seed + r)
            p.model, p.variant = "hinet", base.variant
            p.model_overrides = {**base.model_overrides, **sweep_overrides(axis, v)}
            p.output_dir = str(root / f"{axis}_{v}" / f"seed_{p.seed}")
            plans.append((v, p))
    summaries = _execute([p for _, p in plans], workers)
    rows = []
    for (v, p), s in zip(plans, summaries):
        rep = metrics.EvalReport.from_json(s["report"])
        rows.append(SweepRow(v, p.seed, s["n_params"], s["train_loss"], s["train_objective"], rep.mean_auc(), rep))
    if write:
        root.mkdir(parents=True, exist_ok=True)
        (root / f"sweep_{axis}.csv").write_text(sweep_csv(axis, rows))
    return rows


def sweep_csv(axis: str, rows: list[SweepRow]) -> str:
    cells = sorted({c for r in rows for c in r.report.cells}, key=lambda k: (k[0], datagen.TASK_NAMES.index(k[1])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "seed", "n_params", "train_loss", "train_objective", "mean_auc"]
               + [f"auc_{s}/{t}" for s, t in cells])
    for r in rows:
        w.writerow([r.value, r.seed, r.n_params, repr(r.train_loss), repr(r.train_objective), repr(r.mean_auc)]
                   + [("" if _cell_auc(r.report, c) != _cell_auc(r.report, c) else repr(_cell_auc(r.report, c)))
                      for c in cells])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# SAN heatmap


def attention_map(model, probe=None) -> np.ndarray:
    """``[M, M]`` SAN weights; entry (i, m) is scenario i's weight on scenario m.

    SAN weights depend on the scenario indicator only, so they are read off
    the scenario embeddings directly. ``probe`` records, when given, are
    only checked for valid scenario ids.
    """
    if not isinstance(model, HiNet) or model.scenario_layer is None or model.scenario_layer.san is None:
        raise ContractError("attention export needs a HiNet model with SAN enabled")
    if probe is not None and len(probe):
        if probe.scenario.max() >= model.config.n_scenarios:
            raise ContractError("probe records reference unknown scenarios")
    return model.san_weights()


def attention_csv(mat: np.ndarray, names=None) -> str:
    m = mat.shape[0]
    names = list(names) if names is not None else [str(i) for i in range(m)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario"] + names)
    for i in range(m):
        w.writerow([names[i]] + [repr(float(x)) for x in mat[i]])
    return buf.getvalue()


def export_attention(checkpoint_path, out_path, probe=None) -> np.ndarray:
    model, _, _ = restore(checkpoint_path)
    mat = attention_map(model, probe)
    m = mat.shape[0]
    names = list(datagen.SCENARIO_NAMES[:m]) if m <= len(datagen.SCENARIO_NAMES) else None
    Path(out_path).write_text(attention_csv(mat, names))
    return mat
