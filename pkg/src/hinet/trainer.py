"""Mini-batch training on the scenario-weighted multi-task objective.

Batch loss is the mean over records of the record's scenario weight times the
sum of its task cross-entropies, so each record only feeds the task terms of
its own scenario.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .datagen import TASK_NAMES, Dataset
from .errors import CheckpointError, ConfigError, TrainingError
from .metrics import UndefinedMetricError, auc
from .models import MultiScenarioModel, model_from_meta, read_bundle, write_bundle


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10
    patience: int = 3
    seed: int = 0
    loss_weights: str | list = "auto"
    restore_best: bool = True
    # early stopping watches plain validation log-loss ("logloss") or the weighted objective ("objective")
    valid_loss: str = "logloss"

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 0 or self.max_epochs < 0:
            raise ConfigError("patience and max_epochs must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if isinstance(self.loss_weights, str) and self.loss_weights != "auto":
            raise ConfigError("loss_weights must be 'auto' or an explicit per-scenario list")
        if self.valid_loss not in ("logloss", "objective"):
            raise ConfigError("valid_loss must be 'logloss' or 'objective'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainLog:
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    valid_auc: list = field(default_factory=list)  # per epoch: {"s/task": auc}
    epoch_seconds: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, include_timing: bool = False) -> str:
        """Delimited export. Timing is off by default so the file is reproducible."""
        keys = sorted({k for snap in self.valid_auc for k in snap})
        header = ["epoch", "train_loss", "valid_loss"] + [f"auc_{k}" for k in keys]
        if include_timing:
            header.append("seconds")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for e in range(self.epochs):
            row = [e, repr(self.train_loss[e]), repr(self.valid_loss[e])]
            row += [repr(self.valid_auc[e][k]) if k in self.valid_auc[e] else "" for k in keys]
            if include_timing:
                row.append(f"{self.epoch_seconds[e]:.3f}")
            w.writerow(row)
        return buf.getvalue()


def compute_loss_weights(train: Dataset, n_scenarios: int) -> np.ndarray:
    """Scenario weight = 1 / (the scenario's share of the training records)."""
    counts = train.scenario_counts(n_scenarios).astype(np.float64)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise ConfigError(f"scenarios {empty} have no training records; drop them explicitly")
    return counts.sum() / counts


def resolve_loss_weights(spec, train: Dataset, n_scenarios: int) -> np.ndarray:
    if isinstance(spec, str):
        if spec != "auto":
            raise ConfigError(f"unknown loss weight policy {spec!r}")
        return compute_loss_weights(train, n_scenarios)
    lam = np.asarray(spec, dtype=np.float64)
    if lam.shape != (n_scenarios,):
        raise ConfigError("explicit loss weights need one value per scenario")
    return lam


def scenario_losses(model: MultiScenarioModel, features, scenario_ids, labels, lam, denom=None) -> dict:
    """Per-scenario weighted CE terms, each divided by ``denom`` (default: batch size)."""
    denom = len(scenario_ids) if denom is None else denom
    out = {}
    for o in model.forward(features, scenario_ids):
        y = labels[o.rows, : o.probs.shape[1]]
        out[o.scenario] = nc.scale(nc.binary_cross_entropy(o.probs, y), lam[o.scenario] / denom)
    return out


def batch_loss(model, features, scenario_ids, labels, lam) -> nc.Tensor:
    terms = list(scenario_losses(model, features, scenario_ids, labels, lam).values())
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    return total


def dataset_loss(model, data: Dataset, lam, batch_size: int = 4096) -> float:
    """The objective evaluated over a whole dataset (mean over records)."""
    total = 0.0
    feats, scen, labels = data.features, data.scenario, data.labels
    with nc.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            total += float(batch_loss(model, feats[sl], scen[sl], labels[sl], lam).data) * len(scen[sl])
    return total / len(data)


def _auc_snapshot(model, data: Dataset) -> dict:
    probs = model.predict(data.features, data.scenario)
    labels = data.labels
    snap = {}
    for s in range(model.config.n_scenarios):
        rows = np.flatnonzero(data.scenario == s)
        for j in range(model.config.tasks_per_scenario[s]):
            try:
                snap[f"{s}/{TASK_NAMES[j]}"] = auc(probs[rows, j], labels[rows, j])
            except UndefinedMetricError:
                pass
    return snap


def make_optimizer(cfg: TrainConfig):
    return nc.make_optimizer(cfg.optimizer, lr=cfg.lr)


def train(model: MultiScenarioModel, train_data: Dataset, valid_data: Dataset, cfg: TrainConfig,
          optimizer=None, start_epoch: int = 0, log: TrainLog | None = None):
    """Train in place and return ``(model, log)``.

    Shuffling for epoch ``e`` is seeded by ``(cfg.seed, e)`` so a run resumed
    from a checkpoint at epoch ``e`` (with its optimizer state) continues
    exactly as the uninterrupted run would.
    """
    cfg.validate()
    n_s = model.config.n_scenarios
    lam = resolve_loss_weights(cfg.loss_weights, train_data, n_s)
    valid_lam = lam if cfg.valid_loss == "objective" else np.ones(n_s)
    opt = optimizer or make_optimizer(cfg)
    log = log or TrainLog()
    params = model.parameters()
    feats, scen, labels = train_data.features, train_data.scenario, train_data.labels
    best_loss, best_state, stale = np.inf, None, 0
    if log.valid_loss:
        best_loss = min(log.valid_loss)
    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_data))
        running = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss = batch_loss(model, feats[idx], scen[idx], labels[idx], lam)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in params:
                p.grad = None
            nc.backward(loss)
            opt.step(params)
            running += value * len(idx)
        log.train_loss.append(running / len(order))
        vloss = dataset_loss(model, valid_data, valid_lam)
        log.valid_loss.append(vloss)
        log.valid_auc.append(_auc_snapshot(model, valid_data))
        log.epoch_seconds.append(time.perf_counter() - t0)
        if vloss < best_loss:
            best_loss, best_state, stale = vloss, model.state(), 0
            log.best_epoch = epoch
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if cfg.restore_best and best_state is not None:
        model.load_state(best_state)
    model._optimizer = opt
    return model, log


# ---------------------------------------------------------------------------
# checkpoints: parameter bundle + optimizer state


def checkpoint(model: MultiScenarioModel, path, optimizer=None, extra_meta: dict | None = None):
    tensors = {f"param/{k}": v for k, v in model.state().items()}
    meta = {"kind": model.kind, "config": model.config.to_dict(), **(extra_meta or {})}
    opt = optimizer if optimizer is not None else getattr(model, "_optimizer", None)
    if opt is not None:
        state = opt.state_dict()
        meta["optimizer"] = {k: v for k, v in state.items() if k != "tensors"}
        tensors.update({f"opt/{k}": v for k, v in state["tensors"].items()})
    write_bundle(path, tensors, meta)


def restore(path):
    """Return ``(model, optimizer_or_None, meta)``. Never returns a partial model."""
    tensors, meta = read_bundle(path)
    model = model_from_meta(meta)
    model.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("param/")})
    opt = None
    if "optimizer" in meta:
        state = dict(meta["optimizer"])
        state["tensors"] = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
        try:
            opt = nc.make_optimizer(state["kind"])
            opt.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"corrupt optimizer state: {exc}") from exc
    model._optimizer = opt
    return model, opt, meta
