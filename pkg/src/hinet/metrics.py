"""AUC, log-loss, the Friedman rank statistic, and per-cell evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .datagen import TASK_NAMES, Dataset
from .errors import ContractError, UndefinedMetricError
from .numcore import PROB_EPS


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks, so tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes (got {n_pos} positives, {n_neg} negatives)")
    ranks = _kernels.midranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("logloss of an empty set")
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


@dataclass
class FriedmanResult:
    statistic: float
    mean_ranks: np.ndarray
    n_runs: int
    n_variants: int

    def exceeds(self, alpha: float = 0.05) -> bool:
        """Compare against the tabulated chi-square critical value (df = V-1)."""
        return self.statistic > CHI2_CRITICAL[alpha][self.n_variants - 1]


# Upper critical values of chi-square for df = 1..10.
CHI2_CRITICAL = {
    0.05: {1: 3.841, 2: 5.991, 3: 7.815, 4: 9.488, 5: 11.070, 6: 12.592, 7: 14.067, 8: 15.507, 9: 16.919,
           10: 18.307},
    0.01: {1: 6.635, 2: 9.210, 3: 11.345, 4: 13.277, 5: 15.086, 6: 16.812, 7: 18.475, 8: 20.090, 9: 21.666,
           10: 23.209},
}


def friedman(matrix) -> FriedmanResult:
    """Friedman statistic over an ``R x V`` matrix (runs x variants).

    Within each run the highest metric gets rank 1; ties share midranks.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError("run matrix must be two-dimensional (runs x variants)")
    r, v = m.shape
    if r < 2 or v < 2:
        raise ContractError(f"Friedman needs >= 2 runs and >= 2 variants, got {r} x {v}")
    if not np.all(np.isfinite(m)):
        raise ContractError("run matrix is incomplete (non-finite cells)")
    ranks = np.vstack([_kernels.midranks(-row) for row in m])
    mean_ranks = ranks.mean(axis=0)
    stat = 12.0 * r / (v * (v + 1)) * (np.sum(mean_ranks ** 2) - v * (v + 1) ** 2 / 4.0)
    return FriedmanResult(float(stat), mean_ranks, r, v)


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class CellMetrics:
    auc: float | None
    logloss: float
    n_pos: int
    n_neg: int


@dataclass
class EvalReport:
    cells: dict  # (scenario, task_name) -> CellMetrics
    meta: dict = field(default_factory=dict)

    def auc_values(self) -> dict:
        return {k: c.auc for k, c in self.cells.items() if c.auc is not None}

    def mean_auc(self) -> float:
        vals = list(self.auc_values().values())
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        """``(scenario, task, metric, value)`` rows in a stable order."""
        for (s, t) in sorted(self.cells, key=lambda k: (k[0], TASK_NAMES.index(k[1]))):
            c = self.cells[(s, t)]
            yield s, t, "auc", ("" if c.auc is None else repr(c.auc))
            yield s, t, "logloss", repr(c.logloss)
            yield s, t, "n_pos", str(c.n_pos)
            yield s, t, "n_neg", str(c.n_neg)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "task", "metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_json(self) -> str:
        cells = [{"scenario": s, "task": t, "auc": c.auc, "logloss": c.logloss, "n_pos": c.n_pos, "n_neg": c.n_neg}
                 for (s, t), c in sorted(self.cells.items(), key=lambda kv: (kv[0][0], TASK_NAMES.index(kv[0][1])))]
        return json.dumps({"meta": self.meta, "mean_auc": self.mean_auc(), "cells": cells}, indent=2,
                          sort_keys=True) + "\n"

    def write(self, directory, stem: str = "eval"):
        from pathlib import Path
        d = Path(directory)
        (d / f"{stem}.csv").write_text(self.to_csv())
        (d / f"{stem}.json").write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        cells = {(c["scenario"], c["task"]): CellMetrics(c["auc"], c["logloss"], c["n_pos"], c["n_neg"])
                 for c in d["cells"]}
        return cls(cells, d.get("meta", {}))


def evaluate(model, data: Dataset, meta: dict | None = None) -> EvalReport:
    """Score every record and compute AUC / log-loss per (scenario, task) cell.

    CTR uses click labels and CTCVR uses order labels, both over all
    impressions of the scenario. Single-class cells report ``auc=None``.
    """
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    probs = model.predict(data.features, data.scenario)
    labels = data.labels
    cells = {}
    tasks = model.config.tasks_per_scenario
    for s in range(model.config.n_scenarios):
        rows = np.flatnonzero(data.scenario == s)
        if rows.size == 0:
            continue
        for j in range(tasks[s]):
            p, y = probs[rows, j], labels[rows, j]
            n_pos = int(y.sum())
            try:
                a = auc(p, y)
            except UndefinedMetricError:
                a = None
            cells[(s, TASK_NAMES[j])] = CellMetrics(a, logloss(p, y), n_pos, int(rows.size - n_pos))
    return EvalReport(cells, dict(meta or {}))
