"""Synthetic multi-scenario impression logs.

Users and items carry latent vectors shared by every scenario. Scenario i
scores a (user, item) pair with ``u . diag(a) . v`` where ``a`` is the
scenario's affinity vector, so two scenarios whose affinities point the same way rank
pairs alike; orthogonal affinities give uncorrelated scores. Per-scenario
intercepts are solved numerically so the expected CTR and CTCVR hit the
requested marginals.

Dataset file format (one impression per line, tab separated)::

    scenario_id  user_id  item_id  ctx_0,ctx_1,...  click  order

All fields are non-negative integers; ``order == 1`` requires ``click == 1``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DatasetFormatError

# Exposure counts, CTR and CTCVR of the six production scenarios a..f.
REFERENCE_EXPOSURES = (11.5e6, 6.3e6, 1.5e6, 1.7e6, 89e3, 1.7e6)
REFERENCE_CTR = (0.1256, 0.2250, 0.14, 0.1384, 0.0412, 0.1117)
REFERENCE_CTCVR = (0.0264, 0.0591, 0.0064, 0.0054, 0.0031, 0.0113)
SCENARIO_NAMES = ("a", "b", "c", "d", "e", "f")
TASK_NAMES = ("ctr", "ctcvr")

N_CONTEXT = 2
CALIBRATION_SAMPLES = 50_000


@dataclass
class ScenarioSpec:
    scenario_id: int
    traffic_share: float
    base_ctr: float
    base_cvr_given_click: float
    affinity: list

    @property
    def base_ctcvr(self) -> float:
        return self.base_ctr * self.base_cvr_given_click


@dataclass
class GeneratorConfig:
    scenarios: list
    n_users: int = 2000
    n_items: int = 1000
    latent_dim: int = 8
    latent_mean: float = 0.5
    noise: float = 0.3
    n_impressions: int = 100_000
    n_context_buckets: int = 10
    context_noise: float = 0.5
    item_popularity_exponent: float = 0.7
    seed: int = 0

    def validate(self):
        if not self.scenarios:
            raise ConfigError("at least one scenario is required")
        for name in ("n_users", "n_items", "latent_dim", "n_impressions", "n_context_buckets"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.noise < 0 or self.context_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        shares = [s.traffic_share for s in self.scenarios]
        if min(shares) <= 0 or abs(sum(shares) - 1.0) > 1e-9:
            raise ConfigError(f"traffic shares must be positive and sum to 1, got {shares}")
        for k, s in enumerate(self.scenarios):
            if s.scenario_id != k:
                raise ConfigError("scenario ids must be 0..M-1 in order")
            if not (0 < s.base_ctr < 1 and 0 < s.base_cvr_given_click < 1):
                raise ConfigError(f"scenario {k}: base rates must lie in (0, 1)")
            if len(s.affinity) != self.latent_dim:
                raise ConfigError(f"scenario {k}: affinity has length {len(s.affinity)}, expected {self.latent_dim}")

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["scenarios"] = [ScenarioSpec(**s) for s in d["scenarios"]]
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def correlated_affinities(n_scenarios: int, latent_dim: int, correlation: float, norm: float, seed: int):
    """Affinity vectors with pairwise cosine close to ``correlation``.

    Each is ``rho * common + sqrt(1 - rho^2) * own`` (Gaussian directions),
    rescaled to length ``norm``.
    """
    rng = np.random.default_rng([seed, 7])
    common = rng.normal(size=latent_dim)
    out = []
    for _ in range(n_scenarios):
        a = correlation * common + np.sqrt(max(0.0, 1 - correlation ** 2)) * rng.normal(size=latent_dim)
        out.append((norm * a / np.linalg.norm(a)).tolist())
    return out


def six_scenario_config(n_impressions: int = 100_000, seed: int = 0, correlation: float = 0.7,
                   affinity_norm: float = 2.0, **kw) -> GeneratorConfig:
    """Six scenarios with traffic, CTR and CTCVR proportional to the production log."""
    shares = np.asarray(REFERENCE_EXPOSURES) / np.sum(REFERENCE_EXPOSURES)
    latent_dim = kw.pop("latent_dim", 8)
    aff = correlated_affinities(6, latent_dim, correlation, affinity_norm, seed)
    specs = [ScenarioSpec(k, float(shares[k]), REFERENCE_CTR[k], REFERENCE_CTCVR[k] / REFERENCE_CTR[k], aff[k])
             for k in range(6)]
    # force exact normalisation after float rounding
    specs[0].traffic_share = 1.0 - sum(s.traffic_share for s in specs[1:])
    cfg = GeneratorConfig(scenarios=specs, latent_dim=latent_dim, n_impressions=n_impressions, seed=seed, **kw)
    cfg.validate()
    return cfg


default_config = six_scenario_config


def aligned_orthogonal_config(n_impressions: int = 60_000, seed: int = 0, affinity_norm: float = 2.0,
                              **kw) -> GeneratorConfig:
    """Three equal-traffic scenarios: a and b share one affinity, c is orthogonal to it.

    With zero-mean latents the scores of a and b are identical in law while c
    is uncorrelated with both.
    """
    latent_dim = kw.pop("latent_dim", 8)
    rng = np.random.default_rng([seed, 11])
    base = rng.normal(size=latent_dim)
    other = rng.normal(size=latent_dim)
    other -= (other @ base) / (base @ base) * base
    base *= affinity_norm / np.linalg.norm(base)
    other *= affinity_norm / np.linalg.norm(other)
    specs = [
        ScenarioSpec(0, 1 / 3, 0.15, 0.2, base.tolist()),
        ScenarioSpec(1, 1 / 3, 0.15, 0.2, base.tolist()),
        ScenarioSpec(2, 1 / 3, 0.15, 0.2, other.tolist()),
    ]
    specs[0].traffic_share = 1.0 - specs[1].traffic_share - specs[2].traffic_share
    kw.setdefault("latent_mean", 0.0)
    cfg = GeneratorConfig(scenarios=specs, latent_dim=latent_dim, n_impressions=n_impressions, seed=seed, **kw)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# records and columnar datasets


@dataclass(frozen=True)
class ExampleRecord:
    scenario_id: int
    user_id: int
    item_id: int
    context: tuple
    click: int
    order: int

    def __post_init__(self):
        if self.order and not self.click:
            raise ValueError("order=1 requires click=1")

    def feature_ids(self) -> list[int]:
        return [self.user_id, self.item_id, self.scenario_id, *self.context]


FEATURE_NAMES = ("user_id", "item_id", "scenario_id") + tuple(f"ctx_{k}" for k in range(N_CONTEXT))


@dataclass
class Dataset:
    """Column store of impressions; iterating yields :class:`ExampleRecord`."""

    scenario: np.ndarray
    user: np.ndarray
    item: np.ndarray
    context: np.ndarray  # [n, n_context]
    click: np.ndarray
    order: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scenario = np.asarray(self.scenario, dtype=np.int64)
        self.user = np.asarray(self.user, dtype=np.int64)
        self.item = np.asarray(self.item, dtype=np.int64)
        ctx = np.asarray(self.context, dtype=np.int64)
        width = ctx.shape[-1] if ctx.ndim == 2 else N_CONTEXT
        self.context = ctx.reshape(len(self.scenario), width)
        self.click = np.asarray(self.click, dtype=np.int64)
        self.order = np.asarray(self.order, dtype=np.int64)

    def __len__(self):
        return len(self.scenario)

    def __iter__(self) -> Iterator[ExampleRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def record(self, k: int) -> ExampleRecord:
        return ExampleRecord(int(self.scenario[k]), int(self.user[k]), int(self.item[k]),
                             tuple(int(c) for c in self.context[k]), int(self.click[k]), int(self.order[k]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.scenario[idx], self.user[idx], self.item[idx], self.context[idx],
                       self.click[idx], self.order[idx], dict(self.meta))

    @property
    def features(self) -> np.ndarray:
        """Categorical ids ``[n, F]`` in :data:`FEATURE_NAMES` order."""
        return np.column_stack([self.user, self.item, self.scenario, self.context])

    @property
    def labels(self) -> np.ndarray:
        return np.column_stack([self.click, self.order]).astype(np.float64)

    @classmethod
    def from_records(cls, records: Iterable[ExampleRecord], meta: dict | None = None) -> "Dataset":
        records = list(records)
        n_ctx = len(records[0].context) if records else N_CONTEXT
        return cls(
            [r.scenario_id for r in records], [r.user_id for r in records], [r.item_id for r in records],
            np.array([r.context for r in records], dtype=np.int64).reshape(len(records), n_ctx),
            [r.click for r in records], [r.order for r in records], meta or {},
        )

    def equals(self, other: "Dataset") -> bool:
        return all(np.array_equal(getattr(self, c), getattr(other, c))
                   for c in ("scenario", "user", "item", "context", "click", "order"))

    def scenario_counts(self, n_scenarios: int | None = None) -> np.ndarray:
        return np.bincount(self.scenario, minlength=n_scenarios or 0)


# ---------------------------------------------------------------------------
# generation


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _solve_intercept(scores, target, weights=None, lo=-30.0, hi=30.0, iters=100):
    """Intercept b with weighted mean of sigmoid(b + scores) equal to ``target``."""
    w = np.ones_like(scores) if weights is None else weights
    wsum = w.sum()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if (w * _sigmoid(mid + scores)).sum() / wsum < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _bucketize(values, n_buckets, rng_noise):
    noisy = values + rng_noise
    edges = np.quantile(noisy, np.linspace(0, 1, n_buckets + 1)[1:-1])
    return np.searchsorted(edges, noisy, side="right")


class _World:
    """Latent users/items and calibrated per-scenario intercepts for one config."""

    def __init__(self, cfg: GeneratorConfig):
        cfg.validate()
        rng = np.random.default_rng([cfg.seed, 0])
        L = cfg.latent_dim
        self.cfg = cfg
        self.users = cfg.latent_mean + rng.normal(size=(cfg.n_users, L))
        self.items = cfg.latent_mean + rng.normal(size=(cfg.n_items, L))
        pop = (np.arange(cfg.n_items) + 1.0) ** -cfg.item_popularity_exponent
        self.item_p = pop / pop.sum()
        activity = rng.lognormal(0.0, 0.5, size=cfg.n_users)
        self.user_p = activity / activity.sum()
        # context fields: bucketised noisy user / item attributes
        self.user_ctx = _bucketize(self.users[:, 0], cfg.n_context_buckets,
                                   cfg.context_noise * rng.normal(size=cfg.n_users))
        self.item_ctx = _bucketize(self.items[:, 1 % L], cfg.n_context_buckets,
                                   cfg.context_noise * rng.normal(size=cfg.n_items))
        self.affinity = np.array([s.affinity for s in cfg.scenarios], dtype=np.float64)
        self.ctr_bias = np.empty(cfg.n_scenarios)
        self.cvr_bias = np.empty(cfg.n_scenarios)
        crng = np.random.default_rng([cfg.seed, 1])
        for k, spec in enumerate(cfg.scenarios):
            u, v = self._sample_pairs(crng, CALIBRATION_SAMPLES)
            zc = self._score(k, u, v) + cfg.noise * crng.normal(size=u.size)
            zo = self._score(k, u, v) + cfg.noise * crng.normal(size=u.size)
            self.ctr_bias[k] = _solve_intercept(zc, spec.base_ctr)
            p_click = _sigmoid(self.ctr_bias[k] + zc)
            self.cvr_bias[k] = _solve_intercept(zo, spec.base_cvr_given_click, weights=p_click)

    def _sample_pairs(self, rng, n):
        u = rng.choice(self.cfg.n_users, size=n, p=self.user_p)
        v = rng.choice(self.cfg.n_items, size=n, p=self.item_p)
        return u, v

    def _score(self, k, u, v):
        return np.einsum("nl,l,nl->n", self.users[u], self.affinity[k], self.items[v])


def generate(cfg: GeneratorConfig) -> Dataset:
    """Sample ``cfg.n_impressions`` labelled impressions. Pure function of ``cfg``."""
    world = _World(cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    n = cfg.n_impressions
    shares = np.array([s.traffic_share for s in cfg.scenarios])
    scen = rng.choice(cfg.n_scenarios, size=n, p=shares / shares.sum())
    u, v = world._sample_pairs(rng, n)
    score = np.einsum("nl,nl,nl->n", world.users[u], world.affinity[scen], world.items[v])
    p_click = _sigmoid(world.ctr_bias[scen] + score + cfg.noise * rng.normal(size=n))
    p_conv = _sigmoid(world.cvr_bias[scen] + score + cfg.noise * rng.normal(size=n))
    click = (rng.random(n) < p_click).astype(np.int64)
    order = click * (rng.random(n) < p_conv).astype(np.int64)
    ctx = np.column_stack([world.user_ctx[u], world.item_ctx[v]])
    return Dataset(scen, u, v, ctx, click, order, meta=feature_meta(cfg))


def feature_meta(cfg: GeneratorConfig) -> dict:
    return {"n_scenarios": cfg.n_scenarios,
            "vocab": {"user_id": cfg.n_users, "item_id": cfg.n_items, "scenario_id": cfg.n_scenarios,
                      **{f"ctx_{k}": cfg.n_context_buckets for k in range(N_CONTEXT)}}}


def empirical_rates(data: Dataset, n_scenarios: int):
    """Per-scenario (share, ctr, ctcvr) arrays."""
    counts = data.scenario_counts(n_scenarios).astype(np.float64)
    clicks = np.bincount(data.scenario, weights=data.click, minlength=n_scenarios)
    orders = np.bincount(data.scenario, weights=data.order, minlength=n_scenarios)
    with np.errstate(invalid="ignore", divide="ignore"):
        return counts / counts.sum(), clicks / counts, orders / counts


# ---------------------------------------------------------------------------
# file I/O


def write_dataset(records, path):
    data = records if isinstance(records, Dataset) else Dataset.from_records(records)
    lines = []
    for k in range(len(data)):
        ctx = ",".join(str(c) for c in data.context[k])
        lines.append(f"{data.scenario[k]}\t{data.user[k]}\t{data.item[k]}\t{ctx}\t{data.click[k]}\t{data.order[k]}\n")
    with open(path, "w", newline="\n") as fh:
        fh.writelines(lines)


def read_dataset(path, meta: dict | None = None) -> Dataset:
    cols = ([], [], [], [], [], [])
    n_ctx = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6:
                raise DatasetFormatError(line_no, f"expected 6 tab-separated fields, got {len(parts)}")
            try:
                s, u, i = int(parts[0]), int(parts[1]), int(parts[2])
                ctx = [int(c) for c in parts[3].split(",")] if parts[3] else []
                click, order = int(parts[4]), int(parts[5])
            except ValueError as exc:
                raise DatasetFormatError(line_no, f"non-integer field ({exc})") from None
            if min(s, u, i, *ctx) < 0:
                raise DatasetFormatError(line_no, "ids must be non-negative")
            if click not in (0, 1) or order not in (0, 1):
                raise DatasetFormatError(line_no, "labels must be 0 or 1")
            if order and not click:
                raise DatasetFormatError(line_no, "order=1 with click=0 violates the label hierarchy")
            if n_ctx is None:
                n_ctx = len(ctx)
            elif len(ctx) != n_ctx:
                raise DatasetFormatError(line_no, f"expected {n_ctx} context ids, got {len(ctx)}")
            for col, val in zip(cols, (s, u, i, ctx, click, order)):
                col.append(val)
    n_ctx = N_CONTEXT if n_ctx is None else n_ctx
    context = np.array(cols[3], dtype=np.int64).reshape(len(cols[0]), n_ctx)
    data = Dataset(cols[0], cols[1], cols[2], context, cols[4], cols[5], meta or {})
    if not data.meta and len(data):
        data.meta = infer_meta(data)
    return data


def infer_meta(data: Dataset) -> dict:
    m = int(data.scenario.max()) + 1
    vocab = {"user_id": int(data.user.max()) + 1, "item_id": int(data.item.max()) + 1, "scenario_id": m}
    for k in range(data.context.shape[1]):
        vocab[f"ctx_{k}"] = int(data.context[:, k].max()) + 1
    return {"n_scenarios": m, "vocab": vocab}


# ---------------------------------------------------------------------------
# splitting


def split(data: Dataset, train_frac: float, seed: int):
    """Per-scenario stratified random split into (train, test)."""
    if not 0 < train_frac < 1:
        raise ConfigError("train_frac must lie in (0, 1)")
    rng = np.random.default_rng([seed, 3])
    train_idx, test_idx = [], []
    for s in np.unique(data.scenario):
        rows = np.flatnonzero(data.scenario == s)
        if rows.size < 2:
            raise ConfigError(f"scenario {s} has {rows.size} record(s); stratified split needs >= 2")
        rows = rows[rng.permutation(rows.size)]
        k = int(round(train_frac * rows.size))
        k = min(max(k, 1), rows.size - 1)
        train_idx.append(rows[:k])
        test_idx.append(rows[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return data.subset(train_idx), data.subset(test_idx)


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    return Dataset(*(np.concatenate([getattr(p, c) for p in parts])
                     for c in ("scenario", "user", "item", "context", "click", "order")),
                   meta=dict(parts[0].meta))
