"""Multi-scenario multi-task networks: HiNet (with ablation switches), Shared Bottom, MMoE.

All models share one interface: ``forward(features, scenario_ids)`` returns a
list of :class:`ScenarioOutput`, one per scenario present in the batch,
holding the row positions and the ``[rows, n_tasks]`` task probabilities.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, ConfigError
from .layers import (CgcModule, ExpertStack, FeatureEmbedding, FeatureField, GatingNetwork, Mlp, Module,
                     ScenarioExtractionLayer, Tower)
from .numcore import Tensor

MODEL_KINDS = ("hinet", "shared_bottom", "mmoe")

ABLATIONS = {
    "full": dict(hierarchy=True, san=True, scenario_gating=True, task_gating=True),
    "no_hierarchy": dict(hierarchy=False, san=False, scenario_gating=True, task_gating=True),
    "no_san": dict(hierarchy=True, san=False, scenario_gating=True, task_gating=True),
    "no_task_gating": dict(hierarchy=True, san=True, scenario_gating=True, task_gating=False),
    "no_scenario_gating": dict(hierarchy=True, san=True, scenario_gating=False, task_gating=True),
    "no_both_gating": dict(hierarchy=True, san=True, scenario_gating=False, task_gating=False),
}


@dataclass
class HiNetConfig:
    """Architecture hyperparameters (shared by the baselines where meaningful).

    Integer-or-list fields (``specific_sub_experts``, ``cgc_shared``,
    ``cgc_specific``) broadcast a single value to every scenario / task.
    """

    n_scenarios: int
    fields: list
    tasks_per_scenario: list | None = None
    shared_sub_experts: int = 5
    specific_sub_experts: int | list = 5
    expert_hidden: list = field(default_factory=list)
    expert_width: int = 32
    cgc_shared: int | list = 2
    cgc_specific: int | list = 2
    cgc_hidden: list = field(default_factory=list)
    tower_hidden: list = field(default_factory=lambda: [16])
    san_dim: int = 8
    hierarchy: bool = True
    san: bool = True
    scenario_gating: bool = True
    task_gating: bool = True
    loss_weights: str | list = "auto"
    mmoe_experts: int | None = None
    bottom_hidden: list = field(default_factory=lambda: [64])

    def __post_init__(self):
        self.fields = [f if isinstance(f, FeatureField) else FeatureField(**f) for f in self.fields]
        if self.tasks_per_scenario is None:
            self.tasks_per_scenario = [2] * self.n_scenarios

    # resolved per-scenario counts -------------------------------------
    def k_specific(self) -> list[int]:
        return _per_scenario(self.specific_sub_experts, self.n_scenarios, "specific_sub_experts")

    def m_shared(self) -> list[int]:
        return _per_scenario(self.cgc_shared, self.n_scenarios, "cgc_shared")

    def n_specific(self) -> list[list[int]]:
        v = self.cgc_specific
        if isinstance(v, int):
            return [[v] * n for n in self.tasks_per_scenario]
        if len(v) != self.n_scenarios:
            raise ConfigError("cgc_specific needs one entry per scenario")
        return [[x] * n if isinstance(x, int) else list(x) for x, n in zip(v, self.tasks_per_scenario)]

    def validate(self):
        if self.n_scenarios < 1:
            raise ConfigError("n_scenarios must be >= 1")
        if len(self.tasks_per_scenario) != self.n_scenarios:
            raise ConfigError("tasks_per_scenario needs one entry per scenario")
        if any(not 1 <= n <= 2 for n in self.tasks_per_scenario):
            raise ConfigError("each scenario has 1 (CTR) or 2 (CTR, CTCVR) tasks")
        if self.hierarchy and (self.shared_sub_experts < 1 or min(self.k_specific()) < 1):
            raise ConfigError("SEI modules need at least one sub-expert")
        if min(self.m_shared()) < 0 or any(min(r) < 0 for r in self.n_specific()):
            raise ConfigError("expert counts must be non-negative")
        for m, ns in zip(self.m_shared(), self.n_specific()):
            if any(m + n < 1 for n in ns):
                raise ConfigError("every CGC task needs at least one shared or task expert")
        if self.expert_width < 1 or self.san_dim < 1:
            raise ConfigError("widths must be positive")
        if not isinstance(self.loss_weights, str) and len(self.loss_weights) != self.n_scenarios:
            raise ConfigError("explicit loss_weights need one value per scenario")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("feature field names must be unique")

    @property
    def san_active(self) -> bool:
        return self.hierarchy and self.san and self.n_scenarios > 1

    def variant(self) -> str:
        switches = dict(hierarchy=self.hierarchy, san=self.san, scenario_gating=self.scenario_gating,
                        task_gating=self.task_gating)
        for name, sw in ABLATIONS.items():
            if sw == switches:
                return name
        return "custom"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fields"] = [dataclasses.asdict(f) for f in self.fields]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HiNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_dataset(cls, meta: dict, emb_dim: int = 8, **overrides) -> "HiNetConfig":
        fields = [FeatureField(name, int(v), emb_dim) for name, v in meta["vocab"].items()]
        return cls(n_scenarios=int(meta["n_scenarios"]), fields=fields, **overrides)


def _per_scenario(v, m, name):
    if isinstance(v, int):
        return [v] * m
    if len(v) != m:
        raise ConfigError(f"{name} needs one entry per scenario")
    return list(v)


@dataclass
class ScenarioOutput:
    scenario: int
    rows: np.ndarray
    probs: Tensor  # [len(rows), n_tasks]


def _groups(scenario_ids, n_scenarios):
    scenario_ids = np.asarray(scenario_ids, dtype=np.int64)
    if scenario_ids.size and (scenario_ids.min() < 0 or scenario_ids.max() >= n_scenarios):
        raise IndexError(f"scenario id outside [0, {n_scenarios})")
    return [(i, np.flatnonzero(scenario_ids == i)) for i in range(n_scenarios) if np.any(scenario_ids == i)]


class MultiScenarioModel(Module):
    kind = "base"

    def __init__(self, cfg: HiNetConfig):
        cfg.validate()
        self.config = cfg

    def forward(self, features, scenario_ids, trace: dict | None = None) -> list[ScenarioOutput]:
        raise NotImplementedError

    def __call__(self, features, scenario_ids, trace=None):
        return self.forward(features, scenario_ids, trace)

    def predict(self, features, scenario_ids, batch_size: int = 4096) -> np.ndarray:
        """Probabilities ``[B, max tasks]`` (NaN where a scenario lacks the task)."""
        features = np.asarray(features)
        scenario_ids = np.asarray(scenario_ids)
        out = np.full((len(scenario_ids), max(self.config.tasks_per_scenario)), np.nan)
        with nc.no_grad():
            for start in range(0, len(scenario_ids), batch_size):
                sl = slice(start, start + batch_size)
                for o in self.forward(features[sl], scenario_ids[sl]):
                    out[start + o.rows, : o.probs.shape[1]] = o.probs.data
        return out

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))[:3]
            extra = sorted(set(state) - set(params))[:3]
            raise CheckpointError(f"parameter names do not match (missing {missing}, unexpected {extra})")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise CheckpointError(f"shape mismatch for {name}: {p.shape} vs {state[name].shape}")
            p.data[...] = state[name]


def _stack_rows(parts: Sequence[Tensor]) -> Tensor:
    return nc.concat(parts, axis=-1)


class HiNet(MultiScenarioModel):
    kind = "hinet"

    def __init__(self, cfg: HiNetConfig, seed: int = 0):
        super().__init__(cfg)
        rng = np.random.default_rng([seed, 100])
        self.embedding = FeatureEmbedding(cfg.fields, rng)
        if cfg.hierarchy:
            self.scenario_layer = ScenarioExtractionLayer(
                cfg.n_scenarios, self.embedding.width, cfg.shared_sub_experts, cfg.k_specific(),
                cfg.expert_hidden, cfg.expert_width, san=cfg.san, san_dim=cfg.san_dim,
                gated=cfg.scenario_gating, rng=rng)
            rep_width = self.scenario_layer.out_width
        else:
            self.scenario_layer = None
            rep_width = self.embedding.width
        self.rep_width = rep_width
        self.cgc = [CgcModule(rep_width, m, ns, cfg.cgc_hidden, cfg.expert_width, rng, gated=cfg.task_gating)
                    for m, ns in zip(cfg.m_shared(), cfg.n_specific())]
        self.towers = [[Tower(cfg.expert_width, cfg.tower_hidden, rng) for _ in range(n)]
                       for n in cfg.tasks_per_scenario]
        self._name_parameters()

    def scenario_representation(self, features, scenario_ids, trace=None) -> Tensor:
        x = self.embedding(features)
        if self.scenario_layer is None:
            return x
        return self.scenario_layer(x, scenario_ids, trace)

    def forward(self, features, scenario_ids, trace=None):
        groups = _groups(scenario_ids, self.config.n_scenarios)
        c = self.scenario_representation(features, scenario_ids, trace)
        cgc_trace = trace.setdefault("cgc", []) if trace is not None else None
        outs = []
        for i, rows in groups:
            ci = nc.take(c, rows, axis=0)
            ts = self.cgc[i](ci, cgc_trace)
            probs = _stack_rows([tower(t) for tower, t in zip(self.towers[i], ts)])
            outs.append(ScenarioOutput(i, rows, probs))
        return outs

    def san_weights(self) -> np.ndarray:
        """``[M, M]`` SAN weight matrix (zero diagonal)."""
        if self.scenario_layer is None or self.scenario_layer.san is None:
            raise ConfigError("model has no scenario-aware attention")
        with nc.no_grad():
            return self.scenario_layer.san.weight_matrix().data.copy()


class SharedBottom(MultiScenarioModel):
    kind = "shared_bottom"

    def __init__(self, cfg: HiNetConfig, seed: int = 0):
        super().__init__(cfg)
        rng = np.random.default_rng([seed, 100])
        self.embedding = FeatureEmbedding(cfg.fields, rng)
        self.bottom = Mlp([self.embedding.width, *cfg.bottom_hidden, cfg.expert_width], rng)
        self.towers = [[Tower(cfg.expert_width, cfg.tower_hidden, rng) for _ in range(n)]
                       for n in cfg.tasks_per_scenario]
        self._name_parameters()

    def trunk(self, features) -> Tensor:
        return self.bottom(self.embedding(features))

    def forward(self, features, scenario_ids, trace=None):
        groups = _groups(scenario_ids, self.config.n_scenarios)
        h = self.trunk(features)
        outs = []
        for i, rows in groups:
            hi = nc.take(h, rows, axis=0)
            outs.append(ScenarioOutput(i, rows, _stack_rows([t(hi) for t in self.towers[i]])))
        return outs


def mmoe_expert_count(cfg: HiNetConfig) -> int:
    if cfg.mmoe_experts is not None:
        return cfg.mmoe_experts
    return int(round(cfg.shared_sub_experts + sum(cfg.k_specific()) / cfg.n_scenarios))


class MMoE(MultiScenarioModel):
    """Shared expert pool, one gate and tower per (scenario, task) pair."""

    kind = "mmoe"

    def __init__(self, cfg: HiNetConfig, seed: int = 0):
        super().__init__(cfg)
        rng = np.random.default_rng([seed, 100])
        self.embedding = FeatureEmbedding(cfg.fields, rng)
        width = self.embedding.width
        n_exp = mmoe_expert_count(cfg)
        if n_exp < 1:
            raise ConfigError("MMoE needs at least one expert")
        self.experts = ExpertStack(n_exp, [width, *cfg.expert_hidden, cfg.expert_width], rng)
        self.gates = [[GatingNetwork(n_exp, width, rng) for _ in range(n)] for n in cfg.tasks_per_scenario]
        self.towers = [[Tower(cfg.expert_width, cfg.tower_hidden, rng) for _ in range(n)]
                       for n in cfg.tasks_per_scenario]
        self._name_parameters()

    def forward(self, features, scenario_ids, trace=None):
        groups = _groups(scenario_ids, self.config.n_scenarios)
        x = self.embedding(features)
        e = self.experts(x)  # [E, B, D]
        gate_trace = trace.setdefault("mmoe", []) if trace is not None else None
        outs = []
        for i, rows in groups:
            xi = nc.take(x, rows, axis=0)
            ei = nc.take(e, rows, axis=1)
            preds = []
            for gate, tower in zip(self.gates[i], self.towers[i]):
                w = gate(xi)
                if gate_trace is not None:
                    gate_trace.append(w.data)
                preds.append(tower(nc.mixture(w, ei)))
            outs.append(ScenarioOutput(i, rows, _stack_rows(preds)))
        return outs


_KINDS = {"hinet": HiNet, "shared_bottom": SharedBottom, "mmoe": MMoE}


def build_model(kind: str, cfg: HiNetConfig, seed: int = 0) -> MultiScenarioModel:
    if kind not in _KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return _KINDS[kind](cfg, seed=seed)


def ablation_config(cfg: HiNetConfig, variant: str) -> HiNetConfig:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {list(ABLATIONS)}")
    return dataclasses.replace(cfg, **ABLATIONS[variant])


def build_ablation(cfg: HiNetConfig, variant: str, seed: int = 0) -> HiNet:
    return HiNet(ablation_config(cfg, variant), seed=seed)


# ---------------------------------------------------------------------------
# parameter bundles
#
# layout (little endian):
#   magic "HINETPB\0" | u32 version | u64 meta_len | meta (utf-8 JSON)
#   | u32 n_entries | entries
# entry: u16 name_len | name | u8 ndim | u64 * ndim shape | f64 * prod(shape)

MAGIC = b"HINETPB\0"
BUNDLE_VERSION = 1


def write_bundle(path, tensors: dict, meta: dict | None = None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<IQ", BUNDLE_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_bundle(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises CheckpointError on any malformed input."""
    try:
        buf = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    pos = 0

    def grab(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if grab(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a parameter bundle")
    version, meta_len = struct.unpack("<IQ", grab(12))
    if version != BUNDLE_VERSION:
        raise CheckpointError(f"{path}: bundle version {version}, this build reads {BUNDLE_VERSION}")
    try:
        meta = json.loads(grab(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    (count,) = struct.unpack("<I", grab(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", grab(2))
        name = grab(nlen).decode()
        (ndim,) = struct.unpack("<B", grab(1))
        shape = struct.unpack(f"<{ndim}Q", grab(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(grab(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, meta


def save_parameters(model: MultiScenarioModel, path, extra_meta: dict | None = None):
    meta = {"kind": model.kind, "config": model.config.to_dict(), **(extra_meta or {})}
    write_bundle(path, {f"param/{k}": v for k, v in model.state().items()}, meta)


def load_parameters(path) -> MultiScenarioModel:
    tensors, meta = read_bundle(path)
    model = model_from_meta(meta)
    model.load_state({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    return model


def model_from_meta(meta: dict) -> MultiScenarioModel:
    try:
        cfg = HiNetConfig.from_dict(meta["config"])
        return build_model(meta["kind"], cfg)
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bundle metadata lacks a usable model description: {exc}") from exc
