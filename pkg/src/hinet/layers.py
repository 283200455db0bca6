"""Building blocks of the hierarchical network.

Experts of one mixture are stored stacked (``W`` of shape ``[K, in, out]``)
so a whole expert group runs as one batched matmul; ``expert(k)`` exposes
the k-th expert as an ordinary :class:`Mlp` view when needed. Expert stacks
produce ``[K, B, D]`` tensors, gates produce ``[B, K]`` probability rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Parameter, Tensor


class Module:
    """Minimal parameter container; children are discovered via attributes."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(val, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def _name_parameters(self):
        for name, p in self.named_parameters():
            p.name = name


def _walk(val, name):
    if isinstance(val, Parameter):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# embeddings


class EmbeddingTable(Module):
    def __init__(self, vocab_size: int, dim: int, rng, scale: float = 0.1, name: str = "table"):
        if vocab_size < 1 or dim < 1:
            raise ConfigError(f"embedding {name!r} needs positive vocab and dim")
        self.vocab_size = vocab_size
        self.dim = dim
        self._field = name
        self.weights = Parameter(rng.normal(0.0, scale, size=(vocab_size, dim)))

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise IndexError(f"field {self._field!r}: id {bad} outside vocab of size {self.vocab_size}")
        return nc.take(self.weights, ids, axis=0)


@dataclass(frozen=True)
class FeatureField:
    name: str
    vocab_size: int
    dim: int = 8


class FeatureEmbedding(Module):
    """One table per categorical field; ``x`` is the concat of the looked-up rows."""

    def __init__(self, fields: Sequence[FeatureField], rng):
        if not fields:
            raise ConfigError("feature schema is empty")
        self.field_names = [f.name for f in fields]
        self.tables = [EmbeddingTable(f.vocab_size, f.dim, rng, name=f.name) for f in fields]

    @property
    def width(self) -> int:
        return sum(t.dim for t in self.tables)

    def __call__(self, features) -> Tensor:
        features = np.asarray(features, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != len(self.tables):
            raise ShapeError(f"expected feature ids of shape [B, {len(self.tables)}], got {features.shape}")
        return nc.concat([t.lookup(features[:, f]) for f, t in enumerate(self.tables)], axis=-1)


def embed_features(record, tables: FeatureEmbedding) -> Tensor:
    """Dense input ``x`` (shape ``[1, width]``) for one record's categorical ids."""
    ids = record.feature_ids() if hasattr(record, "feature_ids") else record
    return tables(np.asarray(ids, dtype=np.int64).reshape(1, -1))


# ---------------------------------------------------------------------------
# dense blocks


class Mlp(Module):
    """Fully connected stack; ReLU after every layer except optionally the last."""

    def __init__(self, widths: Sequence[int], rng, activate_last: bool = True):
        widths = list(widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"Mlp widths must have >= 2 positive entries, got {widths}")
        self.widths = widths
        self.activate_last = activate_last
        self.W = [Parameter(_he(rng, (a, b), a)) for a, b in zip(widths[:-1], widths[1:])]
        self.b = [Parameter(np.zeros(b)) for b in widths[1:]]

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.W)
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            x = nc.linear(x, w, b)
            if i < n - 1 or self.activate_last:
                x = nc.relu(x)
        return x


class ExpertStack(Module):
    """``K`` identically shaped Mlp experts evaluated together.

    Input ``[B, in]`` (shared by all experts) or ``[K, B, in]``; output ``[K, B, out]``.
    """

    def __init__(self, n_experts: int, widths: Sequence[int], rng):
        widths = list(widths)
        if n_experts < 1:
            raise ConfigError("an expert stack needs at least one expert")
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigError(f"expert widths must have >= 2 positive entries, got {widths}")
        self.n_experts = n_experts
        self.widths = widths
        self.W = [Parameter(_he(rng, (n_experts, a, b), a)) for a, b in zip(widths[:-1], widths[1:])]
        self.b = [Parameter(np.zeros((n_experts, 1, b))) for b in widths[1:]]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in zip(self.W, self.b):
            x = nc.relu(nc.linear(x, w, b))
        return x

    def expert(self, k: int) -> Mlp:
        """A detached Mlp copy of expert ``k`` (shares values, not Parameters)."""
        view = Mlp.__new__(Mlp)
        view.widths = list(self.widths)
        view.activate_last = True
        view.W = [Parameter(w.data[k]) for w in self.W]
        view.b = [Parameter(b.data[k, 0]) for b in self.b]
        return view


class GatingNetwork(Module):
    """``softmax(W x)`` with ``W`` of shape ``[n_outputs, n_inputs]``.

    ``uniform=True`` drops the gate entirely and returns ``1/n_outputs``.
    """

    def __init__(self, n_outputs: int, n_inputs: int, rng, uniform: bool = False):
        if n_outputs < 1:
            raise ConfigError("a gate needs at least one output")
        self.n_outputs = n_outputs
        self.n_inputs = n_inputs
        self.uniform = uniform
        if not uniform:
            self.W = Parameter(rng.normal(0.0, 1.0 / np.sqrt(n_inputs), size=(n_outputs, n_inputs)))

    def logits(self, x: Tensor) -> Tensor:
        return nc.matmul(x, nc.transpose(self.W))

    def __call__(self, x: Tensor) -> Tensor:
        x = nc.as_tensor(x)
        if x.shape[-1] != self.n_inputs:
            raise ShapeError(f"gate expects input width {self.n_inputs}, got {x.shape}")
        if self.uniform:
            return Tensor(np.full(x.shape[:-1] + (self.n_outputs,), 1.0 / self.n_outputs))
        return nc.softmax(self.logits(x), axis=-1)


# ---------------------------------------------------------------------------
# scenario extraction


class SeiModule(Module):
    """Sub-expert integration: sub-expert outputs mixed by a softmax gate over the input."""

    def __init__(self, n_sub_experts: int, widths: Sequence[int], rng, gated: bool = True):
        if n_sub_experts < 1:
            raise ConfigError("SEI needs K >= 1 sub-experts")
        self.sub_experts = ExpertStack(n_sub_experts, widths, rng)
        self.gate = GatingNetwork(n_sub_experts, widths[0], rng, uniform=not gated)

    @property
    def out_width(self) -> int:
        return self.sub_experts.out_width

    def __call__(self, x: Tensor, trace: list | None = None) -> Tensor:
        w = self.gate(x)
        if trace is not None:
            trace.append(w.data)
        return nc.mixture(w, self.sub_experts(x))


def sei_forward(m: SeiModule, x: Tensor) -> Tensor:
    return m(nc.as_tensor(x))


class ScenarioAttention(Module):
    """Per-scenario gates over the *other* scenarios, driven by the scenario embedding only.

    Row ``i`` of :meth:`weight_matrix` holds scenario i's weights; position k of
    gate i refers to the k-th scenario of ``[0..M-1]`` with ``i`` removed.
    """

    def __init__(self, n_scenarios: int, emb_dim: int, rng):
        if n_scenarios < 2:
            raise ConfigError("scenario attention needs at least two scenarios")
        self.n_scenarios = n_scenarios
        self.embedding = EmbeddingTable(n_scenarios, emb_dim, rng, scale=1.0 / np.sqrt(emb_dim), name="scenario")
        self.gates = [GatingNetwork(n_scenarios - 1, emb_dim, rng) for _ in range(n_scenarios)]

    def others(self, i: int) -> list[int]:
        return [m for m in range(self.n_scenarios) if m != i]

    def weights(self, i: int) -> Tensor:
        """Gate output for scenario ``i``: shape ``[M-1]``."""
        if not 0 <= i < self.n_scenarios:
            raise IndexError(f"unknown scenario id {i}")
        emb = self.embedding.lookup([i])
        return nc.reshape(self.gates[i](emb), (self.n_scenarios - 1,))

    def weight_matrix(self) -> Tensor:
        """``[M, M]`` matrix of SAN weights with a zero diagonal."""
        rows = [nc.reshape(self.weights(i), (1, self.n_scenarios - 1)) for i in range(self.n_scenarios)]
        return nc.insert_zero_diagonal(nc.concat(rows, axis=0))


def san_forward(gate: GatingNetwork, scenario_emb: Tensor, others: Sequence[Tensor]) -> Tensor:
    """Mix the other scenarios' specific outputs with weights from one scenario embedding.

    ``others`` are the specific outputs (each ``[B, D]``) in ascending scenario
    order with scenario i removed.
    """
    others = list(others)
    if len(others) != gate.n_outputs:
        raise ShapeError(f"SAN gate has {gate.n_outputs} outputs but {len(others)} scenarios were given")
    emb = nc.reshape(nc.as_tensor(scenario_emb), (1, gate.n_inputs))
    w = gate(emb)  # [1, M-1]
    batch = others[0].shape[0]
    stack = nc.concat([nc.reshape(s, (1,) + s.shape) for s in others], axis=0)
    return nc.mixture(nc.take(w, np.zeros(batch, dtype=np.int64), axis=0), stack)


class ScenarioExtractionLayer(Module):
    """Shared SEI, one specific SEI per scenario, and optionally SAN.

    Output per row is ``concat(shared, own, attended)`` (or ``concat(shared, own)`` without SAN).
    """

    def __init__(self, n_scenarios: int, in_width: int, shared_sub_experts: int,
                 specific_sub_experts: Sequence[int], expert_hidden: Sequence[int], expert_width: int,
                 san: bool, san_dim: int, gated: bool, rng):
        if len(specific_sub_experts) != n_scenarios:
            raise ConfigError("need one specific sub-expert count per scenario")
        widths = [in_width, *expert_hidden, expert_width]
        self.n_scenarios = n_scenarios
        self.shared = SeiModule(shared_sub_experts, widths, rng, gated=gated)
        self.specific = [SeiModule(k, widths, rng, gated=gated) for k in specific_sub_experts]
        self.san = ScenarioAttention(n_scenarios, san_dim, rng) if san and n_scenarios > 1 else None
        self.expert_width = expert_width

    @property
    def out_width(self) -> int:
        return (3 if self.san is not None else 2) * self.expert_width

    def __call__(self, x: Tensor, scenario_ids, trace: dict | None = None) -> Tensor:
        scenario_ids = np.asarray(scenario_ids, dtype=np.int64)
        if scenario_ids.size and (scenario_ids.min() < 0 or scenario_ids.max() >= self.n_scenarios):
            raise IndexError(f"scenario id outside [0, {self.n_scenarios})")
        sei_trace = trace.setdefault("sei", []) if trace is not None else None
        g = self.shared(x, sei_trace)
        specific = [m(x, sei_trace) for m in self.specific]
        b = x.shape[0]
        stack = nc.concat([nc.reshape(s, (1,) + s.shape) for s in specific], axis=0)  # [M, B, D]
        onehot = np.zeros((b, self.n_scenarios))
        onehot[np.arange(b), scenario_ids] = 1.0
        own = nc.mixture(Tensor(onehot), stack)
        if self.san is None:
            return nc.concat([g, own], axis=-1)
        p = self.san.weight_matrix()
        if trace is not None:
            trace["san"] = p.data
        attended = nc.mixture(nc.take(p, scenario_ids, axis=0), stack)
        return nc.concat([g, own, attended], axis=-1)


def scenario_layer_forward(layer: ScenarioExtractionLayer, x: Tensor, scenario_id) -> Tensor:
    """Scenario representation for every row of ``x``; ``scenario_id`` is a scalar or one id per row."""
    x = nc.as_tensor(x)
    ids = np.broadcast_to(np.asarray(scenario_id, dtype=np.int64), (x.shape[0],))
    return layer(x, ids)


# ---------------------------------------------------------------------------
# task extraction


class CgcModule(Module):
    """Customized gate control: shared experts + per-task experts, per-task gates."""

    def __init__(self, in_width: int, n_shared: int, n_specific: Sequence[int], expert_hidden: Sequence[int],
                 expert_width: int, rng, gated: bool = True):
        widths = [in_width, *expert_hidden, expert_width]
        for j, n in enumerate(n_specific):
            if n_shared + n < 1:
                raise ConfigError(f"CGC task {j} has no experts (no shared or task experts)")
        self.in_width = in_width
        self.n_shared = n_shared
        self.n_specific = list(n_specific)
        self.shared_experts = ExpertStack(n_shared, widths, rng) if n_shared else None
        self.task_experts = [ExpertStack(n, widths, rng) if n else None for n in n_specific]
        self.gates = [GatingNetwork(n_shared + n, in_width, rng, uniform=not gated) for n in n_specific]
        self.expert_width = expert_width

    @property
    def n_tasks(self) -> int:
        return len(self.n_specific)

    def __call__(self, c: Tensor, trace: list | None = None) -> list[Tensor]:
        """One tower input per task."""
        if c.shape[-1] != self.in_width:
            raise ShapeError(f"CGC expects input width {self.in_width}, got {c.shape}")
        shared = self.shared_experts(c) if self.shared_experts is not None else None
        return [self._task(c, j, shared, trace) for j in range(self.n_tasks)]

    def _task(self, c, j, shared, trace):
        parts = [] if shared is None else [shared]
        if self.task_experts[j] is not None:
            parts.append(self.task_experts[j](c))
        w = self.gates[j](c)
        if trace is not None:
            trace.append(w.data)
        return nc.mixture(w, nc.concat(parts, axis=0))


def cgc_forward(m: CgcModule, c: Tensor, task_j: int) -> Tensor:
    if not 0 <= task_j < m.n_tasks:
        raise IndexError(f"task {task_j} outside [0, {m.n_tasks})")
    c = nc.as_tensor(c)
    shared = m.shared_experts(c) if m.shared_experts is not None else None
    return m._task(c, task_j, shared, None)


class Tower(Module):
    """MLP head ending in one logit and a sigmoid."""

    def __init__(self, in_width: int, hidden: Sequence[int], rng):
        self.mlp = Mlp([in_width, *hidden, 1], rng, activate_last=False)

    def __call__(self, t: Tensor) -> Tensor:
        return nc.sigmoid(self.mlp(t))


def tower_forward(tower: Tower, t: Tensor) -> Tensor:
    return tower(nc.as_tensor(t))
