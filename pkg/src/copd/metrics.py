"""Behavioral distance between policies, measured on visited states.

Top-k overlap is |TopK_a ∩ TopK_b| / k averaged over probe states, with ties
broken by ascending token id. Symmetric KL is the Jeffreys divergence
KL(a||b) + KL(b||a), averaged the same way. Probe states are the prefixes a
policy visits while sampling at temperature 1.

Metrics are written as JSON lines; every row carries the schema tag, run id,
step, cycle and phase.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .grpo import ConfigError
from .policy import Policy, sample_rollout
from .seeding import derive_seed

SCHEMA = "copd.metrics/1"


def default_k(vocab_size: int) -> int:
    return min(10, vocab_size - 1)


@dataclass(frozen=True)
class ProbeSet:
    states: tuple[tuple[int, ...], ...]
    source_policy: str
    seed: int

    def __post_init__(self) -> None:
        if not self.states:
            raise ValueError("a probe set needs at least one state")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class OverlapReport:
    k: int
    mean_overlap: float
    per_state: tuple[float, ...]
    sym_kl_mean: float


def collect_probe_states(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    rollouts_per_prompt: int,
    seed: int,
    source: str = "",
    max_len: int = 4,
) -> ProbeSet:
    """Every prefix state visited by temperature-1 rollouts of ``policy``."""
    if not prompts:
        raise ValueError("prompts must be non-empty")
    if rollouts_per_prompt < 1:
        raise ValueError("rollouts_per_prompt must be >= 1")
    states = []
    for i, prompt in enumerate(prompts):
        for j in range(rollouts_per_prompt):
            r = sample_rollout(policy, prompt, max_len, 1.0, derive_seed(seed, "probe", i, j))
            states.extend(prefix for prefix, _ in r.prefixes())
    return ProbeSet(tuple(tuple(s) for s in states), source, seed)


def top_k_set(logits: np.ndarray, k: int) -> frozenset[int]:
    # stable sort on the negated logits keeps tied ids in ascending order
    return frozenset(int(i) for i in np.argsort(-np.asarray(logits), kind="stable")[:k])


def _check_k(k: int, vocab_size: int) -> None:
    if not 1 <= k <= vocab_size:
        raise ConfigError(f"k must lie in [1, {vocab_size}], got {k}")


def jeffreys(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p||q) + KL(q||p) for strictly positive distributions."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return float(np.dot(p - q, np.log(p) - np.log(q)))


def _state_kls(a: Policy, b: Policy, states: Iterable[Sequence[int]]) -> Iterator[float]:
    for s in states:
        ctx = a.context(s)
        la, lb = a.log_probs(ctx), b.log_probs(ctx)
        yield float(np.dot(np.exp(la) - np.exp(lb), la - lb))


def symmetric_kl(policy_a: Policy, policy_b: Policy, probe: ProbeSet) -> float:
    """Mean over probe states of KL(a||b) + KL(b||a)."""
    vals = list(_state_kls(policy_a, policy_b, probe.states))
    return max(0.0, float(np.mean(vals)))


def top_k_overlap(policy_a: Policy, policy_b: Policy, probe: ProbeSet, k: int) -> OverlapReport:
    _check_k(k, policy_a.vocab.size)
    per_state = []
    for s in probe.states:
        ctx = policy_a.context(s)
        ta = top_k_set(policy_a.logits(ctx), k)
        tb = top_k_set(policy_b.logits(ctx), k)
        per_state.append(len(ta & tb) / k)
    return OverlapReport(
        k=k,
        mean_overlap=float(np.mean(per_state)),
        per_state=tuple(per_state),
        sym_kl_mean=symmetric_kl(policy_a, policy_b, probe),
    )


@dataclass(frozen=True)
class PairReport:
    """Both directions of a pairwise comparison and their average."""

    a_probe: OverlapReport
    b_probe: OverlapReport

    @property
    def mean_overlap(self) -> float:
        return 0.5 * (self.a_probe.mean_overlap + self.b_probe.mean_overlap)

    @property
    def sym_kl(self) -> float:
        return 0.5 * (self.a_probe.sym_kl_mean + self.b_probe.sym_kl_mean)


def pair_report(
    a: Policy, b: Policy, prompts: Sequence[Sequence[int]], rollouts_per_prompt: int,
    seed: int, k: int, names: tuple[str, str] = ("a", "b"), max_len: int = 4,
) -> PairReport:
    """Compare two policies on states visited by each of them in turn."""
    pa = collect_probe_states(a, prompts, rollouts_per_prompt, derive_seed(seed, names[0]), names[0], max_len)
    pb = collect_probe_states(b, prompts, rollouts_per_prompt, derive_seed(seed, names[1]), names[1], max_len)
    return PairReport(top_k_overlap(a, b, pa, k), top_k_overlap(a, b, pb, k))


class MetricsWriter:
    """Append-only JSONL metrics stream.

    Rows are flushed as they are written so that a failed run leaves every
    completed measurement on disk.
    """

    def __init__(self, path: str | Path | None, run: str) -> None:
        self.run = run
        self.rows: list[dict] = []
        self._fh = None
        self._last_step = -1
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", encoding="utf-8")

    def _emit(self, row: dict) -> None:
        if row["step"] < self._last_step:
            raise ValueError(f"metrics step went backwards: {row['step']} < {self._last_step}")
        self._last_step = row["step"]
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()

    def _base(self, step: int, cycle: int, phase: str) -> dict:
        return {"schema": SCHEMA, "run": self.run, "step": int(step), "cycle": int(cycle), "phase": phase}

    def scalar(self, step: int, cycle: int, phase: str, branch: str, metric: str, value: float) -> None:
        row = self._base(step, cycle, phase)
        row.update(branch=branch, metric=metric, value=float(value))
        self._emit(row)

    def behavior(self, step: int, cycle: int, phase: str, branch_pair: str, k: int,
                 mean_overlap: float, sym_kl: float) -> None:
        row = self._base(step, cycle, phase)
        row.update(branch_pair=branch_pair, k=int(k), mean_overlap=float(mean_overlap), sym_kl=float(sym_kl))
        self._emit(row)

    def record(self, step: int, cycle: int, phase: str, **fields) -> None:
        """Free-form row for pilot tables and sweep summaries."""
        row = self._base(step, cycle, phase)
        row.update(fields)
        self._emit(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        row = json.loads(line)
        if row.get("schema") != SCHEMA:
            raise ValueError(f"{path}:{n}: unsupported schema {row.get('schema')!r}")
        rows.append(row)
    return rows
