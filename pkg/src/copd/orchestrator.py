"""Branch lifecycle: alternating RLVR and mutual-distillation phases, merging,
and the baseline pipelines that share the same step grid.

Every random draw is keyed by (run seed, stream, branch, cycle, phase, step),
so a branch's trajectory does not depend on how many branches run beside it,
on the worker count, or on which mode produced the surrounding schedule. In
particular a coevolve run with beta = 0 reproduces an expert run exactly.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import MergeSpec, Schedule, TrainConfig, dump_config
from .grpo import Branch, ConfigError, StepStats, grpo_step
from .metrics import MetricsWriter, pair_report
from .opd import TeacherSnapshot, mixed_phase_step
from .policy import Policy, save_checkpoint
from .seeding import derive_seed
from .tasks import VOCAB, accuracy, eval_prompts, get_domain, sample_prompts

__all__ = [
    "MergeSpec", "Schedule", "TrainResult", "Trainer", "merge", "hub_spoke_pairs",
    "full_pairs", "exchange_pairs", "run_rlvr_phase", "run_mutual_opd_phase", "run_training",
]


class BudgetError(RuntimeError):
    """The scheduler's update count disagrees with the configured budget."""


def merge(policies: Sequence[Policy], spec: MergeSpec | Sequence[float] | None = None) -> Policy:
    """Weighted arithmetic mean of parameter matrices."""
    if not policies:
        raise ValueError("nothing to merge")
    if not isinstance(spec, MergeSpec):
        spec = MergeSpec(None if spec is None else tuple(spec))
    weights = spec.resolve(len(policies))
    first = policies[0]
    for p in policies[1:]:
        if p.shape != first.shape or p.window != first.window or p.vocab != first.vocab:
            raise ValueError(f"cannot merge policies of shapes {first.shape} and {p.shape}")
    nonzero = [(w, p) for w, p in zip(weights, policies) if w != 0.0]
    if len(nonzero) == 1 and nonzero[0][0] == 1.0:
        return nonzero[0][1]  # exact: avoids 1.0 * x + 0.0 * y rounding paths
    params = sum(w * p.params for w, p in zip(weights, policies))
    return Policy(params, first.vocab, first.window)


def hub_spoke_pairs(branch_ids: Sequence[str], hub: str) -> list[tuple[str, str]]:
    if hub not in branch_ids:
        raise ConfigError(f"hub {hub!r} is not one of {list(branch_ids)}")
    return [(hub, b) for b in branch_ids if b != hub]


def full_pairs(branch_ids: Sequence[str]) -> list[tuple[str, str]]:
    return list(itertools.combinations(branch_ids, 2))


def exchange_pairs(branch_ids: Sequence[str], schedule: Schedule) -> list[tuple[str, str]]:
    if schedule.topology == "hub-and-spoke":
        return hub_spoke_pairs(branch_ids, schedule.hub)
    return full_pairs(branch_ids)


def partners(branch_id: str, pairs: Sequence[tuple[str, str]], order: Sequence[str]) -> list[str]:
    linked = {b for p in pairs if branch_id in p for b in p if b != branch_id}
    return [b for b in order if b in linked]


@dataclass
class TrainResult:
    final: Policy
    branches: dict[str, Policy]
    metrics: list[dict]
    updates: dict[str, int]
    evals: dict[str, dict[str, float]] = field(default_factory=dict)


class Trainer:
    """Owns the metrics stream, the global step counter and the seed keys of one run."""

    def __init__(self, cfg: TrainConfig, writer: MetricsWriter | None = None) -> None:
        self.cfg = cfg
        self.writer = writer or MetricsWriter(None, cfg.run_id)
        self.step = 0
        self.updates: dict[str, int] = {}
        self.theta0 = Policy.zeros(VOCAB, cfg.window)
        self.domains = tuple(dict.fromkeys(b.domain for b in cfg.branches))
        self.k = cfg.metrics.resolved_k()
        self.probe_prompts = [
            p for d in self.domains
            for p in sample_prompts(d, cfg.metrics.probe_prompts, "probe", cfg.metrics.probe_seed)
        ]
        self.eval_sets = {d: eval_prompts(d, cfg.eval.n_prompts, cfg.eval.seed) for d in self.domains}

    # -- helpers ---------------------------------------------------------------

    def initial_branches(self) -> list[Branch]:
        return [Branch(b.id, b.domain, self.theta0, b.beta) for b in self.cfg.branches]

    @property
    def reference(self) -> Policy | None:
        return self.theta0 if self.cfg.grpo.kl_coeff > 0 else None

    def native_batch(self, branch: Branch, cycle: int, phase: str, t: int) -> tuple[list, int]:
        keys = (self.cfg.seed, "native", branch.id, cycle, phase, t)
        domains = branch.domain.split("+")
        B = self.cfg.grpo.batch_size
        if len(domains) == 1:
            prompts = sample_prompts(domains[0], B, *keys)
        else:
            # union of domains: round-robin over the batch slots
            per = {d: sample_prompts(d, B, *keys) for d in domains}
            prompts = [per[domains[i % len(domains)]][i // len(domains)] for i in range(B)]
        return prompts, derive_seed(*keys)

    def cross_batch(self, student: str, teacher: Branch, cycle: int, t: int) -> tuple[list, int]:
        keys = (self.cfg.seed, "cross", student, teacher.id, cycle, t)
        n = self.cfg.opd.cross_batch_size or self.cfg.grpo.batch_size
        return sample_prompts(teacher.domain, n, *keys), derive_seed(*keys)

    def _count(self, branch: Branch) -> None:
        self.updates[branch.id] = self.updates.get(branch.id, 0) + 1

    def log_step(self, branches: Sequence[Branch], stats: dict[str, StepStats], cycle: int, phase: str) -> None:
        for b in branches:
            for name, value in stats[b.id].as_dict().items():
                self.writer.scalar(self.step, cycle, phase, b.id, name, value)
        if len(branches) > 1 and self.step % self.cfg.metrics.every == 0:
            self.log_behavior(branches, cycle, phase)

    def log_behavior(self, branches: Sequence[Branch], cycle: int, phase: str) -> None:
        m = self.cfg.metrics
        for a, b in itertools.combinations(branches, 2):
            rep = pair_report(a.policy, b.policy, self.probe_prompts, m.probe_rollouts,
                              m.probe_seed, self.k,
                              (a.id, b.id), self.cfg.grpo.max_len)
            self.writer.behavior(self.step, cycle, phase, f"{a.id}|{b.id}", self.k,
                                 rep.mean_overlap, rep.sym_kl)

    def evaluate(self, policy: Policy) -> dict[str, float]:
        return {d: accuracy(policy, d, self.eval_sets[d], self.cfg.grpo.max_len) for d in self.domains}

    def log_eval(self, name: str, policy: Policy, cycle: int, phase: str) -> dict[str, float]:
        accs = self.evaluate(policy)
        for d, a in accs.items():
            self.writer.scalar(self.step, cycle, phase, name, f"acc/{d}", a)
        return accs

    def checkpoint(self, branches: Sequence[Branch], cycle: int) -> None:
        if self.cfg.out_dir is None:
            return
        for b in branches:
            save_checkpoint(b.policy, Path(self.cfg.out_dir) / b.id / f"cycle{cycle}.ckpt")

    # -- phases ----------------------------------------------------------------

    def rlvr_phase(self, branches: list[Branch], s_rl: int, cycle: int) -> list[Branch]:
        g = self.cfg.grpo
        for t in range(s_rl):
            stats = {}
            new = []
            for b in branches:
                prompts, seed = self.native_batch(b, cycle, "I", t)
                b, stats[b.id] = grpo_step(b, prompts, g.group_size, g.clip, g.kl_coeff, self.reference,
                                           g.learning_rate, seed, g.temperature, g.max_len, self.cfg.workers)
                self._count(b)
                new.append(b)
            branches = new
            self.step += 1
            self.log_step(branches, stats, cycle, "I")
        return branches

    def mutual_opd_phase(self, branches: list[Branch], s_opd: int, cycle: int,
                         pairs: Sequence[tuple[str, str]] | None) -> list[Branch]:
        """Phase II. ``pairs=None`` runs the native half only (expert grid)."""
        ids = [b.id for b in branches]
        for p in pairs or ():
            for bid in p:
                if bid not in ids:
                    raise ConfigError(f"topology references unknown branch {bid!r}")
        for t in range(s_opd):
            # all branches publish snapshots, then all branches step
            snaps = {b.id: TeacherSnapshot.of(b) for b in branches}
            by_id = {b.id: b for b in branches}
            stats = {}
            new = []
            for b in branches:
                native, nseed = self.native_batch(b, cycle, "II", t)
                teachers, cprompts, cseeds = [], [], []
                for j in partners(b.id, pairs or (), ids):
                    prompts, cseed = self.cross_batch(b.id, by_id[j], cycle, t)
                    teachers.append(snaps[j])
                    cprompts.append(prompts)
                    cseeds.append(cseed)
                b, stats[b.id] = mixed_phase_step(b, teachers, native, cprompts, self.cfg.grpo, self.cfg.opd,
                                                  nseed, cseeds, self.reference, self.cfg.workers)
                self._count(b)
                new.append(b)
            branches = new
            self.step += 1
            self.log_step(branches, stats, cycle, "II")
        return branches

    def distill_stage(self, student: Branch, teachers: Sequence[Branch], steps: int,
                      cycle: int, phase: str = "OPD") -> Branch:
        """Cross-only distillation from frozen teachers (static-opd and mopd baselines)."""
        snaps = [TeacherSnapshot.of(t) for t in teachers]
        for t in range(steps):
            cprompts, cseeds = zip(*(self.cross_batch(student.id, tb, cycle, t) for tb in teachers)) \
                if teachers else ((), ())
            student, stats = mixed_phase_step(student, snaps, [], list(cprompts), self.cfg.grpo,
                                              self.cfg.opd, 0, list(cseeds), None, self.cfg.workers)
            self._count(student)
            self.step += 1
            self.log_step([student], {student.id: stats}, cycle, phase)
        return student

    def cycles(self, branches: list[Branch], coevolve: bool) -> list[Branch]:
        s = self.cfg.schedule
        pairs = exchange_pairs([b.id for b in branches], s) if coevolve else None
        for n in range(1, s.cycles + 1):
            branches = self.rlvr_phase(branches, s.s_rl, n)
            for b in branches:
                self.log_eval(b.id, b.policy, n, "I")
            branches = self.mutual_opd_phase(branches, s.s_opd, n, pairs)
            for b in branches:
                self.log_eval(b.id, b.policy, n, "II")
            self.checkpoint(branches, n)
        return branches


def run_rlvr_phase(branches: list[Branch], s_rl: int, cfg: TrainConfig, cycle: int = 1,
                   trainer: Trainer | None = None) -> list[Branch]:
    """Advance every branch ``s_rl`` GRPO steps on its own domain."""
    return (trainer or Trainer(cfg)).rlvr_phase(list(branches), s_rl, cycle)


def run_mutual_opd_phase(branches: list[Branch], s_opd: int, cfg: TrainConfig, cycle: int = 1,
                         trainer: Trainer | None = None) -> list[Branch]:
    """``s_opd`` Phase II steps with teachers chosen by the configured topology."""
    if len(branches) < 2:
        raise ConfigError("mutual distillation needs at least two branches")
    pairs = exchange_pairs([b.id for b in branches], cfg.schedule)
    return (trainer or Trainer(cfg)).mutual_opd_phase(list(branches), s_opd, cycle, pairs)


def _check_budget(trainer: Trainer, expected: dict[str, int]) -> None:
    def nonzero(d: dict[str, int]) -> dict[str, int]:
        return {k: v for k, v in d.items() if v}

    if nonzero(trainer.updates) != nonzero(expected):
        raise BudgetError(f"update counts {trainer.updates} != planned {expected}")


def planned_updates(cfg: TrainConfig) -> dict[str, int]:
    """Gradient updates per policy, as the scheduler must execute them."""
    s = cfg.schedule
    per = s.steps_per_branch
    ids = cfg.branch_ids
    if s.mode in ("coevolve", "expert"):
        return {b: per for b in ids}
    if s.mode == "mixed-rlvr":
        return {"mixed": per * len(ids)}
    experts = {b: per for b in ids}
    if s.mode == "static-opd":
        student = s.student or ids[0]
        experts[student] += s.cycles * s.s_opd
        return experts
    return {**experts, "student": per}  # mopd


def run_training(cfg: TrainConfig) -> TrainResult:
    out = Path(cfg.out_dir) if cfg.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    with MetricsWriter(out / "metrics.jsonl" if out else None, cfg.run_id) as writer:
        trainer = Trainer(cfg, writer)
        result = _run(trainer)
        _check_budget(trainer, planned_updates(cfg))
        if out is not None:
            save_checkpoint(result.final, out / "merged.ckpt")
        return result


def _run(tr: Trainer) -> TrainResult:
    cfg, s = tr.cfg, tr.cfg.schedule
    branches = tr.initial_branches()
    if len(branches) > 1:
        tr.log_behavior(branches, 0, "init")
    for b in branches[:1]:
        tr.log_eval("theta0", b.policy, 0, "init")

    if s.mode == "mixed-rlvr":
        mixed = Branch("mixed", "+".join(tr.domains), tr.theta0, 0.0)
        k = len(branches)
        for n in range(1, s.cycles + 1):
            [mixed] = tr.rlvr_phase([mixed], k * (s.s_rl + s.s_opd), n)
            tr.log_eval(mixed.id, mixed.policy, n, "I")
            tr.checkpoint([mixed], n)
        final, trained = mixed.policy, {mixed.id: mixed.policy}
    else:
        branches = tr.cycles(branches, coevolve=s.mode == "coevolve")
        trained = {b.id: b.policy for b in branches}
        if s.mode in ("coevolve", "expert"):
            final = merge([b.policy for b in branches], cfg.merge)
        elif s.mode == "static-opd":
            ids = [b.id for b in branches]
            sid = s.student or ids[0]
            tid = s.teacher or next(i for i in ids if i != sid)
            by_id = {b.id: b for b in branches}
            student = tr.distill_stage(by_id[sid], [by_id[tid]], s.cycles * s.s_opd, s.cycles + 1)
            final = trained[sid] = student.policy
        else:  # mopd
            student = Branch("student", "+".join(tr.domains), tr.theta0, cfg.opd.student_beta)
            student = tr.distill_stage(student, branches, s.steps_per_branch, s.cycles + 1)
            final = trained["student"] = student.policy
    evals = {name: tr.evaluate(p) for name, p in trained.items()}
    evals["final"] = tr.log_eval("final", final, s.cycles, "final")
    return TrainResult(final, trained, tr.writer.rows, dict(tr.updates), evals)
