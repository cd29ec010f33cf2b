"""Pilot protocols: behavioral drift under independent RLVR, overlap versus
distillation gain, and the Phase I : Phase II rhythm sweep."""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .config import Schedule, TrainConfig
from .grpo import Branch, ConfigError
from .metrics import MetricsWriter, collect_probe_states, top_k_overlap
from .orchestrator import Trainer, run_training
from .policy import Policy, load_checkpoint, save_checkpoint
from .tasks import VOCAB, sample_prompts


def _writer(cfg: TrainConfig, name: str) -> MetricsWriter:
    path = Path(cfg.out_dir) / name if cfg.out_dir is not None else None
    return MetricsWriter(path, cfg.run_id)


def _probe(tr: Trainer, policy: Policy, domain: str, name: str):
    m = tr.cfg.metrics
    prompts = sample_prompts(domain, m.probe_prompts, "probe", m.probe_seed)
    return collect_probe_states(policy, prompts, m.probe_rollouts, m.probe_seed, name, tr.cfg.grpo.max_len)


# -- drift ---------------------------------------------------------------------


@dataclass(frozen=True)
class DriftPoint:
    branch: str
    step: int
    overlap: float
    sym_kl: float


def pilot_drift(cfg: TrainConfig, writer: MetricsWriter | None = None) -> list[DriftPoint]:
    """Train every configured branch independently from theta_0 and track its
    overlap and symmetric KL against theta_0 on its own probe states."""
    p = cfg.pilot
    own = writer is None
    writer = writer or _writer(cfg, "drift.jsonl")
    try:
        tr = Trainer(cfg, writer)
        branches = tr.initial_branches()
        points: list[DriftPoint] = []

        def measure(m: int) -> None:
            for b in branches:
                rep = top_k_overlap(b.policy, tr.theta0, _probe(tr, b.policy, b.domain, b.id), tr.k)
                points.append(DriftPoint(b.id, tr.step, rep.mean_overlap, rep.sym_kl_mean))
                writer.record(tr.step, m, "drift", branch=b.id, k=tr.k,
                              mean_overlap=rep.mean_overlap, sym_kl=rep.sym_kl_mean)

        measure(0)
        for m in range(1, p.drift_measurements + 1):
            # each interval is its own "cycle" so its seed keys never repeat
            branches = tr.rlvr_phase(branches, p.drift_interval, m)
            measure(m)
        return points
    finally:
        if own:
            writer.close()


def drift_summary(points: Sequence[DriftPoint]) -> dict[str, dict[str, float]]:
    """Per branch: overlap drop, symmetric-KL rise and the fraction of intervals where KL rose."""
    out = {}
    for name in dict.fromkeys(p.branch for p in points):
        series = sorted((p for p in points if p.branch == name), key=lambda p: p.step)
        kls = [p.sym_kl for p in series]
        rises = [b > a for a, b in zip(kls, kls[1:])]
        out[name] = {
            "overlap_start": series[0].overlap,
            "overlap_end": series[-1].overlap,
            "overlap_drop": series[0].overlap - series[-1].overlap,
            "kl_start": kls[0],
            "kl_end": kls[-1],
            "kl_rise_fraction": sum(rises) / len(rises) if rises else 0.0,
        }
    return out


# -- overlap versus gain ---------------------------------------------------------


@dataclass(frozen=True)
class OverlapGainRow:
    variant: str
    temperature: float | None
    overlap: float
    pre: float
    post: float
    gain: float
    gain_se: float


@dataclass(frozen=True)
class OverlapGainResult:
    rows: tuple[OverlapGainRow, ...]
    control: OverlapGainRow
    spearman: float
    distinct_overlaps: int
    low_confidence: bool


def _stderr(acc: float, n: int) -> float:
    return math.sqrt(max(acc * (1.0 - acc), 0.0) / n)


def train_expert(tr: Trainer, spec_index: int, steps: int, temperature: float | None = None,
                 tag: str = "expert") -> Branch:
    """Plain GRPO from theta_0 on one configured branch's domain."""
    spec = tr.cfg.branches[spec_index]
    branch = Branch(f"{tag}-{spec.id}", spec.domain, tr.theta0, spec.beta)
    runner = tr if temperature is None else _with_temperature(tr, temperature)
    [branch] = runner.rlvr_phase([branch], steps, 1)
    tr.step = runner.step
    return branch


def _with_temperature(tr: Trainer, temperature: float) -> Trainer:
    cfg = dataclasses.replace(tr.cfg, grpo=dataclasses.replace(tr.cfg.grpo, temperature=temperature))
    clone = Trainer(cfg, tr.writer)
    clone.step = tr.step
    return clone


def pilot_overlap_gain(cfg: TrainConfig, writer: MetricsWriter | None = None) -> OverlapGainResult:
    """Students trained briefly at different sampling temperatures on the second
    branch's domain are distilled for a fixed budget from an expert on the first
    branch's domain; the gain on that domain is compared with the initial overlap."""
    if len(cfg.branches) < 2:
        raise ConfigError("pilot-overlap needs two branches (teacher domain, student domain)")
    p = cfg.pilot
    own = writer is None
    writer = writer or _writer(cfg, "overlap_gain.jsonl")
    try:
        tr = Trainer(cfg, writer)
        teacher_domain = cfg.branches[0].domain
        if p.teacher_checkpoint and Path(p.teacher_checkpoint).exists():
            teacher = Branch("teacher", teacher_domain, load_checkpoint(p.teacher_checkpoint, VOCAB), 1.0)
        else:
            teacher = train_expert(tr, 0, p.teacher_steps, tag="teacher")
            if p.teacher_checkpoint:
                save_checkpoint(teacher.policy, p.teacher_checkpoint)
        n_eval = len(tr.eval_sets[teacher_domain])

        def assess(name: str, temperature: float | None, student: Policy, index: int) -> OverlapGainRow:
            probe = _probe(tr, student, teacher_domain, name)
            overlap = top_k_overlap(student, teacher.policy, probe, tr.k).mean_overlap
            pre = tr.evaluate(student)[teacher_domain]
            posts = []
            for rep in range(p.distill_replicates):
                # each variant and replicate gets its own cross seed stream through its branch id
                branch = Branch(f"{name}-r{rep}", teacher_domain, student, 1.0)
                branch = tr.distill_stage(branch, [teacher], p.distill_steps, index, phase="pilot")
                posts.append(tr.evaluate(branch.policy)[teacher_domain])
            post = float(np.mean(posts))
            # binomial eval error of both measurements plus the spread across replicates
            spread = float(np.std(posts, ddof=1)) / math.sqrt(len(posts)) if len(posts) > 1 else 0.0
            post_se = math.hypot(_stderr(post, n_eval) / math.sqrt(len(posts)), spread)
            row = OverlapGainRow(name, temperature, overlap, pre, post, post - pre,
                                 math.hypot(_stderr(pre, n_eval), post_se))
            writer.record(tr.step, index, "pilot", **dataclasses.asdict(row))
            return row

        rows = []
        for i, temperature in enumerate(p.temperatures, start=1):
            student = train_expert(tr, 1, p.student_steps, temperature, tag=f"T{temperature:g}")
            rows.append(assess(f"T{temperature:g}", temperature, student.policy, i))
        control = assess("control", None, teacher.policy, len(p.temperatures) + 1)

        overlaps = [r.overlap for r in rows]
        distinct = len({round(o, 6) for o in overlaps})
        rho = float(spearmanr(overlaps, [r.gain for r in rows]).statistic) if distinct > 1 else float("nan")
        low = distinct < 3
        if low:
            warnings.warn(f"only {distinct} distinct overlap levels; correlation is low-confidence",
                          RuntimeWarning)
        writer.record(tr.step, 0, "summary", spearman=rho, distinct_overlaps=distinct,
                      low_confidence=low, n_variants=len(rows))
        return OverlapGainResult(tuple(rows), control, rho, distinct, low)
    finally:
        if own:
            writer.close()


# -- rhythm sweep --------------------------------------------------------------

DEFAULT_RATIOS = ((1.0, 1.0), (1.5, 1.0), (3.0, 1.0))


def split_steps(steps_per_cycle: int, ratio: tuple[float, float]) -> tuple[int, int]:
    """Split a cycle's step budget into (s_rl, s_opd) in the given proportion."""
    a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"invalid ratio {ratio}")
    s_rl = int(round(steps_per_cycle * a / (a + b)))
    return s_rl, steps_per_cycle - s_rl


@dataclass(frozen=True)
class SweepRow:
    ratio: str
    s_rl: int
    s_opd: int
    merged_mean_acc: float
    branch_mean_acc: float
    mean_overlap: float


def rhythm_sweep(cfg: TrainConfig, ratios: Sequence[tuple[float, float]] = DEFAULT_RATIOS,
                 writer: MetricsWriter | None = None) -> list[SweepRow]:
    """Coevolve runs at several rhythms with the same per-cycle step budget."""
    per_cycle = cfg.schedule.s_rl + cfg.schedule.s_opd
    if per_cycle < 1:
        raise ConfigError("rhythm sweep needs s_rl + s_opd >= 1")
    own = writer is None
    writer = writer or _writer(cfg, "sweep.jsonl")
    rows = []
    try:
        for i, ratio in enumerate(ratios):
            s_rl, s_opd = split_steps(per_cycle, ratio)
            label = f"{ratio[0]:g}:{ratio[1]:g}"
            out = None if cfg.out_dir is None else str(Path(cfg.out_dir) / f"ratio_{label.replace(':', '-')}")
            run_cfg = dataclasses.replace(
                cfg, out_dir=out, run_id=f"{cfg.run_id}-{label}",
                schedule=dataclasses.replace(cfg.schedule, mode="coevolve", s_rl=s_rl, s_opd=s_opd),
            )
            res = run_training(run_cfg)
            beh = [r["mean_overlap"] for r in res.metrics if "mean_overlap" in r and r["phase"] != "init"]
            branch_accs = [a for name, accs in res.evals.items() if name != "final" for a in accs.values()]
            row = SweepRow(label, s_rl, s_opd, float(np.mean(list(res.evals["final"].values()))),
                           float(np.mean(branch_accs)), float(np.mean(beh)) if beh else 1.0)
            writer.record(i, 0, "sweep", **dataclasses.asdict(row))
            rows.append(row)
    finally:
        if own:
            writer.close()
    return rows
