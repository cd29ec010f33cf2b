"""On-policy distillation between branches.

The student samples completions on the teacher's prompts; at every sampled
token the teacher signal is

    delta = log pi_teacher(y_t | state) - log pi_student(y_t | state)

and ``beta * delta`` is used as a token-level advantage inside the same
clipped, length-normalized surrogate that GRPO uses. The full-vocabulary
alternative ascends -KL(teacher || student) at each visited state instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .grpo import (
    Branch,
    ConfigError,
    GRPOConfig,
    StepStats,
    _map,
    accumulate_surrogate,
    grpo_gradient,
    sample_groups,
)
from .policy import NonFiniteError, Policy, Rollout, apply_update, sample_rollout
from .seeding import derive_seed

LOSS_FORMS = ("delta", "full-kl")


@dataclass(frozen=True)
class OPDConfig:
    loss: str = "delta"
    cross_batch_size: int | None = None  # None: same as the native batch size
    cross_group_size: int | None = None  # None: same as the GRPO group size
    student_beta: float = 1.0  # beta of the fresh student in the mopd baseline

    def __post_init__(self) -> None:
        if self.loss not in LOSS_FORMS:
            raise ConfigError(f"opd loss must be one of {LOSS_FORMS}, got {self.loss!r}")
        for name in ("cross_batch_size", "cross_group_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if not self.student_beta >= 0:
            raise ConfigError(f"student_beta must be >= 0, got {self.student_beta}")


@dataclass(frozen=True, eq=False)
class TeacherSnapshot:
    """Frozen copy of a branch's policy, taken at a step boundary."""

    policy: Policy
    source_branch: str
    taken_at_step: int

    @classmethod
    def of(cls, branch: Branch) -> "TeacherSnapshot":
        # Policy params are already read-only copies, so sharing is safe.
        return cls(branch.policy, branch.id, branch.step)

    @property
    def params(self) -> np.ndarray:
        return self.policy.params


@dataclass(frozen=True)
class CrossBatch:
    prompts: tuple[tuple[int, ...], ...]
    rollouts: tuple[Rollout, ...]
    token_deltas: tuple[tuple[float, ...], ...]
    beta: float
    teacher_id: str = ""

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if len(self.rollouts) != len(self.token_deltas):
            raise ValueError("one delta list per rollout required")
        for r, d in zip(self.rollouts, self.token_deltas):
            if len(r.completion) != len(d):
                raise ValueError("token_deltas must align with completion tokens")


def opd_kl(teacher_dist: np.ndarray, student_dist: np.ndarray) -> float:
    """KL(teacher || student) = sum_v T(v) ln(T(v) / S(v))."""
    t = np.asarray(teacher_dist, dtype=np.float64)
    s = np.asarray(student_dist, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {s.shape}")
    support = t > 0
    if np.any(s[support] <= 0):
        raise ValueError("student assigns zero mass where teacher mass is positive")
    return max(0.0, float(np.sum(t[support] * (np.log(t[support]) - np.log(s[support])))))


def teacher_delta(teacher_logprob: float, student_logprob: float) -> float:
    return teacher_logprob - student_logprob


def token_deltas(student: Policy, teacher: Policy, rollout: Rollout) -> tuple[float, ...]:
    """delta at each completion token, from temperature-1 distributions."""
    out = []
    for prefix, tok in rollout.prefixes():
        ctx = student.context(prefix)
        out.append(teacher_delta(float(teacher.log_probs(ctx)[tok]),
                                 float(student.log_probs(ctx)[tok])))
    return tuple(out)


def build_cross_batch(
    student: Policy,
    teacher: TeacherSnapshot,
    prompts: Sequence[Sequence[int]],
    rollouts_per_prompt: int,
    beta: float,
    seed: int,
    temperature: float = 1.0,
    max_len: int = 4,
    workers: int = 1,
) -> CrossBatch:
    """Student rollouts on the teacher's prompts, annotated with teacher deltas."""

    def one(item):
        i, prompt = item
        rs = [sample_rollout(student, prompt, max_len, temperature, derive_seed(seed, i, j))
              for j in range(rollouts_per_prompt)]
        return [(r, token_deltas(student, teacher.policy, r)) for r in rs]

    pairs = [p for chunk in _map(one, list(enumerate(prompts)), workers) for p in chunk]
    return CrossBatch(
        prompts=tuple(tuple(p) for p in prompts),
        rollouts=tuple(r for r, _ in pairs),
        token_deltas=tuple(d for _, d in pairs),
        beta=beta,
        teacher_id=teacher.source_branch,
    )


def cross_branch_advantages(batch: CrossBatch) -> tuple[tuple[float, ...], ...]:
    """beta * delta per token; no group normalization."""
    if batch.beta < 0:
        raise ConfigError(f"beta must be >= 0, got {batch.beta}")
    return tuple(tuple(batch.beta * d for d in deltas) for deltas in batch.token_deltas)


def cross_gradient(student: Policy, batch: CrossBatch, grpo: GRPOConfig,
                   teacher: Policy | None = None, loss: str = "delta") -> tuple[np.ndarray, int, int]:
    """Ascent direction of one cross sub-batch, averaged over its rollouts.

    Returns (direction, clipped token count, token count).
    """
    grad = np.zeros(student.shape)
    if not batch.rollouts:
        return grad, 0, 0
    weight = 1.0 / len(batch.rollouts)
    clipped = tokens = 0
    if loss == "delta":
        for rollout, adv in zip(batch.rollouts, cross_branch_advantages(batch)):
            c, n = accumulate_surrogate(grad, student, rollout, adv, weight, grpo.clip)
            clipped += c
            tokens += n
    elif loss == "full-kl":
        if teacher is None:
            raise ConfigError("full-kl loss needs the teacher policy")
        if batch.beta == 0:
            return grad, 0, sum(len(r.completion) for r in batch.rollouts)
        for rollout in batch.rollouts:
            n = len(rollout.completion)
            tokens += n
            for prefix, _ in rollout.prefixes():
                ctx = student.context(prefix)
                # d(-KL(T || S)) / d student logits = T - S
                g = np.exp(teacher.log_probs(ctx)) - np.exp(student.log_probs(ctx))
                grad[:, student.columns(ctx)] += (batch.beta * weight / n) * g[:, None]
    else:
        raise ConfigError(f"unknown opd loss {loss!r}")
    return grad, clipped, tokens


def mixed_phase_step(
    branch: Branch,
    teachers: Sequence[TeacherSnapshot],
    native_prompts: Sequence[Sequence[int]],
    cross_prompts: Sequence[Sequence[Sequence[int]]],
    grpo: GRPOConfig,
    opd: OPDConfig,
    native_seed: int,
    cross_seeds: Sequence[int],
    reference: Policy | None = None,
    workers: int = 1,
) -> tuple[Branch, StepStats]:
    """One Phase II update: native GRPO sub-batch plus one cross sub-batch per teacher.

    ``cross_prompts[j]`` and ``cross_seeds[j]`` belong to ``teachers[j]``. The
    update direction is the native sub-batch mean plus the sum of the cross
    sub-batch means, so beta = 0 reduces exactly to a native GRPO step.
    """
    if len(teachers) != len(cross_prompts) or len(teachers) != len(cross_seeds):
        raise ConfigError("teachers, cross_prompts and cross_seeds must align")
    if not native_prompts and not any(cross_prompts):
        raise ConfigError("empty prompt batch")
    policy = branch.policy
    if native_prompts:
        groups = sample_groups(policy, native_prompts, grpo.group_size, native_seed,
                               grpo.temperature, grpo.max_len, workers)
        grad, native = grpo_gradient(policy, groups, grpo.clip, grpo.kl_coeff, reference)
    else:
        grad = np.zeros(policy.shape)
        native = StepStats(0.0, 0.0, 0.0, 0, 0)
    group = opd.cross_group_size or grpo.group_size
    clipped = round(native.clip_fraction * native.n_tokens)
    cross_tokens = 0
    delta_sum = 0.0
    for teacher, prompts, seed in zip(teachers, cross_prompts, cross_seeds):
        if not prompts:
            continue
        batch = build_cross_batch(policy, teacher, prompts, group, branch.beta, seed,
                                  grpo.temperature, grpo.max_len, workers)
        if branch.beta == 0 and opd.loss == "delta":
            # every advantage is zero; skip the pass so the update is untouched
            cross_tokens += sum(len(d) for d in batch.token_deltas)
        else:
            g, c, n = cross_gradient(policy, batch, grpo, teacher.policy, opd.loss)
            grad += g
            clipped += c
            cross_tokens += n
        delta_sum += sum(sum(d) for d in batch.token_deltas)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite Phase II direction")
    tokens = native.n_tokens + cross_tokens
    stats = replace(
        native,
        clip_fraction=clipped / tokens if tokens else 0.0,
        cross_tokens=cross_tokens,
        mean_delta=delta_sum / cross_tokens if cross_tokens else 0.0,
    )
    new_policy = apply_update(policy, grad, grpo.learning_rate)
    return replace(branch, policy=new_policy, step=branch.step + 1), stats


def distillation_objective(student: Policy, batch: CrossBatch) -> float:
    """Length-normalized mean of sum_t beta * delta_t * log pi_student(y_t) over the batch.

    Its gradient at the sampling policy equals the delta-form cross direction,
    which makes it a convenient one-step ascent check.
    """
    total = 0.0
    for rollout, adv in zip(batch.rollouts, cross_branch_advantages(batch)):
        n = len(rollout.completion)
        if n == 0:
            continue
        s = 0.0
        for (prefix, tok), a in zip(rollout.prefixes(), adv):
            s += a * float(student.log_probs(student.context(prefix))[tok])
        total += s / n
    return total / max(len(batch.rollouts), 1)


def kl_estimate_from_samples(student: Policy, teacher: Policy, context: Sequence[int],
                             n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(student || teacher) as E_student[-delta]; returns (mean, stderr)."""
    ls = student.log_probs(context)
    lt = teacher.log_probs(context)
    rng = np.random.default_rng(seed)
    toks = rng.choice(len(ls), size=n, p=np.exp(ls) / np.exp(ls).sum())
    vals = -(lt[toks] - ls[toks])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))
