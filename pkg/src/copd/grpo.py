"""GRPO: group-normalized advantages and the clipped token-level surrogate."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .policy import NonFiniteError, Policy, Rollout, apply_update, log_softmax, sample_rollout
from .seeding import derive_seed
from .tasks import MAX_COMPLETION, RewardedGroup, reward


class ConfigError(ValueError):
    """Invalid hyperparameter or schedule setting."""


@dataclass(frozen=True)
class ClipBounds:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self) -> None:
        if not 0.0 < self.eps_low < 1.0:
            raise ConfigError(f"eps_low must lie in (0, 1), got {self.eps_low}")
        if not self.eps_high > 0.0:
            raise ConfigError(f"eps_high must be positive, got {self.eps_high}")


@dataclass(frozen=True)
class GRPOConfig:
    """Per-step RLVR hyperparameters shared by Phase I and the native half of Phase II."""

    group_size: int = 16
    batch_size: int = 16
    clip: ClipBounds = ClipBounds()
    kl_coeff: float = 0.0
    learning_rate: float = 3.0
    temperature: float = 1.0
    max_len: int = MAX_COMPLETION

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kl_coeff < 0:
            raise ConfigError(f"kl_coeff must be >= 0, got {self.kl_coeff}")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")


@dataclass(frozen=True)
class GroupAdvantages:
    values: tuple[float, ...]
    degenerate: bool


@dataclass(frozen=True)
class Branch:
    """One co-evolving learner bound to a capability domain."""

    id: str
    domain: str
    policy: Policy
    beta: float = 1.0
    step: int = 0


@dataclass(frozen=True)
class StepStats:
    mean_reward: float
    mean_abs_advantage: float
    clip_fraction: float
    n_rollouts: int
    n_tokens: int
    degenerate_groups: int = 0
    cross_tokens: int = 0
    mean_delta: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in self.__dict__.items()}


def group_advantages(rewards: Sequence[float]) -> GroupAdvantages:
    """(r - mean) / std with population std; all-equal groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError(f"group size must be >= 2, got {r.size}")
    if np.all(r == r[0]):
        return GroupAdvantages((0.0,) * r.size, True)
    d = r - r.mean()
    # (d / s) / std(d / s) == d / std(d); dividing by the largest deviation first
    # keeps the squares away from underflow when the rewards are nearly equal
    d /= np.max(np.abs(d))
    d -= d.mean()
    adv = d / math.sqrt(float(np.mean(d * d)))
    assert abs(adv.mean()) < 1e-9 and abs(adv.std() - 1.0) < 1e-9, "advantage normalization broken"
    return GroupAdvantages(tuple(float(a) for a in adv), False)


def clipped_surrogate(ratio: float, advantage: float, bounds: ClipBounds) -> float:
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - bounds.eps_low), 1.0 + bounds.eps_high)
    return min(ratio * advantage, clipped * advantage)


def is_clipped(ratio: float, advantage: float, bounds: ClipBounds) -> bool:
    """True where the clipped branch of the min is selected (zero gradient)."""
    return (advantage > 0 and ratio > 1.0 + bounds.eps_high) or (
        advantage < 0 and ratio < 1.0 - bounds.eps_low
    )


def accumulate_surrogate(
    grad: np.ndarray,
    policy: Policy,
    rollout: Rollout,
    advantages: Sequence[float],
    weight: float,
    bounds: ClipBounds,
) -> tuple[int, int]:
    """Add ``weight / |y|`` times the gradient of the clipped surrogate summed over tokens.

    ``advantages`` holds one value per completion token. Returns
    (clipped token count, token count).
    """
    n = len(rollout.completion)
    if n == 0:
        return 0, 0
    T = rollout.temperature
    scale = weight / n
    clipped = 0
    for (prefix, tok), blp, adv in zip(rollout.prefixes(), rollout.behavior_logprobs, advantages):
        if adv == 0.0:
            continue
        ctx = policy.context(prefix)
        lp = policy.log_probs(ctx, T)
        ratio = math.exp(lp[tok] - blp)
        if is_clipped(ratio, adv, bounds):
            clipped += 1
            continue
        coef = -np.exp(lp)
        coef[tok] += 1.0
        coef *= scale * adv * ratio / T
        grad[:, policy.columns(ctx)] += coef[:, None]
    return clipped, n


def accumulate_kl(grad: np.ndarray, policy: Policy, reference: Policy, rollout: Rollout,
                  coeff: float, weight: float) -> float:
    """Subtract ``coeff`` times the gradient of per-state KL(policy || reference).

    Returns the length-normalized KL summed over the rollout's states.
    """
    n = len(rollout.completion)
    if n == 0:
        return 0.0
    total = 0.0
    for prefix, _ in rollout.prefixes():
        ctx = policy.context(prefix)
        ls = policy.log_probs(ctx)
        lr = reference.log_probs(ctx)
        s = np.exp(ls)
        kl = float(np.dot(s, ls - lr))
        total += kl
        g_logits = s * (ls - lr - kl)
        grad[:, policy.columns(ctx)] -= (coeff * weight / n) * g_logits[:, None]
    return total / n


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_groups(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    group_size: int,
    seed: int,
    temperature: float = 1.0,
    max_len: int = MAX_COMPLETION,
    workers: int = 1,
) -> list[RewardedGroup]:
    """G rollouts per prompt, each with its own derived seed, scored by the prompt's domain."""

    def one(item):
        i, prompt = item
        rollouts = tuple(
            sample_rollout(policy, prompt, max_len, temperature, derive_seed(seed, i, j))
            for j in range(group_size)
        )
        return RewardedGroup(tuple(prompt), rollouts,
                             tuple(reward(prompt, r.completion) for r in rollouts))

    return _map(one, list(enumerate(prompts)), workers)


def grpo_gradient(
    policy: Policy,
    groups: Sequence[RewardedGroup],
    bounds: ClipBounds,
    kl_coeff: float = 0.0,
    reference: Policy | None = None,
) -> tuple[np.ndarray, StepStats]:
    """Ascent direction of the group-averaged, length-normalized clipped surrogate."""
    if not groups:
        raise ConfigError("empty prompt batch")
    if kl_coeff > 0 and reference is None:
        raise ConfigError("kl_coeff > 0 needs a reference policy")
    grad = np.zeros(policy.shape)
    n_groups = len(groups)
    clipped = tokens = degenerate = 0
    rewards: list[float] = []
    abs_adv: list[float] = []
    for group in groups:
        adv = group_advantages(group.rewards)
        degenerate += adv.degenerate
        rewards.extend(group.rewards)
        abs_adv.extend(abs(a) for a in adv.values)
        w = 1.0 / (n_groups * len(group.rollouts))
        for rollout, a in zip(group.rollouts, adv.values):
            c, n = accumulate_surrogate(grad, policy, rollout, [a] * len(rollout.completion), w, bounds)
            clipped += c
            tokens += n
            if kl_coeff > 0:
                accumulate_kl(grad, policy, reference, rollout, kl_coeff, w)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite GRPO gradient")
    stats = StepStats(
        mean_reward=float(np.mean(rewards)),
        mean_abs_advantage=float(np.mean(abs_adv)),
        clip_fraction=clipped / tokens if tokens else 0.0,
        n_rollouts=len(rewards),
        n_tokens=tokens,
        degenerate_groups=degenerate,
    )
    return grad, stats


def grpo_step(
    branch: Branch,
    prompts: Sequence[Sequence[int]],
    group_size: int,
    bounds: ClipBounds,
    kl_coeff: float,
    reference: Policy | None,
    learning_rate: float,
    seed: int,
    temperature: float = 1.0,
    max_len: int = MAX_COMPLETION,
    workers: int = 1,
) -> tuple[Branch, StepStats]:
    """One on-policy GRPO update of ``branch`` on ``prompts``."""
    if not prompts:
        raise ConfigError("empty prompt batch")
    groups = sample_groups(branch.policy, prompts, group_size, seed, temperature, max_len, workers)
    grad, stats = grpo_gradient(branch.policy, groups, bounds, kl_coeff, reference)
    policy = apply_update(branch.policy, grad, learning_rate)
    return replace(branch, policy=policy, step=branch.step + 1), stats
