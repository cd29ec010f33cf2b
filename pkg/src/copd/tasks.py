"""Synthetic verifiable domains sharing one token vocabulary.

Token layout (15 ids)::

    0-6   digits
    7, 8  EVEN, ODD
    9     "+"  unary increment marker (modsum operand b)
    10    "="  modsum query separator
    11    "<"  reverse query separator
    12    "?"  parity query separator
    13    BOS
    14    EOS

Prompts are ``BOS <body> SEP``; the separator identifies the domain. A
completion earns reward 1 iff it equals the target followed by EOS.

modsum writes its second operand in unary (``BOS a + + =`` asks for
(a + 2) mod 7). A linear-softmax policy cannot represent an interaction
between two digit tokens, but it can read b off the slot where ``a`` sits.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .policy import Policy, Rollout, Vocab, sample_rollout
from .seeding import derive_seed

N_DIGITS = 7
EVEN, ODD = 7, 8
PLUS = 9
SEP_SUM, SEP_REV, SEP_PAR = 10, 11, 12
BOS, EOS = 13, 14
VOCAB = Vocab(size=15, bos=BOS, eos=EOS)
TOKEN_NAMES = tuple(str(d) for d in range(N_DIGITS)) + ("E", "O", "+", "=", "<", "?", "<s>", "</s>")
MAX_COMPLETION = 4
DEFAULT_WINDOW = 5


class UnknownDomainError(KeyError):
    pass


def _digits_body(payload: tuple[int, ...]) -> tuple[int, ...]:
    return payload


@dataclass(frozen=True)
class Domain:
    id: str
    separator: int
    payload_ranges: tuple[tuple[int, int], ...]
    target_fn: Callable[[tuple[int, ...]], tuple[int, ...]]
    body_fn: Callable[[tuple[int, ...]], tuple[int, ...]] = _digits_body
    description: str = ""
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for payload in self.payloads():
            self._index[self.prompt_for(payload)] = payload

    def payloads(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(lo, hi) for lo, hi in self.payload_ranges)))

    def sample_payload(self, rng: np.random.Generator) -> tuple[int, ...]:
        return tuple(int(rng.integers(lo, hi)) for lo, hi in self.payload_ranges)

    def prompt_for(self, payload: Sequence[int]) -> tuple[int, ...]:
        return (BOS, *self.body_fn(tuple(payload)), self.separator)

    def payload_of(self, prompt: Sequence[int]) -> tuple[int, ...] | None:
        """Payload of a well-formed prompt for this domain, else None."""
        return self._index.get(tuple(prompt))

    @property
    def eval_set(self) -> list[tuple[int, ...]]:
        return eval_prompts(self, 64, 0)


def _modsum(payload: tuple[int, ...]) -> tuple[int, ...]:
    a, b = payload
    return ((a + b) % N_DIGITS,)


def _modsum_body(payload: tuple[int, ...]) -> tuple[int, ...]:
    a, b = payload
    return (a,) + (PLUS,) * b


def _reverse(payload: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(reversed(payload))


def _parity(payload: tuple[int, ...]) -> tuple[int, ...]:
    # payload read as a decimal numeral; its parity is that of the last digit
    return (EVEN if payload[-1] % 2 == 0 else ODD,)


DOMAINS: dict[str, Domain] = {
    d.id: d
    for d in (
        Domain("modsum", SEP_SUM, ((0, N_DIGITS), (1, 4)), _modsum, _modsum_body,
               "emit (a + b) mod 7; b in 1..3 written as repeated '+'"),
        Domain("reverse", SEP_REV, ((0, N_DIGITS),) * 2, _reverse,
               description="emit the two payload digits in reverse order"),
        Domain("parity", SEP_PAR, ((0, N_DIGITS),) * 2, _parity,
               description="emit EVEN/ODD for the payload read as a decimal number"),
    )
}
_BY_SEPARATOR = {d.separator: d for d in DOMAINS.values()}


def get_domain(domain: str | Domain) -> Domain:
    if isinstance(domain, Domain):
        return domain
    try:
        return DOMAINS[domain]
    except KeyError:
        raise UnknownDomainError(
            f"unknown domain {domain!r}; registered: {sorted(DOMAINS)}"
        ) from None


def domain_of(prompt: Sequence[int]) -> Domain:
    """Look up a prompt's domain from its query separator."""
    try:
        return _BY_SEPARATOR[prompt[-1]]
    except (KeyError, IndexError):
        raise UnknownDomainError(f"prompt {tuple(prompt)} has no known separator") from None


def generate_prompt(domain: str | Domain, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(prompt tokens, hidden target) drawn deterministically from ``seed``."""
    dom = get_domain(domain)
    payload = dom.sample_payload(np.random.default_rng(seed))
    return dom.prompt_for(payload), dom.target_fn(payload)


def target_of(domain: str | Domain, prompt: Sequence[int]) -> tuple[int, ...] | None:
    dom = get_domain(domain)
    payload = dom.payload_of(prompt)
    return None if payload is None else dom.target_fn(payload)


def verify(domain: str | Domain, prompt: Sequence[int], completion: Sequence[int]) -> int:
    target = target_of(domain, prompt)
    if target is None:
        return 0
    return int(tuple(completion) == target + (EOS,))


def reward(prompt: Sequence[int], completion: Sequence[int]) -> int:
    """Verify against whichever domain the prompt belongs to."""
    return verify(domain_of(prompt), prompt, completion)


def sample_prompts(domain: str | Domain, n: int, *keys: int | str) -> list[tuple[int, ...]]:
    dom = get_domain(domain)
    return [generate_prompt(dom, derive_seed(*keys, "prompt", dom.id, i))[0] for i in range(n)]


def eval_prompts(domain: str | Domain, n: int, seed: int) -> list[tuple[int, ...]]:
    """Held-out prompts; the "eval" key keeps these seeds apart from training draws."""
    return sample_prompts(domain, n, "eval", seed)


def exhaustive_prompts(domain: str | Domain) -> list[tuple[int, ...]]:
    dom = get_domain(domain)
    return [dom.prompt_for(p) for p in dom.payloads()]


@dataclass(frozen=True)
class RewardedGroup:
    prompt: tuple[int, ...]
    rollouts: tuple[Rollout, ...]
    rewards: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.rollouts) != len(self.rewards):
            raise ValueError("rollouts and rewards must have equal length")


def informative(passes: int, n_samples: int) -> bool:
    """A prompt teaches GRPO something only if its pass rate is strictly inside (0, 1)."""
    return 0 < passes < n_samples


def pass_rate_filter(
    domain: str | Domain,
    policy: Policy,
    prompts: Iterable[Sequence[int]],
    n_samples: int,
    seed: int,
    temperature: float = 1.0,
    max_len: int = MAX_COMPLETION,
) -> list[tuple[int, ...]]:
    """Keep prompts whose empirical pass rate lies strictly inside (0, 1)."""
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    dom = get_domain(domain)
    kept = []
    for i, prompt in enumerate(prompts):
        passes = sum(
            verify(dom, prompt, sample_rollout(
                policy, prompt, max_len, temperature, derive_seed(seed, "filter", i, j)
            ).completion)
            for j in range(n_samples)
        )
        if informative(passes, n_samples):
            kept.append(tuple(prompt))
    if not kept:
        warnings.warn(f"pass-rate filter removed every prompt for {dom.id}", RuntimeWarning)
    return kept


def greedy_decode(policy: Policy, prompt: Sequence[int], max_len: int = MAX_COMPLETION) -> tuple[int, ...]:
    """Argmax decoding; ties go to the lowest token id."""
    tokens = list(prompt)
    out = []
    for _ in range(max_len):
        tok = int(np.argmax(policy.logits(policy.context(tokens))))
        out.append(tok)
        tokens.append(tok)
        if tok == EOS:
            break
    return tuple(out)


def accuracy(policy: Policy, domain: str | Domain, prompts: Sequence[Sequence[int]],
             max_len: int = MAX_COMPLETION) -> float:
    dom = get_domain(domain)
    if not prompts:
        return 0.0
    return sum(verify(dom, p, greedy_decode(policy, p, max_len)) for p in prompts) / len(prompts)


def write_eval_set(prompts: Iterable[Sequence[int]], path: str | Path) -> None:
    Path(path).write_text("".join(" ".join(map(str, p)) + "\n" for p in prompts))


def read_eval_set(path: str | Path) -> list[tuple[int, ...]]:
    return [tuple(int(t) for t in line.split()) for line in Path(path).read_text().splitlines() if line.strip()]


def oracle_policy(domain_ids: Iterable[str], window: int = DEFAULT_WINDOW) -> Policy:
    """Hand-built linear policy solving the given domains under greedy decoding.

    Any combination including parity is jointly solvable. modsum and reverse
    both claim the digit-to-digit blocks at window positions -3 and -4 and
    cannot be solved together by a linear-softmax policy.
    """
    if window < DEFAULT_WINDOW:
        raise ValueError(f"oracle construction needs window >= {DEFAULT_WINDOW}")
    ids = set(domain_ids)
    unknown = ids - set(DOMAINS)
    if unknown:
        raise UnknownDomainError(f"unknown domains {sorted(unknown)}")
    V = VOCAB.size
    params = np.zeros((V, window * V))

    def P(back: int) -> np.ndarray:
        # P(b)[v, t]: vote of token t sitting b positions from the end for next token v
        w = window - back
        return params[:, w * V:(w + 1) * V]

    digits = list(range(N_DIGITS))
    if "parity" in ids:
        for d in digits:
            P(2)[EVEN if d % 2 == 0 else ODD, d] = 20.0
        P(1)[[EVEN, ODD], SEP_PAR] = 60.0
        P(1)[digits, SEP_PAR] = -200.0
        P(2)[EOS, SEP_PAR] = 300.0
    if "modsum" in ids:
        for b in range(1, 4):
            for a in digits:
                P(b + 2)[(a + b) % N_DIGITS, a] += 10.0
        P(1)[digits, SEP_SUM] = 100.0
        P(1)[[EVEN, ODD], SEP_SUM] = -200.0
        P(2)[EOS, SEP_SUM] = 300.0
    if "reverse" in ids:
        for d in digits:
            P(2)[d, d] += 10.0
            P(4)[d, d] += 10.0
        P(1)[[EVEN, ODD], SEP_REV] = -200.0
        P(3)[EOS, SEP_REV] = 300.0
    return Policy(params, VOCAB, window)
