"""Linear-softmax autoregressive policy over a one-hot context window.

logits(context) = params @ feature(context), where feature is the
concatenation of W one-hot blocks for the last W tokens (left-padded with
BOS). Because the feature is sparse, logits are computed by summing W
columns of ``params`` rather than by a dense matmul.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = "COPD1"


class NonFiniteError(ArithmeticError):
    """Raised when logits or an update direction stop being finite."""


@dataclass(frozen=True)
class Vocab:
    size: int
    bos: int
    eos: int

    def __post_init__(self) -> None:
        if self.size < 4:
            raise ValueError(f"vocab size must be >= 4, got {self.size}")
        if self.bos == self.eos:
            raise ValueError("bos and eos must differ")
        for name, tok in (("bos", self.bos), ("eos", self.eos)):
            if not 0 <= tok < self.size:
                raise ValueError(f"{name}={tok} outside [0, {self.size})")

    @classmethod
    def standard(cls, size: int) -> "Vocab":
        """BOS and EOS occupy the last two ids."""
        return cls(size=size, bos=size - 2, eos=size - 1)


def context_window(tokens: Sequence[int], window: int, bos: int) -> tuple[int, ...]:
    """The last ``window`` tokens, left-padded with BOS."""
    tail = tuple(tokens[-window:]) if window <= len(tokens) else tuple(tokens)
    return (bos,) * (window - len(tail)) + tail


def context_feature(context: Sequence[int], vocab_size: int) -> np.ndarray:
    """Dense one-hot concatenation of a context window (length W * V)."""
    feat = np.zeros(len(context) * vocab_size)
    for w, tok in enumerate(context):
        feat[w * vocab_size + tok] = 1.0
    return feat


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    shifted = z - m
    return shifted - math.log(np.exp(shifted).sum())


@dataclass(frozen=True, eq=False)
class Policy:
    params: np.ndarray
    vocab: Vocab
    window: int

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        arr = np.array(self.params, dtype=np.float64, copy=True)
        expected = (self.vocab.size, self.window * self.vocab.size)
        if arr.shape != expected:
            raise ValueError(f"params shape {arr.shape} != {expected}")
        arr.setflags(write=False)
        object.__setattr__(self, "params", arr)

    @classmethod
    def zeros(cls, vocab: Vocab, window: int) -> "Policy":
        return cls(np.zeros((vocab.size, window * vocab.size)), vocab, window)

    @property
    def shape(self) -> tuple[int, int]:
        return self.params.shape

    def context(self, tokens: Sequence[int]) -> tuple[int, ...]:
        return context_window(tokens, self.window, self.vocab.bos)

    def columns(self, context: Sequence[int]) -> np.ndarray:
        if len(context) != self.window:
            raise ValueError(f"context length {len(context)} != window {self.window}")
        V = self.vocab.size
        return np.array([w * V + tok for w, tok in enumerate(context)], dtype=np.intp)

    def logits(self, context: Sequence[int]) -> np.ndarray:
        z = self.params[:, self.columns(context)].sum(axis=1)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError("non-finite logits; parameters have blown up")
        return z

    def log_probs(self, context: Sequence[int], temperature: float = 1.0) -> np.ndarray:
        z = self.logits(context)
        return log_softmax(z / temperature if temperature != 1.0 else z)

    def same_params(self, other: "Policy") -> bool:
        return (
            self.vocab == other.vocab
            and self.window == other.window
            and np.array_equal(self.params, other.params)
        )


def next_token_distribution(
    policy: Policy, context: Sequence[int], temperature: float = 1.0
) -> np.ndarray:
    """softmax(logits / temperature) at ``context``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return np.exp(policy.log_probs(context, temperature))


@dataclass(frozen=True)
class Rollout:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    behavior_logprobs: tuple[float, ...]
    seed: int
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if len(self.behavior_logprobs) != len(self.completion):
            raise ValueError("behavior_logprobs must align with completion")

    def prefixes(self):
        """Yield (tokens before position t, token at t) for each completion position."""
        seq = self.prompt + self.completion
        n = len(self.prompt)
        for t, tok in enumerate(self.completion):
            yield seq[: n + t], tok


def sample_rollout(
    policy: Policy,
    prompt: Sequence[int],
    max_len: int,
    temperature: float,
    seed: int,
) -> Rollout:
    """Sample a completion until EOS or ``max_len`` tokens."""
    if len(prompt) == 0:
        raise ValueError("prompt must be non-empty")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    rng = np.random.default_rng(seed)
    tokens = list(prompt)
    completion: list[int] = []
    logps: list[float] = []
    last = policy.vocab.size - 1
    for _ in range(max_len):
        lp = policy.log_probs(policy.context(tokens), temperature)
        cdf = np.cumsum(np.exp(lp))
        tok = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), last)
        completion.append(tok)
        logps.append(float(lp[tok]))
        tokens.append(tok)
        if tok == policy.vocab.eos:
            break
    return Rollout(tuple(prompt), tuple(completion), tuple(logps), seed, temperature)


def score_coefficients(
    policy: Policy, context: Sequence[int], token: int, temperature: float = 1.0
) -> np.ndarray:
    """d log pi_T(token|context) / d logits, i.e. (onehot - p_T) / T."""
    coef = -np.exp(policy.log_probs(context, temperature))
    coef[token] += 1.0
    if temperature != 1.0:
        coef /= temperature
    return coef


def logprob_gradient(policy: Policy, context: Sequence[int], token: int) -> np.ndarray:
    """Gradient of log pi(token | context) with respect to params."""
    if not 0 <= token < policy.vocab.size:
        raise ValueError(f"token {token} not in vocab")
    grad = np.zeros(policy.shape)
    grad[:, policy.columns(context)] += score_coefficients(policy, context, token)[:, None]
    return grad


def apply_update(policy: Policy, ascent_direction: np.ndarray, learning_rate: float) -> Policy:
    """params + learning_rate * ascent_direction, as a new Policy."""
    direction = np.asarray(ascent_direction, dtype=np.float64)
    if direction.shape != policy.shape:
        raise ValueError(f"direction shape {direction.shape} != params shape {policy.shape}")
    if not np.all(np.isfinite(direction)):
        raise NonFiniteError("non-finite update direction")
    return Policy(policy.params + learning_rate * direction, policy.vocab, policy.window)


def save_checkpoint(policy: Policy, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{MAGIC} {policy.vocab.size} {policy.window} {policy.params.size}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(policy.params.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str | Path, vocab: Vocab | None = None) -> Policy:
    """Read a checkpoint; BOS/EOS default to the standard layout."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        body = fh.read()
    if len(header) != 4 or header[0] != MAGIC:
        raise ValueError(f"{path}: not a {MAGIC} checkpoint")
    size, window, count = (int(x) for x in header[1:])
    if count != size * size * window or len(body) != 8 * count:
        raise ValueError(f"{path}: parameter count mismatch")
    vocab = vocab or Vocab.standard(size)
    if vocab.size != size:
        raise ValueError(f"{path}: vocab size {size} != expected {vocab.size}")
    params = np.frombuffer(body, dtype="<f8").reshape(size, window * size)
    return Policy(params.astype(np.float64), vocab, window)
