"""Run configuration: typed dataclasses plus a strict YAML loader.

Unknown keys anywhere in the document are errors, and every validation
failure names the offending field (``grpo.eps_low: ...``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .grpo import ClipBounds, ConfigError, GRPOConfig
from .opd import OPDConfig
from .tasks import DEFAULT_WINDOW, DOMAINS, VOCAB

SCHEMA_VERSION = 1
MODES = ("coevolve", "expert", "mixed-rlvr", "static-opd", "mopd")
TOPOLOGIES = ("full", "hub-and-spoke")


@dataclass(frozen=True)
class BranchSpec:
    id: str
    domain: str
    beta: float = 1.0

    def __post_init__(self) -> None:
        if not self.id or "|" in self.id or "/" in self.id:
            raise ConfigError(f"branch id {self.id!r} must be non-empty without '|' or '/'")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; registered: {sorted(DOMAINS)}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class Schedule:
    mode: str = "coevolve"
    cycles: int = 1
    s_rl: int = 0
    s_opd: int = 0
    topology: str = "full"
    hub: str | None = None
    student: str | None = None  # static-opd: the branch that is distilled into
    teacher: str | None = None  # static-opd: the frozen teacher branch

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cycles < 1:
            raise ConfigError(f"cycles must be >= 1, got {self.cycles}")
        if self.s_rl < 0 or self.s_opd < 0:
            raise ConfigError("s_rl and s_opd must be >= 0")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.topology == "hub-and-spoke" and not self.hub:
            raise ConfigError("hub-and-spoke topology needs a hub branch id")

    @property
    def steps_per_branch(self) -> int:
        return self.cycles * (self.s_rl + self.s_opd)


@dataclass(frozen=True)
class MergeSpec:
    weights: tuple[float, ...] | None = None  # None: uniform

    def __post_init__(self) -> None:
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            object.__setattr__(self, "weights", w)
            if any(x < 0 for x in w):
                raise ConfigError("merge weights must be nonnegative")
            if abs(sum(w) - 1.0) > 1e-9:
                raise ConfigError(f"merge weights must sum to 1, got {sum(w)}")

    def resolve(self, n: int) -> tuple[float, ...]:
        if self.weights is None:
            return (1.0 / n,) * n
        if len(self.weights) != n:
            raise ConfigError(f"{len(self.weights)} merge weights for {n} branches")
        return self.weights


@dataclass(frozen=True)
class MetricsConfig:
    k: int | None = None  # None: min(10, vocab - 1)
    probe_prompts: int = 4  # per configured domain
    probe_rollouts: int = 1
    probe_seed: int = 0
    every: int = 1

    def __post_init__(self) -> None:
        if self.k is not None and not 1 <= self.k <= VOCAB.size:
            raise ConfigError(f"k must lie in [1, {VOCAB.size}], got {self.k}")
        if self.probe_prompts < 1 or self.probe_rollouts < 1 or self.every < 1:
            raise ConfigError("probe_prompts, probe_rollouts and every must be >= 1")

    def resolved_k(self) -> int:
        return self.k if self.k is not None else min(10, VOCAB.size - 1)


@dataclass(frozen=True)
class EvalConfig:
    n_prompts: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_prompts < 1:
            raise ConfigError("n_prompts must be >= 1")


@dataclass(frozen=True)
class PilotConfig:
    teacher_steps: int = 300
    teacher_checkpoint: str | None = None
    temperatures: tuple[float, ...] = (0.3, 0.5, 0.75, 1.0, 1.5, 2.0)
    student_steps: int = 60
    distill_steps: int = 40
    distill_replicates: int = 1
    drift_interval: int = 20
    drift_measurements: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if any(not t > 0 for t in self.temperatures):
            raise ConfigError("pilot temperatures must be > 0")
        for name in ("teacher_steps", "student_steps", "distill_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.distill_replicates < 1:
            raise ConfigError("distill_replicates must be >= 1")
        if self.drift_interval < 1 or self.drift_measurements < 1:
            raise ConfigError("drift_interval and drift_measurements must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    branches: tuple[BranchSpec, ...]
    schedule: Schedule = Schedule()
    grpo: GRPOConfig = GRPOConfig()
    opd: OPDConfig = OPDConfig()
    metrics: MetricsConfig = MetricsConfig()
    merge: MergeSpec = MergeSpec()
    eval: EvalConfig = EvalConfig()
    pilot: PilotConfig = PilotConfig()
    run_id: str = "run"
    seed: int = 0
    out_dir: str | None = None
    workers: int = 1
    window: int = DEFAULT_WINDOW

    def __post_init__(self) -> None:
        object.__setattr__(self, "branches", tuple(self.branches))
        validate(self)

    @property
    def branch_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.branches)

    def branch(self, branch_id: str) -> BranchSpec:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise ConfigError(f"unknown branch {branch_id!r}")


def validate(cfg: TrainConfig) -> None:
    """Cross-field checks that no single section can make on its own."""
    ids = [b.id for b in cfg.branches]
    if not ids:
        raise ConfigError("branches: at least one branch required")
    if len(set(ids)) != len(ids):
        raise ConfigError(f"branches: duplicate ids in {ids}")
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.window < 1:
        raise ConfigError("policy.window must be >= 1")
    s = cfg.schedule
    if s.mode == "coevolve" and len(ids) < 2:
        raise ConfigError("schedule.mode: coevolve needs at least two branches")
    if s.hub is not None and s.hub not in ids:
        raise ConfigError(f"schedule.hub: unknown branch {s.hub!r}")
    if s.mode == "static-opd":
        if len(ids) < 2:
            raise ConfigError("schedule.mode: static-opd needs at least two branches")
        student = s.student or ids[0]
        teacher = s.teacher or next(i for i in ids if i != student)
        for name, v in (("student", student), ("teacher", teacher)):
            if v not in ids:
                raise ConfigError(f"schedule.{name}: unknown branch {v!r}")
        if student == teacher:
            raise ConfigError("schedule: static-opd student and teacher must differ")
    if cfg.merge.weights is not None and len(cfg.merge.weights) != len(ids):
        raise ConfigError(f"merge.weights: {len(cfg.merge.weights)} weights for {len(ids)} branches")


# -- YAML mapping -------------------------------------------------------------

_SECTIONS = {
    "schedule": Schedule,
    "opd": OPDConfig,
    "metrics": MetricsConfig,
    "merge": MergeSpec,
    "eval": EvalConfig,
    "pilot": PilotConfig,
}
_TOP_KEYS = {"schema_version", "run_id", "seed", "out_dir", "workers", "policy", "branches", "grpo", *_SECTIONS}


def _build(section: str, cls, data: Any, rename: dict | None = None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)} | set(rename or {})
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown}")
    kwargs = {(rename or {}).get(k, k): v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{section}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def _grpo_from(data: Any) -> GRPOConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("grpo: expected a mapping")
    data = dict(data)
    clip_keys = {k: data.pop(k) for k in ("eps_low", "eps_high") if k in data}
    try:
        clip = ClipBounds(**clip_keys)
    except ConfigError as e:
        raise ConfigError(f"grpo.{next(iter(clip_keys), 'clip')}: {e}") from None
    return _build("grpo", GRPOConfig, {**data, "clip": clip})


def config_from_dict(doc: Any) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    policy = doc.get("policy") or {}
    if not isinstance(policy, dict) or set(policy) - {"vocab_size", "window"}:
        raise ConfigError(f"policy: allowed keys are vocab_size, window; got {policy!r}")
    if policy.get("vocab_size", VOCAB.size) != VOCAB.size:
        raise ConfigError(f"policy.vocab_size: the task vocabulary has {VOCAB.size} tokens")
    raw_branches = doc.get("branches")
    if not isinstance(raw_branches, list) or not raw_branches:
        raise ConfigError("branches: expected a non-empty list")
    branches = tuple(_build(f"branches[{i}]", BranchSpec, b) for i, b in enumerate(raw_branches))
    kwargs = {name: _build(name, cls, doc.get(name)) for name, cls in _SECTIONS.items()}
    try:
        return TrainConfig(
            branches=branches,
            grpo=_grpo_from(doc.get("grpo")),
            run_id=str(doc.get("run_id", "run")),
            seed=int(doc.get("seed", 0)),
            out_dir=doc.get("out_dir"),
            workers=int(doc.get("workers", 1)),
            window=int(policy.get("window", DEFAULT_WINDOW)),
            **kwargs,
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"config: {e}") from None


def config_to_dict(cfg: TrainConfig) -> dict:
    def plain(obj) -> dict:
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    grpo = plain(cfg.grpo)
    clip = grpo.pop("clip")
    grpo["eps_low"], grpo["eps_high"] = clip.eps_low, clip.eps_high
    doc = {
        "schema_version": SCHEMA_VERSION,
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "workers": cfg.workers,
        "policy": {"vocab_size": VOCAB.size, "window": cfg.window},
        "branches": [plain(b) for b in cfg.branches],
        "grpo": grpo,
    }
    for name in _SECTIONS:
        doc[name] = plain(getattr(cfg, name))
    return doc


def parse_config(text: str) -> TrainConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config: not valid YAML ({e})") from None
    return config_from_dict(doc)


def load_config(path: str | Path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def with_overrides(cfg: TrainConfig, **changes) -> TrainConfig:
    """Copy with top-level fields replaced (used for --seed / --out)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes) if changes else cfg
