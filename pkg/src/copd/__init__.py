"""Co-evolving policy distillation at desk scale.

Parallel branches of a tiny linear-softmax policy alternate GRPO on their own
synthetic domain with mutual on-policy distillation, and are finally merged.
"""
from __future__ import annotations

from .config import TrainConfig, load_config, parse_config
from .orchestrator import merge, run_training
from .policy import Policy, Vocab, load_checkpoint, save_checkpoint

__all__ = [
    "Policy", "TrainConfig", "Vocab", "load_checkpoint", "load_config", "merge",
    "parse_config", "run_training", "save_checkpoint",
]
__version__ = "0.1.0"
