"""Key-value engine with split transactional/data components and five
crash-recovery redo methods over one shared log."""

from .engine import CrashSnapshot, Engine, EngineConfig
from .recovery import METHODS, RecoveryOptions, RecoveryStats, recover

__all__ = [
    "CrashSnapshot",
    "Engine",
    "EngineConfig",
    "METHODS",
    "RecoveryOptions",
    "RecoveryStats",
    "recover",
]
__version__ = "0.1.0"
