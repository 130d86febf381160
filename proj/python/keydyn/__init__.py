"""Keystroke-dynamics authentication: encoder training, scoring and EER evaluation."""

from ._keydyn import (
    KeydynError,
    Model,
    cli,
    eer,
    load_sessions,
    save_sessions,
    score,
    synthesize,
    train,
)

__all__ = [
    "KeydynError",
    "Model",
    "cli",
    "eer",
    "load_sessions",
    "save_sessions",
    "score",
    "synthesize",
    "train",
]
