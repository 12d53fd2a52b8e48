"""Scooping reward models with calibrated deep kernels (Python bindings)."""

from ._core import (
    KcmdError,
    compute_threshold,
    eval_kshot,
    eval_replay,
    gen_data,
    gp_posterior,
    train,
)

__all__ = [
    "KcmdError",
    "compute_threshold",
    "eval_kshot",
    "eval_replay",
    "gen_data",
    "gp_posterior",
    "train",
]
