"""Continual merging baselines.

All three methods consume the task-vector stream one vector at a time and
keep only the running merged vector, matching the constant-memory contract
of the mask-trained merger they are compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .params import ParamVector

_METHODS = ("swa", "task_arithmetic", "ties")


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "swa"
    scaling: float = 0.3  # task-arithmetic coefficient
    trim_fraction: float = 0.2  # ties top-magnitude keep rate

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ConfigError(f"unknown baseline method '{self.method}'")
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ConfigError(f"trim_fraction must be in (0, 1], got {self.trim_fraction}")
        if not math.isfinite(self.scaling):
            raise ConfigError(f"scaling must be finite, got {self.scaling}")


def continual_swa(theta0: ParamVector, task_vectors: Sequence[ParamVector]) -> ParamVector:
    """Running average of task vectors, updated incrementally."""
    if len(task_vectors) < 1:
        raise DataError("need at least one task vector")
    avg = task_vectors[0]
    for t, delta in enumerate(task_vectors[1:], start=2):
        avg = ParamVector(
            {n: avg[n] + (delta[n] - avg[n]) / t for n in avg.layers()}
        )
    return avg


def continual_task_arithmetic(
    theta0: ParamVector, task_vectors: Sequence[ParamVector], scaling: float
) -> ParamVector:
    """Sequentially accumulated sum of task vectors, scaled once."""
    if len(task_vectors) < 1:
        raise DataError("need at least one task vector")
    acc = task_vectors[0]
    for delta in task_vectors[1:]:
        acc = ParamVector({n: acc[n] + delta[n] for n in acc.layers()})
    return ParamVector({n: scaling * acc[n] for n in acc.layers()})


def _trim(flat: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Zero all but the top trim_fraction entries by absolute value."""
    keep = math.ceil(trim_fraction * flat.size)
    if keep >= flat.size:
        return flat.copy()
    order = np.argsort(np.abs(flat), kind="stable")
    out = flat.copy()
    out[order[: flat.size - keep]] = 0.0
    return out


def ties_merge_pair(
    merged: ParamVector, incoming: ParamVector, trim_fraction: float
) -> ParamVector:
    """One trim / elect / disjoint-merge step of streaming ties-merging.

    Zero-magnitude sign ties elect positive, a fixed rule the source
    method leaves open.
    """
    a = _trim(merged.flatten(), trim_fraction)
    b = _trim(incoming.flatten(), trim_fraction)
    pos_mass = np.maximum(a, 0.0) + np.maximum(b, 0.0)
    neg_mass = np.maximum(-a, 0.0) + np.maximum(-b, 0.0)
    elected = np.where(pos_mass >= neg_mass, 1.0, -1.0)
    agree_a = (a != 0.0) & (np.sign(a) == elected)
    agree_b = (b != 0.0) & (np.sign(b) == elected)
    count = agree_a.astype(np.float64) + agree_b.astype(np.float64)
    total = np.where(agree_a, a, 0.0) + np.where(agree_b, b, 0.0)
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return merged.with_flat(out)


def continual_ties(
    theta0: ParamVector, task_vectors: Sequence[ParamVector], trim_fraction: float
) -> ParamVector:
    """Pairwise streaming ties-merging in stream order."""
    if len(task_vectors) < 2:
        raise DataError("need at least two task vectors")
    merged = task_vectors[0]
    for incoming in task_vectors[1:]:
        merged = ties_merge_pair(merged, incoming, trim_fraction)
    return merged


def run_baseline(
    theta0: ParamVector, task_vectors: Sequence[ParamVector], cfg: BaselineConfig
) -> ParamVector:
    if cfg.method == "swa":
        return continual_swa(theta0, task_vectors)
    if cfg.method == "task_arithmetic":
        return continual_task_arithmetic(theta0, task_vectors, cfg.scaling)
    return continual_ties(theta0, task_vectors, cfg.trim_fraction)
