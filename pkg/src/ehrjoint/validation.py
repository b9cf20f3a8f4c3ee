"""Input checks shared by the estimators."""
from __future__ import annotations

from typing import Iterable

from sklearn.utils.validation import check_is_fitted as _sk_check_is_fitted

TASK_NAMES = ("mlm", "mlp", "rc", "ap")


def check_is_fitted(estimator, attribute: str = "model_"):
    _sk_check_is_fitted(estimator, attributes=[attribute])


def check_pair_dataset(X, min_size: int = 1):
    from .data import PairDataset
    if not isinstance(X, PairDataset):
        raise TypeError(f"expected a PairDataset, got {type(X).__name__}")
    if len(X) < min_size:
        raise ValueError(f"dataset has {len(X)} pairs, need at least {min_size}")
    return X


def check_tasks(tasks: Iterable[str] | str) -> list[str]:
    if isinstance(tasks, str):
        tasks = [t for t in tasks.split(",") if t]
    tasks = [t.strip().lower() for t in tasks]
    if not tasks:
        raise ValueError("at least one pre-training task must be active")
    unknown = sorted(set(tasks) - set(TASK_NAMES))
    if unknown:
        raise ValueError(f"unknown tasks {unknown}; choose from {TASK_NAMES}")
    # canonical order, duplicates dropped
    return [t for t in TASK_NAMES if t in tasks]


def check_probability(p: float, name: str = "p", open_low: bool = False) -> float:
    p = float(p)
    if not (0.0 < p <= 1.0 if open_low else 0.0 <= p <= 1.0):
        raise ValueError(f"{name}={p} outside {'(0, 1]' if open_low else '[0, 1]'}")
    return p
