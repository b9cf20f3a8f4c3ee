"""Ranking, classification and overlap metrics, plus a mean/std report over seeds."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.metrics import average_precision_score, f1_score, precision_recall_curve

REPORT_SEEDS = (1, 12, 123, 1234, 42)


@dataclass
class RankingResult:
    ranks: np.ndarray
    pool_size: int

    def __post_init__(self):
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if np.any(self.ranks < 1) or np.any(self.ranks > self.pool_size):
            raise ValueError(f"ranks must lie in [1, {self.pool_size}]")

    def summary(self, ks=(1, 5, 10)) -> dict[str, float]:
        out = {f"hits@{k}": hits_at_k(self.ranks, k) for k in ks}
        out["mrr"] = mrr(self.ranks)
        return out


@dataclass
class PrCurvePoint:
    threshold: float
    precision: float
    recall: float


def _ranks(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks given")
    if np.any(r < 1):
        raise ValueError("ranks start at 1")
    return r


def hits_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    r = _ranks(ranks)
    return float(np.count_nonzero(r <= k)) / r.size


def mrr(ranks) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def rank_of_true(scores, true_index: int) -> int:
    """1 + strictly higher scores + equal scores earlier in pool order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty candidate pool")
    t = s[true_index]
    return 1 + int(np.count_nonzero(s > t)) + int(np.count_nonzero(s[:true_index] == t))


def auprc(scores, labels) -> float:
    """Average precision with tied scores forming a single threshold."""
    y = np.asarray(labels).astype(int)
    if y.sum() == 0:
        raise ValueError("auprc needs at least one positive label")
    return float(average_precision_score(y, np.asarray(scores, dtype=np.float64)))


def pr_curve(scores, labels) -> list[PrCurvePoint]:
    p, r, t = precision_recall_curve(np.asarray(labels).astype(int), np.asarray(scores, dtype=np.float64))
    return [PrCurvePoint(float(th), float(pp), float(rr)) for pp, rr, th in zip(p[:-1], r[:-1], t)]


def f1(predictions, labels) -> float:
    pred = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if pred.shape != y.shape:
        raise ValueError(f"predictions {pred.shape} and labels {y.shape} differ in shape")
    if pred.size == 0:
        return 0.0
    return float(f1_score(y, pred, zero_division=0.0))


# ------------------------------------------------------------------ rouge

def words(text: str) -> list[str]:
    return text.lower().split()


def _f(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_scores(candidate: Sequence[str], reference: Sequence[str], variant: str) -> tuple[float, float, float]:
    """(precision, recall, F1) for ``RG2`` or ``RGL``."""
    c, r = list(candidate), list(reference)
    if not c or not r:
        return 0.0, 0.0, 0.0
    if variant == "RGL":
        lcs = lcs_length(c, r)
        p, rec = lcs / len(c), lcs / len(r)
        return p, rec, _f(p, rec)
    if variant == "RG2":
        cb, rb = Counter(zip(c, c[1:])), Counter(zip(r, r[1:]))
        if not cb or not rb:
            # single-token sequences have no bigrams
            v = 1.0 if c == r else 0.0
            return v, v, v
        overlap = sum((cb & rb).values())
        p, rec = overlap / sum(cb.values()), overlap / sum(rb.values())
        return p, rec, _f(p, rec)
    raise ValueError(f"unknown rouge variant {variant!r}; use RG2 or RGL")


def rouge(candidate, reference, variant: str = "RGL") -> float:
    """F1 variant; strings are lowercased and split on whitespace."""
    if isinstance(candidate, str):
        candidate = words(candidate)
    if isinstance(reference, str):
        reference = words(reference)
    return rouge_scores(candidate, reference, variant)[2]


# ------------------------------------------------------------------ reports

def seed_report(per_seed: Mapping[int, Mapping[str, float]]) -> dict:
    """Mean and sample standard deviation of every metric across seeds."""
    if not per_seed:
        raise ValueError("no runs to summarise")
    names = sorted({k for m in per_seed.values() for k in m})
    summary = {}
    for name in names:
        vals = np.array([m[name] for m in per_seed.values() if name in m], dtype=np.float64)
        summary[name] = {"mean": float(vals.mean()),
                         "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
                         "n": int(vals.size)}
    return {"seeds": sorted(per_seed), "per_seed": {str(k): dict(v) for k, v in per_seed.items()},
            "summary": summary}


def write_report(report: dict, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
