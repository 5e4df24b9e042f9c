"""Ranking metrics for next-visit diagnosis prediction."""

from __future__ import annotations

from typing import Iterable

import numpy as np


def rank_codes(scores: np.ndarray) -> np.ndarray:
    """Code indices by descending score; ties go to the lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64).reshape(-1), kind="stable")


def precision_at_k(scores: np.ndarray, truth: np.ndarray | Iterable[int], k: int) -> float:
    """|top-k ∩ truth| / min(k, |truth|).

    ``truth`` is either a multi-hot numpy vector the length of ``scores`` or
    any other collection of code indices.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores).reshape(-1)
    if isinstance(truth, np.ndarray) and truth.reshape(-1).shape == scores.shape:
        true_idx = set(np.flatnonzero(truth.reshape(-1)).tolist())
    else:
        true_idx = {int(i) for i in np.asarray(list(truth)).reshape(-1)}
    if not true_idx:
        raise ValueError("precision@k is undefined for an empty truth set")
    top = rank_codes(scores)[:k]
    hits = sum(1 for c in top.tolist() if c in true_idx)
    return hits / min(k, len(true_idx))
