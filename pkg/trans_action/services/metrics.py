"""Top-k selection and class-averaged recall."""

from typing import Dict, Iterable, Optional

import numpy as np


def tie_break_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """k class indices ordered by (score descending, class index ascending), along the last axis."""
    scores = np.asarray(scores)
    # A stable sort keeps equal scores in index order
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def topk_hits(probs: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: does the target sit among the row's top-k classes?"""
    probs = np.atleast_2d(np.asarray(probs))
    n_classes = probs.shape[1]
    if k < 1 or k > n_classes:
        raise ValueError(f"k={k} must lie in [1, {n_classes}]")
    ranked = tie_break_topk(probs, k)
    return (ranked == np.asarray(targets)[:, None]).any(axis=1)


def topk_recall_per_class(
    probs: np.ndarray, targets: np.ndarray, k: int, class_set: Optional[Iterable[int]] = None
) -> Dict[int, float]:
    """Recall@k of each class in `class_set` that has at least one instance."""
    targets = np.asarray(targets, dtype=np.int64)
    hits = topk_hits(probs, targets, k) if targets.size else np.zeros(0, dtype=bool)
    classes = np.unique(targets) if class_set is None else sorted(set(int(c) for c in class_set))
    recalls = {}
    for c in classes:
        members = targets == c
        if members.any():
            recalls[int(c)] = float(hits[members].mean())
    return recalls


def mean_topk_recall(
    probs: np.ndarray, targets: np.ndarray, k: int, class_set: Optional[Iterable[int]] = None
) -> Optional[float]:
    """Macro average of per-class recall@k as a percentage; None when no class is instantiated."""
    recalls = topk_recall_per_class(probs, targets, k, class_set)
    if not recalls:
        return None
    return 100.0 * float(np.mean(list(recalls.values())))


def top1_accuracy(probs: np.ndarray, targets: np.ndarray) -> float:
    targets = np.asarray(targets)
    if not targets.size:
        return 0.0
    return 100.0 * float(topk_hits(probs, targets, 1).mean())
