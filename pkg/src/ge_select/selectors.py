"""The five data-selection strategies.

Each maps scored or embedded pool data to a deterministic ordered subset of
size min(k, eligible). Ties always break by ascending question id so output
files are reproducible across platforms.
"""

from __future__ import annotations

import random
from typing import Sequence

import numpy as np

from .models import (
    FormatError,
    Question,
    ScoreRecord,
    SelectionItem,
    SelectionResult,
    Trajectory,
)

DEFAULT_REWARD_TOLERANCE = 1e-9


def select_ge(scores: Sequence[ScoreRecord], k: int, ascending: bool = True) -> SelectionResult:
    """Take the k lowest-ge questions (``ascending=False`` for eq5-signed files)."""
    direction = 1.0 if ascending else -1.0
    ranked = sorted(scores, key=lambda s: (direction * s.ge, s.question_id))
    items = tuple(SelectionItem(s.question_id, s.ge) for s in ranked[: max(k, 0)])
    return SelectionResult(strategy="ge", params={"k": k}, items=items)


def select_random(pool: Sequence[Question], k: int, seed: int) -> SelectionResult:
    rng = random.Random(seed)
    chosen = rng.sample(list(pool), min(max(k, 0), len(pool)))
    items = tuple(SelectionItem(q.id, 0.0) for q in chosen)
    return SelectionResult(strategy="random", params={"k": k, "seed": seed}, items=items)


def select_mean_entropy(scores: Sequence[ScoreRecord], k: int) -> SelectionResult:
    for record in scores:
        if record.mean_entropy is None:
            raise FormatError(
                f"score record {record.question_id!r} has no mean_entropy; "
                "entropy selection needs it on every record"
            )
    ranked = sorted(scores, key=lambda s: (-s.mean_entropy, s.question_id))
    items = tuple(
        SelectionItem(s.question_id, s.mean_entropy) for s in ranked[: max(k, 0)]
    )
    return SelectionResult(strategy="entropy", params={"k": k}, items=items)


def select_high_score(
    trajectories: Sequence[Trajectory],
    k: int,
    seed: int,
    reward_tolerance: float = DEFAULT_REWARD_TOLERANCE,
) -> SelectionResult:
    perfect = [t for t in trajectories if abs(t.reward - 1.0) <= reward_tolerance]
    warning = ""
    if len(perfect) < k:
        warning = (
            f"only {len(perfect)} trajectories with reward 1 available for k={k}; "
            "returning all of them"
        )
    rng = random.Random(seed)
    chosen = rng.sample(perfect, min(max(k, 0), len(perfect)))
    items = tuple(SelectionItem(t.question_id, t.reward) for t in chosen)
    return SelectionResult(
        strategy="highscore",
        params={"k": k, "seed": seed},
        items=items,
        warning=warning,
    )


def cosine_similarity_matrix(vectors: Sequence[Sequence[float]]) -> np.ndarray:
    """Pairwise cosine similarity; all-zero vectors are similar to nothing."""
    matrix = np.asarray(vectors, dtype=float)
    if matrix.ndim != 2:
        raise FormatError("embeddings must all have the same dimension")
    norms = np.linalg.norm(matrix, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = matrix / safe[:, None]
    sim = unit @ unit.T
    np.clip(sim, -1.0, 1.0, out=sim)
    return sim


def fl_objective(selected: Sequence[int], sim: np.ndarray) -> float:
    """Facility-location value: sum over points of best (clamped) coverage."""
    sim = np.asarray(sim, dtype=float)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise FormatError("similarity matrix must be square")
    chosen = list(selected)
    if not chosen:
        return 0.0
    coverage = sim[chosen, :].max(axis=0)
    return float(np.maximum(coverage, 0.0).sum())


def select_facility_location(
    ids: Sequence[str],
    embeddings: Sequence[Sequence[float]],
    k: int,
) -> SelectionResult:
    """Greedy facility-location maximization under cosine similarity.

    Item scores are the marginal objective gain at insertion; ties break by
    ascending id. With k=1 this picks the medoid.
    """
    if len(ids) != len(embeddings):
        raise FormatError("ids and embeddings must have equal length")
    n = len(ids)
    budget = min(max(k, 0), n)
    items: list[SelectionItem] = []
    if budget:
        sim = np.maximum(cosine_similarity_matrix(embeddings), 0.0)
        coverage = np.zeros(n)
        remaining = set(range(n))
        order = sorted(range(n), key=lambda i: ids[i])
        for _ in range(budget):
            best_index = -1
            best_gain = -1.0
            for i in order:
                if i not in remaining:
                    continue
                gain = float(np.maximum(sim[i] - coverage, 0.0).sum())
                if gain > best_gain:
                    best_gain = gain
                    best_index = i
            remaining.discard(best_index)
            coverage = np.maximum(coverage, sim[best_index])
            items.append(SelectionItem(ids[best_index], best_gain))
    return SelectionResult(strategy="fl", params={"k": k}, items=tuple(items))
