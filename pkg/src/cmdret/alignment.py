"""Jumping DTW: order-preserving one-to-one alignment of clips to plot sentences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AlignmentResult:
    assignment: list  # clip k -> sentence index, strictly increasing
    cost: float
    n_sentences: int
    skipped: list = field(default_factory=list)


@dataclass
class CoverageStats:
    sentence_coverage: float
    span: float
    midpoint: float
    duration_fraction: float | None = None


def cosine_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise ``1 - cos`` between rows of ``a`` and rows of ``b``; zero rows count as orthogonal."""
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    return 1.0 - unit(np.asarray(a, dtype=np.float64)) @ unit(np.asarray(b, dtype=np.float64)).T


def jdtw_cost_matrix(cost: np.ndarray) -> AlignmentResult:
    """Minimum-cost strictly increasing assignment for a ``V x S`` cost matrix.

    ``acc[v, s]`` is the best cost of placing clips ``0..v`` with clip ``v`` on
    sentence ``s``; its predecessor is the prefix minimum over sentences ``< s``.
    Ties go to the smaller sentence index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    V, S = cost.shape
    if V == 0 or S == 0:
        raise ValueError("alignment needs at least one clip and one sentence")
    if V > S:
        raise ValueError(f"cannot align {V} clips to only {S} sentences one-to-one")
    acc = np.full((V, S), np.inf)
    back = np.zeros((V, S), dtype=np.intp)
    acc[0] = cost[0]
    for v in range(1, V):
        prev = acc[v - 1]
        # running argmin over prev[:s], first occurrence on ties
        best_idx = np.zeros(S, dtype=np.intp)
        best_val = np.full(S, np.inf)
        run_val, run_idx = np.inf, 0
        for s in range(1, S):
            if prev[s - 1] < run_val:
                run_val, run_idx = prev[s - 1], s - 1
            best_val[s], best_idx[s] = run_val, run_idx
        acc[v] = cost[v] + best_val
        back[v] = best_idx
    last = int(np.argmin(acc[-1]))
    path = [last]
    for v in range(V - 1, 0, -1):
        path.append(int(back[v, path[-1]]))
    path.reverse()
    used = set(path)
    return AlignmentResult(path, float(acc[-1, last]), S, [s for s in range(S) if s not in used])


def jdtw(clip_embs, sent_embs) -> AlignmentResult:
    clip_embs = np.atleast_2d(np.asarray(clip_embs, dtype=np.float64))
    sent_embs = np.atleast_2d(np.asarray(sent_embs, dtype=np.float64))
    if clip_embs.shape[1] != sent_embs.shape[1]:
        raise ValueError(f"embedding dims differ: {clip_embs.shape[1]} vs {sent_embs.shape[1]}")
    return jdtw_cost_matrix(cosine_cost(clip_embs, sent_embs))


def coverage_stats(alignments, clip_durations=None, movie_durations=None) -> CoverageStats:
    """Per-movie sentence coverage (mean), covered span (median) and span midpoint (mean).

    Durations (per movie: list of clip durations, and total movie duration)
    give the pooled fraction of movie time covered by the clips.
    """
    alignments = list(alignments)
    if not alignments or any(not a.assignment for a in alignments):
        raise ValueError("coverage needs non-empty alignments")
    cov, span, mid = [], [], []
    for a in alignments:
        n = a.n_sentences
        first, last = min(a.assignment), max(a.assignment)
        cov.append(len(set(a.assignment)) / n)
        span.append((last - first + 1) / n)
        mid.append((first + last) / 2 / n)
    frac = None
    if clip_durations is not None and movie_durations is not None:
        frac = float(sum(sum(d) for d in clip_durations) / sum(movie_durations))
    return CoverageStats(float(np.mean(cov)), float(np.median(span)), float(np.mean(mid)), frac)
