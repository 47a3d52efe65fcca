"""Retrieval metrics and the cross-movie / within-movie protocols."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .retrieval import SimilarityMatrix, movie_lookup, similarity_matrix


@dataclass
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    median_rank: float
    mean_rank: float
    n_queries: int
    per_movie: dict = field(default_factory=dict)  # movie_id -> RetrievalReport (within-movie only)

    def row(self) -> dict:
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "MedR": self.median_rank, "MeanR": self.mean_rank}


def ranks_of_truth(scores: np.ndarray, truth_cols: np.ndarray) -> np.ndarray:
    """1 + number of gallery items scoring strictly higher than the true item."""
    true = scores[np.arange(len(truth_cols)), truth_cols]
    return 1 + (scores > true[:, None]).sum(axis=1)


def metrics_from_ranks(ranks) -> RetrievalReport:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no queries to evaluate")
    n = ranks.size
    return RetrievalReport(
        r1=100.0 * int((ranks <= 1).sum()) / n,
        r5=100.0 * int((ranks <= 5).sum()) / n,
        r10=100.0 * int((ranks <= 10).sum()) / n,
        median_rank=float(np.median(ranks)),
        mean_rank=float(np.mean(ranks)),
        n_queries=int(ranks.size),
    )


def rank_metrics(sm: SimilarityMatrix, truth: dict | None = None) -> RetrievalReport:
    """Metrics for a similarity matrix; ``truth`` maps query id -> gallery id (default: same id)."""
    col = {g: k for k, g in enumerate(sm.gallery_ids)}
    cols = []
    for q in sm.query_ids:
        t = q if truth is None else truth[q]
        if t not in col:
            raise KeyError(f"true item {t!r} for query {q!r} is not in the gallery")
        cols.append(col[t])
    return metrics_from_ranks(ranks_of_truth(sm.scores, np.array(cols, dtype=np.intp)))


def eval_cross_movie(model, manifest, split: str = "test") -> tuple[RetrievalReport, SimilarityMatrix]:
    clips = manifest.split_clips(split)
    if not clips:
        raise ValueError(f"{split} split is empty")
    sm = similarity_matrix(model, clips, clips, movie_lookup(clips), with_characters=False)
    return rank_metrics(sm), sm


def within_movie_movies(manifest, split: str = "test", min_clips: int = 5) -> list:
    lookup = movie_lookup(manifest.split_clips(split))
    return [m for m, cl in lookup.items() if len(cl) >= min_clips]


def average_reports(reports: dict) -> RetrievalReport:
    """Unweighted mean over movies of every metric."""
    if not reports:
        raise ValueError("no movie survives the filter")
    rs = list(reports.values())
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in rs]))  # noqa: E731
    return RetrievalReport(mean("r1"), mean("r5"), mean("r10"), mean("median_rank"), mean("mean_rank"),
                           sum(r.n_queries for r in rs), dict(reports))


def eval_within_movie(model, manifest, split: str = "test", min_clips: int = 5,
                      with_characters: bool | None = None) -> RetrievalReport:
    movies = within_movie_movies(manifest, split, min_clips)
    if not movies:
        raise ValueError(f"no movie in {split} has at least {min_clips} clips")
    use_chars = model.cfg.characters if with_characters is None else with_characters
    lookup = movie_lookup(manifest.split_clips(split))
    reports = {}
    for m in movies:
        clips = lookup[m]
        sm = similarity_matrix(model, clips, clips, lookup, with_characters=use_chars)
        reports[m] = rank_metrics(sm)
    return average_reports(reports)


COLUMNS = ("R@1", "R@5", "R@10", "MedR", "MeanR")


def format_table(rows: dict, within: bool = False) -> str:
    """Aligned text table, one row per method, columns in the usual R@K/MedR/MeanR order."""
    cols = ("R@1", "MedR", "MeanR") if within else COLUMNS
    heads = [("m-" + c if within else c) for c in cols]
    width = max([len("Method"), *map(len, rows)])
    out = ["Method".ljust(width) + " | " + " ".join(h.rjust(8) for h in heads)]
    out.append("-" * len(out[0]))
    for name, rep in rows.items():
        vals = rep.row()
        out.append(name.ljust(width) + " | " + " ".join(f"{vals[c]:8.2f}" for c in cols))
    return "\n".join(out) + "\n"


def format_csv(rows: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", *COLUMNS, "n_queries"])
    for name, rep in rows.items():
        vals = rep.row()
        w.writerow([name, *(f"{vals[c]:.6g}" for c in COLUMNS), rep.n_queries])
    return buf.getvalue()

