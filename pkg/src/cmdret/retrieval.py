"""Mixture-of-experts similarity with contextual slots.

Slot layout for a window with ``n_past`` past and ``n_future`` future clips is
``[target, past_1 .. past_P, future_1 .. future_F]`` where ``past_1`` is the
clip immediately before the target. Slot-relative indexing lets windows at
any position in a movie share mixture logits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import ClipRecord


@dataclass
class ContextWindow:
    target: ClipRecord
    past: list = field(default_factory=list)  # nearest first, None where missing
    future: list = field(default_factory=list)

    @property
    def slots(self) -> list:
        return [self.target, *self.past, *self.future]

    @property
    def slot_mask(self) -> np.ndarray:
        return np.array([c is not None for c in self.slots])


def n_slots(n_past: int, n_future: int) -> int:
    return 1 + n_past + n_future


def movie_lookup(clips) -> dict:
    """movie_id -> clips of that movie in temporal order."""
    out: dict[str, list] = {}
    for c in sorted(clips, key=lambda c: (c.movie_id, c.clip_index)):
        out.setdefault(c.movie_id, []).append(c)
    return out


def build_window(clip: ClipRecord, lookup: dict, n_past: int, n_future: int) -> ContextWindow:
    seq = lookup[clip.movie_id]
    pos = next(k for k, c in enumerate(seq) if c.clip_index == clip.clip_index)
    past = [seq[pos - k] if pos - k >= 0 else None for k in range(1, n_past + 1)]
    future = [seq[pos + k] if pos + k < len(seq) else None for k in range(1, n_future + 1)]
    return ContextWindow(clip, past, future)


def window_mask(window: ContextWindow, experts) -> np.ndarray:
    """Presence per (slot, expert): slot exists and its expert stream is present."""
    return np.array([[c is not None and c.present(e) for e in experts] for c in window.slots])


def mixture_weights(h, logits, mask) -> np.ndarray:
    """Softmax of ``h . a_{n,i}`` over present (slot, expert) entries.

    ``logits`` has shape ``(..., H)`` and ``mask`` the matching leading shape;
    masked entries get weight exactly 0 and the rest sum to 1.
    """
    h = np.asarray(h, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape[:-1]}")
    if not mask.any():
        raise ValueError("every mixture entry is masked")
    z = logits @ h
    z = np.where(mask, z, -np.inf)
    e = np.where(mask, np.exp(z - z[mask].max()), 0.0)
    return e / e.sum()


def score(h, text_emb, window_emb, mask, logits, char=None) -> float:
    """Score of one (description, window) pair.

    ``text_emb`` is ``K x D``, ``window_emb`` is ``N x K x D`` (rows of absent
    entries are ignored), ``mask`` is ``N x K``, ``logits`` ``N x K x H``.
    ``char`` is an optional ``(s_C, a_C)`` pair adding a character term that
    shares the softmax with the experts.
    """
    text_emb = np.asarray(text_emb, dtype=np.float64)
    window_emb = np.asarray(window_emb, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no present expert anywhere in the window")
    N, K = mask.shape
    if char is None:
        w = mixture_weights(h, logits, mask)
        w_c, s_c = 0.0, 0.0
    else:
        s_c, a_c = char
        full = np.concatenate([np.asarray(logits).reshape(N * K, -1), np.asarray(a_c)[None]])
        wf = mixture_weights(h, full, np.append(mask.reshape(-1), True))
        w, w_c = wf[:-1].reshape(N, K), wf[-1]
    total = 0.0
    for n in range(N):
        for i in range(K):
            if mask[n, i]:
                total += w[n, i] * float(text_emb[i] @ window_emb[n, i])
    return total + w_c * s_c


@dataclass
class SimilarityMatrix:
    scores: np.ndarray  # queries x gallery
    query_ids: list
    gallery_ids: list

    def __post_init__(self):
        if self.scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise ValueError("score grid does not match id lists")
        if not np.isfinite(self.scores).all():
            raise ValueError("similarity matrix has non-finite entries")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query", *self.gallery_ids])
            for qid, row in zip(self.query_ids, self.scores):
                w.writerow([qid, *(repr(float(x)) for x in row)])

    @classmethod
    def from_csv(cls, path) -> "SimilarityMatrix":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        gallery = rows[0][1:]
        queries = [r[0] for r in rows[1:]]
        scores = np.array([[float(x) for x in r[1:]] for r in rows[1:]]).reshape(len(queries), len(gallery))
        return cls(scores, queries, gallery)


def clip_id(clip: ClipRecord) -> str:
    return f"{clip.movie_id}:{clip.clip_index}"


def similarity_matrix(model, queries, gallery, lookup: dict | None = None,
                      with_characters: bool = False, chunk: int = 64) -> SimilarityMatrix:
    """Score every query description against every gallery clip's window."""
    lookup = lookup if lookup is not None else movie_lookup(gallery)
    rows = [
        model.score_matrix(queries[k:k + chunk], gallery, lookup, with_characters)
        for k in range(0, len(queries), chunk)
    ]
    scores = np.concatenate(rows, axis=0) if rows else np.zeros((0, len(gallery)))
    return SimilarityMatrix(scores, [clip_id(q) for q in queries], [clip_id(g) for g in gallery])


def export_matrix(sm: SimilarityMatrix, path) -> Path:
    path = Path(path)
    sm.to_csv(path)
    return path
