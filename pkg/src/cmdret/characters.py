"""Character identities: embedding bank, face-track linking and labeling, identity vectors."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensorio import FaceTrack, FeatureTensor, read_tensor, write_tensor

log = logging.getLogger(__name__)

VARIANTS = ("one-hot", "track-frequency", "track-length")


@dataclass
class CharacterBank:
    names: list = field(default_factory=list)
    embeddings: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    cluster_sizes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.names)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if len(self):
            write_tensor(out / "bank.cmdt", FeatureTensor(self.embeddings))
        lines = [f"{n}\t{s}" for n, s in zip(self.names, self.cluster_sizes)]
        (out / "names.txt").write_text("".join(line + "\n" for line in lines))

    @classmethod
    def load(cls, in_dir) -> "CharacterBank":
        d = Path(in_dir)
        rows = [line.split("\t") for line in (d / "names.txt").read_text().splitlines() if line]
        if not rows:
            return cls()
        emb = read_tensor(d / "bank.cmdt").array.astype(np.float64)
        return cls([r[0] for r in rows], emb, [int(r[1]) for r in rows])


@dataclass
class DetectionRecord:
    frame: int
    box: tuple  # x, y, w, h
    embedding: np.ndarray

    def __post_init__(self):
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError(f"box width/height must be positive: {self.box}")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def average_linkage(embeddings: np.ndarray, dist_threshold: float) -> list:
    """Agglomerative clustering, average linkage on cosine distance.

    Merges the closest pair while its distance is <= ``dist_threshold``; ties go
    to the pair with the lowest cluster indices. Returns clusters as sorted
    lists of row indices, ordered by their smallest member.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n = len(X)
    if n == 0:
        return []
    dist = 1.0 - X @ X.T
    np.fill_diagonal(dist, np.inf)
    members = {i: [i] for i in range(n)}
    active = np.ones(n, dtype=bool)
    while active.sum() > 1:
        sub = np.where(active[:, None] & active[None, :], dist, np.inf)
        best = sub.min()
        if best > dist_threshold:
            break
        i, j = np.argwhere(sub == best)[0]  # row-major -> lowest pair first
        ni, nj = len(members[i]), len(members[j])
        # Lance-Williams update for average linkage
        merged = (ni * dist[i] + nj * dist[j]) / (ni + nj)
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        active[j] = False
        members[i] = members[i] + members.pop(j)
    return sorted((sorted(m) for m in members.values()), key=lambda m: m[0])


def build_bank(actor_images: dict, dist_threshold: float = 0.76, min_cluster: int = 30) -> CharacterBank:
    bank = CharacterBank()
    rows = []
    for name, embs in actor_images.items():
        embs = np.asarray(embs, dtype=np.float64)
        if embs.size == 0:
            log.warning("actor %s has no face embeddings; skipped", name)
            continue
        clusters = average_linkage(embs, dist_threshold)
        largest = max(clusters, key=len)  # first of equal size wins
        if len(largest) < min_cluster:
            continue
        bank.names.append(name)
        bank.cluster_sizes.append(len(largest))
        rows.append(_unit(embs[largest].mean(axis=0)))
    if rows:
        bank.embeddings = np.stack(rows)
    return bank


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def link_tracks(detections, iou_weight: float = 0.5, sim_weight: float = 0.5,
                link_threshold: float = 0.5) -> list:
    """Greedy frame-to-frame linking of detections into face tracks.

    A detection in frame ``t`` can only extend a track whose last detection is
    in frame ``t - 1``. Candidate pairs are taken in order of decreasing
    ``iou_weight * IoU + sim_weight * cosine`` and linked while the score is
    >= ``link_threshold``.
    """
    by_frame: dict[int, list] = {}
    for d in detections:
        by_frame.setdefault(d.frame, []).append(d)
    tracks: list[list] = []
    open_tracks: list[int] = []
    prev_frame = None
    for frame in sorted(by_frame):
        dets = by_frame[frame]
        candidates = open_tracks if prev_frame is not None and frame == prev_frame + 1 else []
        pairs = []
        for ti in candidates:
            last = tracks[ti][-1]
            for di, d in enumerate(dets):
                s = iou_weight * iou(last.box, d.box) + sim_weight * float(
                    np.dot(_unit(last.embedding), _unit(d.embedding)))
                pairs.append((-s, ti, di))
        pairs.sort()
        used_t, assigned = set(), {}
        for neg, ti, di in pairs:
            if -neg < link_threshold:
                break
            if ti in used_t or di in assigned:
                continue
            used_t.add(ti)
            assigned[di] = ti
        open_tracks = []
        for di, d in enumerate(dets):
            if di in assigned:
                ti = assigned[di]
                tracks[ti].append(d)
            else:
                ti = len(tracks)
                tracks.append([d])
            open_tracks.append(ti)
        prev_frame = frame
    return [
        FaceTrack(k, None, len(t), _unit(np.mean([_unit(d.embedding) for d in t], axis=0)))
        for k, t in enumerate(tracks)
    ]


def label_tracks(tracks, bank: CharacterBank, assign_threshold: float = 0.8,
                 cast: list | None = None) -> list:
    """Assign each track the most similar bank actor if similarity >= threshold.

    Labels are bank row indices, or indices into ``cast`` when a cast list is
    given (bank actors outside the cast are then ignored).
    """
    if len(bank) == 0:
        return [replace(t, actor=None) for t in tracks]
    rows = list(range(len(bank)))
    if cast is not None:
        lookup = {n: i for i, n in enumerate(bank.names)}
        rows = [lookup[n] for n in cast if n in lookup]
        target = {lookup[n]: k for k, n in enumerate(cast) if n in lookup}
    out = []
    for t in tracks:
        if not rows:
            out.append(replace(t, actor=None))
            continue
        sims = bank.embeddings[rows] @ np.asarray(t.embedding, dtype=np.float64)
        best = int(np.argmax(sims))
        if sims[best] >= assign_threshold:
            row = rows[best]
            out.append(replace(t, actor=target[row] if cast is not None else row))
        else:
            out.append(replace(t, actor=None))
    return out


def find_mentions(text: str, cast: list) -> list:
    """Cast names occurring in ``text`` as whole words, case-insensitive."""
    found = []
    for name in cast:
        if re.search(rf"(?<!\w){re.escape(name)}(?!\w)", text, flags=re.IGNORECASE):
            found.append(name)
    return found


def encode_query_chars(mentions, cast: list) -> np.ndarray:
    if not cast:
        raise ValueError("cast list is empty")
    lookup = {n.lower(): i for i, n in enumerate(cast)}
    y = np.zeros(len(cast))
    for m in mentions:
        i = m if isinstance(m, (int, np.integer)) else lookup.get(str(m).lower())
        if i is None or not 0 <= i < len(cast):
            log.warning("mention %r not in cast list; ignored", m)
            continue
        y[i] = 1.0
    return y


def encode_video_chars(tracks, cast_size: int, variant: str = "track-frequency") -> np.ndarray:
    if variant not in VARIANTS:
        raise ValueError(f"unknown character variant {variant!r}; expected one of {VARIANTS}")
    x = np.zeros(cast_size)
    labeled = [t for t in tracks if t.actor is not None]
    if not labeled:
        return x
    if variant == "one-hot":
        for t in labeled:
            x[t.actor] = 1.0
    elif variant == "track-frequency":
        for t in labeled:
            x[t.actor] += 1.0
        x /= len(labeled)
    else:
        for t in labeled:
            x[t.actor] += t.length
        x /= sum(t.length for t in labeled)
    return x


def char_similarity(y, x) -> float:
    y, x = np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if y.shape != x.shape:
        raise ValueError(f"character vectors differ in length: {y.shape} vs {x.shape}")
    return float(y @ x)
