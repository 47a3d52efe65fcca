"""Feature tensors on disk, dataset manifests, and the synthetic dataset generator.

Tensor files ("CMDT") are laid out as::

    b"CMDT" | u8 version (=1) | u8 dtype code (0 = f32) | u32 rank | rank x u32 shape | f32 payload

All integers and floats are little-endian. Manifests are JSON lines, one record
per line, with ``kind`` in {"text", "expert", "movie", "clip", "split"}; tensor
paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

MAGIC = b"CMDT"
VERSION = 1
DTYPE_F32 = 0

# pretrained-extractor feature sizes; face and motion sizes are configurable guesses
DEFAULT_EXPERT_DIMS = {"object": 2048, "scene": 2208, "motion": 1024, "face": 256, "subtitles": 1024}
DEFAULT_TEXT_DIM = 1024

SPLITS = ("train", "val", "test")


class TensorFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    array: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.array, dtype="<f4")
        if arr.ndim == 0 or min(arr.shape) < 1:
            raise TensorFormatError(f"all dimensions must be >= 1, got shape {arr.shape}")
        object.__setattr__(self, "array", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTensor):
            return NotImplemented
        return self.shape == other.shape and self.array.tobytes() == other.array.tobytes()


class Absent(Enum):
    """Marks an expert stream that is missing for a clip (distinct from zeros)."""

    ABSENT = "absent"

    def __repr__(self) -> str:
        return "ABSENT"


ABSENT = Absent.ABSENT


def tensor_bytes(t: FeatureTensor) -> bytes:
    header = MAGIC + bytes([VERSION, DTYPE_F32]) + struct.pack("<I", len(t.shape))
    header += struct.pack(f"<{len(t.shape)}I", *t.shape)
    return header + t.array.tobytes()


def write_tensor(path, t) -> None:
    if not isinstance(t, FeatureTensor):
        t = FeatureTensor(np.asarray(t))
    Path(path).write_bytes(tensor_bytes(t))


def parse_tensor(buf: bytes) -> FeatureTensor:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    if len(buf) < 10:
        raise TensorFormatError("truncated header")
    if buf[4] != VERSION:
        raise TensorFormatError(f"unsupported version {buf[4]}")
    if buf[5] != DTYPE_F32:
        raise TensorFormatError(f"unsupported dtype code {buf[5]}")
    (rank,) = struct.unpack_from("<I", buf, 6)
    if rank == 0:
        raise TensorFormatError("rank must be >= 1")
    off = 10 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    if min(shape) < 1:
        raise TensorFormatError(f"shape has a zero dimension: {shape}")
    payload = buf[off:]
    if len(payload) % 4:
        raise TensorFormatError("truncated payload")
    if len(payload) // 4 != math.prod(shape):
        raise TensorFormatError(
            f"shape-data mismatch: shape {shape} needs {math.prod(shape)} floats, payload has {len(payload) // 4}"
        )
    return FeatureTensor(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())


def read_tensor(path) -> FeatureTensor:
    return parse_tensor(Path(path).read_bytes())


@dataclass
class FaceTrack:
    track_id: int
    actor: int | None  # cast-list index, None = unlabeled
    length: int
    embedding: np.ndarray

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("track length must be positive")
        self.embedding = np.asarray(self.embedding, dtype=np.float64)


@dataclass
class ClipRecord:
    movie_id: str
    clip_index: int
    expert_features: dict  # expert name -> FeatureTensor | ABSENT
    description_tokens: FeatureTensor
    face_tracks: list = field(default_factory=list)
    mentioned_actors: list = field(default_factory=list)
    description: str = ""
    duration: float = 0.0
    # planted latent code, only set for synthetic data
    latent: np.ndarray | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.movie_id, self.clip_index)

    def present(self, expert: str) -> bool:
        return self.expert_features.get(expert, ABSENT) is not ABSENT


@dataclass
class Movie:
    movie_id: str
    cast: list
    plot: list = field(default_factory=list)
    plot_embeddings: FeatureTensor | None = None
    duration: float = 0.0
    # planted clip -> sentence alignment (synthetic only)
    plot_truth: list | None = None


@dataclass
class DatasetManifest:
    experts: dict  # name -> declared dim, insertion ordered
    text_dim: int
    movies: dict  # movie_id -> Movie
    clips: list  # sorted by (movie_id, clip_index)
    splits: dict  # movie_id -> split label

    def movie_clips(self, movie_id: str) -> list:
        return [c for c in self.clips if c.movie_id == movie_id]

    def split_clips(self, split: str) -> list:
        return [c for c in self.clips if self.splits.get(c.movie_id) == split]

    def split_movies(self, split: str) -> list:
        return [m for m in self.movies if self.splits.get(m) == split]


def _as_tensor(value, base: Path) -> FeatureTensor:
    if isinstance(value, str):
        return read_tensor(base / value)
    return FeatureTensor(np.asarray(value, dtype=np.float32))


def _check_dim(t: FeatureTensor, dim: int, what: str) -> None:
    if t.shape[-1] != dim:
        raise ManifestError(f"{what}: feature dim {t.shape[-1]} != declared {dim}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    experts: dict[str, int] = {}
    text_dim = None
    movies: dict[str, Movie] = {}
    raw_clips, raw_splits = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"line {lineno}: {e}") from None
        kind = rec.get("kind")
        if kind == "expert":
            experts[rec["name"]] = int(rec["dim"])
        elif kind == "text":
            text_dim = int(rec["dim"])
        elif kind == "movie":
            mid = rec["movie_id"]
            if mid in movies:
                raise ManifestError(f"line {lineno}: duplicate movie {mid!r}")
            pe = rec.get("plot_embeddings")
            movies[mid] = Movie(
                movie_id=mid,
                cast=list(rec.get("cast", [])),
                plot=list(rec.get("plot", [])),
                plot_embeddings=None if pe is None else _as_tensor(pe, base),
                duration=float(rec.get("duration", 0.0)),
                plot_truth=rec.get("plot_truth"),
            )
        elif kind == "clip":
            raw_clips.append((lineno, rec))
        elif kind == "split":
            raw_splits.append((lineno, rec))
        else:
            raise ManifestError(f"line {lineno}: unknown record kind {kind!r}")

    splits: dict[str, str] = {}
    for lineno, rec in raw_splits:
        mid, split = rec["movie_id"], rec["split"]
        if split not in SPLITS:
            raise ManifestError(f"line {lineno}: unknown split {split!r}")
        if mid not in movies:
            raise ManifestError(f"line {lineno}: dangling reference to movie {mid!r}")
        if mid in splits and splits[mid] != split:
            raise ManifestError(f"split conflict: movie {mid!r} in both {splits[mid]} and {split}")
        splits[mid] = split

    clips, seen = [], set()
    for lineno, rec in raw_clips:
        mid = rec["movie_id"]
        if mid not in movies:
            raise ManifestError(f"line {lineno}: dangling reference to movie {mid!r}")
        idx = int(rec["clip_index"])
        if idx < 0:
            raise ManifestError(f"line {lineno}: negative clip_index")
        if (mid, idx) in seen:
            raise ManifestError(f"line {lineno}: duplicate clip_index {idx} in movie {mid!r}")
        seen.add((mid, idx))
        feats = {}
        for name, value in rec.get("experts", {}).items():
            if name not in experts:
                raise ManifestError(f"line {lineno}: undeclared expert {name!r}")
            if value is None:
                feats[name] = ABSENT
            else:
                feats[name] = t = _as_tensor(value, base)
                _check_dim(t, experts[name], f"line {lineno} expert {name}")
        for name in experts:
            feats.setdefault(name, ABSENT)
        tokens = _as_tensor(rec["description_tokens"], base)
        if tokens.array.ndim != 2:
            raise ManifestError(f"line {lineno}: description_tokens must be W x D")
        if text_dim is None:
            text_dim = tokens.shape[1]
        _check_dim(tokens, text_dim, f"line {lineno} description_tokens")
        tracks = [
            FaceTrack(t["track_id"], t.get("actor"), int(t["length"]), np.asarray(t["embedding"]))
            for t in rec.get("face_tracks", [])
        ]
        latent = rec.get("latent")
        clips.append(
            ClipRecord(
                movie_id=mid,
                clip_index=idx,
                expert_features=feats,
                description_tokens=tokens,
                face_tracks=tracks,
                mentioned_actors=[int(a) for a in rec.get("mentioned_actors", [])],
                description=rec.get("description", ""),
                duration=float(rec.get("duration", 0.0)),
                latent=None if latent is None else np.asarray(latent, dtype=np.float64),
            )
        )
    clips.sort(key=lambda c: (c.movie_id, c.clip_index))
    by_movie: dict[str, list] = {}
    for c in clips:
        by_movie.setdefault(c.movie_id, []).append(c.clip_index)
    for mid, idx in by_movie.items():
        if idx != list(range(idx[0], idx[0] + len(idx))):
            raise ManifestError(f"movie {mid!r}: clip indices are not contiguous: {idx}")
    return DatasetManifest(experts, text_dim or DEFAULT_TEXT_DIM, movies, clips, splits)


def _fmt_list(a: np.ndarray) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float32)]


def write_dataset(manifest: DatasetManifest, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write the manifest plus one tensor file per feature; returns the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"kind": "text", "dim": manifest.text_dim})]
    for name, dim in manifest.experts.items():
        lines.append(json.dumps({"kind": "expert", "name": name, "dim": dim}))
    for mid, mv in manifest.movies.items():
        rec = {"kind": "movie", "movie_id": mid, "cast": mv.cast, "plot": mv.plot, "duration": mv.duration}
        if mv.plot_embeddings is not None:
            rel = f"features/{mid}__plot.cmdt"
            write_tensor(out / rel, mv.plot_embeddings)
            rec["plot_embeddings"] = rel
        if mv.plot_truth is not None:
            rec["plot_truth"] = list(mv.plot_truth)
        lines.append(json.dumps(rec))
    for c in manifest.clips:
        stem = f"features/{c.movie_id}__{c.clip_index:04d}"
        experts = {}
        for name in manifest.experts:
            t = c.expert_features.get(name, ABSENT)
            if t is ABSENT:
                experts[name] = None
            else:
                write_tensor(out / f"{stem}__{name}.cmdt", t)
                experts[name] = f"{stem}__{name}.cmdt"
        write_tensor(out / f"{stem}__desc.cmdt", c.description_tokens)
        rec = {
            "kind": "clip",
            "movie_id": c.movie_id,
            "clip_index": c.clip_index,
            "experts": experts,
            "description_tokens": f"{stem}__desc.cmdt",
            "description": c.description,
            "duration": c.duration,
            "mentioned_actors": c.mentioned_actors,
            "face_tracks": [
                {"track_id": t.track_id, "actor": t.actor, "length": t.length, "embedding": _fmt_list(t.embedding)}
                for t in c.face_tracks
            ],
        }
        if c.latent is not None:
            rec["latent"] = _fmt_list(c.latent)
        lines.append(json.dumps(rec))
    for mid, split in manifest.splits.items():
        lines.append(json.dumps({"kind": "split", "movie_id": mid, "split": split}))
    path = out / manifest_name
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    n_movies: int = 5
    clips_per_movie: int = 4
    expert_dims: dict = field(default_factory=lambda: {"scene": 24, "object": 24, "motion": 16})
    text_dim: int = 16
    latent_dim: int = 3
    cast_size: int = 4
    face_dim: int = 16
    frames: int = 4
    words: tuple = (3, 6)
    snr: float = 10.0  # math.inf for noiseless features
    missing_rate: float = 0.0  # per (clip, expert) drop rate; the first expert is never dropped
    plot_extra: int = 4  # unmatched plot sentences per movie
    context_weight: float = 0.0  # share of the previous clip's code mixed into each description
    split_fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0


ACTOR_NAMES = ("Alice", "Bruno", "Carmen", "Dmitri", "Elena", "Farid", "Greta", "Hiro",
               "Ines", "Jonas", "Kaya", "Lars", "Mina", "Nadia", "Omar", "Priya")


def synth_identities(spec: SynthSpec) -> np.ndarray:
    """Unit face identity vectors, one per (movie, cast slot)."""
    rng = np.random.default_rng([spec.seed, 1])
    ids = rng.standard_normal((spec.n_movies * spec.cast_size, spec.face_dim))
    return ids / np.linalg.norm(ids, axis=1, keepdims=True)


def _split_labels(n: int, fractions) -> list:
    n_val, n_test = round(n * fractions[1]), round(n * fractions[2])
    if fractions[1] > 0 and n >= 3:
        n_val = max(1, n_val)
    if fractions[2] > 0 and n >= 2:
        n_test = max(1, n_test)
    n_test = min(n_test, n)
    n_val = min(n_val, n - n_test)
    return ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test


def generate_synth(spec: SynthSpec) -> DatasetManifest:
    """Planted-correspondence dataset: text and every expert view share one latent code per clip.

    Expert frames are ``P_e z + noise`` and description tokens ``Q z + noise``
    with fixed random maps ``P_e``, ``Q`` shared across the dataset; noise std
    is ``1/snr`` relative to unit-variance codes. With ``context_weight > 0``
    descriptions also carry part of the previous clip's code, which makes
    past context informative.
    """
    if spec.n_movies < 1 or spec.clips_per_movie < 1:
        raise ValueError("need at least one clip")
    if not spec.expert_dims:
        raise ValueError("need at least one expert")
    rng = np.random.default_rng(spec.seed)
    L = spec.latent_dim
    maps = {name: rng.standard_normal((dim, L)) / math.sqrt(L) for name, dim in spec.expert_dims.items()}
    text_map = rng.standard_normal((spec.text_dim, L)) / math.sqrt(L)
    noise = 0.0 if math.isinf(spec.snr) else 1.0 / spec.snr
    identities = synth_identities(spec)
    first_expert = next(iter(spec.expert_dims))
    labels = _split_labels(spec.n_movies, spec.split_fractions)

    movies, clips, splits = {}, [], {}
    for m in range(spec.n_movies):
        mid = f"m{m:03d}"
        cast = [f"{ACTOR_NAMES[(m * spec.cast_size + k) % len(ACTOR_NAMES)]}{m}" for k in range(spec.cast_size)]
        n_sent = spec.clips_per_movie + spec.plot_extra
        truth = sorted(rng.choice(n_sent, size=spec.clips_per_movie, replace=False).tolist())
        plot_codes = rng.standard_normal((n_sent, L))
        durations = rng.uniform(60.0, 180.0, size=spec.clips_per_movie)
        prev_z = None
        for c in range(spec.clips_per_movie):
            z = rng.standard_normal(L)
            plot_codes[truth[c]] = z
            feats = {}
            for name, P in maps.items():
                frames = (P @ z)[None, :] + noise * rng.standard_normal((spec.frames, P.shape[0]))
                drop = name != first_expert and rng.random() < spec.missing_rate
                feats[name] = ABSENT if drop else FeatureTensor(frames)
            W = int(rng.integers(spec.words[0], spec.words[1] + 1))
            text_code = z if prev_z is None else z + spec.context_weight * prev_z
            tokens = (text_map @ text_code)[None, :] + noise * rng.standard_normal((W, spec.text_dim))
            prev_z = z
            n_present = int(rng.integers(1, min(3, spec.cast_size) + 1))
            present = sorted(rng.choice(spec.cast_size, size=n_present, replace=False).tolist())
            tracks = []
            for k, a in enumerate(present):
                emb = identities[m * spec.cast_size + a] + 0.05 * rng.standard_normal(spec.face_dim)
                emb /= np.linalg.norm(emb)
                tracks.append(FaceTrack(k, a, int(rng.integers(5, 60)), emb))
            mentioned = [a for a in present if rng.random() < 0.7] or [present[0]]
            desc = " and ".join(cast[a] for a in mentioned) + f" in scene {c}"
            clips.append(
                ClipRecord(mid, c, feats, FeatureTensor(tokens), tracks, mentioned, desc,
                           float(durations[c]), latent=z.astype(np.float32).astype(np.float64))
            )
        plot_emb = (plot_codes @ text_map.T) + noise * rng.standard_normal((n_sent, spec.text_dim))
        movies[mid] = Movie(mid, cast, [f"{mid} plot sentence {s}" for s in range(n_sent)],
                            FeatureTensor(plot_emb), float(durations.sum() / 0.15), truth)
        splits[mid] = labels[m]
    return DatasetManifest(dict(spec.expert_dims), spec.text_dim, movies, clips, splits)


def planted_codes(manifest: DatasetManifest, spec: SynthSpec):
    """Recover latent codes from descriptions and from the first expert by least squares.

    Returns ``(text_codes, video_codes)``, both ``n_clips x latent_dim``. For
    noiseless data both equal the planted codes.
    """
    rng = np.random.default_rng(spec.seed)
    L = spec.latent_dim
    maps = {name: rng.standard_normal((dim, L)) / math.sqrt(L) for name, dim in spec.expert_dims.items()}
    text_map = rng.standard_normal((spec.text_dim, L)) / math.sqrt(L)
    first = next(iter(spec.expert_dims))
    tp, vp = np.linalg.pinv(text_map), np.linalg.pinv(maps[first])
    text = np.stack([tp @ c.description_tokens.array.astype(np.float64).mean(0) for c in manifest.clips])
    video = np.stack([vp @ c.expert_features[first].array.astype(np.float64).mean(0) for c in manifest.clips])
    return text, video


def generate_actor_images(spec: SynthSpec, n_images: int = 40, distractor_frac: float = 0.2,
                          noise: float = 0.15) -> dict:
    """Per-actor sets of web-image face embeddings: mostly the true identity, some distractors."""
    identities = synth_identities(spec)
    rng = np.random.default_rng([spec.seed, 2])
    out = {}
    for m in range(spec.n_movies):
        for k in range(spec.cast_size):
            name = f"{ACTOR_NAMES[(m * spec.cast_size + k) % len(ACTOR_NAMES)]}{m}"
            n_true = n_images - int(round(distractor_frac * n_images))
            base = identities[m * spec.cast_size + k]
            embs = base + noise * rng.standard_normal((n_true, spec.face_dim)) / math.sqrt(spec.face_dim)
            distract = rng.standard_normal((n_images - n_true, spec.face_dim))
            embs = np.concatenate([embs, distract])
            embs /= np.linalg.norm(embs, axis=1, keepdims=True)
            out[name] = embs[rng.permutation(n_images)]
    return out
