"""Learnable retrieval model: text/video expert encoders plus contextual mixture weights."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import characters, encoders
from .retrieval import build_window, n_slots, window_mask
from .tensorio import DEFAULT_EXPERT_DIMS, DEFAULT_TEXT_DIM, ClipRecord


@dataclass
class ModelConfig:
    expert_dims: dict = field(default_factory=lambda: dict(DEFAULT_EXPERT_DIMS))
    text_dim: int = DEFAULT_TEXT_DIM
    dim: int = 512
    gate_dim: int | None = None  # hidden width of the gated units, defaults to ``dim``
    clusters: int = 10
    n_past: int = 3
    n_future: int = 3
    characters: bool = False
    char_variant: str = "track-frequency"

    def __post_init__(self):
        if not self.expert_dims:
            raise ValueError("model needs at least one expert")
        if self.characters and self.char_variant not in characters.VARIANTS:
            raise ValueError(f"unknown character variant {self.char_variant!r}")
        if min(self.dim, self.clusters, self.text_dim) < 1 or min(self.n_past, self.n_future) < 0:
            raise ValueError("dimensions must be positive and context counts non-negative")

    @property
    def experts(self) -> list:
        return list(self.expert_dims)

    @property
    def hidden(self) -> int:
        return self.gate_dim or self.dim

    @property
    def vlad_dim(self) -> int:
        return self.clusters * self.text_dim

    @property
    def slots(self) -> int:
        return n_slots(self.n_past, self.n_future)

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int = 0) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()

    def put(prefix, params):
        for k, v in params.items():
            store.add(f"{prefix}.{k}", v)

    put("text.vlad", encoders.init_netvlad(rng, cfg.text_dim, cfg.clusters))
    for e, d in cfg.expert_dims.items():
        put(f"video.{e}.gate", encoders.init_gated_unit(rng, d, cfg.hidden))
        put(f"video.{e}.proj", encoders.init_projection(rng, cfg.hidden, cfg.dim))
        put(f"text.{e}.gate", encoders.init_gated_unit(rng, cfg.vlad_dim, cfg.hidden))
        put(f"text.{e}.proj", encoders.init_projection(rng, cfg.hidden, cfg.dim))
    bound = 1.0 / np.sqrt(cfg.vlad_dim)
    store.add("mix.logits", rng.uniform(-bound, bound, (cfg.slots, len(cfg.expert_dims), cfg.vlad_dim)))
    if cfg.characters:
        store.add("mix.char", rng.uniform(-bound, bound, (cfg.vlad_dim,)))
    return store


def _gate(P, prefix) -> encoders.GatedUnitParams:
    return encoders.GatedUnitParams(P[f"{prefix}.W1"], P[f"{prefix}.b1"], P[f"{prefix}.W2"], P[f"{prefix}.b2"])


def _proj(P, prefix) -> encoders.Projection:
    return encoders.Projection(P[f"{prefix}.W"], P[f"{prefix}.b"])


def _vlad(P) -> encoders.NetVladParams:
    return encoders.NetVladParams(P["text.vlad.assign_W"], P["text.vlad.assign_b"], P["text.vlad.centroids"])


def _frames(clip: ClipRecord, expert: str) -> np.ndarray:
    t = clip.expert_features[expert]
    return t.array.astype(np.float64).reshape(-1, t.shape[-1])


def char_scores(cfg: ModelConfig, queries, gallery) -> np.ndarray:
    """``s_C`` for every (query, gallery) pair; 0 across movies since casts are per movie."""
    out = np.zeros((len(queries), len(gallery)))
    for b, q in enumerate(queries):
        for g, v in enumerate(gallery):
            if q.movie_id != v.movie_id:
                continue
            cast_size = max([*q.mentioned_actors, *[t.actor for t in v.face_tracks if t.actor is not None], -1]) + 1
            if cast_size == 0:
                continue
            y = np.zeros(cast_size)
            y[list(set(q.mentioned_actors))] = 1.0
            x = characters.encode_video_chars(v.face_tracks, cast_size, cfg.char_variant)
            out[b, g] = characters.char_similarity(y, x)
    return out


@dataclass
class BatchPlan:
    """Parameter-free inputs of one score matrix, computed once and reused across graphs."""

    tokens: list  # per query, W x D_text
    mask: np.ndarray  # G x N x K presence
    expert_inputs: list  # per expert: (mean features of present clips or None, G x N gather index)
    char: np.ndarray | None  # B x G character similarities

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.tokens), self.mask.shape[0]


def plan_batch(cfg: ModelConfig, queries, gallery, lookup: dict, with_characters: bool | None = None) -> BatchPlan:
    use_chars = cfg.characters if with_characters is None else with_characters
    if use_chars and not cfg.characters:
        raise ValueError("model was built without a character mixture weight")
    experts = cfg.experts
    G, N = len(gallery), cfg.slots
    windows = [build_window(v, lookup, cfg.n_past, cfg.n_future) for v in gallery]
    mask = np.stack([window_mask(w, experts) for w in windows])  # G x N x K
    empty = ~mask.any(axis=(1, 2))
    if empty.any():
        bad = gallery[int(np.argmax(empty))]
        raise ValueError(f"no present expert anywhere in the window of {bad.movie_id}:{bad.clip_index}")

    # each distinct clip in any window is encoded once per expert
    clips_by_key = {}
    for w in windows:
        for c in w.slots:
            if c is not None:
                clips_by_key.setdefault(c.key, c)
    inputs = []
    for i, e in enumerate(experts):
        present = [k for k, c in clips_by_key.items() if c.present(e)]
        row = {k: r for r, k in enumerate(present)}
        sel = np.full((G, N), len(present), dtype=np.intp)  # last column is the zero column
        for g, w in enumerate(windows):
            for n, c in enumerate(w.slots):
                if mask[g, n, i]:
                    sel[g, n] = row[c.key]
        X = np.stack([_frames(clips_by_key[k], e).mean(axis=0) for k in present]) if present else None
        inputs.append((X, sel))
    tokens = [q.description_tokens.array.astype(np.float64) for q in queries]
    return BatchPlan(tokens, mask, inputs, char_scores(cfg, queries, gallery) if use_chars else None)


def score_graph(P: dict, cfg: ModelConfig, plan: BatchPlan) -> ad.Node:
    """Graph for the B x G score matrix between query descriptions and gallery windows."""
    experts = cfg.experts
    K, N = len(experts), cfg.slots
    B, G = plan.shape
    vlad = _vlad(P)
    h = ad.stack([encoders.netvlad(t, vlad) for t in plan.tokens])

    per_expert = []
    for e, (X, sel) in zip(experts, plan.expert_inputs):
        if X is None:
            sims = ad.as_node(np.zeros((B, 1)))
        else:
            E_T = encoders.project(h, _gate(P, f"text.{e}.gate"), _proj(P, f"text.{e}.proj"))
            E_V = encoders.project(X, _gate(P, f"video.{e}.gate"), _proj(P, f"video.{e}.proj"))
            sims = ad.concat([ad.matmul(E_T, ad.transpose(E_V)), np.zeros((B, 1))], axis=1)
        per_expert.append(ad.take(sims, sel, axis=1))  # B x G x N
    sims_all = ad.reshape(ad.stack(per_expert, axis=3), (B, G, N * K))
    flat_mask = plan.mask.reshape(G, N * K)

    logits = ad.matmul(h, ad.transpose(ad.reshape(P["mix.logits"], (N * K, cfg.vlad_dim))))  # B x NK
    if plan.char is not None:
        logits = ad.concat([logits, ad.reshape(ad.matmul(h, P["mix.char"]), (B, 1))], axis=1)
        sims_all = ad.concat([sims_all, plan.char[:, :, None]], axis=2)
        flat_mask = np.concatenate([flat_mask, np.ones((G, 1), dtype=bool)], axis=1)
    weights = ad.softmax(ad.reshape(logits, (B, 1, logits.shape[1])), mask=flat_mask[None])
    return ad.sum(weights * sims_all, axis=2)


class Model:
    """Frozen-parameter view used for evaluation."""

    def __init__(self, cfg: ModelConfig, store: ad.ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def _consts(self) -> dict:
        return {k: ad.Node(v, op="const") for k, v in self.store.values.items()}

    def score_matrix(self, queries, gallery, lookup, with_characters=False) -> np.ndarray:
        plan = plan_batch(self.cfg, queries, gallery, lookup, with_characters)
        return score_graph(self._consts(), self.cfg, plan).value

    # single-pair path, independent of the batched graph's gather/mask plumbing
    def text_encoding(self, clip: ClipRecord):
        P = self.store.values
        heads = {e: (_gate(P, f"text.{e}.gate"), _proj(P, f"text.{e}.proj")) for e in self.cfg.experts}
        h, embs = encoders.encode_text(clip.description_tokens, _vlad(P), heads)
        return h, np.stack([embs[e].vector for e in self.cfg.experts])

    def window_encoding(self, clip: ClipRecord, lookup: dict):
        P = self.store.values
        win = build_window(clip, lookup, self.cfg.n_past, self.cfg.n_future)
        emb = np.zeros((self.cfg.slots, len(self.cfg.experts), self.cfg.dim))
        for n, c in enumerate(win.slots):
            if c is None:
                continue
            for i, e in enumerate(self.cfg.experts):
                ee = encoders.encode_video_expert(c, e, _gate(P, f"video.{e}.gate"), _proj(P, f"video.{e}.proj"))
                emb[n, i] = ee.vector
        return emb, window_mask(win, self.cfg.experts)
