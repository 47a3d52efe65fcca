"""Per-stream encoders: temporal mean, gated embedding unit, NetVLAD, projection heads.

Functions accept numpy arrays or autodiff nodes and return nodes, so the same
code serves frozen-parameter encoding (read ``.value``) and training graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .tensorio import ABSENT, ClipRecord


@dataclass
class GatedUnitParams:
    W1: Any
    b1: Any
    W2: Any
    b2: Any


@dataclass
class NetVladParams:
    assign_W: Any  # D_text x C
    assign_b: Any  # C
    centroids: Any  # C x D_text

    @property
    def n_clusters(self) -> int:
        return ad.as_node(self.centroids).shape[0]


@dataclass
class Projection:
    W: Any
    b: Any


@dataclass
class ExpertEmbedding:
    expert: str
    vector: np.ndarray
    present: bool


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_gated_unit(rng, d_in: int, d_h: int) -> dict:
    return {
        "W1": _uniform(rng, d_in, (d_in, d_h)),
        "b1": _uniform(rng, d_in, (d_h,)),
        "W2": _uniform(rng, d_h, (d_h, d_h)),
        "b2": _uniform(rng, d_h, (d_h,)),
    }


def init_projection(rng, d_in: int, d_out: int) -> dict:
    return {"W": _uniform(rng, d_in, (d_in, d_out)), "b": _uniform(rng, d_in, (d_out,))}


def init_netvlad(rng, d_text: int, n_clusters: int) -> dict:
    return {
        "assign_W": _uniform(rng, d_text, (d_text, n_clusters)),
        "assign_b": _uniform(rng, d_text, (n_clusters,)),
        "centroids": 0.1 * rng.standard_normal((n_clusters, d_text)),
    }


def aggregate_mean(frames) -> ad.Node:
    frames = ad.as_node(frames)
    if frames.value.ndim != 2 or frames.shape[0] == 0:
        raise ValueError(f"aggregate_mean needs a non-empty T x D input, got {frames.shape}")
    return ad.mean_rows(frames)


def gated_embed(x, p: GatedUnitParams) -> ad.Node:
    """``l2_normalize(z1 * sigmoid(z1 W2 + b2))`` with ``z1 = x W1 + b1``; rows of ``x`` are independent."""
    z1 = ad.affine(x, p.W1, p.b1)
    return ad.l2_normalize(z1 * ad.sigmoid(ad.affine(z1, p.W2, p.b2)))


def netvlad(words, p: NetVladParams) -> ad.Node:
    words = ad.as_node(words)
    if words.value.ndim != 2 or words.shape[0] == 0:
        raise ValueError(f"netvlad needs W >= 1 words of shape W x D, got {words.shape}")
    C, D = ad.as_node(p.centroids).shape
    if words.shape[1] != D:
        raise ad.ShapeError(f"netvlad: word dim {words.shape[1]} != centroid dim {D}")
    soft = ad.softmax(ad.affine(words, p.assign_W, p.assign_b))  # W x C
    weighted = ad.matmul(ad.transpose(soft), words)  # C x D
    mass = ad.reshape(ad.sum(soft, axis=0), (C, 1))
    resid = weighted - mass * p.centroids
    return ad.l2_normalize(ad.reshape(ad.l2_normalize(resid), (C * D,)))


def project(x, g: GatedUnitParams, proj: Projection) -> ad.Node:
    return ad.l2_normalize(ad.affine(gated_embed(x, g), proj.W, proj.b))


def encode_video_expert(clip: ClipRecord, expert: str, gate: GatedUnitParams, proj: Projection) -> ExpertEmbedding:
    feat = clip.expert_features.get(expert, ABSENT)
    out_dim = ad.as_node(proj.W).shape[1]
    if feat is ABSENT:
        return ExpertEmbedding(expert, np.zeros(out_dim), False)
    d_in = ad.as_node(gate.W1).shape[0]
    if feat.shape[-1] != d_in:
        raise ad.ShapeError(f"expert {expert!r}: feature dim {feat.shape[-1]} != declared {d_in}")
    frames = feat.array.astype(np.float64).reshape(-1, feat.shape[-1])
    vec = project(aggregate_mean(frames), gate, proj).value
    return ExpertEmbedding(expert, vec, True)


def encode_text(tokens, vlad: NetVladParams, heads: dict) -> tuple[np.ndarray, dict]:
    """Return ``(h, {expert: ExpertEmbedding})``; ``heads`` maps expert -> (GatedUnitParams, Projection)."""
    tokens = np.asarray(getattr(tokens, "array", tokens), dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("encode_text needs a non-empty token sequence")
    h = netvlad(tokens, vlad)
    embs = {name: ExpertEmbedding(name, project(h, g, pr).value, True) for name, (g, pr) in heads.items()}
    return h.value, embs
