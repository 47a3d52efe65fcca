"""Bidirectional max-margin ranking loss, Adam, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, Model, init_params, plan_batch, score_graph
from .retrieval import movie_lookup
from .tensorio import DatasetManifest, FeatureTensor, read_tensor, write_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    margin: float = 0.121
    dim: int = 512
    clusters: int = 10
    n_past: int = 3
    n_future: int = 3
    seed: int = 0
    patience: int = 5
    max_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    experts: list | None = None  # subset of manifest experts, for ablations
    mode: str = "cross-movie"
    char_variant: str | None = None

    def __post_init__(self):
        if self.lr < 0 or self.margin < 0:
            raise ValueError("lr and margin must be non-negative")
        if min(self.batch_size, self.dim, self.clusters, self.patience, self.max_epochs) < 1:
            raise ValueError("batch_size, dim, clusters, patience and max_epochs must be >= 1")
        if self.mode not in ("cross-movie", "within-movie"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "cross-movie" and self.char_variant is not None:
            raise ValueError("character variant requires within-movie mode (characters are removed for cross-movie)")

    def model_config(self, manifest: DatasetManifest) -> ModelConfig:
        names = self.experts if self.experts is not None else list(manifest.experts)
        missing = [e for e in names if e not in manifest.experts]
        if missing:
            raise ValueError(f"experts not in manifest: {missing}")
        use_chars = self.mode == "within-movie" and self.char_variant is not None
        return ModelConfig(
            expert_dims={e: manifest.experts[e] for e in names},
            text_dim=manifest.text_dim,
            dim=self.dim,
            clusters=self.clusters,
            n_past=self.n_past,
            n_future=self.n_future,
            characters=use_chars,
            char_variant=self.char_variant or "track-frequency",
        )


def ranking_loss(S, margin: float) -> ad.Node:
    """Mean of ``max(0, m + S_ij - S_ii)`` and ``max(0, m + S_ji - S_ii)`` over all j != i."""
    S = ad.as_node(S)
    if S.value.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"ranking_loss needs a square matrix, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        return ad.Node(0.0, op="const")
    diag = ad.diagonal(S)
    off = 1.0 - np.eye(B)
    rows = ad.hinge(S - ad.reshape(diag, (B, 1)) + margin) * off  # text -> video
    cols = ad.hinge(S - ad.reshape(diag, (1, B)) + margin) * off  # video -> text
    return ad.scale(ad.sum(rows) + ad.sum(cols), 1.0 / (2 * B * (B - 1)))


def adam_step(store: ad.ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    if not store.grads:
        raise TrainingError("adam_step called before gradients were collected")
    store.step += 1
    t = store.step
    for name, g in store.grads.items():
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        store.values[name] = store.values[name] - lr * m_hat / (np.sqrt(v_hat) + eps)


def batch_loss(P: dict, mcfg: ModelConfig, plan, margin: float) -> ad.Node:
    return ranking_loss(score_graph(P, mcfg, plan), margin)


def _batches(clips, size, rng=None):
    order = np.arange(len(clips)) if rng is None else rng.permutation(len(clips))
    for k in range(0, len(order), size):
        yield [clips[j] for j in order[k:k + size]]


def evaluate_loss(store: ad.ParamStore, mcfg: ModelConfig, clips, lookup, cfg: TrainConfig) -> float:
    consts = {k: ad.Node(v, op="const") for k, v in store.values.items()}
    total, weight = 0.0, 0
    for batch in _batches(clips, cfg.batch_size):
        if len(batch) < 2:
            continue
        loss = batch_loss(consts, mcfg, plan_batch(mcfg, batch, batch, lookup), cfg.margin).value
        total += float(loss) * len(batch)
        weight += len(batch)
    return total / weight if weight else math.nan


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)
    best_epoch: int = 0


def train(manifest: DatasetManifest, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Adam on the ranking loss; stops after ``patience`` epochs without a val-loss improvement."""
    train_clips = manifest.split_clips("train")
    val_clips = manifest.split_clips("val")
    if len(train_clips) < 2:
        raise TrainingError("training split needs at least two clips")
    if not val_clips:
        raise TrainingError("validation split is empty")
    mcfg = cfg.model_config(manifest)
    store = init_params(mcfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_lookup = movie_lookup(train_clips)
    val_lookup = movie_lookup(val_clips)

    history = []
    best_val, best_store, best_epoch, stale = math.inf, store.copy(), 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batch in _batches(train_clips, cfg.batch_size, rng):
            if len(batch) < 2:
                continue
            plan = plan_batch(mcfg, batch, batch, train_lookup)
            loss = batch_loss(store.nodes(), mcfg, plan, cfg.margin)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            store.collect_grads()
            adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            losses.append(float(loss.value))
        val = evaluate_loss(store, mcfg, val_clips, val_lookup, cfg)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val}
        history.append(row)
        log.debug("epoch %d train %.5f val %.5f", epoch, row["train_loss"], val)
        if val < best_val:
            best_val, best_store, best_epoch, stale = val, store.copy(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if log_path is not None:
        write_history(history, log_path)
    return TrainResult(Model(mcfg, best_store), history, best_epoch)


def write_history(history, path) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{r['epoch']},{r['train_loss']:.8g},{r['val_loss']:.8g}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def save_checkpoint(model: Model, out_dir, train_cfg: TrainConfig | None = None) -> Path:
    """One CMDT file per parameter plus ``index.txt`` (name, shape, file) and ``model.json``."""
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    index = []
    for name, value in model.store.values.items():
        fname = f"params/{name}.cmdt"
        write_tensor(out / fname, FeatureTensor(np.atleast_1d(value)))
        index.append(f"{name}\t{'x'.join(map(str, value.shape))}\t{fname}")
    (out / "index.txt").write_text("\n".join(index) + "\n")
    meta = {"model": model.cfg.to_dict()}
    if train_cfg is not None:
        meta["train"] = asdict(train_cfg)
    (out / "model.json").write_text(json.dumps(meta, indent=2))
    return out


def load_checkpoint(in_dir) -> Model:
    d = Path(in_dir)
    meta = json.loads((d / "model.json").read_text())
    cfg = ModelConfig(**meta["model"])
    store = ad.ParamStore()
    for line in (d / "index.txt").read_text().splitlines():
        if not line:
            continue
        name, shape, fname = line.split("\t")
        dims = tuple(int(s) for s in shape.split("x")) if shape else ()
        store.add(name, read_tensor(d / fname).array.astype(np.float64).reshape(dims))
    return Model(cfg, store)
