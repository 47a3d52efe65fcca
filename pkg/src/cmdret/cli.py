"""Command-line entry points.

Every command takes ``--out DIR`` and writes ``DIR/config.json`` holding the
fully resolved options; passing that file back via ``--config`` reruns the
command (explicit flags override values from the file).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import alignment, characters, evaluation
from .autodiff import grad_check
from .model import Model, ModelConfig, init_params, plan_batch, score_graph
from .retrieval import movie_lookup
from .tensorio import (SynthSpec, generate_actor_images, generate_synth, load_manifest, read_tensor,
                       write_dataset, write_tensor)
from .training import TrainConfig, load_checkpoint, ranking_loss, save_checkpoint, train

log = logging.getLogger("cmdret")

_TRAIN_OPTS = {
    "lr": (float, 0.001), "batch_size": (int, 32), "margin": (float, 0.121), "dim": (int, 512),
    "clusters": (int, 10), "n_past": (int, 3), "n_future": (int, 3), "seed": (int, 0),
    "patience": (int, 5), "max_epochs": (int, 200), "experts": (str, None),
    "mode": (str, "cross-movie"), "char_variant": (str, None),
}

OPTIONS = {
    "gen-synth": {
        "seed": (int, 0), "n_movies": (int, 5), "clips_per_movie": (int, 4), "snr": (float, 10.0),
        "latent_dim": (int, 3), "text_dim": (int, 16), "cast_size": (int, 4), "missing_rate": (float, 0.0),
        "context_weight": (float, 0.0), "actor_images": (int, 40),
    },
    "train": {"manifest": (str, None), **_TRAIN_OPTS},
    "evaluate": {
        "manifest": (str, None), "checkpoint": (str, None), "split": (str, "test"), "min_clips": (int, 5),
        **{k: _TRAIN_OPTS[k] for k in ("mode", "char_variant", "dim", "clusters", "n_past", "n_future", "seed",
                                       "experts")},
    },
    "align": {"manifest": (str, None), "split": (str, None)},
    "build-ceb": {"images": (str, None), "dist_threshold": (float, 0.76), "min_cluster": (int, 30)},
    "assign-tracks": {"manifest": (str, None), "bank": (str, None), "threshold": (float, 0.8)},
    "grad-check": {"seed": (int, 0), "batches": (int, 1), "eps": (float, 1e-5), "n_past": (int, 1),
                   "n_future": (int, 1)},
}

REQUIRED = {
    "train": ("manifest",), "evaluate": ("manifest",), "align": ("manifest",),
    "build-ceb": ("images",), "assign-tracks": ("manifest", "bank"),
}


class ConfigError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmdret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON file of option values; flags win")
        for key, (typ, default) in opts.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None,
                           help=f"default: {default}")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    opts = OPTIONS[command]
    cfg = {k: default for k, (_, default) in opts.items()}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(opts) - {"command"}
        if unknown:
            raise ConfigError(f"unknown keys in config file: {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in opts})
    for k in opts:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    for k in REQUIRED.get(command, ()):
        if cfg.get(k) is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")
    if cfg.get("mode") == "cross-movie" and cfg.get("char_variant") is not None:
        raise ConfigError("character variant requires within-movie mode")
    if cfg.get("char_variant") is not None and cfg["char_variant"] not in characters.VARIANTS:
        raise ConfigError(f"unknown character variant {cfg['char_variant']!r}")
    return cfg


def _experts(cfg) -> list | None:
    e = cfg.get("experts")
    if e is None or isinstance(e, list):
        return e
    return [x.strip() for x in e.split(",") if x.strip()]


def _train_config(cfg: dict) -> TrainConfig:
    keys = set(TrainConfig.__dataclass_fields__)
    vals = {k: v for k, v in cfg.items() if k in keys and k != "experts"}
    return TrainConfig(experts=_experts(cfg), **vals)


def cmd_gen_synth(cfg, out: Path) -> None:
    spec = SynthSpec(seed=cfg["seed"], n_movies=cfg["n_movies"], clips_per_movie=cfg["clips_per_movie"],
                     snr=cfg["snr"], latent_dim=cfg["latent_dim"], text_dim=cfg["text_dim"],
                     cast_size=cfg["cast_size"], missing_rate=cfg["missing_rate"],
                     context_weight=cfg["context_weight"])
    manifest = generate_synth(spec)
    path = write_dataset(manifest, out)
    img_dir = out / "actor_images"
    img_dir.mkdir(exist_ok=True)
    if cfg["actor_images"] > 0:
        for name, embs in generate_actor_images(spec, cfg["actor_images"]).items():
            write_tensor(img_dir / f"{name}.cmdt", embs)
    print(f"wrote {len(manifest.clips)} clips from {len(manifest.movies)} movies to {path}")


def cmd_train(cfg, out: Path) -> None:
    manifest = load_manifest(cfg["manifest"])
    tcfg = _train_config(cfg)
    res = train(manifest, tcfg, log_path=out / "metrics.csv")
    save_checkpoint(res.model, out / "checkpoint", tcfg)
    last = res.history[-1]
    print(f"trained {len(res.history)} epochs; best val loss at epoch {res.best_epoch}; "
          f"last train {last['train_loss']:.4f} val {last['val_loss']:.4f}")


def _eval_model(cfg, manifest) -> Model:
    if cfg["checkpoint"]:
        model = load_checkpoint(cfg["checkpoint"])
        if cfg["char_variant"] is not None:
            if not model.cfg.characters:
                raise ConfigError("checkpoint was trained without the character module")
            model.cfg = replace(model.cfg, char_variant=cfg["char_variant"])
        return model
    # untrained model, the random-weights baseline
    tcfg = _train_config({**cfg, "mode": cfg["mode"], "char_variant": cfg["char_variant"]})
    mcfg = tcfg.model_config(manifest)
    return Model(mcfg, init_params(mcfg, cfg["seed"]))


def cmd_evaluate(cfg, out: Path) -> None:
    manifest = load_manifest(cfg["manifest"])
    model = _eval_model(cfg, manifest)
    name = "MoEE+CBM" if model.cfg.slots > 1 else "MoEE"
    if not cfg["checkpoint"]:
        name = "Random weights"
    if cfg["mode"] == "cross-movie":
        rep, sm = evaluation.eval_cross_movie(model, manifest, cfg["split"])
        sm.to_csv(out / "similarity.csv")
        rows = {name: rep}
        table = evaluation.format_table(rows)
    else:
        use_chars = model.cfg.characters and cfg["char_variant"] is not None
        rep = evaluation.eval_within_movie(model, manifest, cfg["split"], cfg["min_clips"], use_chars)
        if use_chars:
            name += f" + Character Module [{model.cfg.char_variant}]"
        rows = {name: rep}
        table = evaluation.format_table(rows, within=True)
    (out / "report.txt").write_text(table)
    (out / "report.csv").write_text(evaluation.format_csv(rows))
    print(table, end="")


def cmd_align(cfg, out: Path) -> None:
    manifest = load_manifest(cfg["manifest"])
    movies = manifest.split_movies(cfg["split"]) if cfg["split"] else list(manifest.movies)
    results, alignments, clip_durs, movie_durs = {}, [], [], []
    for mid in movies:
        mv = manifest.movies[mid]
        clips = manifest.movie_clips(mid)
        if mv.plot_embeddings is None or not clips:
            log.warning("movie %s has no plot embeddings or clips; skipped", mid)
            continue
        clip_embs = np.stack([c.description_tokens.array.astype(np.float64).mean(axis=0) for c in clips])
        res = alignment.jdtw(clip_embs, mv.plot_embeddings.array)
        alignments.append(res)
        clip_durs.append([c.duration for c in clips])
        movie_durs.append(mv.duration)
        entry = {"assignment": res.assignment, "cost": res.cost, "skipped": res.skipped}
        if mv.plot_truth is not None:
            entry["agreement"] = float(np.mean(np.array(res.assignment) == np.array(mv.plot_truth)))
        results[mid] = entry
    durations_known = all(d > 0 for d in movie_durs)
    stats = alignment.coverage_stats(alignments, clip_durs if durations_known else None,
                                     movie_durs if durations_known else None)
    report = {"movies": results, "coverage": asdict(stats)}
    (out / "alignment.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report["coverage"]))


def cmd_build_ceb(cfg, out: Path) -> None:
    images = {p.stem: read_tensor(p).array.astype(np.float64) for p in sorted(Path(cfg["images"]).glob("*.cmdt"))}
    if not images:
        raise ConfigError(f"no .cmdt files in {cfg['images']}")
    bank = characters.build_bank(images, cfg["dist_threshold"], cfg["min_cluster"])
    bank.save(out)
    print(f"character bank: {len(bank)} of {len(images)} actors admitted")


def cmd_assign_tracks(cfg, out: Path) -> None:
    manifest = load_manifest(cfg["manifest"])
    bank = characters.CharacterBank.load(cfg["bank"])
    agree = total = 0
    for c in manifest.clips:
        cast = manifest.movies[c.movie_id].cast
        labeled = characters.label_tracks(c.face_tracks, bank, cfg["threshold"], cast=cast)
        for old, new in zip(c.face_tracks, labeled):
            total += 1
            agree += old.actor == new.actor
        c.face_tracks = labeled
    write_dataset(manifest, out)
    print(f"labeled {total} tracks; {agree} agree with the input labels")


def cmd_grad_check(cfg, out: Path) -> None:
    worst = 0.0
    for b in range(cfg["batches"]):
        seed = cfg["seed"] + b
        spec = SynthSpec(n_movies=1, clips_per_movie=4, expert_dims={"scene": 5, "face": 4, "motion": 3},
                         text_dim=4, cast_size=3, face_dim=4, missing_rate=0.3, seed=seed)
        man = generate_synth(spec)
        mcfg = ModelConfig(expert_dims=man.experts, text_dim=man.text_dim, dim=4, gate_dim=4, clusters=2,
                           n_past=cfg["n_past"], n_future=cfg["n_future"], characters=True)
        store = init_params(mcfg, seed)
        plan = plan_batch(mcfg, man.clips, man.clips, movie_lookup(man.clips))
        worst = max(worst, grad_check(lambda P: ranking_loss(score_graph(P, mcfg, plan), 0.121), store, cfg["eps"]))
    (out / "grad_check.txt").write_text(f"{worst:.3e}\n")
    print(f"max relative error {worst:.3e}")


COMMANDS = {
    "gen-synth": cmd_gen_synth, "train": cmd_train, "evaluate": cmd_evaluate, "align": cmd_align,
    "build-ceb": cmd_build_ceb, "assign-tracks": cmd_assign_tracks, "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"command": args.command, **cfg}, indent=2, sort_keys=True))
        COMMANDS[args.command](cfg, out)
    except (ValueError, KeyError, OSError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"cmdret {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
