"""End-to-end run on synthetic data through the CLI commands.

Generates a dataset, builds the character bank and relabels face tracks,
trains cross-movie and within-movie models, evaluates both protocols (all
three character encodings for within-movie), and aligns clips to plots.

    python scripts/pipeline.py --out runs/pipeline
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from cmdret.characters import VARIANTS
from cmdret.cli import main as cli


def run(*argv):
    print("$ cmdret " + " ".join(argv), flush=True)
    code = cli(list(argv))
    if code:
        sys.exit(code)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    args = p.parse_args(argv)
    out = Path(args.out)
    data, man = out / "data", str(out / "labeled" / "manifest.jsonl")
    common = ["--dim", str(args.dim), "--clusters", "4", "--seed", str(args.seed)]

    run("gen-synth", "--out", str(data), "--seed", str(args.seed), "--n-movies", "10", "--clips-per-movie", "6",
        "--missing-rate", "0.2", "--snr", "5")
    run("build-ceb", "--out", str(out / "bank"), "--images", str(data / "actor_images"))
    run("assign-tracks", "--out", str(out / "labeled"), "--manifest", str(data / "manifest.jsonl"),
        "--bank", str(out / "bank"))

    run("train", "--out", str(out / "cross"), "--manifest", man, "--n-past", "1", "--n-future", "1",
        "--patience", "20", *common)
    run("evaluate", "--out", str(out / "eval_cross"), "--manifest", man, "--checkpoint", str(out / "cross/checkpoint"))
    run("evaluate", "--out", str(out / "eval_random"), "--manifest", man, *common)

    run("train", "--out", str(out / "within"), "--manifest", man, "--mode", "within-movie", "--char-variant",
        "track-frequency", "--n-past", "1", "--n-future", "1", "--patience", "20", *common)
    for v in VARIANTS:
        run("evaluate", "--out", str(out / f"eval_within_{v}"), "--manifest", man, "--mode", "within-movie",
            "--checkpoint", str(out / "within/checkpoint"), "--char-variant", v)

    run("align", "--out", str(out / "align"), "--manifest", man)
    run("grad-check", "--out", str(out / "grad_check"))


if __name__ == "__main__":
    main()
