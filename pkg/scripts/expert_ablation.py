"""Expert ablation: train on each single expert, on all-but-one, and on the full set.

    python scripts/expert_ablation.py --out runs/experts --missing-rate 0.3
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from cmdret.evaluation import average_reports, eval_cross_movie, format_csv, format_table
from cmdret.tensorio import SynthSpec, generate_synth
from cmdret.training import TrainConfig, train


def subsets(experts):
    yield "all", list(experts)
    for e in experts:
        yield f"only {e}", [e]
    for e in experts:
        yield f"without {e}", [x for x in experts if x != e]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--n-movies", type=int, default=8)
    p.add_argument("--clips-per-movie", type=int, default=5)
    p.add_argument("--missing-rate", type=float, default=0.3)
    p.add_argument("--snr", type=float, default=4.0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--clusters", type=int, default=4)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(vars(args), indent=2))

    spec = lambda seed: SynthSpec(seed=seed, n_movies=args.n_movies, clips_per_movie=args.clips_per_movie,  # noqa: E731
                                  missing_rate=args.missing_rate, snr=args.snr)
    datasets = {s: generate_synth(spec(s)) for s in range(args.seeds)}
    experts = list(datasets[0].experts)
    first = experts[0]
    rows = {}
    for name, chosen in subsets(experts):
        if first not in chosen and args.missing_rate > 0:
            # only the first expert is guaranteed present; skip sets that could leave a clip with nothing
            continue
        reports = {}
        for seed, man in datasets.items():
            cfg = TrainConfig(dim=args.dim, clusters=args.clusters, n_past=0, n_future=0, patience=20,
                              seed=seed, experts=chosen)
            reports[seed], _ = eval_cross_movie(train(man, cfg).model, man, "test")
        rows[name] = average_reports(reports)
        print(f"{name}: R@1 {rows[name].r1:.1f}")
    table = format_table(rows)
    print(table, end="")
    (out / "table.txt").write_text(table)
    (out / "table.csv").write_text(format_csv(rows))


if __name__ == "__main__":
    main()
