"""Desk-scale margin trend: EER and score separation for m=0 vs m=0.1 over seeds.

Runs 2 x n_seeds full desk trainings (about three to four minutes each on one core).
Usage: python demos/margin_trend.py [n_seeds] [out_dir]
"""

import statistics
import sys
import tempfile
from pathlib import Path

from marginssl import cli


def run(root, seed, margin):
    common = ["--seed", str(seed), "--set", f"train.margin={margin}"]
    data, rdir = str(root / "data"), str(root / "run")
    assert cli.main(["gen-data", "--out", data, *common]) == 0
    assert cli.main(["train", "--data-dir", data, "--run-dir", rdir, *common]) == 0
    args = cli.build_parser().parse_args(["evaluate", "--data-dir", data, "--run-dir", rdir, *common])
    rep = cli.cmd_evaluate(cli.config_from_args(args))
    s = rep.scores
    return rep.eer, float(s.scores[s.targets].mean() - s.scores[~s.targets].mean())


def main(n_seeds, out):
    res = {0.0: [], 0.1: []}
    for seed in range(n_seeds):
        for m in res:
            eer, sep = run(Path(out) / f"seed{seed}_m{m}", seed, m)
            res[m].append((eer, sep))
            print(f"seed {seed} m={m}: EER {100 * eer:.2f}%  separation {sep:.4f}", flush=True)
    for m, v in res.items():
        print(f"m={m}: median EER {100 * statistics.median(e for e, _ in v):.2f}%, "
              f"median separation {statistics.median(s for _, s in v):.4f}")


if __name__ == "__main__":
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    if len(sys.argv) > 2:
        main(n, sys.argv[2])
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(n, tmp)
