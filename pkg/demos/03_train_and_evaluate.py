"""Small SimCLR run through the library API, then scoring a trial list.

Takes under a minute on one core.  The CLI runs the full desk recipe:

    marginssl gen-data --out data
    marginssl train --data-dir data --run-dir run
    marginssl evaluate --data-dir data --run-dir run
"""

import sys
import tempfile
from pathlib import Path

from marginssl import cli


def main(root):
    root = Path(root)
    common = ["--set", "data.n_train_speakers=24", "--set", "data.n_eval_speakers=8", "--set", "data.utts_per_speaker=6",
              "--set", "train.epochs=8", "--set", "train.batch_size=16", "--set", "train.embed_dim=16"]
    data, run = str(root / "data"), str(root / "run")
    for argv in (
        ["gen-data", "--out", data],
        ["train", "--data-dir", data, "--run-dir", run],
        ["evaluate", "--data-dir", data, "--run-dir", run, "--export-dist", str(root / "dist.csv")],
    ):
        print("$ marginssl", " ".join(argv[:1]))
        rc = cli.main(argv + common)
        if rc:
            return rc
    print((root / "run" / "metrics.csv").read_text())
    return 0


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else tmp))
