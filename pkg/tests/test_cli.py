import shutil
import subprocess
import sys
from collections import Counter

import pytest

from marginssl import cli
from marginssl.config import ENV_CONFIG, load_config
from marginssl.evaluation import read_trials
from marginssl.synthdata import read_manifest

TINY_INI = """\
[data]
n_train_speakers = 4
n_eval_speakers = 3
utts_per_speaker = 3
duration = 1.2
[augment]
categories = noise
[train]
frame_seconds = 0.5
hidden = 8
embed_dim = 4
batch_size = 4
epochs = 2
[eval]
frame_seconds = 1.0
n_frames = 2
"""


@pytest.fixture()
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return p


@pytest.fixture()
def trained(tmp_path, ini):
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen-data", "--config", str(ini), "--out", str(data)]) == 0
    assert cli.main(["train", "--config", str(ini), "--data-dir", str(data), "--run-dir", str(run)]) == 0
    return ini, data, run


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenData:
    def test_byte_identical_reruns(self, tmp_path, ini):
        out = tmp_path / "data"
        assert cli.main(["gen-data", "--config", str(ini), "--out", str(out)]) == 0
        a = tree_bytes(out)
        shutil.rmtree(out)
        assert cli.main(["gen-data", "--config", str(ini), "--out", str(out)]) == 0
        b = tree_bytes(out)
        assert a == b and "trials.txt" in a and len(a) == 4 + 3 * (4 + 3)

    def test_seed_changes_output(self, tmp_path, ini):
        cli.main(["gen-data", "--config", str(ini), "--out", str(tmp_path / "a")])
        cli.main(["gen-data", "--config", str(ini), "--seed", "1", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a/trials.txt").read_bytes() != (tmp_path / "b/trials.txt").read_bytes()

    def test_disjoint_speakers_and_balanced_trials(self, tmp_path, ini):
        cli.main(["gen-data", "--config", str(ini), "--out", str(tmp_path)])
        train = {e.speaker_id for e in read_manifest(tmp_path / "train_manifest.txt")}
        ev = read_manifest(tmp_path / "eval_manifest.txt")
        assert train.isdisjoint({e.speaker_id for e in ev})
        ids = {e.utt_id for e in ev}
        trials = read_trials(tmp_path / "trials.txt")
        counts = Counter(t.target for t in trials)
        assert abs(counts[True] - counts[False]) <= 1
        assert counts[True] == 3 * 3  # every same-speaker pair: 3 speakers x C(3, 2)
        assert all(t.enroll in ids and t.test in ids for t in trials)
        assert len({(t.enroll, t.test) for t in trials}) == len(trials)

    def test_config_snapshot(self, tmp_path, ini):
        cli.main(["gen-data", "--config", str(ini), "--out", str(tmp_path)])
        assert load_config(tmp_path / "config.ini").data.n_eval_speakers == 3


class TestTrainEvaluate:
    def test_end_to_end(self, trained, tmp_path, capsys):
        ini, data, run = trained
        assert (run / "checkpoint.bin").is_file()
        assert len((run / "metrics.csv").read_text().splitlines()) == 1 + 2
        capsys.readouterr()
        argv = ["evaluate", "--config", str(ini), "--data-dir", str(data), "--run-dir", str(run)]
        argv += ["--export-scores", str(tmp_path / "s.txt"), "--export-dist", str(tmp_path / "d.csv")]
        assert cli.main(argv) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("trials: ") and out[1].startswith("EER: ") and out[1].endswith("%")
        assert out[2].startswith("minDCF(0.01): ")
        n = int(out[0].split()[1])
        assert len((tmp_path / "s.txt").read_text().splitlines()) == n
        assert (tmp_path / "d.csv").read_text().startswith("bin_lo,bin_hi,count_target,count_nontarget")
        assert (run / "eval" / "metrics.csv").is_file()

    def test_resume_is_a_no_op_when_done(self, trained, capsys):
        ini, data, run = trained
        before = (run / "checkpoint.bin").read_bytes()
        capsys.readouterr()
        assert cli.main(["train", "--config", str(ini), "--data-dir", str(data), "--run-dir", str(run)]) == 0
        assert (run / "checkpoint.bin").read_bytes() == before
        assert "trained 2 epochs" in capsys.readouterr().out

    def test_flag_overrides_file(self, trained):
        ini, data, run = trained
        cli.main(["train", "--config", str(ini), "--data-dir", str(data), "--run-dir", str(run), "--epochs", "3"])
        assert len((run / "metrics.csv").read_text().splitlines()) == 1 + 3
        assert load_config(run / "config.ini").train.epochs == 3

    def test_env_config(self, tmp_path, ini, monkeypatch):
        monkeypatch.setenv(ENV_CONFIG, str(ini))
        assert cli.main(["gen-data", "--out", str(tmp_path)]) == 0
        assert len(read_manifest(tmp_path / "train_manifest.txt")) == 12


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["train", "--frobnicate"])
        assert e.value.code == 1

    def test_unknown_key(self, tmp_path, capsys):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "train.foo=1"]) == 1
        assert "train.foo" in capsys.readouterr().err

    def test_invalid_value(self, ini, capsys):
        assert cli.main(["train", "--config", str(ini), "--margin", "-1"]) == 1

    def test_missing_data(self, tmp_path, ini, capsys):
        argv = ["train", "--config", str(ini), "--data-dir", str(tmp_path / "nope"), "--run-dir", str(tmp_path)]
        assert cli.main(argv) == 2
        argv = ["evaluate", "--config", str(ini), "--data-dir", str(tmp_path), "--run-dir", str(tmp_path)]
        assert cli.main(argv) == 2
        assert "missing files" in capsys.readouterr().err

    def test_corrupt_audio(self, tmp_path, ini, capsys):
        cli.main(["gen-data", "--config", str(ini), "--out", str(tmp_path)])
        next((tmp_path / "wav").rglob("*.wav")).write_bytes(b"junk")
        argv = ["train", "--config", str(ini), "--data-dir", str(tmp_path), "--run-dir", str(tmp_path / "r")]
        assert cli.main(argv) == 2

    def test_numeric_failure(self, trained, monkeypatch, capsys):
        ini, data, run = trained

        def diverge(*a, **k):
            raise cli.TrainingDivergedError("loss became nan", epoch=0, step=3, seed=11)

        monkeypatch.setattr(cli, "train", diverge)
        argv = ["train", "--config", str(ini), "--data-dir", str(data), "--run-dir", str(run), "--no-resume"]
        assert cli.main(argv) == 3
        assert "nan" in capsys.readouterr().err


def test_help_lists_every_key():
    out = subprocess.run([sys.executable, "-m", "marginssl", "--help"], capture_output=True, text=True, check=True).stdout
    for key in ("train.tau", "train.margin", "train.queue_size", "augment.snr_noise_db", "eval.p_target", "run.seed"):
        assert key in out
    assert "recipe: 1/30" in out
