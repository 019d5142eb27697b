import dataclasses
from fractions import Fraction

import pytest

from marginssl.config import (
    RECIPE_DEFAULTS,
    SECTIONS,
    RunConfig,
    apply_overrides,
    describe_keys,
    dump_config,
    load_config,
)
from marginssl.seeding import derive_seed
from marginssl.trainers import ConfigError


def write(tmp_path, text):
    p = tmp_path / "c.ini"
    p.write_text(text)
    return p


def test_defaults_load_without_file():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.train.tau == pytest.approx(1 / 30)


def test_file_values_and_types(tmp_path):
    p = write(
        tmp_path,
        "[train]\ntau = 1/20\nsymmetric = no\ncap_per_speaker = 3\n"
        "[augment]\nsnr_noise_db = 2, 9\n[run]\nseed = 17\n",
    )
    cfg = load_config(p)
    assert cfg.train.tau == 0.05 and cfg.train.symmetric is False and cfg.train.cap_per_speaker == 3
    assert cfg.augment.snr_noise_db == (2.0, 9.0)
    assert cfg.seed == 17


def test_optional_int_accepts_none(tmp_path):
    cfg = load_config(write(tmp_path, "[train]\ncap_per_speaker = none\n"))
    assert cfg.train.cap_per_speaker is None


@pytest.mark.parametrize(
    "text, match",
    [
        ("[train]\nfoo = 1\n", "train.foo"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[train]\nbatch_size = many\n", "train.batch_size"),
        ("[train]\nsymmetric = maybe\n", "train.symmetric"),
        ("[train]\nseed = 3\n", "train.seed"),
        ("[augment]\nsnr_noise_db = 1\n", "snr_noise_db"),
        ("[train]\ntau = 1/0\n", "train.tau"),
        ("[train]\nmargin = -0.5\n", "margin"),
        ("no section header\n", "c.ini"),
    ],
)
def test_rejects_bad_files(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/x.ini")


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="duration"):
        load_config(overrides={"data.duration": "3.0"})
    with pytest.raises(ConfigError, match="workers"):
        load_config(overrides={"run.workers": "0"})


def test_precedence(tmp_path):
    p = write(tmp_path, "[train]\nmargin = 0.2\nepochs = 7\n")
    assert load_config().train.margin == 0.1
    cfg = load_config(p, {"train.margin": "0.3"})
    assert cfg.train.margin == 0.3 and cfg.train.epochs == 7


def test_dump_roundtrip(tmp_path):
    cfg = load_config(
        overrides={
            "train.tau": "1/7",
            "train.framework": "moco",
            "train.cap_per_speaker": "2",
            "augment.categories": "noise, music",
            "run.seed": "99",
        }
    )
    again = load_config(write(tmp_path, dump_config(cfg)))
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)


def test_every_key_is_listed():
    text = describe_keys()
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if section == "train" and f.name in ("seed", "workers"):
                continue
            assert f"{section}.{f.name} " in text


def test_recipe_values_are_reachable():
    # each numeric recipe value can be selected through the config file mechanism
    for key, value in RECIPE_DEFAULTS.items():
        if isinstance(value, str) and not value.replace("/", "").isdigit():
            continue
        raw = ", ".join(map(str, value)) if isinstance(value, tuple) else str(value)
        cfg = apply_overrides(RunConfig(), {key: raw, "data.duration": "8.0"})
        section, name = key.split(".")
        got = getattr(getattr(cfg, section), name)
        want = value if not isinstance(value, str) else float(Fraction(value))
        assert got == pytest.approx(want), key


def test_module_seeds():
    cfg = load_config(overrides={"run.seed": "5"})
    assert cfg.module_seed("trainers") == derive_seed(5, "trainers")
    assert cfg.module_seed("trainers") != cfg.module_seed("synthdata")
    assert cfg.train_config().seed == derive_seed(5, "trainers")
