import pytest

from mapdiff import config as C
from mapdiff.mcformer import MCFormerConfig


def test_desk_preset_defaults():
    cfg = C.load()
    assert cfg.model == MCFormerConfig.toy()
    assert (cfg.train.batch_size, cfg.train.hr_patch, cfg.train.scale) == (4, 32, 2)
    assert cfg.train.total_iters == 2000
    assert cfg.schedule().T == 50


def test_full_preset_protocol():
    cfg = C.load(preset="full")
    assert cfg.model == MCFormerConfig()
    assert (cfg.train.batch_size, cfg.train.hr_patch) == (8, 256)
    assert cfg.train.total_iters == 500_000
    assert cfg.train.lr == pytest.approx(2e-4)
    assert cfg.train.lr_at(100_000) == pytest.approx(1e-4)
    sched = cfg.schedule()
    assert (sched.T, sched.beta_start, sched.beta_end) == (1000, 1e-4, 0.02)


def test_file_layers_over_preset_and_overrides_win(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[optimizer]\nlr = 5e-4\ntotal_iters = 10\n"
                    "[model]\nchannels_per_level = 8, 32\n[degradation]\nfamily = aniso\n")
    cfg = C.load(path, overrides={"optimizer": {"total_iters": 3, "seed": None}})
    assert cfg.train.lr == pytest.approx(5e-4)
    assert cfg.train.total_iters == 3
    assert cfg.train.seed == 0
    assert cfg.model.channels_per_level == [8, 32]
    assert cfg.train.family == "aniso"


def test_dump_round_trip(tmp_path):
    cfg = C.load(preset="full", overrides={"optimizer": {"seed": 7}})
    C.dump(cfg, tmp_path / "out.ini")
    again = C.load(tmp_path / "out.ini", preset="desk")
    assert again.train == cfg.train
    assert again.model == cfg.model
    assert again.T == cfg.T


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[model]\nprofile = huge\n",
    "[schedule]\nkind = cosine\n",
    "[optimizer]\nbatch_size = four\n",
    "[degradation]\nhr_patch = 33\n",
    "[model]\nheads_per_level = 3, 2\n",
    "not an ini file",
])
def test_rejects_bad_files(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(C.ConfigError):
        C.load(path)


def test_unknown_preset_and_missing_file(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load(preset="laptop")
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "absent.ini")
