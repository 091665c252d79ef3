"""Flat key = value configs."""

import pytest

from dtriangle.cli import SECTIONS, load_run_config
from dtriangle.config import ConfigError, apply_overrides, dump_kv, parse_kv, split_sections
from dtriangle.landscape import LandscapeConfig
from dtriangle.models import ModelConfig
from dtriangle.trainer import TrainConfig


class TestParse:
    def test_comments_and_blanks(self):
        assert parse_kv("# head\n\na = 1  # tail\n b=two \n") == {"a": "1", "b": "two"}

    def test_missing_equals_reports_line(self):
        with pytest.raises(ConfigError, match="cfg:2"):
            parse_kv("a = 1\nbogus\n", "cfg")

    def test_sections(self):
        got = split_sections({"seed": "3", "model.latent_dim": "4"}, ["model"])
        assert got == {"": {"seed": "3"}, "model": {"latent_dim": "4"}}
        with pytest.raises(ConfigError):
            split_sections({"nope.k": "1"}, ["model"])


class TestOverrides:
    def test_types(self):
        mc = apply_overrides(ModelConfig(), {"hidden": "32, 16", "latent_dim": "5", "gen_output": "linear"})
        assert mc.hidden == (32, 16) and mc.latent_dim == 5

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lr_bogus"):
            apply_overrides(TrainConfig(), {"lr_bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="iterations"):
            apply_overrides(TrainConfig(), {"iterations": "many"})

    def test_invariant_violation(self):
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), {"batch_size": "0"})

    def test_bounds_tuple(self):
        assert apply_overrides(LandscapeConfig(), {"bounds": "-1,1"}).bounds == (-1.0, 1.0)


class TestRunConfig:
    def test_defaults_and_seed(self):
        cfg = load_run_config(None, seed=9)
        assert set(cfg) == set(SECTIONS) and cfg[""].seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nothere"):
            load_run_config(str(tmp_path / "nothere.cfg"))

    def test_dump_round_trip(self, tmp_path):
        p = tmp_path / "a.cfg"
        p.write_text("iterations = 7\nmodel.hidden = 4,4\nlandscape.bounds = -1,1\nlr_phi = 2e-4\n")
        cfg = load_run_config(str(p))
        q = tmp_path / "b.cfg"
        q.write_text(dump_kv(cfg))
        assert load_run_config(str(q)) == cfg


def test_shipped_configs_load():
    import pathlib

    files = sorted((pathlib.Path(__file__).parent.parent / "configs").glob("*.cfg"))
    assert len(files) == 3
    for f in files:
        load_run_config(str(f))
