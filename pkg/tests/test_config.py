"""Tests for the run configuration: validation, flat file format, precedence, seeds."""

from __future__ import annotations

import pytest

from canvasgan.config import (
    RunConfig,
    build_config,
    dump_flat,
    load_config,
    parse_flat,
    save_config,
    subsystem_seed,
)
from canvasgan.errors import ConfigError


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class TestRunConfig:
    def test_defaults_are_consistent(self):
        cfg = RunConfig()
        assert cfg.generator.image_size == cfg.data.image_size == 32
        assert cfg.generator.timesteps == 4
        assert cfg.training.kl_weight == 2.0
        assert cfg.training.kl_per_dim is True
        assert cfg.metrics.splits == 10

    def test_out_dir_from_env(self, monkeypatch):
        monkeypatch.setenv("CANVASGAN_OUT_DIR", "/tmp/elsewhere")
        assert RunConfig().out_dir == "/tmp/elsewhere"

    def test_image_size_must_agree(self):
        with pytest.raises(ConfigError, match="image_size"):
            build_config({"generator.image_size": 16})

    def test_plane_size_must_divide_by_power_of_two(self):
        with pytest.raises(ConfigError):
            build_config({"generator.plane_size": 12})

    def test_manifest_needs_path(self):
        with pytest.raises(ConfigError, match="manifest_path"):
            build_config({"data.source": "manifest"})

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"generator.depth": 3})

    def test_batch_size_at_least_two(self):
        with pytest.raises(ConfigError):
            build_config({"training.batch_size": 1})

    def test_assignment_is_validated(self):
        cfg = RunConfig()
        with pytest.raises(ValueError):
            cfg.generator.timesteps = 0


# ---------------------------------------------------------------------------
# Flat format
# ---------------------------------------------------------------------------


class TestFlatFormat:
    def test_parse_values_and_comments(self):
        text = "# desk run\nseed=7\n\ngenerator.timesteps = 2\ndata.colors=[\"red\", \"blue\"]\nout_dir=runs/a\n"
        flat = parse_flat(text)
        assert flat == {
            "seed": 7,
            "generator.timesteps": 2,
            "data.colors": ["red", "blue"],
            "out_dir": "runs/a",
        }

    def test_later_keys_win(self):
        assert parse_flat("seed=1\nseed=2\n") == {"seed": 2}

    def test_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_flat("seed=1\nnot a pair\n")

    def test_parse_serialize_fixpoint(self):
        cfg = build_config({"seed": 3, "out_dir": "123", "data.colors": ["red", "green"]})
        text = dump_flat(cfg)
        again = build_config(parse_flat(text))
        assert again == cfg
        assert dump_flat(again) == text
        assert 'out_dir="123"' in text

    def test_dump_is_sorted(self):
        keys = [line.split("=", 1)[0] for line in dump_flat(RunConfig()).splitlines()]
        assert keys == sorted(keys)


# ---------------------------------------------------------------------------
# Precedence
# ---------------------------------------------------------------------------


class TestLoadConfig:
    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("seed=5\ngenerator.timesteps=2\n", encoding="utf-8")
        cfg = load_config(path, {"seed": 9})
        assert cfg.seed == 9
        assert cfg.generator.timesteps == 2

    def test_string_overrides_are_parsed(self):
        cfg = load_config(None, {"training.steps": "12", "data.colors": '["red","blue"]'})
        assert cfg.training.steps == 12
        assert cfg.data.colors == ["red", "blue"]

    def test_base_is_lowest_precedence(self, tmp_path):
        base = build_config({"seed": 4, "generator.timesteps": 3})
        path = tmp_path / "run.cfg"
        path.write_text("generator.timesteps=2\n", encoding="utf-8")
        cfg = load_config(path, base=base)
        assert cfg.seed == 4
        assert cfg.generator.timesteps == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.cfg")

    def test_save_then_load(self, tmp_path):
        cfg = build_config({"seed": 11, "training.steps": 7})
        path = save_config(cfg, tmp_path / "echo" / "run.cfg")
        assert load_config(path) == cfg


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


class TestSubsystemSeed:
    def test_deterministic(self):
        assert subsystem_seed(0, "data") == subsystem_seed(0, "data")

    def test_independent_per_name_and_root(self):
        seeds = {subsystem_seed(r, n) for r in (0, 1) for n in ("data", "vse", "generator")}
        assert len(seeds) == 6

    def test_fits_32_bits(self):
        assert 0 <= subsystem_seed(2**40, "train") < 2**32
