"""End-to-end tests of the subcommands on a tiny synthetic run."""

from __future__ import annotations

import json

import pytest

from canvasgan.cli import (
    ATTENTION_DIR,
    CONFIG_ECHO,
    REPORT_FILE,
    SAMPLES_DIR,
    VSE_DIR,
    VSE_LOSSES_FILE,
    main,
)
from canvasgan.config import build_config, save_config
from canvasgan.training import LOSSES_FILE


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, tiny_flat):
    root = tmp_path_factory.mktemp("cfg")
    return save_config(build_config({**tiny_flat, "out_dir": str(root / "unused")}), root / "tiny.txt")


def _pipeline(config_file, out):
    assert main(["vse-pretrain", "--config", str(config_file), "--out", str(out)]) == 0
    assert main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_file):
    return _pipeline(config_file, tmp_path_factory.mktemp("run"))


class TestPipeline:
    def test_pretrain_outputs(self, run_dir):
        assert (run_dir / VSE_DIR / "params.bin").is_file()
        assert (run_dir / VSE_LOSSES_FILE).is_file()
        assert (run_dir / CONFIG_ECHO).is_file()

    def test_train_outputs(self, run_dir):
        assert (run_dir / "ckpt_2").is_dir() and (run_dir / "ckpt_3").is_dir()
        assert (run_dir / "loss_curves.png").is_file()
        lines = (run_dir / LOSSES_FILE).read_text(encoding="utf-8").splitlines()
        assert lines[0] == "step,g_loss,d_match,d_mismatch,d_relevant"
        assert len(lines) == 4

    def test_same_seed_same_losses(self, run_dir, config_file, tmp_path):
        again = _pipeline(config_file, tmp_path / "again")
        assert (again / LOSSES_FILE).read_bytes() == (run_dir / LOSSES_FILE).read_bytes()
        assert (again / VSE_LOSSES_FILE).read_bytes() == (run_dir / VSE_LOSSES_FILE).read_bytes()

    def test_missing_manifest_writes_nothing(self, tmp_path):
        out = tmp_path / "out"
        code = main(["vse-pretrain", "--out", str(out),
                     "--set", "data.source=manifest",
                     "--set", f"data.manifest_path={tmp_path / 'absent.tsv'}"])
        assert code == 1
        assert not (out / VSE_DIR).exists()

    def test_train_without_vse(self, config_file, tmp_path):
        assert main(["train", "--config", str(config_file), "--out", str(tmp_path)]) == 1

    def test_bad_override(self, tmp_path):
        assert main(["vse-pretrain", "--out", str(tmp_path), "--set", "no-equals-sign"]) == 1


class TestSample:
    def _sample(self, run_dir, out, *extra):
        return main(["sample", "--checkpoint", str(run_dir / "ckpt_3"), "--out", str(out),
                     "--caption", "a red circle on a gray background", *extra])

    def test_count_and_rerun_bytes(self, run_dir, tmp_path):
        assert self._sample(run_dir, tmp_path / "a", "--count", "3") == 0
        assert self._sample(run_dir, tmp_path / "b", "--count", "3") == 0
        a, b = tmp_path / "a" / SAMPLES_DIR, tmp_path / "b" / SAMPLES_DIR
        names = sorted(p.name for p in a.iterdir())
        assert names == [f"sample_{i:03d}.{ext}" for i in range(3) for ext in ("json", "png")]
        assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)

    def test_trace_matches_caption(self, run_dir, tmp_path):
        assert self._sample(run_dir, tmp_path) == 0
        doc = json.loads((tmp_path / SAMPLES_DIR / "sample_000.json").read_text(encoding="utf-8"))
        assert doc["image"] == "sample_000.png"
        assert len(doc["steps"]) == 2
        assert doc["steps"][0]["token_strings"] == ["a", "red", "circle", "on", "a", "gray", "background"]

    def test_empty_caption(self, run_dir, tmp_path):
        code = main(["sample", "--checkpoint", str(run_dir / "ckpt_3"), "--out", str(tmp_path),
                     "--caption", "   "])
        assert code == 1
        assert not (tmp_path / SAMPLES_DIR).exists()

    def test_zero_count(self, run_dir, tmp_path):
        assert self._sample(run_dir, tmp_path, "--count", "0") == 1

    def test_architecture_override_rejected(self, run_dir, tmp_path):
        assert self._sample(run_dir, tmp_path, "--set", "generator.timesteps=5") == 1

    def test_attention_map(self, run_dir, tmp_path):
        assert self._sample(run_dir, tmp_path) == 0
        trace = tmp_path / SAMPLES_DIR / "sample_000.json"
        assert main(["attn-map", "--trace", str(trace), "--out", str(tmp_path)]) == 0
        assert (tmp_path / ATTENTION_DIR / "sample_000_attention.png").is_file()

    def test_attention_map_bad_trace(self, tmp_path):
        trace = tmp_path / "bad.json"
        trace.write_text("[]", encoding="utf-8")
        assert main(["attn-map", "--trace", str(trace), "--out", str(tmp_path)]) == 1

    def test_attention_map_binary_trace(self, tmp_path):
        trace = tmp_path / "binary.json"
        trace.write_bytes(b"\xff\xfe\x00\x01")
        assert main(["attn-map", "--trace", str(trace), "--out", str(tmp_path)]) == 1
        assert not (tmp_path / ATTENTION_DIR).exists()


class TestEval:
    def test_report(self, run_dir, tmp_path):
        assert main(["eval", "--checkpoint", str(run_dir / "ckpt_3"), "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / REPORT_FILE).read_text(encoding="utf-8"))
        assert 1.0 - 1e-9 <= report["inception_mean"] <= 4.0 + 1e-9
        assert report["inception_std"] >= 0.0
        assert set(report["recall_at"]) == {"1", "2"}
        assert all(0.0 <= v <= 1.0 for v in report["recall_at"].values())

    def test_same_seed_same_report(self, run_dir, tmp_path):
        for name in ("a", "b"):
            assert main(["eval", "--checkpoint", str(run_dir / "ckpt_3"), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / REPORT_FILE).read_bytes() == (tmp_path / "b" / REPORT_FILE).read_bytes()

    def test_fewer_samples_than_splits(self, run_dir, tmp_path):
        code = main(["eval", "--checkpoint", str(run_dir / "ckpt_3"), "--out", str(tmp_path),
                     "--set", "metrics.num_samples=1"])
        assert code == 1
        assert not (tmp_path / REPORT_FILE).exists()

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "absent")]) == 1
