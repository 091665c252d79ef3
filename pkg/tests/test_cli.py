"""The ``dtri`` command line, driven in-process through ``main``."""

import json

import numpy as np
import pytest

from dtriangle.cli import main
from dtriangle.data import write_idx
from dtriangle.images import decode_pgm

TINY = """
iterations = 6
batch_size = 16
prior_batch_size = 16
log_interval = 2
model.hidden = 8
model.gen_output = linear
data.n = 64
map.starts = noise
map.n_starts = 20
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


@pytest.fixture
def trained(tmp_path, cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    return out


@pytest.fixture
def idx_cfg(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (16, 8, 8), dtype=np.uint8)
    write_idx(str(tmp_path / "i.idx"), imgs)
    write_idx(str(tmp_path / "l.idx"), rng.integers(0, 2, 16, dtype=np.uint8))
    p = tmp_path / "img.cfg"
    p.write_text(
        f"iterations = 4\nbatch_size = 8\nprior_batch_size = 8\nlog_interval = 2\n"
        f"model.hidden = 8\nmodel.latent_dim = 2\ndata.source = idx\n"
        f"data.images = {tmp_path / 'i.idx'}\ndata.labels = {tmp_path / 'l.idx'}\n"
    )
    return str(p)


class TestTrain:
    def test_outputs_and_seed(self, tmp_path, cfg):
        out = tmp_path / "r"
        assert main(["train", "--config", cfg, "--out", str(out), "--seed", "7"]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 7
        assert "seed = 7" in (out / "config.txt").read_text()
        assert (out / "final.dtri").exists()

    def test_rerun_identical_metrics(self, tmp_path, cfg):
        for name in "ab":
            assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_refuses_nonempty_out(self, trained, cfg):
        assert main(["train", "--config", cfg, "--out", str(trained)]) == 2
        assert main(["train", "--config", cfg, "--out", str(trained), "--force"]) == 0

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "gone.cfg"), "--out", str(tmp_path / "o")]) == 2
        assert "gone.cfg" in capsys.readouterr().err

    def test_bad_key(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("lr_bogus = 1\n")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_image_sample_grids(self, tmp_path, idx_cfg):
        out = tmp_path / "img"
        assert main(["train", "--config", idx_cfg, "--out", str(out)]) == 0
        assert sorted(p.name for p in out.glob("samples_*.pgm")) == ["samples_0000000.pgm", "samples_0000002.pgm"]

    def test_no_command(self):
        assert main([]) == 2


class TestOtherCommands:
    def test_eval(self, tmp_path, trained, cfg):
        out = tmp_path / "ev"
        assert main(["eval", "--config", cfg, "--checkpoint", str(trained / "final.dtri"), "--out", str(out)]) == 0
        doc = json.loads((out / "eval.json").read_text())
        assert doc["recon_mse"] >= 0 and len(doc["mode_coverage"]) == 2

    def test_eval_missing_checkpoint(self, tmp_path, cfg):
        assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "x.dtri"), "--out", str(tmp_path / "o")]) == 2

    def test_eval_corrupt_checkpoint(self, tmp_path, cfg):
        bad = tmp_path / "bad.dtri"
        bad.write_bytes(b"nonsense")
        assert main(["eval", "--config", cfg, "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_map_checkpoint(self, tmp_path, trained, cfg):
        out = tmp_path / "m"
        assert main(["map", "--config", cfg, "--checkpoint", str(trained / "final.dtri"), "--out", str(out)]) == 0
        doc = json.loads((out / "dg.json").read_text())
        assert len(doc["merges"]) == len(doc["leaves"]) - 1
        assert (out / "dg.dot").read_text().startswith("digraph")

    def test_map_analytic(self, tmp_path):
        out = tmp_path / "dw"
        assert main(["map", "--analytic", "doublewell", "--out", str(out)]) == 0
        assert len(json.loads((out / "dg.json").read_text())["leaves"]) == 2

    def test_map_unknown_analytic(self, tmp_path):
        assert main(["map", "--analytic", "nope", "--out", str(tmp_path / "o")]) == 2

    def test_map_empty_starts(self, tmp_path):
        p = tmp_path / "e.cfg"
        p.write_text("map.n_starts = 0\n")
        assert main(["map", "--config", str(p), "--analytic", "doublewell", "--out", str(tmp_path / "o")]) == 2

    def test_map_images(self, tmp_path, idx_cfg):
        run = tmp_path / "img"
        assert main(["train", "--config", idx_cfg, "--out", str(run)]) == 0
        out = tmp_path / "mi"
        assert main(["map", "--config", idx_cfg, "--checkpoint", str(run / "final.dtri"), "--out", str(out)]) == 0
        rows = (out / "basins.csv").read_text().splitlines()
        assert rows[0] == "basin,size,min_energy,purity"
        assert sum(int(r.split(",")[1]) for r in rows[1:]) == 16

    def test_sample_grid(self, tmp_path, idx_cfg):
        run = tmp_path / "img"
        assert main(["train", "--config", idx_cfg, "--out", str(run)]) == 0
        out = tmp_path / "s"
        assert main(["sample", "--checkpoint", str(run / "final.dtri"), "--out", str(out), "--n", "64"]) == 0
        assert decode_pgm((out / "samples.pgm").read_bytes()).shape == (8 * 9 + 1, 8 * 9 + 1)

    def test_sample_csv(self, tmp_path, trained):
        out = tmp_path / "s"
        assert main(["sample", "--checkpoint", str(trained / "final.dtri"), "--out", str(out), "--n", "5"]) == 0
        assert len((out / "samples.csv").read_text().splitlines()) == 6

    def test_recover(self, tmp_path, idx_cfg):
        out = tmp_path / "rec"
        assert main(["recover", "--config", idx_cfg, "--mask", "P.5", "--out", str(out)]) == 0
        trace = (out / "recovery_trace.csv").read_text().splitlines()
        assert trace[0] == "update_index,mask_kind,recovery_error,baseline_error"
        assert (out / "recovery.pgm").exists()

    def test_recover_unknown_mask(self, tmp_path, idx_cfg, capsys):
        assert main(["recover", "--config", idx_cfg, "--mask", "Q7", "--out", str(tmp_path / "o")]) == 2
        assert "P.5" in capsys.readouterr().err

    def test_recover_block_too_big(self, tmp_path, idx_cfg):
        assert main(["recover", "--config", idx_cfg, "--mask", "B20", "--out", str(tmp_path / "o")]) == 2

    def test_recover_needs_images(self, tmp_path, cfg):
        assert main(["recover", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path / "g")]) == 0
        assert "PASS" in capsys.readouterr().out
