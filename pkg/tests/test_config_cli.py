import csv
import os

import numpy as np
import pytest

from depthforge import io
from depthforge.cli import main
from depthforge.config import RunConfig, load_config, parse_seeds
from depthforge.errors import InvalidConfig

SMALL = ["--set", "dims=24x24", "--set", "sparse_count=80"]


class TestSeeds:
    @pytest.mark.parametrize("text,expected", [("0..3", (0, 1, 2, 3)), ("1,4,7", (1, 4, 7)),
                                               ("", ()), ("0..1,5", (0, 1, 5))])
    def test_parse(self, text, expected):
        assert parse_seeds(text) == expected

    @pytest.mark.parametrize("text", ["3..1", "a", "1..x"])
    def test_bad(self, text):
        with pytest.raises(InvalidConfig):
            parse_seeds(text)


class TestRunConfig:
    def test_round_trip_through_file(self, tmp_path):
        cfg = RunConfig().with_overrides({"eps": "0.03", "seeds": "2..4", "quantiles": "0.02,0.98",
                                          "h2i_bins": "0.01,0.1;0.2,0.3", "use_sigma2": "false"})
        p = tmp_path / "c.txt"
        p.write_text(cfg.to_kv())
        assert load_config(p) == cfg

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.n_samples == 10 and cfg.eps == 0.01 and cfg.iterations == 6 and cfg.windows == (13, 3)
        assert cfg.noise_ratios == (0.05, 0.10, 0.20) and cfg.sparse_count == 500
        assert cfg.h2i_bins[0] == (0.01, 0.1)

    @pytest.mark.parametrize("key,value", [("eps", "-1"), ("n_samples", "0"), ("dims", "8x8"), ("nope", "1"),
                                           ("use_sigma2", "maybe"), ("windows", "4"), ("tau", "abc")])
    def test_invalid(self, key, value):
        with pytest.raises(InvalidConfig):
            RunConfig().with_overrides({key: value})

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("eps = 0.05\nn_samples = 4\n")
        cfg = load_config(p, {"n_samples": "6"})
        assert (cfg.eps, cfg.n_samples) == (0.05, 6)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenes")
    assert main(["synth", "-o", str(out), "--seeds", "3", "--dims", "24x24"]) == 0
    return out


class TestCli:
    def test_synth_outputs(self, scene_dir):
        assert (scene_dir / "scene_3.ppm").exists() and (scene_dir / "config.resolved.txt").exists()
        rows = list(csv.reader(open(scene_dir / "manifest.csv")))
        assert rows[1][0] == "3" and io.read_pfm(scene_dir / "scene_3.pfm").shape == (24, 24)

    def test_corrupt_pipeline_eval(self, scene_dir, tmp_path):
        c = tmp_path / "c"
        assert main(["corrupt", "-o", str(c), "--depth", str(scene_dir / "scene_3.pfm"), "--seed", "1"] + SMALL) == 0
        assert np.count_nonzero(io.read_pfm(c / "cond.pfm")) <= 80
        p = tmp_path / "p"
        assert main(["pipeline", "-o", str(p), "--rgb", str(scene_dir / "scene_3.ppm"), "--depth",
                     str(c / "cond.pfm"), "--n-samples", "3"] + SMALL) == 0
        for name in ("mu.pfm", "sigma2.pfm", "diff_only.pfm", "refined.pfm", "mask_final.pgm", "fit.csv"):
            assert (p / name).exists()
        r = tmp_path / "r"
        assert main(["refine", "-o", str(r), "--rgb", str(scene_dir / "scene_3.ppm"), "--depth",
                     str(c / "cond.pfm"), "--mu", str(p / "mu.pfm"), "--sigma2", str(p / "sigma2.pfm")]) == 0
        report = tmp_path / "e.csv"
        assert main(["eval", "--pred", str(p / "refined.pfm"), "--gt", str(scene_dir / "scene_3.pfm"),
                     "-o", str(report), "--error-map", str(tmp_path / "err.pgm")]) == 0
        header, row = list(csv.reader(open(report)))[:2]
        assert tuple(header) == ("run_id", "protocol", "condition", "rmse", "delta_1.25", "tau", "n_pixels", "seed")
        assert float(row[3]) >= 0

    def test_experiment_report(self, tmp_path):
        out = tmp_path / "x"
        assert main(["experiment", "-o", str(out), "--protocol", "noisy-completion", "--seeds", "0",
                     "--n-samples", "2", "--set", "noise_ratios=0.1"] + SMALL) == 0
        rows = list(csv.DictReader(open(out / "report.csv")))
        ids = {r["run_id"] for r in rows}
        assert {"refined-s0", "raw-s0", "refined-mean"} <= ids

    def test_empty_seed_list(self, tmp_path):
        out = tmp_path / "x"
        assert main(["experiment", "-o", str(out), "--protocol", "inpainting", "--seeds", ""] + SMALL) == 0
        assert len(list(csv.reader(open(out / "report.csv")))) == 1

    def test_exit_codes(self, tmp_path, monkeypatch, capsys):
        assert main(["synth", "-o", str(tmp_path), "--dims", "0x0"]) == 2
        assert main(["eval", "--pred", str(tmp_path / "none.pfm"), "--gt", str(tmp_path / "none.pfm")]) == 3
        monkeypatch.setenv("DEPTHFORGE_THREADS", "zero")
        assert main(["experiment", "-o", str(tmp_path / "y"), "--protocol", "inpainting", "--seeds", "0"]
                    + SMALL) == 2
        bad = tmp_path / "bad.pfm"
        bad.write_bytes(b"Pf\n2 2\n-1.0\n")
        assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == 3
        # constant depth cannot be normalized: numerical failure
        io.write_pfm(np.full((16, 16), 2.0), tmp_path / "flat.pfm")
        io.write_ppm(np.zeros((16, 16, 3)), tmp_path / "flat.ppm")
        assert main(["pipeline", "-o", str(tmp_path / "z"), "--rgb", str(tmp_path / "flat.ppm"),
                     "--depth", str(tmp_path / "flat.pfm")]) == 4
        capsys.readouterr()

    def test_module_entry_point(self):
        import subprocess
        import sys
        r = subprocess.run([sys.executable, "-m", "depthforge", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "pipeline" in r.stdout
