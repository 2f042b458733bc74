import json
from pathlib import Path

import numpy as np
import pytest

from ssdlab import cli
from ssdlab.io import load_checkpoint, read_csv, sha256_file


def run(*args):
    return cli.main([str(a) for a in args])


def files(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def manifest(root: Path) -> dict:
    return json.loads((root / "manifest.json").read_text())


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny dataset, model and sample set shared by the tests below."""
    root = tmp_path_factory.mktemp("pipe")
    assert run("shapes-gen", "--n", 30, "--seed", 2, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--epochs", 2, "--hidden", "16,16", "--eta", 0.5, "--lr", 1e-3, "--out", root / "train") == 0
    assert run("sample", "--model", root / "train/model.ssdm", "--n", 12, "--intervals", 4, "--out", root / "samples") == 0
    return root


class TestSpectrum:
    def test_beta_rows(self, tmp_path):
        assert run("spectrum", "--rho", 0.7, "--eta", 0.5, "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "spectrum.csv")
        assert [round(float(r["beta"]), 3) for r in rows] == [0.397, 1.083]

    def test_cov_file(self, tmp_path):
        cov = tmp_path / "cov.csv"
        cov.write_text("2,0\n0,1\n")
        assert run("spectrum", "--cov-file", cov, "--eta", 0.25, "--out", tmp_path / "o") == 0
        rows = read_csv(tmp_path / "o/spectrum.csv")
        assert [float(r["beta"]) for r in rows] == [0.75, 0.75]


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"rho": 0.5, "bogus": 1}))
        assert run("spectrum", "--config", cfg, "--out", tmp_path / "o") == 2
        assert "bogus" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_field_level_message(self, tmp_path, capsys):
        assert run("spectrum", "--eta", 1.5, "--out", tmp_path) == 2
        assert "eta" in capsys.readouterr().err

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"rho": 0.1, "eta": 0.5, "seed": 4}))
        assert run("spectrum", "--config", cfg, "--rho", 0.7, "--out", tmp_path / "o") == 0
        echo = manifest(tmp_path / "o")["config"]
        assert echo["rho"] == 0.7 and echo["seed"] == 4

    def test_sensitivity_needs_model(self, tmp_path, pipeline, capsys):
        assert run("sensitivity", "--data", pipeline / "data", "--out", tmp_path) == 2
        assert "model" in capsys.readouterr().err


class TestManifest:
    def test_checksums_match(self, pipeline):
        m = manifest(pipeline / "train")
        assert m["status"] == "ok"
        assert {o["path"] for o in m["outputs"]} == {"model.ssdm", "loss.csv"}
        for o in m["outputs"]:
            assert sha256_file(pipeline / "train" / o["path"]) == o["sha256"]

    def test_failure_removes_partial_outputs(self, tmp_path, monkeypatch):
        def broken(cfg, ctx):
            ctx.path("partial.csv").write_text("x\n")
            (ctx.out / "sub").mkdir()
            ctx.path("sub/also.csv").write_text("y\n")
            raise RuntimeError("boom")

        monkeypatch.setitem(cli.RUNNERS, "spectrum", broken)
        assert run("spectrum", "--out", tmp_path) == 1
        assert sorted(p.name for p in tmp_path.iterdir()) == ["manifest.json"]
        m = manifest(tmp_path)
        assert m["status"] == "failed" and "boom" in m["error"] and m["outputs"] == []

    def test_bad_checkpoint_fails(self, tmp_path):
        bad = tmp_path / "bad.ssdm"
        bad.write_bytes(b"NOPE")
        assert run("sample", "--model", bad, "--out", tmp_path / "o") == 1
        assert manifest(tmp_path / "o")["status"] == "failed"


class TestOutputs:
    def test_dataset_roundtrip(self, pipeline):
        ds = cli.load_dataset(pipeline / "data")
        assert ds.images.shape == (30, 16, 16)
        meta = json.loads((pipeline / "data/dataset.json").read_text())
        assert meta["seed"] == 2 and meta["min_area"] == 15
        assert [r["area"] for r in meta["images"]] == [int(i.sum()) for i in ds.images]

    def test_sample_outputs(self, pipeline):
        s = np.load(pipeline / "samples/samples.npy")
        assert s.shape == (12, 16, 16)
        info = json.loads((pipeline / "samples/sampling.json").read_text())
        assert info["nfe"] == 8 and len(info["times"]) == 5

    def test_model_options_reach_checkpoint(self, pipeline, tmp_path):
        args = ("--data", pipeline / "data", "--epochs", 1, "--hidden", "8", "--precondition", "--local-hidden", 4, "--skip")
        assert run("train", *args, "--out", tmp_path) == 0
        m = load_checkpoint(tmp_path / "model.ssdm")
        ds = cli.load_dataset(pipeline / "data")
        assert m.skip and m.local_hidden == 4 and m.image_shape == (16, 16)
        assert m.sigma_data == pytest.approx(np.sqrt(np.mean(ds.images.astype(float) ** 2)))

    def test_loss_csv(self, pipeline):
        rows = read_csv(pipeline / "train/loss.csv")
        assert [r["epoch"] for r in rows] == ["1", "2"]
        raw = (pipeline / "train/loss.csv").read_bytes()
        assert b"\r" not in raw

    def test_eval_and_sensitivity(self, pipeline, tmp_path):
        assert run("eval-spatial", "--samples", pipeline / "samples", "--out", tmp_path / "s") == 0
        assert run("eval-memorization", "--samples", pipeline / "samples", "--data", pipeline / "data", "--out", tmp_path / "m") == 0
        mem = json.loads((tmp_path / "m/memorization.json").read_text())
        assert mem["n"] == 12 and mem["mean"] > 0
        args = ("--data", pipeline / "data", "--n-images", 3, "--n-noise", 2)
        assert run("sensitivity", "--model", pipeline / "train/model.ssdm", *args, "--out", tmp_path / "e") == 0
        assert len(read_csv(tmp_path / "e/heatmap.csv")) == 256
        assert run("sensitivity", "--analytic", "--data", pipeline / "data", "--out", tmp_path / "a") == 0
        summary = json.loads((tmp_path / "a/sensitivity.json").read_text())
        assert summary["pixel"] == [8, 8]

    def test_score2d_columns(self, tmp_path):
        assert run("score2d", "--seed", 7, "--resolution", 5, "--out", tmp_path) == 0
        rows = read_csv(tmp_path / "scores.csv")
        assert list(rows[0]) == ["x1", "x2", "pop_s1", "pop_s2", "emp_s1", "emp_s2", "mask_s1", "mask_s2"]
        assert len(rows) == 25
        assert list(read_csv(tmp_path / "errors.csv")[0]) == ["x1", "x2", "emp_err", "mask_err"]


def _commands(pipe: Path):
    return {
        "spectrum": ["--rho", 0.3, "--eta", 0.8],
        "score2d": ["--seed", 7, "--eta", 0.5, "--resolution", 8],
        "shapes-gen": ["--n", 10, "--seed", 5],
        "train": ["--data", pipe / "data", "--epochs", 2, "--hidden", "8", "--eta", 0.5],
        "sample": ["--model", pipe / "train/model.ssdm", "--n", 40, "--intervals", 3, "--chunk", 8, "--snapshot-times", "0"],
        "eval-spatial": ["--samples", pipe / "samples"],
        "eval-memorization": ["--samples", pipe / "samples", "--data", pipe / "data"],
        "sensitivity": ["--model", pipe / "train/model.ssdm", "--data", pipe / "data", "--n-images", 4, "--n-noise", 3],
        "repro": ["--n-train", 20, "--n-samples", 30, "--epochs", 2, "--hidden", "8", "--sensitivity-images", 3, "--n-noise", 2],
    }


@pytest.mark.parametrize("command", list(cli.RUNNERS))
def test_deterministic_across_runs_and_threads(command, pipeline, tmp_path):
    args = _commands(pipeline)[command]
    outs = []
    for tag, threads in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / tag
        assert run(command, *args, "--threads", threads, "--out", out) == 0
        outs.append(out)
    ref = files(outs[0])
    assert ref
    for other in outs[1:]:
        assert files(other) == ref
    assert manifest(outs[0])["outputs"] == manifest(outs[2])["outputs"]


def test_version_flag(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--version"])
    assert "0.1.0" in capsys.readouterr().out
