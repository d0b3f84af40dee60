import csv
import io
from pathlib import Path

import numpy as np
import pytest

from tcdepth.cli import EXIT_INVALID, EXIT_NUMERICAL, EXIT_OK, main
from tcdepth.dataset import MANIFEST_NAME, clip_split, read_depth, stereo_split
from tcdepth.flowgeom import FlowField
from tcdepth.io import read_flo, read_manifest, read_mask, read_pfm, write_flo, write_pfm
from tcdepth.model import load_checkpoint
from tcdepth.synth import Camera, Scene, analytic_flow

SYNTH_ARGS = ["--height", "12", "--width", "16", "--clip-frames", "10", "--n-train", "3", "--n-val", "2",
              "--n-test", "2", "--n-train-clips", "2", "--n-test-clips", "1"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", str(root), "--seed", "1"] + SYNTH_ARGS) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def oracle_stereo(tmp_path_factory):
    """Exact rectified flows of a wide fronto-parallel plane and its disparity."""
    root = tmp_path_factory.mktemp("stereo")
    size = (16, 640)
    scene = Scene(base_depth=2.0, texture_seed=1)
    left = Camera.centered(100.0, size)
    right = left.moved((0.1, 0.0, 0.0))
    write_flo(root / "lr.flo", analytic_flow(scene, left, right, size).flow)
    write_flo(root / "rl.flo", analytic_flow(scene, right, left, size).flow)
    write_pfm(root / "gt.pfm", np.full(size, 5.0))
    return root


class TestSynth:
    def test_manifest(self, dataset):
        manifest = read_manifest(dataset / MANIFEST_NAME)
        assert len(manifest.split("train", "stereo")) == 3
        assert len(manifest.split("test", "clip")) == 1
        (clip,) = clip_split(manifest, "test")
        assert len(clip) == 10 and clip.flow(0, 9).shape == (12, 16)
        img, gt = stereo_split(manifest, "val")[0]
        assert img.shape == (12, 16, 3) and gt.shape == (12, 16)

    def test_deterministic(self, dataset, tmp_path):
        assert main(["synth", str(tmp_path), "--seed", "1"] + SYNTH_ARGS) == EXIT_OK
        files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
        assert all((dataset / f).read_bytes() == (tmp_path / f).read_bytes() for f in files)


class TestFlowCommands:
    def test_disparity_on_oracle_flows(self, oracle_stereo, tmp_path):
        args = ["disparity", "--flow-ab", str(oracle_stereo / "lr.flo"), "--flow-ba", str(oracle_stereo / "rl.flo"),
                "--gt", str(oracle_stereo / "gt.pfm"), "--out", str(tmp_path), "--csv", str(tmp_path / "d.csv")]
        assert main(args) == EXIT_OK
        header, row = read_csv(tmp_path / "d.csv")
        assert header == ["id", "n_valid", "masked_fraction", "mae_px"]
        assert float(row[2]) <= 0.01 and float(row[3]) < 1e-6
        d = read_depth(tmp_path / "lr_disparity.pfm")
        assert d.valid.mean() >= 0.99
        assert main(args[:-2] + ["--csv", str(tmp_path / "n.csv"), "--flow-noise", "0.05", "--seed", "3"]) == EXIT_OK
        assert float(read_csv(tmp_path / "n.csv")[1][3]) < 0.1

    def test_disparity_from_manifest(self, dataset, tmp_path):
        assert main(["disparity", "--manifest", str(dataset / MANIFEST_NAME), "--split", "test", "--out",
                     str(tmp_path), "--csv", str(tmp_path / "d.csv")]) == EXIT_OK
        rows = read_csv(tmp_path / "d.csv")
        assert len(rows) == 3 and all(float(r[3]) < 1e-4 for r in rows[1:])

    def test_mask(self, tmp_path):
        write_flo(tmp_path / "ab.flo", FlowField.constant((6, 8), 3.0, 0.0))
        write_flo(tmp_path / "ba.flo", FlowField.constant((6, 8), -3.0, 0.0))
        assert main(["mask", "--flow-ab", str(tmp_path / "ab.flo"), "--flow-ba", str(tmp_path / "ba.flo"),
                     "--out", str(tmp_path), "--csv", str(tmp_path / "m.csv")]) == EXIT_OK
        m = read_mask(tmp_path / "ab_mask.png")
        assert m[:, :5].all() and not m[:, 5:].any()
        assert read_csv(tmp_path / "m.csv")[1] == ["ab", "48", repr(18 / 48)]

    def test_warp(self, tmp_path, capsys):
        write_flo(tmp_path / "f.flo", FlowField.constant((4, 5), 1.0, 0.0))
        write_pfm(tmp_path / "t.pfm", np.tile(np.arange(5.0), (4, 1)))
        assert main(["warp", str(tmp_path / "f.flo"), str(tmp_path / "t.pfm"), "--out", str(tmp_path / "w.pfm"),
                     "--mask-out", str(tmp_path / "w.png")]) == EXIT_OK
        out = read_pfm(tmp_path / "w.pfm")
        np.testing.assert_array_equal(out[:, :4], np.tile(np.arange(1.0, 5.0), (4, 1)))
        assert np.isnan(out[:, 4]).all() and not read_mask(tmp_path / "w.png")[:, 4].any()
        assert "valid_fraction=0.8" in capsys.readouterr().out


class TestEvaluation:
    def test_eval_ssimae_affine_predictions(self, dataset, tmp_path):
        manifest = read_manifest(dataset / MANIFEST_NAME)
        for r in manifest.split("test", "stereo"):
            gt = read_depth(manifest.path(r["disparity"]))
            write_pfm(tmp_path / f"{r['id']}.pfm", np.where(gt.valid, -2.0 * gt.values + 3.0, 0.0))
        assert main(["eval-ssimae", "--manifest", str(dataset / MANIFEST_NAME), "--pred-dir", str(tmp_path),
                     "--csv", str(tmp_path / "s.csv")]) == EXIT_OK
        rows = read_csv(tmp_path / "s.csv")
        assert rows[0] == ["id", "n_pixels", "ssimae"] and rows[-1][0] == "mean"
        assert float(rows[-1][2]) < 1e-6  # predictions are stored as float32

    def test_eval_temporal_replayed_disparity(self, dataset, tmp_path):
        manifest = read_manifest(dataset / MANIFEST_NAME)
        (r,) = manifest.split("test", "clip")
        (tmp_path / r["id"]).mkdir()
        for k, rel in enumerate(r["disparity"]):
            d = read_depth(manifest.path(rel))
            write_pfm(tmp_path / r["id"] / f"{k:03d}.pfm", np.where(d.valid, d.values, 0.0))
        code = main(["eval-temporal", "--manifest", str(dataset / MANIFEST_NAME), "--pred-dir", str(tmp_path),
                     "--csv", str(tmp_path / "t.csv"), "--figures", str(tmp_path / "fig")])
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "t.csv")
        assert rows[0] == ["clip_id", "n_frames", "n_tracked", "inconsistency"] and rows[-1][0] == "all"
        assert float(rows[-1][3]) < 1e-6
        assert (tmp_path / "fig" / "trajectories.png").stat().st_size > 0

    def test_untrackable_clip_is_numerical_failure(self, tmp_path):
        data = tmp_path / "short"
        args = list(SYNTH_ARGS)
        args[args.index("--clip-frames") + 1] = "4"
        assert main(["synth", str(data)] + args) == EXIT_OK
        net_dir = tmp_path / "net"
        assert main(["train", "--manifest", str(data / MANIFEST_NAME), "--out", str(net_dir), "--losses", "sup",
                     "--max-epochs", "1", "--batches-per-epoch", "1", "--batch-size", "2"]) == EXIT_OK
        assert main(["eval-temporal", "--manifest", str(data / MANIFEST_NAME),
                     "--checkpoint", str(net_dir / "checkpoint.bin")]) == EXIT_NUMERICAL


class TestTrainAndCheck:
    def test_train_outputs(self, dataset, tmp_path):
        (tmp_path / "cfg.txt").write_text("lr = 0.02\nbatch_size = 2\nmax_epochs = 5\n")
        out = tmp_path / "run"
        assert main(["train", "--manifest", str(dataset / MANIFEST_NAME), "--out", str(out), "--config",
                     str(tmp_path / "cfg.txt"), "--max-epochs", "2", "--batches-per-epoch", "2",
                     "--losses", "sup,temp,aug", "--figures"]) == EXIT_OK
        for name in ["checkpoint.bin", "steps.csv", "validation.csv", "config.txt", "training.png"]:
            assert (out / name).stat().st_size > 0
        cfg = (out / "config.txt").read_text()
        assert "lr = 0.02" in cfg and "max_epochs = 2" in cfg and "enabled_losses = sup,temp,aug" in cfg
        assert len(read_csv(out / "validation.csv")) == 3
        load_checkpoint(out / "checkpoint.bin")
        assert main(["eval-ssimae", "--manifest", str(dataset / MANIFEST_NAME), "--checkpoint",
                     str(out / "checkpoint.bin"), "--csv", str(tmp_path / "s.csv")]) == EXIT_OK

    def test_gradcheck_single_seed(self, tmp_path):
        assert main(["gradcheck", "--n-seeds", "1", "--csv", str(tmp_path / "g.csv")]) == EXIT_OK
        rows = read_csv(tmp_path / "g.csv")
        assert rows[0] == ["seed", "loss", "n_params", "draw", "max_rel_error", "passed"]
        assert [r[1] for r in rows[1:]] == ["sup", "aug", "temp"] and all(r[5] == "1" for r in rows[1:])

    def test_gradcheck_failure_exit_code(self, tmp_path):
        assert main(["gradcheck", "--n-seeds", "1", "--tol", "1e-30", "--csv", str(tmp_path / "g.csv")]) == \
            EXIT_NUMERICAL


class TestErrors:
    def test_missing_manifest(self, tmp_path):
        assert main(["eval-ssimae", "--manifest", str(tmp_path / "nope.jsonl"), "--pred-dir", "x"]) == EXIT_INVALID

    def test_corrupt_flow(self, tmp_path):
        (tmp_path / "a.flo").write_bytes(b"junk junk junk")
        assert main(["mask", "--flow-ab", str(tmp_path / "a.flo"), "--flow-ba", str(tmp_path / "a.flo"),
                     "--out", str(tmp_path)]) == EXIT_INVALID

    def test_missing_inputs(self, dataset, tmp_path):
        assert main(["mask", "--out", str(tmp_path)]) == EXIT_INVALID
        assert main(["eval-ssimae", "--manifest", str(dataset / MANIFEST_NAME)]) == EXIT_INVALID

    def test_bad_config(self, dataset, tmp_path):
        (tmp_path / "cfg.txt").write_text("momentum = 0.9\n")
        assert main(["train", "--manifest", str(dataset / MANIFEST_NAME), "--out", str(tmp_path / "r"),
                     "--config", str(tmp_path / "cfg.txt")]) == EXIT_INVALID

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
