import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from poseprior import dataio
from poseprior.numeric import SymMat2, spd_inverse_2x2
from poseprior.observation import Heatmap


def run_cli(args, env_extra=None):
    import os
    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "poseprior.cli", *args],
                          capture_output=True, text=True, env=env)


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    """Small end-to-end world: synth files plus a quickly trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    train_path = root / "train.jsonl"
    obs_path = root / "obs.jsonl"
    gt_path = root / "gt.jsonl"
    ckpt = root / "model.ckpt"
    proc = run_cli(["synth", "--out-train", str(train_path), "--out-obs", str(obs_path),
                    "--out-gt", str(gt_path), "--n-train", "300", "--n-eval", "2",
                    "--seed", "3"])
    assert proc.returncode == 0, proc.stderr
    proc = run_cli(["train", "--poses", str(train_path), "--out", str(ckpt),
                    "--steps", "150", "--batch", "32", "--hidden", "16", "--T", "20",
                    "--lr", "2e-3", "--seed", "1"])
    assert proc.returncode == 0, proc.stderr
    return {"root": root, "train": train_path, "obs": obs_path, "gt": gt_path,
            "ckpt": ckpt}


class TestTrainCommand:
    def test_zero_steps_writes_initialized_checkpoint(self, tiny_setup, tmp_path):
        out = tmp_path / "init.ckpt"
        proc = run_cli(["train", "--poses", str(tiny_setup["train"]), "--out", str(out),
                        "--steps", "0", "--hidden", "8", "--T", "10", "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        model = dataio.load_checkpoint(out)
        assert model.adam_steps == 0

    def test_missing_input_exits_2(self, tmp_path):
        proc = run_cli(["train", "--poses", str(tmp_path / "nope.jsonl"),
                        "--out", str(tmp_path / "m.ckpt")])
        assert proc.returncode == 2

    def test_divergence_exits_3(self, tiny_setup, tmp_path):
        proc = run_cli(["train", "--poses", str(tiny_setup["train"]),
                        "--out", str(tmp_path / "m.ckpt"),
                        "--steps", "60", "--batch", "8", "--hidden", "8", "--T", "10",
                        "--lr", "1e18", "--seed", "2"])
        assert proc.returncode == 3

    def test_resolved_config_echoed(self, tiny_setup, tmp_path):
        proc = run_cli(["train", "--poses", str(tiny_setup["train"]),
                        "--out", str(tmp_path / "m.ckpt"), "--steps", "0",
                        "--hidden", "8", "--T", "10", "--seed", "7"])
        assert proc.returncode == 0
        assert "resolved-config:" in proc.stderr
        assert '"seed": 7' in proc.stderr

    def test_config_file_fills_defaults(self, tiny_setup, tmp_path):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[sampler]\nhidden = 8\nt = 10\nsteps = 0\n")
        proc = run_cli(["train", "--poses", str(tiny_setup["train"]),
                        "--out", str(tmp_path / "m.ckpt"), "--config", str(cfg),
                        "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        model = dataio.load_checkpoint(tmp_path / "m.ckpt")
        assert model.hidden_dim == 8
        assert model.sched.T == 10


class TestEstimateCommand:
    def test_produces_hypotheses_and_metrics(self, tiny_setup, tmp_path):
        out = tmp_path / "hyp.jsonl"
        proc = run_cli(["estimate", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(out),
                        "-M", "5", "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        hyp = dataio.load_poses(out)
        assert hyp.num_poses == 10  # 2 frames x 5 hypotheses
        assert hyp.header_meta["M"] == 5
        assert {m["hypothesis"] for m in hyp.meta} == set(range(5))
        report = out.parent / (out.name + ".metrics.csv")
        rows = list(csv.DictReader(open(report)))
        assert rows[-1]["frame_id"] == "aggregate"

    def test_best_of_m_monotone_across_runs(self, tiny_setup, tmp_path):
        values = {}
        for m in (1, 50):
            out = tmp_path / f"hyp{m}.jsonl"
            proc = run_cli(["estimate", "--model", str(tiny_setup["ckpt"]),
                            "--obs", str(tiny_setup["obs"]), "--out", str(out),
                            "-M", str(m), "--seed", "2"])
            assert proc.returncode == 0, proc.stderr
            report = out.parent / (out.name + ".metrics.csv")
            rows = list(csv.DictReader(open(report)))
            values[m] = float(rows[-1]["mpjpe"])
        assert values[50] <= values[1]

    def test_gamma_zero_matches_sample(self, tiny_setup, tmp_path):
        # single-frame observation file so the stream namespaces line up
        records = dataio.load_observations(tiny_setup["obs"])[:1]
        obs1 = tmp_path / "obs1.jsonl"
        dataio.save_observations(records, obs1, dataio.DEFAULT_JOINT_NAMES)
        est_out = tmp_path / "est.jsonl"
        smp_out = tmp_path / "smp.jsonl"
        proc = run_cli(["estimate", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(obs1), "--out", str(est_out),
                        "-M", "4", "--gamma", "0", "--seed", "6"])
        assert proc.returncode == 0, proc.stderr
        proc = run_cli(["sample", "--model", str(tiny_setup["ckpt"]),
                        "--out", str(smp_out), "-n", "4", "--seed", "6"])
        assert proc.returncode == 0, proc.stderr
        est = dataio.load_poses(est_out)
        smp = dataio.load_poses(smp_out)
        assert np.array_equal(est.poses, smp.poses)

    def test_joint_count_mismatch_exits_2(self, tiny_setup, tmp_path):
        # checkpoint trained with a 16-joint skeleton against 17-joint observations
        ds = dataio.load_poses(tiny_setup["train"])
        smaller = dataio.PoseDataset(
            ds.joint_names[:16], ds.poses[:20, :16] - ds.poses[:20, :1], root_index=0)
        small_path = tmp_path / "small.jsonl"
        dataio.save_poses(smaller, small_path)
        small_ckpt = tmp_path / "small.ckpt"
        proc = run_cli(["train", "--poses", str(small_path), "--out", str(small_ckpt),
                        "--steps", "0", "--hidden", "8", "--T", "10", "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        proc = run_cli(["estimate", "--model", str(small_ckpt),
                        "--obs", str(tiny_setup["obs"]),
                        "--out", str(tmp_path / "x.jsonl"), "-M", "1", "--seed", "1"])
        assert proc.returncode == 2


class TestSampleCommand:
    def test_zero_samples_header_only(self, tiny_setup, tmp_path):
        out = tmp_path / "empty.jsonl"
        proc = run_cli(["sample", "--model", str(tiny_setup["ckpt"]),
                        "--out", str(out), "-n", "0", "--seed", "1"])
        assert proc.returncode == 0, proc.stderr
        ds = dataio.load_poses(out)
        assert ds.num_poses == 0

    def test_deterministic(self, tiny_setup, tmp_path):
        outs = []
        for i in range(2):
            out = tmp_path / f"s{i}.jsonl"
            proc = run_cli(["sample", "--model", str(tiny_setup["ckpt"]),
                            "--out", str(out), "-n", "3", "--seed", "11"])
            assert proc.returncode == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestCompleteCommand:
    def test_mask_by_name_and_all(self, tiny_setup, tmp_path):
        out = tmp_path / "c.jsonl"
        proc = run_cli(["complete", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(out),
                        "-M", "2", "--seed", "3", "--mask", "l_wrist,r_wrist"])
        assert proc.returncode == 0, proc.stderr
        assert dataio.load_poses(out).header_meta["masked_joints"] == [13, 16]

        out_all = tmp_path / "call.jsonl"
        proc = run_cli(["complete", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(out_all),
                        "-M", "2", "--seed", "3", "--mask", "all"])
        assert proc.returncode == 0, proc.stderr

    def test_unknown_joint_exits_2(self, tiny_setup, tmp_path):
        proc = run_cli(["complete", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(tmp_path / "x.jsonl"),
                        "-M", "1", "--seed", "3", "--mask", "left_flipper"])
        assert proc.returncode == 2

    def test_empty_mask_equals_estimate(self, tiny_setup, tmp_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        proc = run_cli(["complete", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(a),
                        "-M", "2", "--seed", "5", "--mask", ""])
        assert proc.returncode == 0, proc.stderr
        proc = run_cli(["estimate", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(b),
                        "-M", "2", "--seed", "5"])
        assert proc.returncode == 0, proc.stderr
        assert np.array_equal(dataio.load_poses(a).poses, dataio.load_poses(b).poses)


class TestSweepCommand:
    def test_cov_scale_rows(self, tiny_setup, tmp_path):
        out = tmp_path / "sweep.csv"
        proc = run_cli(["sweep", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(out),
                        "--sweep", "cov-scale", "--values", "1,10",
                        "-M", "4", "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 4  # 2 frames x 2 values
        assert {r["value"] for r in rows} == {"1.0", "10.0"}

    def test_gamma_sweep_reports_reprojection(self, tiny_setup, tmp_path):
        out = tmp_path / "gamma.csv"
        proc = run_cli(["sweep", "--model", str(tiny_setup["ckpt"]),
                        "--obs", str(tiny_setup["obs"]), "--out", str(out),
                        "--sweep", "gamma", "--values", "0.0002",
                        "-M", "2", "--seed", "2"])
        assert proc.returncode == 0, proc.stderr
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 2
        assert all(float(r["reprojection_px"]) >= 0.0 for r in rows)
        assert all(r["best_of_m_mpjpe"] for r in rows)


class TestFitHeatmapCommand:
    def test_fits_and_flags(self, tmp_path):
        center = np.array([20.0, 15.0])
        cov = SymMat2(6.0, 1.0, 4.0)
        xs = np.arange(48, dtype=float)
        gx, gy = np.meshgrid(xs, xs)
        d = np.stack([gx - center[0], gy - center[1]], axis=-1)
        quad = np.einsum("hwi,ij,hwj->hw", d, spd_inverse_2x2(cov).as_array(), d)
        good = Heatmap(48, 48, np.exp(-0.5 * quad))
        bad = Heatmap(1, 1, np.array([[1.0]]))
        good_path, bad_path = tmp_path / "good.hmp", tmp_path / "bad.hmp"
        dataio.save_heatmap(good, good_path)
        dataio.save_heatmap(bad, bad_path)
        out = tmp_path / "fit.jsonl"
        proc = run_cli(["fit-heatmap", str(good_path), str(bad_path), "--out", str(out)])
        assert proc.returncode == 0, proc.stderr
        recs = [json.loads(line) for line in open(out)]
        assert recs[0]["valid"] and np.allclose(recs[0]["mean"], center, atol=0.1)
        assert not recs[1]["valid"]
        assert "warning" in proc.stderr


class TestEvaluateCommand:
    def test_perfect_predictions_score_zero(self, tiny_setup, tmp_path):
        gt = dataio.load_poses(tiny_setup["gt"])
        poses, meta = [], []
        for i in range(gt.num_poses):
            for m in range(3):
                poses.append(gt.poses[i])
                meta.append({"frame_id": gt.meta[i]["frame_id"], "hypothesis": m})
        hyp = dataio.PoseDataset(gt.joint_names, np.stack(poses), meta)
        hyp_path = tmp_path / "hyp.jsonl"
        dataio.save_poses(hyp, hyp_path)
        out = tmp_path / "eval.csv"
        proc = run_cli(["evaluate", "--hyp", str(hyp_path), "--gt", str(tiny_setup["gt"]),
                        "--out", str(out)])
        assert proc.returncode == 0, proc.stderr
        rows = list(csv.DictReader(open(out)))
        agg = rows[-1]
        assert float(agg["mpjpe"]) == 0.0
        assert float(agg["pck150"]) == 100.0
        assert float(agg["auc"]) == 100.0

    def test_stride_selects_frames(self, tiny_setup, tmp_path):
        gt = dataio.load_poses(tiny_setup["gt"])
        poses = [gt.poses[i] for i in range(gt.num_poses)]
        meta = [{"frame_id": gt.meta[i]["frame_id"], "hypothesis": 0}
                for i in range(gt.num_poses)]
        hyp_path = tmp_path / "hyp.jsonl"
        dataio.save_poses(dataio.PoseDataset(gt.joint_names, np.stack(poses), meta), hyp_path)
        out = tmp_path / "eval.csv"
        proc = run_cli(["evaluate", "--hyp", str(hyp_path), "--gt", str(tiny_setup["gt"]),
                        "--out", str(out), "--stride", "2"])
        assert proc.returncode == 0, proc.stderr
        rows = list(csv.DictReader(open(out)))
        assert len(rows) == 2  # 1 of 2 frames + aggregate

    def test_frame_mismatch_exits_2(self, tiny_setup, tmp_path):
        gt = dataio.load_poses(tiny_setup["gt"])
        hyp_path = tmp_path / "hyp.jsonl"
        dataio.save_poses(dataio.PoseDataset(
            gt.joint_names, gt.poses[:1], [{"frame_id": "unrelated", "hypothesis": 0}]),
            hyp_path)
        proc = run_cli(["evaluate", "--hyp", str(hyp_path), "--gt", str(tiny_setup["gt"]),
                        "--out", str(tmp_path / "e.csv")])
        assert proc.returncode == 2
