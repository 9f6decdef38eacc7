"""Command-line front end: one binary, subcommand per task.

Every command prints its fully resolved configuration (flags merged
over the optional config file, over built-in defaults) and seed to
standard error, writes machine-readable output to files, and is
deterministic given (flags, files, seed). Exit codes: 0 success,
2 input/schema error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from . import dataio, denoiser, metrics, sampler
from .errors import DivergenceError, PosePriorError, SchemaError
from .geometry import project, to_absolute
from .numeric import RngStream
from .observation import fit_gaussian_heatmap
from .schedule import cosine_schedule

EXIT_INPUT = 2
EXIT_DIVERGED = 3

# stream-id namespaces: trajectories get (frame_index << 24) + hypothesis,
# training and weight init use ids far above any frame namespace
_FRAME_SHIFT = 24
_INIT_STREAM = 1 << 40
_TRAIN_STREAM = (1 << 40) + 1

# flag -> config-file (section, key) for file-over-default resolution
_CONFIG_KEYS = {
    "gamma": ("sampler", "gamma"),
    "cov_scale": ("sampler", "cov_scale"),
    "cov_rotate": ("sampler", "cov_rotate"),
    "M": ("sampler", "m"),
    "renoise": ("sampler", "renoise"),
    "steps": ("sampler", "steps"),
    "batch": ("sampler", "batch"),
    "lr": ("sampler", "lr"),
    "ema": ("sampler", "ema"),
    "hidden": ("sampler", "hidden"),
    "T": ("sampler", "t"),
    "offset": ("sampler", "offset"),
    "seed": ("sampler", "seed"),
}


def _resolve(args) -> dict:
    """Merge flags over config file over argparse defaults; echo the result."""
    file_cfg = dataio.load_config(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "config"):
            continue
        if value is None and key in _CONFIG_KEYS:
            section, name = _CONFIG_KEYS[key]
            raw = file_cfg.get(section, {}).get(name)
            if raw is not None:
                default = _DEFAULTS[key]
                value = type(default)(raw)
        if value is None and key in _DEFAULTS:
            value = _DEFAULTS[key]
        resolved[key] = value
    print(f"resolved-config: {json.dumps(resolved, default=str)}", file=sys.stderr)
    return resolved

_DEFAULTS = {
    "steps": 100000, "batch": 128, "lr": 1e-4, "ema": 0.995,
    "hidden": 1024, "T": 1000, "offset": 0.008, "seed": 0,
    "gamma": 2e-4, "cov_scale": 1.0, "cov_rotate": 0.0, "M": 50,
    "renoise": sampler.RENOISE_EQ2,
}


def _add_common(p):
    p.add_argument("--config", help="key-value config file (flags take precedence)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")


def _frame_config(cfg: dict, frame_idx: int, mask_default=None) -> sampler.GuidanceConfig:
    return sampler.GuidanceConfig(
        gamma=cfg["gamma"], cov_scale=cfg["cov_scale"], cov_rotate=cfg["cov_rotate"],
        renoise_variant=cfg["renoise"], num_hypotheses=cfg["M"], seed=cfg["seed"],
        grad_space=cfg.get("grad_space") or sampler.GRAD_X0HAT,
        stream_offset=frame_idx << _FRAME_SHIFT, workers=cfg.get("workers"),
    )


def cmd_train(args) -> int:
    cfg = _resolve(args)
    dataset = dataio.load_poses(args.poses)
    if dataset.num_poses == 0:
        raise PosePriorError("training pose file holds no records")
    sched = cosine_schedule(cfg["T"], cfg["offset"])
    model = denoiser.DenoiserModel.initialize(
        dataset.num_joints, cfg["hidden"], sched, RngStream(cfg["seed"], _INIT_STREAM))

    loss_path = args.loss_log or args.out + ".loss.csv"
    sink = (lambda m, step: dataio.save_checkpoint(m, args.out)) \
        if cfg["checkpoint_every"] else None
    with open(loss_path, "w") as log:
        log.write("step,loss,grad_norm\n")
        denoiser.train(
            model, dataset.poses, cfg["steps"], cfg["batch"], cfg["lr"], cfg["ema"],
            RngStream(cfg["seed"], _TRAIN_STREAM),
            checkpoint_sink=sink, checkpoint_every=cfg["checkpoint_every"],
            loss_log=lambda line: log.write(line + "\n"),
        )
    dataio.save_checkpoint(model, args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _load_model_and_obs(model_path, obs_path):
    model = dataio.load_checkpoint(model_path)
    records = dataio.load_observations(obs_path)
    for rec in records:
        if rec.keypoints.num_joints != model.joints:
            raise SchemaError(
                f"observation file has {rec.keypoints.num_joints} joints, "
                f"checkpoint expects {model.joints}")
    return model, records


def _write_hypotheses(path, joint_names, per_frame, header_meta):
    poses, meta = [], []
    for frame_id, hyp in per_frame:
        for m, pose in enumerate(hyp.poses):
            poses.append(pose.joints)
            meta.append({"frame_id": frame_id, "hypothesis": m,
                         "root": hyp.roots[m].tolist()})
    arr = np.stack(poses) if poses else np.zeros((0, len(joint_names), 3))
    dataset = dataio.PoseDataset(joint_names, arr, meta)
    dataio.save_poses(dataset, path, header_meta=header_meta)


def _mean_reprojection(hyp, keypoints, cam):
    """Mean pixel residual over all (hypothesis, joint) pairs in front of the camera."""
    total, count = 0.0, 0
    for pose, root in zip(hyp.poses, hyp.roots):
        joints = to_absolute(pose, root).joints
        ok = keypoints.valid & (joints[:, 2] > 0.0)
        if not np.any(ok):
            continue
        residual = np.linalg.norm(project(joints[ok], cam) - keypoints.means[ok], axis=1)
        total += float(residual.sum())
        count += residual.size
    return total / count if count else float("nan")


def _frame_metrics(rec, hyp):
    """Best-of-M metrics for one frame with ground truth available."""
    gt = rec.gt_pose
    errors = [metrics.mpjpe(p, gt) for p in hyp.poses]
    best = int(np.argmin(errors))
    return {
        "mpjpe": min(errors),
        "pa_mpjpe": min(metrics.pa_mpjpe(p, gt) for p in hyp.poses),
        "pck150": metrics.pck(hyp.poses[best], gt),
        "auc": metrics.auc(hyp.poses[best], gt),
        "reprojection_px": _mean_reprojection(hyp, rec.keypoints, rec.camera),
    }


def _write_metrics_csv(path, rows, m):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id", "M", "mpjpe", "pa_mpjpe", "pck150", "auc",
                         "reprojection_px"])
        for frame_id, vals in rows:
            writer.writerow([frame_id, m] + [f"{vals[k]:.6f}" for k in
                            ("mpjpe", "pa_mpjpe", "pck150", "auc", "reprojection_px")])
        if rows:
            agg = {k: float(np.mean([v[k] for _, v in rows]))
                   for k in rows[0][1]}
            writer.writerow(["aggregate", m] + [f"{agg[k]:.6f}" for k in
                            ("mpjpe", "pa_mpjpe", "pck150", "auc", "reprojection_px")])


def _run_estimation(args, mask_indices=None) -> int:
    cfg = _resolve(args)
    model, records = _load_model_and_obs(args.model, args.obs)
    per_frame, metric_rows = [], []
    for idx, rec in enumerate(records):
        keypoints = rec.keypoints
        if mask_indices:
            valid = keypoints.valid.copy()
            valid[list(mask_indices)] = False
            keypoints = keypoints.with_validity(valid)
        gcfg = _frame_config(cfg, idx)
        hyp = sampler.sample_guided(model, model.sched, keypoints, rec.camera,
                                    rec.root, gcfg)
        per_frame.append((rec.frame_id, hyp))
        if rec.gt_pose is not None:
            rec_for_metrics = rec if mask_indices is None else replace(rec, keypoints=keypoints)
            metric_rows.append((rec.frame_id, _frame_metrics(rec_for_metrics, hyp)))

    header_meta = {"seed": cfg["seed"], "gamma": cfg["gamma"],
                   "cov_scale": cfg["cov_scale"], "cov_rotate": cfg["cov_rotate"],
                   "M": cfg["M"], "renoise_variant": cfg["renoise"],
                   "grad_space": cfg.get("grad_space") or sampler.GRAD_X0HAT}
    if mask_indices:
        header_meta["masked_joints"] = sorted(mask_indices)
    _write_hypotheses(args.out, dataio.DEFAULT_JOINT_NAMES
                      if model.joints == len(dataio.DEFAULT_JOINT_NAMES)
                      else [f"joint{i}" for i in range(model.joints)],
                      per_frame, header_meta)
    if metric_rows:
        report = args.report or args.out + ".metrics.csv"
        _write_metrics_csv(report, metric_rows, cfg["M"])
        print(f"wrote {args.out} and {report}", file=sys.stderr)
    else:
        print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_estimate(args) -> int:
    return _run_estimation(args)


def cmd_complete(args) -> int:
    records = dataio.load_observations(args.obs)
    names = dataio.DEFAULT_JOINT_NAMES
    joints = records[0].keypoints.num_joints if records else len(names)
    if args.mask.strip().lower() == "all":
        mask = set(range(joints))
    elif not args.mask.strip():
        mask = set()
    else:
        mask = set()
        for token in args.mask.split(","):
            token = token.strip()
            if token.isdigit():
                idx = int(token)
                if idx >= joints:
                    raise PosePriorError(f"mask index {idx} out of range")
            elif token in names:
                idx = names.index(token)
            else:
                raise PosePriorError(f"unknown joint name {token!r}")
            mask.add(idx)
    return _run_estimation(args, mask_indices=mask or None)


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    model = dataio.load_checkpoint(args.model)
    if args.n < 0:
        raise PosePriorError(f"sample count must be >= 0, got {args.n}")
    poses = []
    if args.n > 0:
        hyp = sampler.sample_unconditional(model, model.sched,
                                           RngStream(cfg["seed"], 0), args.n)
        poses = hyp.poses
    names = (dataio.DEFAULT_JOINT_NAMES if model.joints == len(dataio.DEFAULT_JOINT_NAMES)
             else [f"joint{i}" for i in range(model.joints)])
    arr = np.stack([p.joints for p in poses]) if poses else np.zeros((0, model.joints, 3))
    dataset = dataio.PoseDataset(names, arr, [{"sample": i} for i in range(len(poses))])
    dataio.save_poses(dataset, args.out, header_meta={"seed": cfg["seed"], "n": args.n})
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    model, records = _load_model_and_obs(args.model, args.obs)
    values = [float(v) for v in args.values.split(",")]
    rows = []
    if args.sweep == "cov-scale":
        for idx, rec in enumerate(records):
            gcfg = _frame_config(cfg, idx)
            for s, std in sampler.diversity_sweep(model, model.sched, rec.keypoints,
                                                  rec.camera, rec.root, gcfg, values):
                rows.append({"frame_id": rec.frame_id, "value": s, "per_joint_std_mm": std})
        fields = ["frame_id", "value", "per_joint_std_mm"]
    else:  # gamma sweep
        for value in values:
            if value < 0.0:
                raise PosePriorError(f"gamma must be >= 0, got {value}")
            for idx, rec in enumerate(records):
                gcfg = replace(_frame_config(cfg, idx), gamma=value)
                hyp = sampler.sample_guided(model, model.sched, rec.keypoints,
                                            rec.camera, rec.root, gcfg)
                row = {"frame_id": rec.frame_id, "value": value}
                row["reprojection_px"] = _mean_reprojection(hyp, rec.keypoints, rec.camera)
                if rec.gt_pose is not None:
                    row["best_of_m_mpjpe"] = metrics.best_of_m(hyp, rec.gt_pose)
                rows.append(row)
        fields = ["frame_id", "value", "reprojection_px", "best_of_m_mpjpe"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_fit_heatmap(args) -> int:
    _resolve(args)
    with open(args.out, "w") as fh:
        for joint_idx, path in enumerate(args.heatmaps):
            hm = dataio.load_heatmap(path)
            try:
                mean, cov = fit_gaussian_heatmap(hm, floor=args.floor)
                rec = {"joint": joint_idx, "file": path, "valid": True,
                       "mean": mean.tolist(), "cov": [cov.a, cov.b, cov.c]}
            except PosePriorError as exc:
                print(f"warning: {path}: {exc}", file=sys.stderr)
                rec = {"joint": joint_idx, "file": path, "valid": False}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    hyp_data = dataio.load_poses(args.hyp)
    gt_data = dataio.load_poses(args.gt)

    by_frame: dict[str, list] = {}
    for i in range(hyp_data.num_poses):
        meta = hyp_data.meta[i]
        by_frame.setdefault(str(meta.get("frame_id")), []).append(
            (int(meta.get("hypothesis", 0)), hyp_data.pose_at(i)))

    gt_frames = [(str(gt_data.meta[i].get("frame_id", i)), gt_data.pose_at(i))
                 for i in range(gt_data.num_poses)]
    gt_frames = gt_frames[:: max(1, args.stride)]

    rows = []
    for frame_id, gt_pose in gt_frames:
        if frame_id not in by_frame:
            raise dataio.SchemaError(f"no hypotheses for frame {frame_id}")
        poses = [p for _, p in sorted(by_frame[frame_id], key=lambda kv: kv[0])]
        errors = [metrics.mpjpe(p, gt_pose) for p in poses]
        best = int(np.argmin(errors))
        rows.append((frame_id, {
            "mpjpe": min(errors),
            "pa_mpjpe": min(metrics.pa_mpjpe(p, gt_pose) for p in poses),
            "pck150": metrics.pck(poses[best], gt_pose),
            "auc": metrics.auc(poses[best], gt_pose),
            "reprojection_px": float("nan"),
        }))
    m = max(len(v) for v in by_frame.values()) if by_frame else 0
    _write_metrics_csv(args.out, rows, m)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    skel = dataio.SyntheticSkeletonConfig(
        n_train=args.n_train, n_eval=args.n_eval, seed=cfg["seed"],
        obs_sigma_px=args.obs_sigma)
    train, heldout, records = dataio.generate_synthetic(skel)
    dataio.save_poses(train, args.out_train)
    if args.out_gt:
        dataio.save_poses(heldout, args.out_gt)
    if args.out_obs:
        dataio.save_observations(records, args.out_obs, skel.joint_names)
    print(f"wrote {args.out_train}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseprior",
        description="Train a diffusion pose prior and sample 2D-guided 3D pose hypotheses.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the denoising prior on a pose file")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="training steps [PAPER-default 100000]")
    p.add_argument("--batch", type=int, default=None, help="batch size (default 128)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate [PAPER-default 1e-4]")
    p.add_argument("--ema", type=float, default=None, help="EMA decay [PAPER-default 0.995]")
    p.add_argument("--hidden", type=int, default=None, help="hidden width [PAPER-default 1024]")
    p.add_argument("--T", type=int, default=None, help="diffusion steps [PAPER-default 1000]")
    p.add_argument("--offset", type=float, default=None,
                   help="cosine schedule offset [PAPER-default 0.008]")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--loss-log", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    def estimation_flags(p):
        p.add_argument("--model", required=True)
        p.add_argument("--obs", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("-M", type=int, default=None, help="hypotheses per frame [PAPER-default 50]")
        p.add_argument("--gamma", type=float, default=None,
                       help="guidance scale [PAPER-default 2e-4]")
        p.add_argument("--cov-scale", dest="cov_scale", type=float, default=None)
        p.add_argument("--cov-rotate", dest="cov_rotate", type=float, default=None)
        p.add_argument("--renoise", choices=[sampler.RENOISE_EQ2, sampler.RENOISE_ALG1],
                       default=None)
        p.add_argument("--grad-space", dest="grad_space",
                       choices=[sampler.GRAD_X0HAT, sampler.GRAD_XT], default=None,
                       help="apply guidance to the clean estimate (default) or the noisy iterate")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--report", default=None)
        _add_common(p)

    p = sub.add_parser("estimate", help="sample guided hypotheses for each observation")
    estimation_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("complete", help="estimate with masked joints inpainted by the prior")
    estimation_flags(p)
    p.add_argument("--mask", required=True,
                   help="comma-separated joint names/indices, or 'all'")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("sample", help="unconditional pose generation")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=16)
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("sweep", help="sweep covariance scale or guidance scale")
    estimation_flags(p)
    p.add_argument("--sweep", choices=["cov-scale", "gamma"], required=True)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fit-heatmap", help="fit Gaussians to heatmap files")
    p.add_argument("heatmaps", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--floor", type=float, default=1e-6)
    _add_common(p)
    p.set_defaults(func=cmd_fit_heatmap)

    p = sub.add_parser("evaluate", help="score a hypothesis file against ground truth")
    p.add_argument("--hyp", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1,
                   help="evaluate every k-th ground-truth frame")
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate the synthetic benchmark world")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-obs", default=None)
    p.add_argument("--out-gt", default=None)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--obs-sigma", type=float, default=2.0)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: diverged: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PosePriorError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
