"""Guided reverse-process sampling, pose completion, diversity control.

Each hypothesis owns two random streams derived from (seed, index): one
for its trajectory, one for its root draw. Keeping the root on a
separate stream makes the zero-guidance path bit-identical to
unconditional sampling, and makes hypothesis sets independent of how
work is scheduled across threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .denoiser import DenoiserModel, make_eval_forward
from .errors import DivergenceError
from .geometry import ROOT_RELATIVE, Camera, Pose, RootEstimate, project, sample_root
from .metrics import per_joint_std
from .numeric import RngStream
from .observation import (
    log_likelihood_grad,
    rotate_covariance,
    scale_covariance,
    sum_sources,
)
from .schedule import DiffusionSchedule, estimate_x0, renoise

__all__ = [
    "GuidanceConfig",
    "HypothesisSet",
    "sample_unconditional",
    "sample_guided",
    "complete_pose",
    "diversity_sweep",
]

RENOISE_EQ2 = "eq2"        # x_{t-1} drawn from the closed-form noising of x0_hat
RENOISE_ALG1 = "alg1"      # literal pipeline line: sqrt(ab_t) x0_hat + (1 - ab_t) eps
GRAD_X0HAT = "x0hat"       # guidance applied to the clean estimate (default)
GRAD_XT = "xt"             # naive baseline: guidance applied to the noisy iterate

# root draws live in a disjoint stream-id namespace from trajectories
_ROOT_STREAM_NS = 1 << 48

THREADS_ENV = "POSEPRIOR_THREADS"

# Trust region for one guidance step of the clean-estimate update, per
# joint. The raw step may not move a joint further than (a) STEP_CAP_MM,
# and (b) the displacement that would already cancel the joint's
# reprojection residual under the linearized projection. (b) prevents
# overshoot oscillation when the covariance is tight, and both bound the
# 1/Z^2 gradient spike of a joint passing near the camera plane; neither
# binds in the plausible regime where steps are a few millimeters.
STEP_CAP_MM = 150.0

# The naive noisy-iterate baseline deliberately runs without the trust
# region (its instability is the point of the comparison); it only gets
# an overflow guard so the arithmetic stays finite.
OVERFLOW_GUARD_MM = 1e5


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 2e-4
    cov_scale: float = 1.0
    cov_rotate: float | np.ndarray = 0.0
    renoise_variant: str = RENOISE_EQ2
    num_hypotheses: int = 50
    seed: int = 0
    grad_space: str = GRAD_X0HAT
    stream_offset: int = 0
    workers: int | None = None

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.cov_scale <= 0.0:
            raise ValueError(f"cov_scale must be > 0, got {self.cov_scale}")
        if self.num_hypotheses < 1:
            raise ValueError(f"need at least one hypothesis, got {self.num_hypotheses}")
        if self.renoise_variant not in (RENOISE_EQ2, RENOISE_ALG1):
            raise ValueError(f"unknown renoise variant {self.renoise_variant!r}")
        if self.grad_space not in (GRAD_X0HAT, GRAD_XT):
            raise ValueError(f"unknown gradient space {self.grad_space!r}")


@dataclass
class HypothesisSet:
    poses: list
    roots: np.ndarray           # (M, 3); zeros when no root estimate was used
    seed: int
    stream_ids: tuple
    gamma: float
    cov_scale: float
    cov_rotate: float | np.ndarray
    renoise_variant: str
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.poses)


def _transformed_sources(obs, cfg: GuidanceConfig, joints: int):
    """Apply the (scale, rotation) covariance edits once, up front."""
    sources = list(obs) if isinstance(obs, (list, tuple)) else [obs]
    for src in sources:
        if src.num_joints != joints:
            raise ValueError(
                f"observation has {src.num_joints} joints, model expects {joints}")
    theta = np.broadcast_to(np.asarray(cfg.cov_rotate, dtype=np.float64), (joints,))
    if cfg.cov_scale == 1.0 and not np.any(theta):
        return sources
    out = []
    for src in sources:
        covs = np.empty_like(src.covs)
        for j in range(joints):
            sig = src.cov_at(j)
            if theta[j] != 0.0:
                sig = rotate_covariance(sig, theta[j])
            sig = scale_covariance(sig, cfg.cov_scale)
            covs[j] = (sig.a, sig.b, sig.c)
        out.append(src.with_covariances(covs))
    return out


def _worker_count(cfg: GuidanceConfig) -> int:
    if cfg.workers is not None:
        return max(1, cfg.workers)
    env = os.environ.get(THREADS_ENV)
    return max(1, int(env)) if env else 1


def _run_hypothesis(m: int, model: DenoiserModel, eval_fn, sched: DiffusionSchedule,
                    sources, cam, root_est, cfg: GuidanceConfig):
    joints = model.joints
    rng = RngStream(cfg.seed, cfg.stream_offset + m)
    root = np.zeros(3)
    if root_est is not None:
        root = sample_root(root_est, RngStream(cfg.seed, _ROOT_STREAM_NS + cfg.stream_offset + m))

    guided = bool(sources) and cfg.gamma > 0.0
    norm_std = model.norm_std.reshape(joints, 3)
    f_max = max(cam.fx, cam.fy) if cam is not None else 1.0
    any_observed = np.logical_or.reduce([s.valid for s in sources]) if sources else None
    skips = 0

    def guidance_step(x_norm, trust_region=True):
        """Guidance displacement gamma * grad(log p) in normalized space."""
        nonlocal skips
        flat_mm = model.denormalize(x_norm)
        abs_joints = flat_mm.reshape(joints, 3) + root
        usable = abs_joints[:, 2] > 0.0
        skips += int(np.sum(~usable & any_observed))
        pose = Pose(abs_joints, "absolute_camera")
        g_mm = sum_sources([
            log_likelihood_grad(pose, s, cam, skip_behind_camera=True) for s in sources
        ])
        bad = ~np.all(np.isfinite(g_mm), axis=1)
        if np.any(bad):
            g_mm[bad] = 0.0
            skips += int(np.sum(bad))
        step_mm = cfg.gamma * g_mm * norm_std * norm_std
        norms = np.linalg.norm(step_mm, axis=1)
        if not trust_region:
            over = norms > OVERFLOW_GUARD_MM
            if np.any(over):
                step_mm[over] *= (OVERFLOW_GUARD_MM / norms[over])[:, None]
            return (step_mm / norm_std).ravel()
        live = usable & any_observed & (norms > 0.0)
        if np.any(live):
            proj = project(abs_joints[live], cam)
            residual = np.zeros(int(np.sum(live)))
            for src in sources:
                r = np.linalg.norm(src.means[live] - proj, axis=1)
                residual = np.maximum(residual, np.where(src.valid[live], r, 0.0))
            bound = np.minimum(STEP_CAP_MM, residual * abs_joints[live, 2] / f_max)
            over = norms[live] > bound
            if np.any(over):
                scale = np.ones_like(norms)
                idx = np.nonzero(live)[0][over]
                scale[idx] = bound[over] / norms[idx]
                step_mm = step_mm * scale[:, None]
        return (step_mm / norm_std).ravel()

    x = rng.standard_normal(model.dim)
    for t in range(sched.T, 0, -1):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"non-finite state in hypothesis {m}", step=t,
                diagnostics={"hypothesis": m})
        eps_pred = eval_fn(x, t)
        if guided and cfg.grad_space == GRAD_XT:
            # classic score-space guidance: fold the gradient into the
            # noise estimate, which scales it by sqrt(1 - alphabar_t)
            eps_pred = eps_pred - np.sqrt(1.0 - sched.alphabar[t]) * guidance_step(
                x, trust_region=False)
        x0_hat = estimate_x0(x, eps_pred, t, sched)
        if guided and cfg.grad_space == GRAD_X0HAT:
            if not np.all(np.isfinite(x0_hat)):
                raise DivergenceError(
                    f"non-finite clean estimate in hypothesis {m}", step=t,
                    diagnostics={"hypothesis": m})
            x0_hat = x0_hat + guidance_step(x0_hat)
        if cfg.renoise_variant == RENOISE_EQ2:
            x = renoise(x0_hat, t - 1, rng, sched)
        else:
            ab = sched.alphabar[t]
            x = np.sqrt(ab) * x0_hat + (1.0 - ab) * rng.standard_normal(model.dim)
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite final state in hypothesis {m}", step=0,
                              diagnostics={"hypothesis": m})

    pose_mm = model.denormalize(x).reshape(joints, 3)
    pose_mm = pose_mm - pose_mm[0]
    return Pose(pose_mm, ROOT_RELATIVE), root, skips


def sample_guided(model: DenoiserModel, sched: DiffusionSchedule | None,
                  obs, cam: Camera | None, root_est: RootEstimate | None,
                  cfg: GuidanceConfig) -> HypothesisSet:
    """Draw pose hypotheses from the prior steered by 2D observations.

    Per hypothesis: sample a root, start from unit Gaussian noise, and
    walk the reverse process; at every step the clean estimate is
    nudged by gamma times the observation log-likelihood gradient
    (summed over sources, zero for invalid or behind-camera joints)
    before renoising. ``obs`` may be one observation or a list of
    independent sources sharing the camera; ``gamma = 0`` or no
    observations reduces exactly to unconditional sampling.
    """
    sched = sched or model.sched
    sources = _transformed_sources(obs, cfg, model.joints) if obs is not None else []
    if sources and cam is None:
        raise ValueError("observations given without a camera")
    eval_fn = make_eval_forward(model, use_ema=True)

    workers = _worker_count(cfg)
    indices = range(cfg.num_hypotheses)
    if workers == 1:
        results = [_run_hypothesis(m, model, eval_fn, sched, sources, cam, root_est, cfg)
                   for m in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda m: _run_hypothesis(m, model, eval_fn, sched, sources, cam, root_est, cfg),
                indices))

    poses = [r[0] for r in results]
    roots = np.stack([r[1] for r in results])
    return HypothesisSet(
        poses=poses, roots=roots, seed=cfg.seed,
        stream_ids=tuple(cfg.stream_offset + m for m in indices),
        gamma=cfg.gamma, cov_scale=cfg.cov_scale, cov_rotate=cfg.cov_rotate,
        renoise_variant=cfg.renoise_variant,
        diagnostics={"behind_camera_skips": int(sum(r[2] for r in results))},
    )


def sample_unconditional(model: DenoiserModel, sched: DiffusionSchedule | None,
                         rng: RngStream, n: int) -> HypothesisSet:
    """Draw n poses from the prior alone (the zero-guidance path).

    Sample i uses trajectory stream (rng.seed, rng.stream_id + i), so a
    guided run with the same seed and gamma = 0 reproduces these poses
    bit for bit.
    """
    cfg = GuidanceConfig(gamma=0.0, num_hypotheses=n, seed=rng.seed,
                         stream_offset=rng.stream_id)
    return sample_guided(model, sched, None, None, None, cfg)


def complete_pose(model: DenoiserModel, sched: DiffusionSchedule | None,
                  obs, cam: Camera, root_est: RootEstimate | None,
                  cfg: GuidanceConfig) -> HypothesisSet:
    """Guided sampling with masked joints: the prior inpaints the rest.

    Requires at least one joint with no observation in any source;
    masked joints receive zero guidance by construction.
    """
    sources = list(obs) if isinstance(obs, (list, tuple)) else [obs]
    observed_anywhere = np.logical_or.reduce([s.valid for s in sources])
    if np.all(observed_anywhere):
        raise ValueError("pose completion needs at least one masked joint")
    return sample_guided(model, sched, obs, cam, root_est, cfg)


def diversity_sweep(model: DenoiserModel, sched: DiffusionSchedule | None,
                    obs, cam: Camera, root_est: RootEstimate | None,
                    cfg: GuidanceConfig, s_values) -> list:
    """Per-joint spread of the hypothesis set for each covariance scale."""
    rows = []
    for s in s_values:
        if s <= 0.0:
            raise ValueError(f"covariance scales must be positive, got {s}")
        hyp = sample_guided(model, sched, obs, cam, root_est, replace(cfg, cov_scale=float(s)))
        rows.append((float(s), per_joint_std(hyp)))
    return rows
