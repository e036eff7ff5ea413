"""End-to-end runs: tracking + mapping over a dataset, and the single-scan
convergence experiment.

run_slam plays a dataset through the tracker, promotes frames to keyframes
through the mapper, and feeds the mapper's pose corrections back into the
tracker so both stay in one gauge.  Estimated poses for non-keyframe frames
are anchored to the newest keyframe at track time and re-composed after the
final optimization, so late keyframe corrections retroactively fix the
frames between keyframes.  Everything is seeded; with a fixed thread setup
two identical runs produce byte-identical outputs.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import ParamStore, Tape, adam_step, backward, save_checkpoint
from .config import ConfigError, RunConfig, config_to_dict
from .field import (
    FieldConfig,
    RayBatch,
    eval_depth,
    field_param_names,
    init_field_params,
    render,
    sample_distances,
)
from .geometry import Pose, Twist, save_tum, se3_exp
from .losses import LossConfig, LossMode, make_context, margin_for, ray_loss
from .mapping import Mapper, make_keyframe
from .sim import Dataset, LidarModel, load_dataset
from .tracking import TrackedFrame, Tracker, segment_sky

# fit-scan mode tokens; the los_* family sweeps the margin decay rate
FIT_MODES: dict[str, tuple[LossMode, Optional[float]]] = {
    "js_dynamic": (LossMode.JS_DYNAMIC, None),
    "los_l1": (LossMode.LOS_L1, None),
    "los_l2": (LossMode.LOS_L2, None),
    "kl": (LossMode.KL, None),
    "depth_only": (LossMode.DEPTH_ONLY, None),
    "los_fast": (LossMode.LOS_L2, 0.85),
    "los_medium": (LossMode.LOS_L2, 0.95),
    "los_slow": (LossMode.LOS_L2, 0.99),
}


def _load_dataset_checked(path: str) -> Dataset:
    if not path:
        raise ConfigError("config has no dataset path")
    try:
        return load_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"dataset {path} failed validation: {exc}") from None


def field_meta(cfg: FieldConfig) -> dict:
    return {
        "levels": cfg.levels,
        "base_resolution": cfg.base_resolution,
        "growth_factor": cfg.growth_factor,
        "table_size": cfg.table_size,
        "feature_dim": cfg.feature_dim,
        "mlp_hidden_layers": cfg.mlp_hidden_layers,
        "mlp_width": cfg.mlp_width,
        "bounds_lo": list(cfg.bounds_lo),
        "bounds_hi": list(cfg.bounds_hi),
    }


def field_from_meta(meta: dict) -> FieldConfig:
    kw = dict(meta)
    kw["bounds_lo"] = tuple(kw["bounds_lo"])
    kw["bounds_hi"] = tuple(kw["bounds_hi"])
    return FieldConfig(**kw)


def lidar_meta(model: LidarModel) -> dict:
    return {
        "azimuth_count": model.azimuth_count,
        "elevation_angles": list(model.elevation_angles),
        "max_range": model.max_range,
        "min_range": model.min_range,
        "scan_period": model.scan_period,
        "scan_rate": model.scan_rate,
    }


def lidar_from_meta(meta: dict) -> LidarModel:
    kw = dict(meta)
    kw["elevation_angles"] = tuple(kw["elevation_angles"])
    return LidarModel(**kw)


def keyframe_poses_from_checkpoint(params: ParamStore, meta: dict) -> list[Pose]:
    poses = []
    for kf_id in meta["kf_ids"]:
        xi = params.value(f"pose/kf{kf_id}")
        poses.append(se3_exp(Twist.from_vector(xi)))
    return poses


def _write_loss_csv(path: Path, rows: Sequence[dict]) -> None:
    lines = ["kf_id,iter,total_loss,mean_eps_dyn,pose_update_norm"]
    for r in rows:
        lines.append(
            f"{r['kf_id']},{r['iter']},{r['total_loss']:.12g},"
            f"{r['mean_eps_dyn']:.12g},{r['pose_update_norm']:.12g}"
        )
    path.write_text("\n".join(lines) + "\n")


def run_slam(cfg: RunConfig) -> Path:
    """Track and map a dataset; returns the output directory.

    Writes est_traj.tum (keyframe-corrected), odom_traj.tum (pure dead
    reckoning), checkpoint.ckpt (field + keyframe twists + enough metadata
    to re-render), loss_log.csv, and manifest.json.  The world gauge is
    fixed to the dataset's first groundtruth pose so the field bounds mean
    the same thing in estimation and simulation.
    """
    ds = _load_dataset_checked(cfg.dataset)
    if not cfg.out_dir:
        raise ConfigError("config has no out_dir")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    initial = ds.gt_trajectory[0][1]
    tracker = Tracker(ds.lidar, cfg.tracker, initial_pose=initial)
    params = init_field_params(cfg.field, np.random.default_rng(cfg.seed))
    mapper = Mapper(
        params,
        cfg.field,
        cfg.mapper,
        cfg.loss,
        mode=cfg.mode,
        weight_formula=cfg.weight_formula,
        t_near=ds.lidar.min_range,
        seed=cfg.seed,
    )

    odom_pose = initial
    odom_traj: list[tuple[float, Pose]] = []
    anchored: list[tuple[float, int, Pose]] = []  # stamp, kf_id, kf-relative pose

    for scan in ds.scans:
        frame = tracker.process(scan)
        if frame is None:
            continue
        step = frame.pose_start.inverse() @ frame.pose
        odom_pose = (odom_pose @ step).renormalized()
        odom_traj.append((scan.stamp, odom_pose))

        correction = mapper.process(frame)
        pose = frame.pose
        if correction is not None:
            tracker.apply_correction(correction)
            pose = (correction @ pose).renormalized()
        kf = mapper.keyframes[-1]
        anchored.append((scan.stamp, kf.kf_id, kf.pose.inverse() @ pose))

    est_traj = [
        (stamp, (mapper.keyframes[kf_id].pose @ rel).renormalized())
        for stamp, kf_id, rel in anchored
    ]
    save_tum(out / "est_traj.tum", est_traj)
    save_tum(out / "odom_traj.tum", odom_traj)
    _write_loss_csv(out / "loss_log.csv", mapper.log_rows)
    meta = {
        "field": field_meta(cfg.field),
        "lidar": lidar_meta(ds.lidar),
        "kf_ids": [kf.kf_id for kf in mapper.keyframes],
        "kf_stamps": [kf.creation_time for kf in mapper.keyframes],
        "weight_formula": cfg.weight_formula,
        "mode": cfg.mode.value,
        "seed": cfg.seed,
    }
    save_checkpoint(params, out / "checkpoint.ckpt", meta=meta)

    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "n_scans": len(ds.scans),
        "n_tracked": len(est_traj),
        "n_keyframes": len(mapper.keyframes),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out


def _eval_mse(
    params: ParamStore,
    cfg: RunConfig,
    origins: np.ndarray,
    dirs: np.ndarray,
    z: np.ndarray,
    t_near: float,
) -> float:
    d, _ = eval_depth(
        origins, dirs, params, cfg.field,
        n_samples=64, t_near=t_near, weight_formula=cfg.weight_formula,
    )
    return float(np.mean((d - z) ** 2))


def _fit_one_mode(
    cfg: RunConfig,
    ds: Dataset,
    frame: TrackedFrame,
    mode: LossMode,
    loss_cfg: LossConfig,
    iters: int,
    ev_origins: np.ndarray,
    ev_dirs: np.ndarray,
    ev_z: np.ndarray,
) -> list[tuple[int, float]]:
    fc, mc = cfg.field, cfg.mapper
    params = init_field_params(fc, np.random.default_rng(cfg.seed))
    kf = make_keyframe(frame, 0, loss_cfg, mode)
    names = field_param_names(fc)
    rng = np.random.default_rng(cfg.seed + 1)
    t_near, t_far = ds.lidar.min_range, fc.t_far()
    rot_t = kf.pose.rotation.T
    trans = kf.pose.translation
    eps_run = kf.eps_run
    n = len(kf.z)

    rows: list[tuple[int, float]] = []
    for it in range(iters):
        if it % 10 == 0:
            rows.append((it, _eval_mse(params, cfg, ev_origins, ev_dirs, ev_z, t_near)))
        age = it // mc.iters_per_kf
        tape = Tape()
        leaves = params.tensors(tape, names)
        idx = rng.choice(n, size=mc.n_rays, replace=n < mc.n_rays)
        idx.sort()
        z = kf.z[idx]
        sky = kf.sky[idx]
        eps = eps_run if mode is LossMode.JS_DYNAMIC else margin_for(mode, loss_cfg, age)
        t = sample_distances(z, t_near, t_far, mc.n_samples, mc.sampling, eps=eps, rng=rng)
        dirs = kf.dirs[idx] @ rot_t
        origins = np.broadcast_to(trans, dirs.shape)
        batch = RayBatch(origins, dirs, z, sky, t)
        out = render(batch, leaves, fc, cfg.weight_formula)
        ctx = make_context(batch, out.weights.value, mode, loss_cfg, age)
        terms = ray_loss(out, batch, ctx, mode, loss_cfg)
        backward(tape, terms.total)
        adam_step(params, mc.lr_map(), names=names)
        params.zero_grad()
        if mode is LossMode.JS_DYNAMIC and (~sky).any():
            eps_run = 0.9 * eps_run + 0.1 * float(ctx.eps[~sky].mean())
    rows.append((iters, _eval_mse(params, cfg, ev_origins, ev_dirs, ev_z, t_near)))
    return rows


def fit_scan(
    cfg: RunConfig,
    scan_index: int,
    modes: Sequence[str],
    iters: int,
    n_eval_rays: int = 512,
) -> dict[str, Path]:
    """Train a fresh field on one scan per loss mode; CSV of depth MSE each.

    All modes share the same init seed and groundtruth pose; depth MSE
    against the measured ranges is logged every 10 iterations on a fixed
    ray subset, so the per-mode CSVs are directly comparable.  iters=0
    still writes the (mode-independent) initial error.
    """
    if iters < 0:
        raise ConfigError("iters must be nonnegative")
    unknown = [m for m in modes if m not in FIT_MODES]
    if unknown:
        raise ConfigError(f"unknown fit-scan mode(s) {unknown}; choose from {sorted(FIT_MODES)}")
    ds = _load_dataset_checked(cfg.dataset)
    if not 0 <= scan_index < len(ds.scans):
        raise ConfigError(f"scan index {scan_index} out of range [0, {len(ds.scans)})")
    if not cfg.out_dir:
        raise ConfigError("config has no out_dir")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scan = ds.scans[scan_index]
    pose = ds.gt_pose_at(scan.stamp)
    frame = TrackedFrame(scan, pose, pose, segment_sky(scan, pose, ds.lidar), None)

    valid_idx = np.flatnonzero(scan.valid)
    ev_rng = np.random.default_rng(7)
    pick = ev_rng.choice(len(valid_idx), size=min(n_eval_rays, len(valid_idx)), replace=False)
    pick.sort()
    ev = valid_idx[pick]
    ev_dirs = scan.directions[ev] @ pose.rotation.T
    ev_origins = np.broadcast_to(pose.translation, ev_dirs.shape)
    ev_z = scan.ranges[ev]

    results: dict[str, Path] = {}
    for token in modes:
        mode, decay = FIT_MODES[token]
        lc = cfg.loss if decay is None else dataclasses.replace(cfg.loss, los_eps_decay=decay)
        rows = _fit_one_mode(cfg, ds, frame, mode, lc, iters, ev_origins, ev_dirs, ev_z)
        path = out / f"fit_{token}.csv"
        lines = ["iter,depth_mse"] + [f"{it},{mse:.12g}" for it, mse in rows]
        path.write_text("\n".join(lines) + "\n")
        results[token] = path
    return results
