"""Keyframe bookkeeping and windowed joint optimization of map and poses.

Tracked frames become keyframes on a time/motion policy; the density field
is then refined together with the keyframe poses over a small window of
past keyframes.  Poses are optimized as se(3) twists through a taped
Rodrigues rotation, so the same backward pass that trains the field also
corrects the trajectory.  The first keyframe is the gauge anchor and never
moves.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as datafield
from typing import Optional

import numpy as np

from .autodiff import ParamStore, Tape, Tensor, adam_step, backward, constant, stack, where
from .autodiff.tape import tcos, tsin, tsqrt, tsum, matmul, transpose
from .field import FieldConfig, RayBatch, field_param_names, render, sample_distances
from .geometry import Pose, Twist, rotation_angle, se3_exp, se3_log
from .losses import LossConfig, LossMode, make_context, margin_for, ray_loss
from .tracking import TrackedFrame, motion_compensate


class KFPolicy(enum.Enum):
    TEMPORAL = "temporal"
    HYBRID_LAZY = "hybrid_lazy"
    HYBRID_EAGER = "hybrid_eager"


class WindowStrategy(enum.Enum):
    RANDOM = "random"
    RECENT = "recent"
    HALF_HALF = "half_half"


class KFDecision(enum.Enum):
    ADD = "add"
    SKIP = "skip"
    REOPTIMIZE = "reoptimize"


@dataclass(frozen=True)
class MapperConfig:
    t_kf: float = 3.0
    n_window: int = 8
    n_rays: int = 512
    n_samples: int = 512
    iters_per_kf: int = 50
    kf_policy: KFPolicy = KFPolicy.TEMPORAL
    motion_trans_thresh: float = 0.5
    motion_rot_thresh: float = 22.5  # degrees
    window_strategy: WindowStrategy = WindowStrategy.RANDOM
    sampling: str = "depth_guided"
    optimize_poses: bool = True
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    lr_pose: float = 1e-3

    def __post_init__(self) -> None:
        if self.n_window < 1:
            raise ValueError("n_window must be at least 1")
        if self.iters_per_kf < 1:
            raise ValueError("iters_per_kf must be at least 1")

    def lr_map(self) -> dict[str, float]:
        return {"grid": self.lr_grid, "mlp": self.lr_mlp, "pose": self.lr_pose}


@dataclass
class KeyFrame:
    """A tracked frame promoted to an optimization variable.

    The twist is the live pose estimate (se3_exp(twist) is the pose); rays
    are stored deskewed in the body frame so the whole scan moves rigidly
    with the twist during optimization.  eps_run is the running mean of the
    dynamic margin, which places the depth-guided samples before the margin
    for the current iteration is known.
    """

    kf_id: int
    frame: TrackedFrame
    twist: Twist
    creation_time: float
    update_count: int = 0
    eps_run: float = 0.0
    dirs: np.ndarray = datafield(default=None, repr=False)  # (n, 3) body frame
    z: np.ndarray = datafield(default=None, repr=False)  # (n,), -1 for sky
    sky: np.ndarray = datafield(default=None, repr=False)  # (n,) bool

    @property
    def pose(self) -> Pose:
        return se3_exp(self.twist)

    @property
    def param_name(self) -> str:
        return f"pose/kf{self.kf_id}"


def make_keyframe(
    frame: TrackedFrame, kf_id: int, loss_cfg: LossConfig, mode: LossMode
) -> KeyFrame:
    scan = frame.scan
    deskewed = motion_compensate(scan, frame.pose_start, frame.pose, frame="end")
    pts = deskewed[scan.valid]
    z = np.linalg.norm(pts, axis=1)
    dirs = pts / z[:, None]
    sky_dirs = scan.directions[frame.sky]
    n_sky = len(sky_dirs)
    if mode is LossMode.JS_DYNAMIC:
        eps0 = loss_cfg.eps_dyn_max
    else:
        eps0 = margin_for(mode, loss_cfg, 0)
    return KeyFrame(
        kf_id=kf_id,
        frame=frame,
        twist=se3_log(frame.pose),
        creation_time=scan.stamp,
        eps_run=eps0,
        dirs=np.concatenate([dirs, sky_dirs]),
        z=np.concatenate([z, np.full(n_sky, -1.0)]),
        sky=np.concatenate([np.zeros(len(z), bool), np.ones(n_sky, bool)]),
    )


def select_keyframe(
    frame: TrackedFrame, last_kf: KeyFrame, cfg: MapperConfig
) -> KFDecision:
    """Decide what to do with a tracked frame given the newest keyframe."""
    due = frame.scan.stamp - last_kf.creation_time >= cfg.t_kf
    if cfg.kf_policy is KFPolicy.TEMPORAL:
        return KFDecision.ADD if due else KFDecision.SKIP
    rel = last_kf.pose.inverse() @ frame.pose
    moved = (
        float(np.linalg.norm(rel.translation)) >= cfg.motion_trans_thresh
        or math.degrees(rotation_angle(rel.rotation)) >= cfg.motion_rot_thresh
    )
    if cfg.kf_policy is KFPolicy.HYBRID_LAZY:
        return KFDecision.ADD if due and moved else KFDecision.SKIP
    if due and moved:
        return KFDecision.ADD
    if due:
        return KFDecision.REOPTIMIZE
    return KFDecision.SKIP


def build_window(
    keyframes: list[KeyFrame], cfg: MapperConfig, rng_seed: int
) -> list[KeyFrame]:
    """Pick the keyframes to optimize jointly; the newest is always in.

    Returned in chronological order.  RANDOM draws the rest uniformly from
    the past; HALF_HALF keeps the most recent half of the window and draws
    the remainder randomly from older keyframes.
    """
    if not keyframes:
        raise ValueError("need at least one keyframe")
    if cfg.window_strategy is WindowStrategy.RECENT:
        return list(keyframes[-cfg.n_window:])
    if cfg.window_strategy is WindowStrategy.RANDOM:
        recent = [keyframes[-1]]
    else:
        recent = list(keyframes[-math.ceil(cfg.n_window / 2):])
    pool = keyframes[: len(keyframes) - len(recent)]
    k = min(cfg.n_window - len(recent), len(pool))
    if k > 0:
        rng = np.random.default_rng(rng_seed)
        idx = sorted(rng.choice(len(pool), size=k, replace=False))
        recent = [pool[i] for i in idx] + recent
    return recent


def taped_rotation(omega: Tensor) -> Tensor:
    """Rodrigues rotation matrix of a 3-vector on the tape.

    Switches to the second-order Taylor form near zero, where sin(t)/t and
    (1-cos t)/t^2 lose precision; the switch is a recorded branch.
    """
    tape = omega.tape
    t2 = tsum(omega * omega)
    small = t2.value < 1e-12
    tape.note_branch(np.array([small]))
    t2_safe = where(np.array(small), constant(1.0, tape), t2)
    theta = tsqrt(t2_safe)
    a = where(np.array(small), 1.0 - t2 * (1.0 / 6.0), tsin(theta) / theta)
    b = where(np.array(small), 0.5 - t2 * (1.0 / 24.0), (1.0 - tcos(theta)) / t2_safe)
    wx, wy, wz = omega[0], omega[1], omega[2]
    zero = constant(0.0, tape)
    k = stack(
        [
            stack([zero, -wz, wy]),
            stack([wz, zero, -wx]),
            stack([-wy, wx, zero]),
        ]
    )
    eye = constant(np.eye(3), tape)
    return eye + a * k + b * matmul(k, k)


def _transform_rays(
    xi: Tensor, dirs_body: np.ndarray
) -> tuple[Tensor, Tensor]:
    """World-frame ray origins and directions from a taped twist."""
    rot = taped_rotation(xi[0:3])
    d = matmul(constant(dirs_body, xi.tape), transpose(rot))
    o = xi[3:6].reshape((1, 3)) + np.zeros(dirs_body.shape)
    return o, d


@dataclass
class _KFBatch:
    kf: KeyFrame
    batch: RayBatch
    n_valid: int
    n_sky: int


def optimize_window(
    window: list[KeyFrame],
    params: ParamStore,
    cfg: MapperConfig,
    loss_cfg: LossConfig,
    field_cfg: FieldConfig,
    mode: LossMode,
    rng_seed: int = 0,
    t_near: float = 0.3,
    weight_formula: str = "paper",
    anchor_id: int = 0,
) -> list[dict]:
    """Jointly refine the field and the window's poses for iters_per_kf steps.

    Every iteration samples n_rays fresh rays per keyframe, renders them
    from poses reconstructed on the tape, and takes one Adam step on the
    field and on every non-anchor twist.  Returns one log row per iteration;
    keyframe twists, update counts, and running margins are written back.
    """
    if not window:
        raise ValueError("window must be nonempty")
    rng = np.random.default_rng(rng_seed)
    t_far = field_cfg.t_far()
    field_names = field_param_names(field_cfg)
    for kf in window:
        if kf.param_name not in params:
            params.add(kf.param_name, kf.twist.as_vector())
    trainable_twists = [
        kf.param_name
        for kf in window
        if kf.kf_id != anchor_id and cfg.optimize_poses
    ]
    newest = max(kf.kf_id for kf in window)
    rows: list[dict] = []

    for it in range(cfg.iters_per_kf):
        tape = Tape()
        leaves = params.tensors(tape, field_names + [kf.param_name for kf in window])

        kf_batches: list[_KFBatch] = []
        for kf in window:
            n = len(kf.z)
            if n == 0:
                continue
            idx = rng.choice(n, size=cfg.n_rays, replace=n < cfg.n_rays)
            idx.sort()
            z = kf.z[idx]
            sky = kf.sky[idx]
            if mode is LossMode.JS_DYNAMIC:
                eps = kf.eps_run
            else:
                eps = margin_for(mode, loss_cfg, kf.update_count)
            t = sample_distances(
                z, t_near, t_far, cfg.n_samples, cfg.sampling, eps=eps, rng=rng
            )
            dirs_body = kf.dirs[idx]
            if kf.kf_id == anchor_id or not cfg.optimize_poses:
                pose = kf.pose
                origins = np.broadcast_to(pose.translation, dirs_body.shape)
                dirs = dirs_body @ pose.rotation.T
            else:
                origins, dirs = _transform_rays(leaves[kf.param_name], dirs_body)
            batch = RayBatch(origins, dirs, z, sky, t)
            kf_batches.append(_KFBatch(kf, batch, int((~sky).sum()), int(sky.sum())))
        if not kf_batches:
            break

        n_valid = sum(b.n_valid for b in kf_batches)
        n_sky = sum(b.n_sky for b in kf_batches)
        total = constant(0.0, tape)
        eps_sum = 0.0
        for b in kf_batches:
            out = render(b.batch, leaves, field_cfg, weight_formula)
            ctx = make_context(
                b.batch, out.weights.value, mode, loss_cfg, b.kf.update_count
            )
            terms = ray_loss(out, b.batch, ctx, mode, loss_cfg)
            wv = b.n_valid / max(n_valid, 1)
            ws = b.n_sky / max(n_sky, 1)
            total = total + wv * (
                terms.sight + terms.opacity + loss_cfg.lambda_depth * terms.depth
            ) + ws * loss_cfg.lambda_sky * terms.sky
            if b.n_valid:
                kf_eps = float(ctx.eps[~b.batch.sky].mean())
                b.kf.eps_run = 0.9 * b.kf.eps_run + 0.1 * kf_eps
                eps_sum += b.n_valid * kf_eps

        backward(tape, total)
        before = {n: params.value(n).copy() for n in trainable_twists}
        adam_step(params, cfg.lr_map(), names=field_names + trainable_twists)
        params.zero_grad()
        dpose = math.sqrt(
            sum(
                float(np.sum((params.value(n) - before[n]) ** 2))
                for n in trainable_twists
            )
        )
        rows.append(
            {
                "kf_id": newest,
                "iter": it,
                "total_loss": float(total.value),
                "mean_eps_dyn": eps_sum / max(n_valid, 1),
                "pose_update_norm": dpose,
            }
        )

    for kf in window:
        xi = params.value(kf.param_name)
        kf.twist = Twist(xi[:3].copy(), xi[3:].copy())
        kf.update_count += 1
    return rows


class Mapper:
    """Streaming keyframe manager around optimize_window.

    process() consumes tracked frames; when one becomes a keyframe (or
    triggers a re-optimization) the window is rebuilt and optimized, and the
    world-frame correction of the newest keyframe is returned so the caller
    can realign the tracker.  Re-optimizations are throttled to one per t_kf
    so an eager policy cannot spin on every frame.
    """

    def __init__(
        self,
        params: ParamStore,
        field_cfg: FieldConfig,
        cfg: Optional[MapperConfig] = None,
        loss_cfg: Optional[LossConfig] = None,
        mode: LossMode = LossMode.JS_DYNAMIC,
        weight_formula: str = "paper",
        t_near: float = 0.3,
        seed: int = 0,
    ) -> None:
        self.params = params
        self.field_cfg = field_cfg
        self.cfg = cfg or MapperConfig()
        self.loss_cfg = loss_cfg or LossConfig()
        self.mode = mode
        self.weight_formula = weight_formula
        self.t_near = t_near
        self.seed = seed
        self.keyframes: list[KeyFrame] = []
        self.log_rows: list[dict] = []
        self._last_opt_time = -math.inf
        self._n_opts = 0

    def _optimize(self, window: list[KeyFrame], stamp: float) -> Pose:
        newest = window[-1]
        pose_before = newest.pose
        rows = optimize_window(
            window,
            self.params,
            self.cfg,
            self.loss_cfg,
            self.field_cfg,
            self.mode,
            rng_seed=self.seed + self._n_opts,
            t_near=self.t_near,
            weight_formula=self.weight_formula,
        )
        self.log_rows.extend(rows)
        self._last_opt_time = stamp
        self._n_opts += 1
        return newest.pose @ pose_before.inverse()

    def process(self, frame: TrackedFrame) -> Optional[Pose]:
        """Returns the newest keyframe's world-frame correction, or None."""
        stamp = frame.scan.stamp
        if not self.keyframes:
            kf = make_keyframe(frame, 0, self.loss_cfg, self.mode)
            self.keyframes.append(kf)
            return self._optimize([kf], stamp)
        decision = select_keyframe(frame, self.keyframes[-1], self.cfg)
        if decision is KFDecision.ADD:
            kf = make_keyframe(frame, len(self.keyframes), self.loss_cfg, self.mode)
            self.keyframes.append(kf)
            window = build_window(self.keyframes, self.cfg, self.seed + self._n_opts)
            return self._optimize(window, stamp)
        if (
            decision is KFDecision.REOPTIMIZE
            and stamp - self._last_opt_time >= self.cfg.t_kf
        ):
            window = build_window(self.keyframes, self.cfg, self.seed + self._n_opts)
            return self._optimize(window, stamp)
        return None

    def trajectory(self) -> tuple[np.ndarray, list[Pose]]:
        """Keyframe stamps and current pose estimates, in time order."""
        stamps = np.array([kf.creation_time for kf in self.keyframes])
        return stamps, [kf.pose for kf in self.keyframes]
