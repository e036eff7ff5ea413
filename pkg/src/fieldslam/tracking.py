"""Scan-to-map pose tracking.

Each incoming scan is motion-compensated with a constant-velocity prediction,
segmented into sky and surface rays, and aligned with point-to-plane ICP
against a local map built from the last few deskewed scans.  The tracker
never touches the density field; corrections from downstream pose
optimization are folded in through apply_correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    Pose,
    Twist,
    interpolate_pose,
    rotation_angle,
    se3_exp,
    se3_log,
    voxel_downsample,
)
from .sim.lidar import LidarModel, LidarScan


def decimate_stride(source_rate: float, target_rate: float) -> int:
    """How many scans to skip per kept scan when downsampling a stream."""
    if source_rate <= 0.0 or target_rate <= 0.0:
        raise ValueError("rates must be positive")
    return max(1, math.ceil(source_rate / target_rate - 1e-9))


@dataclass(frozen=True)
class ICPResult:
    pose: Pose
    converged: bool
    n_iters: int
    rmse: float
    n_corr: int


def icp_point_to_plane(
    source: np.ndarray,
    target: np.ndarray,
    target_normals: np.ndarray,
    init: Optional[Pose] = None,
    max_iters: int = 30,
    tol: float = 1e-6,
    max_corr_dist: float = 1.0,
) -> ICPResult:
    """Align source onto target by minimizing point-to-plane residuals.

    Solves the linearized system with rows [(p x n)^T, n^T] for the update
    twist and left-composes its exponential each iteration.  Fewer than six
    gated correspondences leaves the problem underdetermined; the current
    estimate is returned unconverged.
    """
    cur = init if init is not None else Pose.identity()
    tree = cKDTree(target)
    rmse = math.inf
    for it in range(1, max_iters + 1):
        p = cur.apply(source)
        dist, j = tree.query(p, distance_upper_bound=max_corr_dist)
        ok = np.isfinite(dist)
        n_corr = int(ok.sum())
        if n_corr < 6:
            return ICPResult(cur.renormalized(), False, it, rmse, n_corr)
        pp = p[ok]
        q = target[j[ok]]
        n = target_normals[j[ok]]
        b = -np.einsum("ij,ij->i", n, pp - q)
        # corner and edge correspondences carry oversized plane residuals;
        # drop the worst tenth so flat regions dominate the solve
        k_keep = max(6, int(0.9 * len(b)))
        if k_keep < len(b):
            order = np.argsort(np.abs(b), kind="stable")[:k_keep]
            pp, n, b = pp[order], n[order], b[order]
        rmse = float(np.sqrt(np.mean(b * b)))
        a = np.concatenate([np.cross(pp, n), n], axis=1)
        xi, *_ = np.linalg.lstsq(a, b, rcond=None)
        cur = se3_exp(Twist(xi[:3], xi[3:])) @ cur
        if float(np.linalg.norm(xi)) < tol:
            return ICPResult(cur.renormalized(), True, it, rmse, n_corr)
    return ICPResult(cur.renormalized(), False, max_iters, rmse, n_corr)


def scan_fractions(scan: LidarScan) -> np.ndarray:
    """Per-ray progress through the sweep, 0 at the first column, 1 at the last."""
    ts = scan.timestamps
    t0, t1 = float(ts.min()), float(ts.max())
    if t1 <= t0:
        return np.zeros(ts.shape)
    return (ts - t0) / (t1 - t0)


def motion_compensate(
    scan: LidarScan, pose_start: Pose, pose_end: Pose, frame: str = "end"
) -> np.ndarray:
    """Deskew measured points into one sensor frame.

    The sensor pose over the sweep is interpolated between pose_start and
    pose_end; each azimuth column shares one timestamp, so poses are built
    per column.  Returns points for every ray; rows where the scan has no
    return are meaningless and must be masked by the caller.
    """
    if frame not in ("end", "start"):
        raise ValueError("frame must be 'end' or 'start'")
    u = scan_fractions(scan)
    pts = scan.directions * scan.ranges[:, None]
    ref_inv = (pose_end if frame == "end" else pose_start).inverse()
    out = np.empty_like(pts)
    for uu in np.unique(u):
        m = u == uu
        rel = ref_inv @ interpolate_pose(pose_start, pose_end, float(uu))
        out[m] = rel.apply(pts[m])
    return out


def grid_normals(
    points: np.ndarray,
    valid: np.ndarray,
    az_idx: np.ndarray,
    el_idx: np.ndarray,
    model: LidarModel,
    max_thickness: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray surface normals from the scan's range-image structure.

    Fits a plane to the 5x3 azimuth-elevation window around each ray (azimuth
    wraps, elevation rows shrink at the edges).  A ray gets no normal when
    the window has too few returns or the fit is thicker than max_thickness,
    which also rejects windows straddling depth discontinuities.  Normals are
    oriented toward the sensor.  Returns (normals, valid) over all rays.
    """
    a_n, e_n = model.azimuth_count, model.n_elevations
    gp = np.zeros((a_n, e_n, 3))
    gok = np.zeros((a_n, e_n), dtype=bool)
    gp[az_idx, el_idx] = points
    gok[az_idx, el_idx] = valid

    shifts = [(da, de) for da in (-2, -1, 0, 1, 2) for de in (-1, 0, 1)]
    cnt = np.zeros((a_n, e_n))
    s1 = np.zeros((a_n, e_n, 3))
    s2 = np.zeros((a_n, e_n, 3, 3))
    for da, de in shifts:
        p = np.roll(gp, -da, axis=0)
        ok = np.roll(gok, -da, axis=0)
        if de > 0:
            p = np.concatenate([p[:, de:], np.zeros((a_n, de, 3))], axis=1)
            ok = np.concatenate([ok[:, de:], np.zeros((a_n, de), bool)], axis=1)
        elif de < 0:
            p = np.concatenate([np.zeros((a_n, -de, 3)), p[:, :de]], axis=1)
            ok = np.concatenate([np.zeros((a_n, -de), bool), ok[:, :de]], axis=1)
        w = ok.astype(np.float64)
        cnt += w
        s1 += p * w[..., None]
        s2 += np.einsum("aei,aej->aeij", p, p) * w[..., None, None]

    enough = cnt >= 9
    safe = np.where(enough, cnt, 1.0)
    mean = s1 / safe[..., None]
    cov = s2 / safe[..., None, None] - np.einsum("aei,aej->aeij", mean, mean)
    lam, vec = np.linalg.eigh(cov.reshape(-1, 3, 3))
    lam = lam.reshape(a_n, e_n, 3)
    nrm = vec[:, :, 0].reshape(a_n, e_n, 3)
    flat = lam[..., 0] <= max_thickness ** 2
    ok_grid = enough & flat & gok

    normals = nrm[az_idx, el_idx]
    ok_rays = ok_grid[az_idx, el_idx]
    toward = np.einsum("ni,ni->n", normals, points) > 0.0
    normals = np.where(toward[:, None], -normals, normals)
    return normals, ok_rays


def _voxel_merge(points: np.ndarray, normals: np.ndarray, voxel: float):
    """Average points and normals per voxel, dropping cells whose normals
    disagree (corner cells) or that lost their direction entirely."""
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    new_cell = np.ones(len(keys), dtype=bool)
    new_cell[1:] = (keys[1:] != keys[:-1]).any(axis=1)
    starts = np.flatnonzero(new_cell)
    p = np.add.reduceat(points[order], starts, axis=0)
    n = np.add.reduceat(normals[order], starts, axis=0)
    counts = np.diff(np.append(starts, len(keys)))[:, None]
    p /= counts
    n /= counts
    agree = np.linalg.norm(n, axis=1)
    keep = agree > 0.7
    return p[keep], n[keep] / agree[keep, None]


def _close3x3(grid: np.ndarray) -> np.ndarray:
    """Binary closing with a 3x3 window; azimuth axis wraps, elevation pads."""

    def pad(g: np.ndarray) -> np.ndarray:
        g = np.pad(g, ((1, 1), (0, 0)), mode="wrap")
        return np.pad(g, ((0, 0), (1, 1)), mode="edge")

    def window(g: np.ndarray, combine) -> np.ndarray:
        p = pad(g)
        out = g.copy()
        for da in (0, 1, 2):
            for de in (0, 1, 2):
                out = combine(out, p[da : da + g.shape[0], de : de + g.shape[1]])
        return out

    return window(window(grid, np.logical_or), np.logical_and)


def segment_sky(scan: LidarScan, pose: Pose, model: LidarModel) -> np.ndarray:
    """Mark no-return rays that left through the sky.

    Candidates are rays without a return that point upward in the world
    frame; a morphological closing over the azimuth-elevation grid fills
    pinholes in that region.  Rays with a return are never marked, whatever
    the closing says.
    """
    no_return = ~scan.valid
    upward = (scan.directions @ pose.rotation.T)[:, 2] > 0.0
    grid = np.zeros((model.azimuth_count, model.n_elevations), dtype=bool)
    grid[scan.az_idx, scan.el_idx] = no_return & upward
    closed = _close3x3(grid)
    return closed[scan.az_idx, scan.el_idx] & no_return


@dataclass(frozen=True)
class TrackedFrame:
    scan: LidarScan
    pose: Pose  # world pose of the sensor at the scan stamp
    pose_start: Pose  # world pose at the start of the sweep
    sky: np.ndarray
    icp: Optional[ICPResult]


@dataclass(frozen=True)
class TrackerConfig:
    target_rate: float = 5.0
    voxel: float = 0.05
    max_corr_dist: float = 1.0
    max_iters: int = 30
    tol: float = 1e-6
    window: int = 2  # scans merged into the alignment target


class Tracker:
    """Streaming scan-to-scan odometry with constant-velocity prediction."""

    def __init__(
        self,
        model: LidarModel,
        config: Optional[TrackerConfig] = None,
        initial_pose: Optional[Pose] = None,
    ) -> None:
        self.model = model
        self.config = config or TrackerConfig()
        self._stride = decimate_stride(model.scan_rate, self.config.target_rate)
        self._scan_index = -1
        self._pose = initial_pose if initial_pose is not None else Pose.identity()
        self._steps: list[Pose] = []  # recent body-frame motions per kept scan
        # local map: deskewed points and normals per scan, in each end frame
        self._history: list[tuple[np.ndarray, np.ndarray, Pose]] = []
        self._boot_scan: Optional[LidarScan] = None
        self._rmse_hist: list[float] = []  # recent residuals, the noise baseline
        self._cooldown = 0  # frames left before re-alignment is allowed again

    def _predicted_step(self) -> Optional[Pose]:
        """Constant-velocity prediction, averaging the last two steps so an
        alternating estimation error cannot feed itself forward."""
        if not self._steps:
            return None
        if len(self._steps) == 1:
            return self._steps[-1]
        a, b = self._steps[-2], self._steps[-1]
        xi = 0.5 * (se3_log(a).as_vector() + se3_log(b).as_vector())
        return se3_exp(Twist(xi[:3], xi[3:]))

    def _push_history(self, scan: LidarScan, deskewed: np.ndarray, pose: Pose) -> None:
        normals, ok = grid_normals(deskewed, scan.valid, scan.az_idx, scan.el_idx, self.model)
        self._history.append((deskewed[ok], normals[ok], pose))
        if len(self._history) > self.config.window:
            self._history.pop(0)

    def _target_cloud(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([p.apply(c) for c, _, p in self._history])
        nrm = np.concatenate([n @ p.rotation.T for _, n, p in self._history])
        return _voxel_merge(pts, nrm, self.config.voxel)

    def _reboot_map(self, step: Pose) -> None:
        """Re-deskew the first scan with the step extrapolated backward.

        The first scan was stored raw because nothing was known about the
        motion during its sweep.  Once the first alignment produces a step
        estimate, the same body velocity is assumed to extend back through
        that sweep, and the stored map entry is rebuilt.
        """
        scan = self._boot_scan
        frac = self.model.scan_period * self.model.scan_rate / self._stride
        xi = se3_log(step).as_vector() * frac
        sweep = se3_exp(Twist(xi[:3], xi[3:]))
        pose0 = self._history[0][2]
        d0 = motion_compensate(scan, pose0 @ sweep.inverse(), pose0, frame="end")
        n0, ok0 = grid_normals(d0, scan.valid, scan.az_idx, scan.el_idx, self.model)
        self._history[0] = (d0[ok0], n0[ok0], pose0)

    def process(self, scan: LidarScan) -> Optional[TrackedFrame]:
        """Track one scan; returns None for scans dropped by decimation."""
        self._scan_index += 1
        if self._scan_index % self._stride != 0:
            return None

        if not self._history:
            pts = scan.directions * scan.ranges[:, None]
            self._push_history(scan, pts, self._pose)
            self._boot_scan = scan
            sky = segment_sky(scan, self._pose, self.model)
            return TrackedFrame(scan, self._pose, self._pose, sky, None)

        pose_start = self._pose
        tgt_world, nrm_world = self._target_cloud()

        def align(step: Pose) -> tuple[ICPResult, Pose, Pose, float, float]:
            pred_end = (pose_start @ step).renormalized()
            deskewed = motion_compensate(scan, pose_start, pred_end, frame="end")
            src = voxel_downsample(deskewed[scan.valid], self.config.voxel)
            r = icp_point_to_plane(
                pred_end.apply(src),
                tgt_world,
                nrm_world,
                max_iters=self.config.max_iters,
                tol=self.config.tol,
                max_corr_dist=self.config.max_corr_dist,
            )
            # an unconverged result is still a better motion estimate than
            # nothing, unless it ran away entirely
            sane = (
                float(np.linalg.norm(r.pose.translation)) < 1.0
                and rotation_angle(r.pose.rotation) < 0.5
            )
            end = (r.pose @ pred_end).renormalized() if sane else pred_end
            new_step = pose_start.inverse() @ end
            moved = float(np.linalg.norm(new_step.translation - step.translation))
            turned = rotation_angle(new_step.rotation.T @ step.rotation)
            return r, end, new_step, moved, turned

        # Deskew uses the predicted motion; prediction averages the last two
        # steps, which keeps an alternating estimation error from feeding
        # itself forward through the deskew.  Small disagreements between the
        # measured and predicted step are left alone: re-aligning on them
        # couples the estimate back into the deskew and destabilizes it.  A
        # gross disagreement means the prediction was wrong (direction
        # reversal, sharp acceleration), so the alignment repeats with the
        # measured step until it settles.  The cold start, with nothing to
        # predict from, iterates the same way and additionally rebuilds the
        # first map entry each pass, since that scan was stored raw.
        predicted = self._predicted_step()
        cold = predicted is None
        step = predicted if predicted is not None else Pose.identity()
        if cold:
            # The motion during the very first sweep is unobservable until
            # now.  Try a stationary first sweep and one extrapolated backward
            # from the step being estimated, and keep whichever alignment
            # residual is lower.
            raw0 = self._history[0]
            best = None
            for moving in (False, True):
                self._history[0] = raw0
                step_h = Pose.identity()
                for _ in range(8):
                    if moving:
                        self._reboot_map(step_h)
                    tgt_world, nrm_world = self._target_cloud()
                    res_h, end_h, step_h, moved, turned = align(step_h)
                    if moved < 1e-4 and turned < 1e-4:
                        break
                score = res_h.rmse
                if best is None or score < best[0]:
                    best = (score, res_h, end_h, step_h, moving)
            _, res, pose_end, step, moving = best
            self._history[0] = raw0
            if moving:
                self._reboot_map(step)
            self._boot_scan = None
        else:
            res, pose_end, step, moved, turned = align(step)
            # One pass of alignment recovers only part of a deskew error, so
            # the correction magnitude alone understates a bad prediction.
            # The residual does not: it jumps well above its recent baseline
            # whenever the deskew was wrong, whatever the noise level is.
            # Re-alignment repairs such a frame, but must then pause: the
            # stored map carries the frame's leftover error as a sweep-skew,
            # and re-aligning against it merely reproduces that skew, frame
            # after frame.  A pause lets the prediction take over again.
            base = sorted(self._rmse_hist)[len(self._rmse_hist) // 2] if len(self._rmse_hist) >= 3 else None
            misfit = base is not None and res.rmse > max(2.0 * base, 0.004)
            if self._cooldown > 0:
                self._cooldown -= 1
            elif moved > 0.03 or turned > 0.01 or misfit:
                for _ in range(7):
                    res, pose_end, step, moved, turned = align(step)
                    if moved < 1e-3 and turned < 3e-4:
                        break
                self._cooldown = 2
        self._rmse_hist.append(res.rmse)
        if len(self._rmse_hist) > 5:
            self._rmse_hist.pop(0)

        self._steps.append(pose_start.inverse() @ pose_end)
        if len(self._steps) > 2:
            self._steps.pop(0)
        self._pose = pose_end
        self._push_history(
            scan,
            motion_compensate(scan, pose_start, pose_end, frame="end"),
            pose_end,
        )
        sky = segment_sky(scan, pose_end, self.model)
        return TrackedFrame(scan, pose_end, pose_start, sky, res)

    def apply_correction(self, delta: Pose) -> None:
        """Left-multiply the current state by a world-frame pose correction.

        delta = corrected @ stored.inverse() for whichever recent pose the
        optimizer adjusted.  Body-frame velocity is unaffected.
        """
        self._pose = (delta @ self._pose).renormalized()
        self._history = [
            (c, n, (delta @ p).renormalized()) for c, n, p in self._history
        ]
