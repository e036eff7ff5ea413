"""Ray losses for training the density field.

The sight loss pushes the rendered ray weights toward a target distribution
concentrated at the measured range, the opacity loss asks each returned ray
to be fully absorbed, the depth loss penalizes rendered-depth error, and the
sky loss drives weights on no-return rays to zero.

The margin controlling the width of the target distribution is either fixed,
decayed with keyframe age, or chosen per ray from a divergence between the
current weight distribution and the ideal one ("dynamic margin").  All such
quantities are computed from detached weights and enter the loss as
constants: no gradient flows through the margin or the target.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, constant
from .autodiff.tape import tabs, tlog, tsum
from .field import RayBatch, RenderOutput


class LossMode(enum.Enum):
    JS_DYNAMIC = "js_dynamic"
    LOS_L1 = "los_l1"
    LOS_L2 = "los_l2"
    KL = "kl"
    DEPTH_ONLY = "depth_only"


@dataclass(frozen=True)
class LossConfig:
    eps_min: float = 0.5
    alpha: float = 1.0
    js_min: float = 1.0
    js_max: float = 10.0
    lambda_depth: float = 5e-6
    lambda_sky: float = 1.0
    los_eps_init: float = 2.5
    los_eps_decay: float = 0.99

    def __post_init__(self) -> None:
        if self.eps_min <= 0.0:
            raise ValueError("eps_min must be positive")
        if not 0.0 <= self.js_min < self.js_max:
            raise ValueError("need 0 <= js_min < js_max")
        if not 0.0 < self.los_eps_decay <= 1.0:
            raise ValueError("los_eps_decay must be in (0, 1]")
        if self.los_eps_init < self.eps_min:
            raise ValueError("los_eps_init must be >= eps_min")

    @property
    def sigma_floor(self) -> float:
        return self.eps_min / 30.0

    @property
    def eps_dyn_max(self) -> float:
        return self.eps_min * (1.0 + self.alpha * self.js_max)


def margin_for(mode: LossMode, cfg: LossConfig, kf_age: int) -> float:
    """Scalar margin for modes without a per-ray dynamic margin.

    For LOS modes the margin shrinks geometrically with the number of times
    the keyframe has been revisited, never below eps_min.
    """
    if mode in (LossMode.LOS_L1, LossMode.LOS_L2):
        return max(cfg.eps_min, cfg.los_eps_init * cfg.los_eps_decay ** kf_age)
    return cfg.eps_min


def target_weights(
    t: np.ndarray, delta: np.ndarray, z: np.ndarray, eps: np.ndarray | float
) -> np.ndarray:
    """Discretized target weight distribution per ray.

    A Gaussian with std eps/3 centered on the measured range, truncated to
    |t - z| <= eps, evaluated at the sample distances, scaled by the interval
    lengths and renormalized to sum to one.  Rows where no sample falls in
    the window collapse to a one-hot at the nearest sample so the target is
    always a valid distribution.
    """
    z = np.asarray(z, dtype=np.float64)
    eps_col = np.broadcast_to(np.asarray(eps, dtype=np.float64), z.shape)[:, None]
    d = t - z[:, None]
    std = eps_col / 3.0
    p = np.exp(-0.5 * (d / std) ** 2)
    p = np.where(np.abs(d) <= eps_col, p, 0.0) * delta
    mass = p.sum(axis=1, keepdims=True)
    empty = mass[:, 0] < 1e-300
    if empty.any():
        nearest = np.abs(d[empty]).argmin(axis=1)
        p[empty] = 0.0
        p[empty, nearest] = 1.0
        mass = p.sum(axis=1, keepdims=True)
    return p / mass


def js_score(
    weights: np.ndarray, t: np.ndarray, z: np.ndarray, cfg: LossConfig
) -> np.ndarray:
    """Per-ray divergence between the rendered weights and the ideal target.

    Both distributions are summarized as Gaussians: the target has mean z and
    std eps_min/3; the rendered one takes the mean and variance of the
    normalized weights, with the std floored to keep the score finite for
    near-degenerate weight distributions.  Returns the symmetrized KL
    divergence (average of the two directed divergences).
    """
    wsum = weights.sum(axis=1, keepdims=True)
    wn = weights / np.where(wsum > 1e-300, wsum, 1.0)
    mu = (wn * t).sum(axis=1)
    var = (wn * (t - mu[:, None]) ** 2).sum(axis=1)
    sigma_s = np.maximum(np.sqrt(var), cfg.sigma_floor)
    sigma_g = cfg.eps_min / 3.0
    dmu2 = (mu - np.asarray(z, dtype=np.float64)) ** 2
    j = (sigma_g ** 2 + dmu2) / (2.0 * sigma_s ** 2)
    j += (sigma_s ** 2 + dmu2) / (2.0 * sigma_g ** 2)
    return 0.5 * (j - 1.0)


def clamp_js(j: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Suppress small divergences entirely and cap large ones."""
    out = np.where(j < cfg.js_min, 0.0, j)
    return np.minimum(out, cfg.js_max)


@dataclass(frozen=True)
class LossContext:
    """Stop-gradient constants of one loss evaluation.

    eps is the per-ray margin actually used, w_star the per-ray target
    distribution (None when the mode has no sight loss), js the raw
    divergence scores (None outside dynamic-margin mode).  A context is
    computed once from detached weights and reused verbatim, which is what
    makes finite differencing of the remaining graph well-posed.
    """

    eps: np.ndarray
    w_star: np.ndarray | None
    js: np.ndarray | None


def make_context(
    batch: RayBatch,
    weights: np.ndarray,
    mode: LossMode,
    cfg: LossConfig,
    kf_age: int = 0,
) -> LossContext:
    n = batch.n_rays
    valid = ~batch.sky
    if mode is LossMode.JS_DYNAMIC:
        js = js_score(weights, batch.t, batch.z, cfg)
        eps = cfg.eps_min * (1.0 + cfg.alpha * clamp_js(js, cfg))
        eps = np.where(valid, eps, cfg.eps_min)
    else:
        js = None
        eps = np.full(n, margin_for(mode, cfg, kf_age))
    if mode is LossMode.DEPTH_ONLY:
        w_star = None
    else:
        w_star = np.zeros_like(batch.t)
        if valid.any():
            w_star[valid] = target_weights(
                batch.t[valid], batch.delta[valid], batch.z[valid], eps[valid]
            )
    return LossContext(eps=eps, w_star=w_star, js=js)


@dataclass
class LossTerms:
    total: Tensor
    sight: Tensor
    opacity: Tensor
    depth: Tensor
    sky: Tensor
    mean_eps: float

    def row(self) -> dict[str, float]:
        return {
            "total": float(self.total.value),
            "sight": float(self.sight.value),
            "opacity": float(self.opacity.value),
            "depth": float(self.depth.value),
            "sky": float(self.sky.value),
            "mean_eps_dyn": self.mean_eps,
        }


def _masked_mean(per_ray: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        return constant(0.0, per_ray.tape)
    return tsum(per_ray * mask.astype(np.float64)) * (1.0 / count)


def ray_loss(
    out: RenderOutput,
    batch: RayBatch,
    ctx: LossContext,
    mode: LossMode,
    cfg: LossConfig,
) -> LossTerms:
    """Combine the loss terms for one rendered ray batch.

    Sight and opacity are averaged over returned rays, depth over returned
    rays, sky over no-return rays; absent categories contribute zero.
    """
    tape = out.weights.tape
    valid = ~batch.sky
    w = out.weights

    if mode is LossMode.DEPTH_ONLY:
        sight_m = constant(0.0, tape)
        opacity_m = constant(0.0, tape)
    else:
        ws = ctx.w_star
        if mode in (LossMode.JS_DYNAMIC, LossMode.LOS_L1):
            sight = tsum(tabs(w - ws), axis=1)
        elif mode is LossMode.LOS_L2:
            diff = w - ws
            sight = tsum(diff * diff, axis=1)
        elif mode is LossMode.KL:
            # ws log(ws / (w + 1e-12)); terms with ws == 0 vanish exactly
            ws_log_ws = np.where(ws > 0.0, ws * np.log(np.where(ws > 0.0, ws, 1.0)), 0.0)
            per = tlog(w + 1e-12) * (-ws) + ws_log_ws
            sight = tsum(per, axis=1)
        else:
            raise ValueError(f"unhandled mode {mode}")
        sight_m = _masked_mean(sight, valid)
        opacity_m = _masked_mean(tabs(1.0 - tsum(w, axis=1)), valid)

    depth_res = out.depth - batch.z
    depth_m = _masked_mean(depth_res * depth_res, valid)
    sky_m = _masked_mean(tsum(tabs(w), axis=1), batch.sky)

    total = sight_m + opacity_m + cfg.lambda_depth * depth_m + cfg.lambda_sky * sky_m
    mean_eps = float(ctx.eps[valid].mean()) if valid.any() else float(cfg.eps_min)
    return LossTerms(
        total=total, sight=sight_m, opacity=opacity_m, depth=depth_m,
        sky=sky_m, mean_eps=mean_eps,
    )
