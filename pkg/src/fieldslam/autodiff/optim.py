"""Adam with bias correction and per-group learning rates."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .params import ParamStore

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def resolve_lr(name: str, lr_map: dict[str, float]) -> float:
    """Exact name first, then the group prefix before '/', then 'default'."""
    if name in lr_map:
        return lr_map[name]
    group = name.split("/", 1)[0]
    if group in lr_map:
        return lr_map[group]
    if "default" in lr_map:
        return lr_map["default"]
    raise KeyError(f"no learning rate for parameter {name!r}")


def adam_step(
    params: ParamStore,
    lr_map: dict[str, float],
    step: Optional[int] = None,
    names: Optional[list[str]] = None,
) -> None:
    """One update over `names` (default: every parameter). `step` is the
    1-based bias-correction count; omitted, the store's counter advances."""
    if step is None:
        params.step += 1
        step = params.step
    c1 = 1.0 - BETA1 ** step
    c2 = 1.0 - BETA2 ** step
    for name in names if names is not None else params.names():
        p = params.get(name)
        g = p.grad
        p.m = BETA1 * p.m + (1.0 - BETA1) * g
        p.v = BETA2 * p.v + (1.0 - BETA2) * (g * g)
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.value = p.value - resolve_lr(name, lr_map) * m_hat / (np.sqrt(v_hat) + EPS)
