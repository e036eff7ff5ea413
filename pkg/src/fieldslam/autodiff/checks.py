"""Gradient verification against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .params import ParamStore
from .tape import Tape, Tensor, backward


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    n_checked: int
    excluded: list[tuple[str, int]] = field(default_factory=list)
    worst: Optional[tuple[str, int]] = None

    def __str__(self) -> str:
        return (
            f"max_rel_err={self.max_rel_err:.3e} over {self.n_checked} coords "
            f"({len(self.excluded)} excluded at branch boundaries)"
        )


def _eval(f: Callable, store: ParamStore) -> tuple[float, tuple]:
    tape = Tape(record_branches=True)
    out = f(store, tape)
    return float(out.value), tape.branch_signature()


def finite_diff_check(
    f: Callable[[ParamStore, Tape], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    max_coords: int = 256,
    rng: Optional[np.random.Generator] = None,
    names: Optional[list[str]] = None,
) -> FiniteDiffReport:
    """Compare backward() gradients of the scalar f against (f(θ+eps)−f(θ−eps))/2eps.

    f must be deterministic in everything but the store values. A coordinate
    whose two perturbed evaluations take different discrete branches (relu,
    abs, clip, interpolation cell, ...) straddles a kink; central differences
    are meaningless there, so it is excluded and reported.
    """
    tape = Tape(record_branches=True)
    loss = f(store, tape)
    store.zero_grad()
    backward(tape, loss)
    param_names = names if names is not None else store.names()
    grads = {name: store.get(name).grad.copy() for name in param_names}

    coords = [(name, i) for name in param_names for i in range(store.value(name).size)]
    if len(coords) > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(pick)]

    max_rel = 0.0
    worst = None
    excluded: list[tuple[str, int]] = []
    checked = 0
    for name, i in coords:
        arr = store.get(name).value
        orig = arr.flat[i]
        arr.flat[i] = orig + eps
        vp, sig_p = _eval(f, store)
        arr.flat[i] = orig - eps
        vm, sig_m = _eval(f, store)
        arr.flat[i] = orig
        if sig_p != sig_m:
            excluded.append((name, i))
            continue
        fd = (vp - vm) / (2.0 * eps)
        ad = grads[name].flat[i]
        # Central differences carry roundoff of order thousands of ULPs of
        # the loss value; differences below that floor are not measurable,
        # so the denominator never drops beneath it.
        floor = 16384.0 * max(1.0, abs(vp), abs(vm)) * np.finfo(np.float64).eps / eps
        denom = max(abs(fd), abs(ad), floor)
        rel = abs(fd - ad) / denom
        checked += 1
        if rel > max_rel:
            max_rel = rel
            worst = (name, i)
    return FiniteDiffReport(max_rel, checked, excluded, worst)
