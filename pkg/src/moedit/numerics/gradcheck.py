"""Central-difference verification of reverse-mode gradients.

Runs in fp64. The loss closure must be deterministic: any sampling it
depends on has to be drawn once outside and passed in frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_err: float
    worst_param: str
    worst_coord: tuple[int, ...]
    analytic: float
    numeric: float
    coords_checked: int
    denom_floor: float


def _coords_for(shape: tuple[int, ...], limit: int | None, rng) -> list[tuple[int, ...]]:
    size = int(np.prod(shape)) if shape else 1
    if limit is None or size <= limit:
        flats = range(size)
    else:
        # always include coord 0, fill the rest with a seeded sample
        picks = rng.choice(size - 1, size=limit - 1, replace=False) + 1
        flats = [0, *sorted(int(i) for i in picks)]
    return [np.unravel_index(f, shape) if shape else () for f in flats]


def grad_check(
    loss_fn,
    params: list[tuple[str, Tensor]],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    denom_floor: float | None = None,
    target_rel: float = 1e-4,
) -> GradCheckResult:
    """Compare backward() against central differences for each parameter.

    loss_fn: () -> scalar Tensor, rebuilt from the live param tensors on
    every call. Relative error uses max(|analytic|, |numeric|, floor) as
    the denominator. The default floor is set from the loss magnitude:
    (up - down) carries a few ulps of |loss| in rounding noise, so a
    gradient coordinate below ~8|loss|eps_mach/eps / target_rel cannot be
    certified to target_rel no matter how exact backward() is. Coordinates
    under the floor are compared absolutely instead, which still flags any
    analytic error larger than the noise in the central difference itself.
    """
    for name, p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires fp64 params, {name} is {p.data.dtype}")
        if not p.requires_grad:
            raise ValueError(f"grad_check param {name} has requires_grad=False")
    if max_coords_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    loss = loss_fn()
    grads = backward(loss)
    analytic = {name: grads.get(p, np.zeros_like(p.data)) for name, p in params}

    if denom_floor is None:
        scale = max(abs(loss.item()), 1.0)
        noise = 8.0 * scale * float(np.finfo(np.float64).eps) / eps
        denom_floor = noise / target_rel

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, 0, denom_floor)
    checked = 0
    for name, p in params:
        coords = _coords_for(p.data.shape, max_coords_per_param, rng)
        for coord in coords:
            keep = p.data[coord]
            p.data[coord] = keep + eps
            up = loss_fn().item()
            p.data[coord] = keep - eps
            down = loss_fn().item()
            p.data[coord] = keep
            numeric = (up - down) / (2.0 * eps)
            ana = float(analytic[name][coord])
            denom = max(abs(ana), abs(numeric), denom_floor)
            rel = abs(ana - numeric) / denom
            checked += 1
            if rel > worst.max_rel_err:
                worst = GradCheckResult(rel, name, tuple(int(c) for c in coord),
                                        ana, numeric, 0, denom_floor)
    return GradCheckResult(
        worst.max_rel_err, worst.worst_param, worst.worst_coord,
        worst.analytic, worst.numeric, checked, denom_floor,
    )
