"""Central finite differences for the hand-written backward passes."""

import numpy as np


def numeric_grad(f, x, h=1e-6, coords=None):
    """``df/dx`` at ``coords`` (all when None) by central differences; ``x`` is perturbed in place."""
    coords = list(np.ndindex(x.shape)) if coords is None else coords
    out = {}
    for idx in coords:
        old = x[idx]
        x[idx] = old + h
        a = f()
        x[idx] = old - h
        b = f()
        x[idx] = old
        out[idx] = (a - b) / (2 * h)
    return out


def sample_coords(shape, gen, k=12):
    total = int(np.prod(shape))
    flat = gen.choice(total, size=min(k, total), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def max_rel_error(numeric: dict, analytic: np.ndarray, floor=1e-8) -> float:
    worst = 0.0
    for idx, fd in numeric.items():
        an = float(analytic[idx])
        diff = abs(fd - an)
        if diff <= floor:
            continue
        worst = max(worst, diff / max(abs(fd), abs(an)))
    return worst
