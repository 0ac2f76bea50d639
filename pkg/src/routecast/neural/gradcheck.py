"""Central-finite-difference verification of analytic gradients.

The operation under test is a callable mapping a dict of float64 arrays
(parameters and/or inputs alike) to ``(loss, grads)``, with ``grads`` keyed
like the input dict.  Every coordinate of small arrays is probed; larger
arrays get a seeded coordinate sample.  The reported figure is the worst
relative mismatch, with a floor on the denominator so that near-zero
gradients are effectively compared absolutely.
"""

from __future__ import annotations

import inspect
from typing import Callable

import numpy as np

EPSILON_MIN = 1e-7
EPSILON_MAX = 1e-3
_REL_FLOOR = 1e-3  # |a - n| below floor*tol passes even if both are tiny


def grad_check(
    op: Callable[[dict], tuple[float, dict]],
    probes: dict[str, np.ndarray],
    epsilon: float = 1e-5,
    max_coords: int = 48,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probes`` is mutated in place during probing and restored afterwards.
    If ``op`` accepts a ``need_grad`` keyword it is passed False on the
    finite-difference evaluations, which only consume the loss.
    """
    if not EPSILON_MIN <= epsilon <= EPSILON_MAX:
        raise ValueError(f"epsilon {epsilon} outside [{EPSILON_MIN}, {EPSILON_MAX}]")
    try:
        takes_flag = "need_grad" in inspect.signature(op).parameters
    except (TypeError, ValueError):
        takes_flag = False
    loss_of = (lambda pr: op(pr, need_grad=False)[0]) if takes_flag else (lambda pr: op(pr)[0])
    _, grads = op(probes)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(probes):
        arr = probes[name]
        if name not in grads:
            raise KeyError(f"operation returned no gradient for {name!r}")
        g = np.asarray(grads[name])
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != array shape {arr.shape} for {name!r}")
        size = arr.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = arr.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            lp = loss_of(probes)
            flat[c] = orig - epsilon
            lm = loss_of(probes)
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * epsilon)
            analytic = float(g.reshape(-1)[c])
            denom = max(abs(analytic), abs(numeric), _REL_FLOOR)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
