"""Central finite-difference checks of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class GradCheck:
    n_points: int
    max_rel_error: float
    worst: tuple  # (input index, flat index, analytic, numeric)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradient(fn: Callable[[], Tensor], inputs: Sequence[Tensor], n_points: int = 20,
                   rng: np.random.Generator | None = None, eps: float = 1e-6,
                   floor: float = 1e-6) -> GradCheck:
    """Compare ``backward`` against central differences at ``n_points`` random coordinates.

    ``fn`` recomputes a scalar from the current values of ``inputs``; each
    point perturbs one entry of one input in place and restores it.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    dc.backward(fn())
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    sizes = np.array([t.size for t in inputs], dtype=float)
    worst, max_err = (), 0.0
    for _ in range(n_points):
        k = int(rng.choice(len(inputs), p=sizes / sizes.sum()))
        flat = inputs[k].data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        with dc.no_grad():
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[k].reshape(-1)[i])
        err = relative_error(analytic, numeric, floor)
        if err >= max_err:
            max_err, worst = err, (k, i, analytic, numeric)
    return GradCheck(n_points, max_err, worst)
