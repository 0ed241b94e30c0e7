"""Radiance decoder and quadrature volume rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .body import BodyState, inverse_lbs_many
from .diffcore import Linear, Module, Tensor
from .geometry import intersect_aabb_many, posenc, stratified_t


class NerfDecoder(Module):
    """MLP on [posenc(x), f_trans] -> raw density and sigmoid color.

    The density logit is multiplied by ``density_scale`` so that opaque
    surfaces are reachable within a short training run.
    """

    def __init__(self, feat_dim: int, hidden: int, layers: int, xyz_freqs: int, rng: np.random.Generator,
                 density_scale: float = 1.0):
        self.xyz_freqs = xyz_freqs
        self.density_scale = density_scale
        dims = [3 * 2 * xyz_freqs + feat_dim] + [hidden] * layers
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.head = Linear(hidden, 4, rng, gain=1.0)

    def __call__(self, x_n: np.ndarray, f_trans: Tensor) -> tuple[Tensor, Tensor]:
        h = dc.concat([Tensor(posenc(x_n, self.xyz_freqs)), f_trans], axis=1)
        for layer in self.hidden:
            h = dc.relu(layer(h))
        out = self.head(h)
        return out[:, 0] * self.density_scale, dc.sigmoid(out[:, 1:])


def decode(decoder: NerfDecoder, x_n: np.ndarray, f_trans: Tensor, gated: np.ndarray,
           gate_sigma: float = -80.0) -> tuple[Tensor, Tensor]:
    """Decoder outputs for all points; ``f_trans`` holds rows of the ungated points only.

    Gated points bypass the MLP with raw density ``gate_sigma`` and black color.
    """
    gated = np.asarray(gated, dtype=bool)
    n = len(gated)
    keep = np.flatnonzero(~gated)
    if len(keep) != f_trans.shape[0]:
        raise ValueError("f_trans must have one row per ungated point")
    if len(keep) == n:
        return decoder(x_n, f_trans)
    if len(keep) == 0:
        return Tensor(np.full(n, gate_sigma)), Tensor(np.zeros((n, 3)))
    raw, rgb = decoder(x_n[keep], f_trans)
    return dc.scatter_rows(raw, keep, n, gate_sigma), dc.scatter_rows(rgb, keep, n, 0.0)


@dataclass
class Composite:
    color: Tensor  # (R, 3)
    opacity: Tensor  # (R,)
    weights: Tensor  # (R, S)
    transmittance: Tensor  # (R, S), before each sample
    final_transmittance: np.ndarray  # (R,)


def sample_spacing(t: np.ndarray, t_far: np.ndarray) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, last one t_far - t_N."""
    t_far = np.asarray(t_far, dtype=np.float64).reshape(-1, 1)
    return np.concatenate([np.diff(t, axis=1), t_far - t[:, -1:]], axis=1)


def composite(sigma: Tensor, rgb: Tensor, delta: np.ndarray, background=0.0) -> Composite:
    """Alpha compositing of activated densities (R, S) and colors (R, S, 3)."""
    tau = sigma * delta
    cum = dc.cumsum(tau, axis=1)
    # exclusive sum by shifting, not cum - tau, so T stays monotone in floating point
    before = dc.concat([Tensor(np.zeros((tau.shape[0], 1))), cum[:, :-1]], axis=1)
    trans = dc.exp(-before)
    alpha = 1.0 - dc.exp(-tau)
    w = trans * alpha
    color = (w.reshape(*w.shape, 1) * rgb).sum(axis=1)
    acc = w.sum(axis=1)
    t_final = np.exp(-cum.data[:, -1]) if cum.shape[1] else np.ones(cum.shape[0])
    bg = np.asarray(background, dtype=np.float64)
    if np.any(bg != 0):
        color = color + Tensor(t_final[:, None] * bg)
    return Composite(color, acc, w, trans, t_final)


@dataclass
class RenderOutput:
    color: Tensor  # (R, 3)
    opacity: Tensor  # (R,)
    hit: np.ndarray  # (R,) ray met the body box
    samples: dict  # per-sample diagnostics for hit rays


def render_rays(model, bank, state: BodyState, origins: np.ndarray, dirs: np.ndarray,
                n_samples: int | None = None, rng: np.random.Generator | None = None,
                background=0.0) -> RenderOutput:
    """Render rays in the target space of ``state`` from a feature bank built on the input view.

    stratified t -> x_t -> inverse LBS -> x_c -> bank queries -> gate -> fuse -> decode -> composite
    """
    cfg = model.config
    n_samples = n_samples or cfg.n_samples
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    box = state.aabb(cfg.box_margin)
    hit, t_near, t_far = intersect_aabb_many(origins, dirs, box)
    hit_idx = np.flatnonzero(hit)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    if len(hit_idx) == 0:
        return RenderOutput(Tensor(np.tile(bg, (n_rays, 1))), Tensor(np.zeros(n_rays)), hit, {})
    t = stratified_t(t_near[hit_idx], t_far[hit_idx], n_samples, rng)
    delta = sample_spacing(t, t_far[hit_idx])
    x_t = origins[hit_idx, None, :] + t[..., None] * dirs[hit_idx, None, :]
    flat_t = x_t.reshape(-1, 3)
    x_c, _ = inverse_lbs_many(flat_t, state)
    pf = model.query(bank, x_c)
    raw, rgb = model.decode(bank, x_c, pf)
    m = len(hit_idx)
    sigma = dc.softplus(raw).reshape(m, n_samples)
    comp = composite(sigma, rgb.reshape(m, n_samples, 3), delta, bg)
    color = dc.scatter_rows(comp.color, hit_idx, n_rays, bg)
    opacity = dc.scatter_rows(comp.opacity, hit_idx, n_rays, 0.0)
    samples = {
        "t": t,
        "delta": delta,
        "x_t": x_t,
        "x_c": x_c.reshape(m, n_samples, 3),
        "gated": pf.gated.reshape(m, n_samples),
        "gate_distance": pf.gate_distance.reshape(m, n_samples),
        "sigma": sigma.data,
        "rgb": rgb.data.reshape(m, n_samples, 3),
        "transmittance": comp.transmittance.data,
        "final_transmittance": comp.final_transmittance,
        "weights": comp.weights.data,
    }
    return RenderOutput(color, opacity, hit, samples)
