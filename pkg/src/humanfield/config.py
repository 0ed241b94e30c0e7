"""Flat key-value run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Tuple
values are comma separated. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path


def _doc(default, doc: str, model: bool = False):
    kwargs = {"metadata": {"doc": doc, "model": model}}
    if isinstance(default, (list, tuple)):
        return field(default_factory=lambda: tuple(default), **kwargs)
    return field(default=default, **kwargs)


@dataclass
class Config:
    # model architecture
    image_size: int = _doc(64, "input/target image side in pixels", True)
    encoder_widths: tuple = _doc((16, 32, 32, 64), "channels of the stride-2 encoder blocks", True)
    map_channels: int = _doc(64, "learned channels of the 2D feature map", True)
    rgb_channels: int = _doc(32, "fixed channels appended to the map: posenc(rgb), rgb, validity bit", True)
    style_dim: int = _doc(64, "style vector length of the mapping network", True)
    plane_channels: int = _doc(32, "tri-plane feature channels F", True)
    plane_resolution: int = _doc(64, "tri-plane resolution R", True)
    plane_base_resolution: int = _doc(8, "resolution of the learned constant the plane decoder upsamples", True)
    plane_hidden: int = _doc(32, "hidden channels of the plane decoder", True)
    voxel_grid: int = _doc(31, "sparse voxel grid side G", True)
    point_dim: int = _doc(32, "point-level feature dimension D", True)
    sparse_layers: int = _doc(4, "sparse convolution layers", True)
    token_channels: int = _doc(32, "fusion token channels C", True)
    heads: int = _doc(3, "attention heads", True)
    head_dim: int = _doc(16, "per-head query/key/value width; 0 means token_channels // heads", True)
    reduction: str = _doc("concat", "token reduction: concat or mean", True)
    decoder_hidden: int = _doc(128, "decoder MLP width", True)
    decoder_layers: int = _doc(4, "decoder hidden layers", True)
    xyz_freqs: int = _doc(10, "positional-encoding frequencies for canonical points", True)
    density_scale: float = _doc(10.0, "multiplier on the decoder's raw density output", True)
    gate_threshold: float = _doc(0.05, "metres from the nearest canonical vertex beyond which a sample is gated", True)
    gate_sigma: float = _doc(-80.0, "raw density assigned to gated samples", True)
    canonical_extent: float = _doc(0.9, "canonical body box maps to [-extent, extent]^3", True)
    box_margin: float = _doc(0.1, "metres the posed-body box is inflated by for ray bounds", True)
    visibility_eps: float = _doc(0.01, "depth slack in metres for vertex visibility", True)
    init_seed: int = _doc(0, "parameter initialization seed", True)
    # rendering
    n_samples: int = _doc(48, "samples per ray")
    # losses
    lambda_mask: float = _doc(0.1, "mask loss weight")
    lambda_ssim: float = _doc(0.01, "SSIM loss weight")
    lambda_perc: float = _doc(0.01, "perceptual loss weight")
    perc_seed: int = _doc(0, "seed of the fixed perceptual filter bank")
    # training
    lr: float = _doc(2e-3, "initial learning rate")
    lr_decay: float = _doc(0.5, "learning-rate factor applied at each epoch boundary")
    epochs: int = _doc(5, "training epochs")
    rays_per_step: int = _doc(512, "rays per step, including the patch")
    patch_size: int = _doc(16, "side of the square patch used by SSIM and perceptual losses")
    interior_fraction: float = _doc(0.25, "share of scattered rays drawn from the mask interior")
    seed: int = _doc(0, "training sampler seed")
    jitter: bool = _doc(True, "jitter samples within their bins during training")
    # dataset generation
    n_subjects: int = _doc(4, "training subjects")
    n_test_subjects: int = _doc(2, "held-out subjects")
    n_poses: int = _doc(4, "poses per subject")
    n_views: int = _doc(8, "cameras on the yaw ring")
    data_seed: int = _doc(0, "dataset generation seed")
    # paths
    dataset: str = _doc("data", "dataset directory")
    checkpoint: str = _doc("checkpoint.bin", "checkpoint path")
    out: str = _doc("out", "output directory")

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.reduction not in ("concat", "mean"):
            raise ValueError(f"reduction must be concat or mean, got {self.reduction!r}")
        for key in ("lambda_mask", "lambda_ssim", "lambda_perc"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be nonnegative")
        if self.n_samples < 1 or self.epochs < 0 or self.rays_per_step < self.patch_size**2:
            raise ValueError("n_samples >= 1, epochs >= 0 and rays_per_step >= patch_size^2 are required")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def docs(cls) -> dict[str, str]:
        return {f.name: f.metadata["doc"] for f in fields(cls)}

    @classmethod
    def full_scale(cls, **overrides) -> "Config":
        """Published full-scale sizes (512 style, 96 point features, 64+32 map channels)."""
        base = dict(image_size=512, encoder_widths=(64, 128, 256, 512), map_channels=64, rgb_channels=32,
                    style_dim=512, point_dim=96, token_channels=32, heads=3, n_samples=48)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def model_items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.metadata["model"]]

    def model_hash(self) -> str:
        text = "\n".join(f"{k}={_format(v)}" for k, v in self.model_items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def hash(self) -> str:
        text = "\n".join(f"{k}={_format(getattr(self, k))}" for k in self.keys())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['doc']}")
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


class ConfigError(ValueError):
    pass


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    updates = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, raw = (s.strip() for s in line.split("=", 1))
        else:
            key, _, raw = line.partition(" ")
            raw = raw.strip()
        if key not in known:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        try:
            updates[key] = _parse(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key!r}: {exc}") from None
    try:
        return dataclasses.replace(base, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, base: Config | None = None) -> Config:
    return parse_config(Path(path).read_text(), base)
