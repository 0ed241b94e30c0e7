"""End-to-end optimization: pair sampling, ray batches, Adam, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .body import BodyState, pose_body
from .config import Config, parse_config
from .diffcore import Tensor
from .featbank import input_visibility
from .geometry import cast_rays
from .losses import LossReport, LossWeights, box_rect, mask_loss, perceptual, photometric, ssim, total_loss
from .model import HumanFieldModel
from .synthcap import Dataset, Frame, FramePair

CHECKPOINT_MAGIC = b"HFCK"
LOG_COLUMNS = ("step", "epoch", "L_color", "L_mask", "L_ssim", "L_perc", "total", "lr")


class NumericError(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, step: int, value: float):
        super().__init__(f"non-finite loss term {term}={value} at step {step}")
        self.term = term
        self.step = step


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update using each parameter's ``.grad`` (missing grads count as zero)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient of {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def learning_rate(epoch: int, lr: float = 2e-3, decay: float = 0.5) -> float:
    return lr * decay**epoch


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
def sample_pair(dataset: Dataset, rng: np.random.Generator, split: str = "train") -> FramePair:
    """Uniform subject, then an independent uniform input and target frame of that subject."""
    subjects = dataset.subject_ids(split)
    if not subjects:
        raise ValueError(f"dataset has no {split} subjects")
    frames = dataset.frames_of(subjects[rng.integers(len(subjects))])
    i, j = rng.integers(len(frames), size=2)
    return FramePair(frames[i], frames[j])


class FrameCache:
    """Posed bodies and input-view visibility per frame, computed once."""

    def __init__(self, dataset: Dataset, config: Config):
        self.dataset = dataset
        self.config = config
        self._states: dict = {}
        self._visible: dict = {}

    def state(self, frame: Frame) -> BodyState:
        if frame.key not in self._states:
            self._states[frame.key] = pose_body(self.dataset.template, frame.theta, frame.beta)
        return self._states[frame.key]

    def visible(self, frame: Frame) -> np.ndarray:
        if frame.key not in self._visible:
            self._visible[frame.key] = input_visibility(self.state(frame), frame.camera, self.config.visibility_eps)
        return self._visible[frame.key]


@dataclass
class RayBatch:
    pixels: np.ndarray  # (R, 2) integer (x, y); the first patch_size**2 rows form the patch
    patch_size: int


def select_rays(frame: Frame, state: BodyState, config: Config, rng: np.random.Generator) -> RayBatch:
    """A square patch plus scattered rays, all within the projected body box.

    An ``interior_fraction`` share of the scattered rays is drawn from the mask interior.
    """
    h, w = frame.mask.shape
    ps = config.patch_size
    x0, y0, x1, y1 = box_rect(frame.camera, state.aabb(config.box_margin))

    def corner(a0, a1, n):
        lo = min(max(a0, 0), n - ps)
        return int(rng.integers(lo, max(min(a1 - ps, n - ps), lo) + 1))

    px, py = corner(x0, x1, w), corner(y0, y1, h)
    gy, gx = np.mgrid[py : py + ps, px : px + ps]
    patch = np.stack([gx.ravel(), gy.ravel()], axis=1)

    n_scatter = config.rays_per_step - ps * ps
    n_inside = int(round(config.interior_fraction * n_scatter))
    my, mx = np.nonzero(frame.mask[y0:y1, x0:x1])
    if len(mx) == 0:
        n_inside = 0
    pick = rng.integers(len(mx), size=n_inside) if n_inside else np.zeros(0, dtype=np.int64)
    inside = np.stack([mx[pick] + x0, my[pick] + y0], axis=1)
    n_box = n_scatter - n_inside
    box = np.stack([rng.integers(x0, max(x1, x0 + 1), size=n_box), rng.integers(y0, max(y1, y0 + 1), size=n_box)], axis=1)
    pixels = np.concatenate([patch, inside, box], axis=0).astype(np.int64)
    return RayBatch(np.clip(pixels, 0, [w - 1, h - 1]), ps)


def step_loss(model: HumanFieldModel, pair: FramePair, cache: FrameCache, rng: np.random.Generator,
              jitter: bool = True) -> tuple[LossReport, RayBatch]:
    """Build the bank from the input view, render a ray batch of the target, assemble the loss."""
    cfg = model.config
    src, tgt = pair.source, pair.target
    s_state, t_state = cache.state(src), cache.state(tgt)
    bank = model.build_bank(src.image, src.mask, src.camera, s_state, cache.visible(src))
    batch = select_rays(tgt, t_state, cfg, rng)
    o, d = cast_rays(tgt.camera, batch.pixels + 0.5)
    out = model.render_rays(bank, t_state, o, d, rng if jitter else None)
    gt = tgt.image[batch.pixels[:, 1], batch.pixels[:, 0]]
    gm = tgt.mask[batch.pixels[:, 1], batch.pixels[:, 0]].astype(np.float64)
    n = batch.patch_size**2
    shape = (batch.patch_size, batch.patch_size, 3)
    pred_patch = out.color[:n].reshape(*shape)
    gt_patch = gt[:n].reshape(shape)
    report = total_loss(
        photometric(out.color, gt),
        mask_loss(out.opacity, gm),
        1.0 - ssim(pred_patch, gt_patch),
        perceptual(pred_patch, gt_patch, cfg.perc_seed),
        LossWeights(cfg.lambda_mask, cfg.lambda_ssim, cfg.lambda_perc),
    )
    return report, batch


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
@dataclass
class Checkpoint:
    config: Config
    epoch: int
    step: int
    params: dict[str, np.ndarray]
    adam: AdamState


def save_checkpoint(path: str | Path, model: HumanFieldModel, adam: AdamState, epoch: int, step: int) -> None:
    header = json.dumps({
        "config_hash": model.config.hash(),
        "model_hash": model.config.model_hash(),
        "epoch": epoch,
        "step": step,
        "adam_step": adam.step,
        "config": model.config.to_text(),
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        params = model.state_arrays()
        dc.write_tensors(fh, ((f"param/{k}", v) for k, v in params.items()))
        dc.write_tensors(fh, ((f"adam_m/{k}", v) for k, v in adam.m.items()))
        dc.write_tensors(fh, ((f"adam_v/{k}", v) for k, v in adam.v.items()))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode())
        blocks = dc.read_tensors(fh)
    config = parse_config(header["config"])
    if config.model_hash() != header["model_hash"]:
        raise ValueError("checkpoint config does not match its recorded hash")
    params, m, v = {}, {}, {}
    for name, arr in blocks.items():
        kind, _, key = name.partition("/")
        {"param": params, "adam_m": m, "adam_v": v}[kind][key] = arr
    adam = AdamState(m, v, header["adam_step"])
    return Checkpoint(config, header["epoch"], header["step"], params, adam)


def model_from_checkpoint(ckpt: Checkpoint, config: Config | None = None) -> HumanFieldModel:
    """Rebuild the model; ``config`` may override non-architecture keys but must match the architecture."""
    cfg = config or ckpt.config
    if cfg.model_hash() != ckpt.config.model_hash():
        raise ValueError("config architecture differs from the checkpoint's")
    model = HumanFieldModel(cfg)
    model.load_arrays(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------
def steps_per_epoch(dataset: Dataset, split: str = "train") -> int:
    """One epoch enumerates (subjects x frames per subject) pairs."""
    return sum(len(dataset.frames_of(s)) for s in dataset.subject_ids(split))


@dataclass
class StepLog:
    step: int
    epoch: int
    values: dict[str, float]
    lr: float

    def line(self) -> str:
        v = self.values
        return "\t".join([str(self.step), str(self.epoch)] + [f"{v[k]:.9g}" for k in LossReport.TERMS] + [f"{self.lr:.9g}"])


def train(model: HumanFieldModel, dataset: Dataset, adam: AdamState | None = None, start_step: int = 0,
          max_steps: int | None = None, checkpoint: str | Path | None = None,
          on_step: Callable[[StepLog], None] | None = None) -> AdamState:
    """Train from ``start_step`` to the end of the configured epochs (or ``max_steps`` total).

    Step ``s`` draws all randomness from ``default_rng([seed, s])``, so a run
    resumed from a checkpoint continues exactly like an uninterrupted one.
    """
    cfg = model.config
    adam = adam or AdamState()
    per_epoch = steps_per_epoch(dataset)
    if per_epoch == 0:
        raise ValueError("dataset has no training frames")
    end = cfg.epochs * per_epoch if max_steps is None else min(max_steps, cfg.epochs * per_epoch)
    cache = FrameCache(dataset, cfg)
    params = model.parameters()
    for step in range(start_step, end):
        epoch = step // per_epoch
        lr = learning_rate(epoch, cfg.lr, cfg.lr_decay)
        rng = np.random.default_rng([cfg.seed, step])
        pair = sample_pair(dataset, rng)
        model.zero_grad()
        report, _ = step_loss(model, pair, cache, rng, cfg.jitter)
        bad = report.first_nonfinite()
        if bad is not None:
            raise NumericError(bad, step, float(getattr(report, bad).data))
        dc.backward(report.total)
        adam_step(params, adam, lr)
        if on_step is not None:
            on_step(StepLog(step, epoch, report.values(), lr))
        done = step + 1
        if checkpoint is not None and (done % per_epoch == 0 or done == end):
            save_checkpoint(checkpoint, model, adam, done // per_epoch, done)
    if checkpoint is not None and start_step >= end:
        # nothing to run: still write the model as it stands (the initialization for a fresh run)
        save_checkpoint(checkpoint, model, adam, end // per_epoch, end)
    return adam
