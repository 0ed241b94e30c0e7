"""Held-out evaluation: novel-view and novel-pose tables and the input-view sweep.

Protocol for a target frame (subject s, pose p, view v):

novel view   input is (s, p, v') with v' drawn uniformly from the other views
novel pose   input is (s, (p + 1) mod P, v') with v' drawn uniformly from all views

Choices are seeded, so the tables are reproducible.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .losses import MetricRecord, evaluate_image
from .model import HumanFieldModel
from .synthcap import Dataset, Frame, FramePair
from .trainer import FrameCache

TABLES = ("novel_view", "novel_pose")


def frame_id(frame: Frame) -> str:
    return f"{frame.subject}/p{frame.pose:02d}_v{frame.view:02d}"


def eval_pairs(dataset: Dataset, mode: str, split: str = "test", seed: int = 0) -> list[FramePair]:
    if mode not in TABLES:
        raise ValueError(f"unknown evaluation table {mode!r}")
    rng = np.random.default_rng([seed, TABLES.index(mode)])
    n_poses, n_views = dataset.n_poses, dataset.n_views
    pairs = []
    for subject in dataset.subject_ids(split):
        for tgt in dataset.frames_of(subject):
            if mode == "novel_view":
                others = [v for v in range(n_views) if v != tgt.view] or [tgt.view]
                key = (subject, tgt.pose, others[rng.integers(len(others))])
            else:
                key = (subject, (tgt.pose + 1) % n_poses, int(rng.integers(n_views)))
            if key not in dataset.frames:
                raise KeyError(f"input frame {key} missing from the dataset")
            pairs.append(FramePair(dataset.frames[key], tgt))
    return pairs


def render_target(model: HumanFieldModel, cache: FrameCache, source: Frame, target: Frame,
                  bank=None) -> tuple[np.ndarray, np.ndarray]:
    """Render ``target``'s camera and pose from ``source``: image (H, W, 3) and opacity (H, W)."""
    with dc.no_grad():
        if bank is None:
            bank = model.build_bank(source.image, source.mask, source.camera, cache.state(source), cache.visible(source))
        return model.render_image(bank, cache.state(target), target.camera)


def score(model: HumanFieldModel, cache: FrameCache, pair: FramePair, bank=None) -> MetricRecord:
    tgt = pair.target
    image, _ = render_target(model, cache, pair.source, tgt, bank)
    box = cache.state(tgt).aabb(model.config.box_margin)
    return evaluate_image(frame_id(tgt), image, tgt.image, tgt.camera, box)


def evaluate(model: HumanFieldModel, dataset: Dataset, split: str = "test", seed: int = 0,
             tables=TABLES) -> dict[str, list[MetricRecord]]:
    cache = FrameCache(dataset, model.config)
    return {t: [score(model, cache, p) for p in eval_pairs(dataset, t, split, seed)] for t in tables}


def mean_metrics(records: list[MetricRecord]) -> tuple[float, float]:
    if not records:
        raise ValueError("no records to average")
    return float(np.mean([r.psnr for r in records])), float(np.mean([r.ssim for r in records]))


def format_table(records: list[MetricRecord]) -> str:
    lines = [MetricRecord.HEADER] + [r.line() for r in records]
    p, s = mean_metrics(records)
    lines.append(f"mean\t{p:.6f}\t{s:.6f}\t{np.mean([r.coverage for r in records]):.6f}")
    return "\n".join(lines) + "\n"


def read_table(text: str) -> list[MetricRecord]:
    rows = [ln for ln in text.splitlines()[1:] if ln and not ln.startswith("mean\t")]
    return [MetricRecord.parse(ln) for ln in rows]


# ---------------------------------------------------------------------------
# input-view sweep
# ---------------------------------------------------------------------------
@dataclass
class SweepResult:
    yaws: np.ndarray  # (V,) input yaw in degrees
    psnr: np.ndarray  # (V, V) mean over subjects of PSNR(input i -> target j); diagonal NaN

    def per_input(self) -> np.ndarray:
        """Mean PSNR over the other V - 1 targets for each input view."""
        return np.nanmean(self.psnr, axis=1)

    def angle_buckets(self) -> dict[float, float]:
        """Mean PSNR per yaw difference, with d and 360 - d pooled."""
        v = len(self.yaws)
        diff = np.abs(self.yaws[:, None] - self.yaws[None, :]) % 360.0
        diff = np.round(np.minimum(diff, 360.0 - diff), 6)
        out = {}
        for d in np.unique(diff[~np.eye(v, dtype=bool)]):
            sel = (diff == d) & ~np.eye(v, dtype=bool)
            out[float(d)] = float(np.mean(self.psnr[sel]))
        return out

    def format(self) -> str:
        lines = ["input_yaw\tmean_psnr\tn_targets"]
        for yaw, p in zip(self.yaws, self.per_input()):
            lines.append(f"{yaw:.1f}\t{p:.6f}\t{len(self.yaws) - 1}")
        lines.append("")
        lines.append("angle_difference\tmean_psnr")
        for d, p in self.angle_buckets().items():
            lines.append(f"{d:.1f}\t{p:.6f}")
        return "\n".join(lines) + "\n"


def sweep_views(model: HumanFieldModel, dataset: Dataset, split: str = "test", pose: int = 0,
                n_views: int = 12) -> SweepResult:
    """Every view of the ring as input, every other view as target, same pose."""
    if dataset.n_views != n_views:
        raise ValueError(f"sweep needs a {n_views}-view ring, dataset has {dataset.n_views}")
    subjects = dataset.subject_ids(split)
    if not subjects:
        raise ValueError(f"dataset has no {split} subjects")
    cache = FrameCache(dataset, model.config)
    table = np.full((len(subjects), n_views, n_views), np.nan)
    for si, subject in enumerate(subjects):
        frames = {v: dataset.frames.get((subject, pose, v)) for v in range(n_views)}
        if any(f is None for f in frames.values()):
            raise ValueError(f"ring incomplete for {subject} pose {pose}")
        for i, src in frames.items():
            with dc.no_grad():
                bank = model.build_bank(src.image, src.mask, src.camera, cache.state(src), cache.visible(src))
            for j, tgt in frames.items():
                if i != j:
                    rec = score(model, cache, FramePair(src, tgt), bank)
                    table[si, i, j] = rec.psnr if math.isfinite(rec.psnr) else np.nan
    yaws = np.array([frames[v].yaw for v in range(n_views)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # the diagonal is all NaN
        mean = np.nanmean(table, axis=0)
    return SweepResult(yaws, mean)
