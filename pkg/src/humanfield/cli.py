"""Command-line entry point: ``humanfield {gen,train,render,eval,sweep-views}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

The training log is tab separated. Its first line is ``# config_hash=<hash>``,
then a header row, then one row per step with columns
step, epoch, L_color, L_mask, L_ssim, L_perc, total, lr.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .config import Config, ConfigError, load_config
from .synthcap import DatasetError, generate_dataset, load_dataset, ring_camera, to_uint8

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="seed for the command's stochastic component")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--checkpoint", type=Path, help="checkpoint path")
    p.add_argument("--jitter", choices=("on", "off"), help="jitter ray samples within their bins")
    p.add_argument("--data", type=Path, help="dataset directory (default: the config's dataset key)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="humanfield", description="Single-image animatable human radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--views", type=int, help="cameras on the yaw ring (12 for sweep-views)")

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")

    p = sub.add_parser("render", help="render a target frame's camera and pose from an input frame")
    _common(p)
    p.add_argument("--input", required=True, help="input frame id, e.g. test000/p00_v00")
    p.add_argument("--target", help="target frame id supplying camera and pose (default: the input)")
    p.add_argument("--yaw", type=float, help="override the target camera with a ring camera at this yaw")

    p = sub.add_parser("eval", help="novel-view and novel-pose metric tables on the test split")
    _common(p)
    p.add_argument("--split", default="test")

    p = sub.add_parser("sweep-views", help="input-view sweep over a 12-view ring")
    _common(p)
    p.add_argument("--split", default="test")
    p.add_argument("--pose", type=int, default=0)
    return parser


def resolve_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    changes = {}
    if args.jitter is not None:
        changes["jitter"] = args.jitter == "on"
    if args.checkpoint is not None:
        changes["checkpoint"] = str(args.checkpoint)
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.data is not None:
        changes["dataset"] = str(args.data)
    return cfg.replace(**changes)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def parse_frame_id(text: str) -> tuple[str, int, int]:
    try:
        subject, stem = text.split("/")
        p, v = stem.split("_")
        if p[0] != "p" or v[0] != "v":
            raise ValueError
        return subject, int(p[1:]), int(v[1:])
    except ValueError:
        raise UsageError(f"bad frame id {text!r}; expected SUBJECT/pPP_vVV") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen(args, cfg: Config) -> int:
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    if args.views is not None:
        cfg = cfg.replace(n_views=args.views)
    root = Path(args.out or args.data or cfg.dataset)
    try:
        ds = generate_dataset(root, cfg.n_subjects, cfg.n_poses, cfg.n_views, cfg.data_seed,
                              cfg.n_test_subjects, cfg.image_size)
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {root}: {exc}") from exc
    print(f"wrote {len(ds.frames)} frames for {len(ds.subjects)} subjects to {root}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .model import HumanFieldModel
    from .trainer import LOG_COLUMNS, load_checkpoint, model_from_checkpoint, train

    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    ds = load_dataset(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.tsv"
    adam, start = None, 0
    if args.resume:
        ckpt = load_checkpoint(cfg.checkpoint)
        if ckpt.config.hash() != cfg.hash():
            raise UsageError("config differs from the checkpoint being resumed")
        model = model_from_checkpoint(ckpt, cfg)
        adam, start = ckpt.adam, ckpt.step
        fh = open(log_path, "a")
    else:
        model = HumanFieldModel(cfg)
        fh = open(log_path, "w")
        fh.write(f"# config_hash={cfg.hash()}\n" + "\t".join(LOG_COLUMNS) + "\n")
    t0 = time.time()

    def on_step(s):
        fh.write(s.line() + "\n")
        fh.flush()
        if s.step % 32 == 0:
            _log(f"step {s.step}\tepoch {s.epoch}\ttotal {s.values['total']:.5f}\t{time.time() - t0:.0f}s")

    try:
        train(model, ds, adam, start, args.max_steps, cfg.checkpoint, on_step)
    finally:
        fh.close()
    print(f"checkpoint {cfg.checkpoint}\tlog {log_path}")
    return EXIT_OK


def _load_model(cfg: Config):
    from .trainer import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(cfg.checkpoint)
    keep = {k: getattr(cfg, k) for k in ("n_samples", "dataset", "out", "checkpoint", "seed")}
    return model_from_checkpoint(ckpt, ckpt.config.replace(**keep))


def cmd_render(args, cfg: Config) -> int:
    from PIL import Image

    from .evaluation import render_target
    from .losses import psnr
    from .synthcap import Frame
    from .trainer import FrameCache

    model = _load_model(cfg)
    ds = load_dataset(cfg.dataset)
    src_key = parse_frame_id(args.input)
    tgt_key = parse_frame_id(args.target) if args.target else src_key
    for key in (src_key, tgt_key):
        if key not in ds.frames:
            raise DatasetError(f"frame {key[0]}/p{key[1]:02d}_v{key[2]:02d} not in the dataset")
    src, tgt = ds.frames[src_key], ds.frames[tgt_key]
    if src.image.shape[0] != model.config.image_size:
        raise UsageError(f"dataset images are {src.image.shape[0]} px, checkpoint expects {model.config.image_size}")
    if args.yaw is not None:
        tgt = Frame(tgt.subject, tgt.pose, -1, tgt.image, tgt.mask, ring_camera(args.yaw, tgt.image.shape[0]),
                    tgt.theta, tgt.beta, args.yaw)
    image, acc = render_target(model, FrameCache(ds, model.config), src, tgt)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{src.subject}_p{src.pose:02d}v{src.view:02d}_to_p{tgt.pose:02d}" + (
        f"v{tgt.view:02d}" if args.yaw is None else f"yaw{args.yaw:g}")
    Image.fromarray(to_uint8(image)).save(out / f"{stem}.png")
    Image.fromarray(to_uint8(acc)).save(out / f"{stem}_mask.png")
    msg = f"{out / stem}.png\tcoverage {acc.mean():.4f}"
    if args.yaw is None:
        msg += f"\tpsnr_vs_target {psnr(image, tgt.image):.4f}"
    print(msg)
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    from .evaluation import evaluate, format_table, mean_metrics

    model = _load_model(cfg)
    ds = load_dataset(cfg.dataset)
    if not ds.subject_ids(args.split):
        raise DatasetError(f"dataset has no {args.split} split")
    tables = evaluate(model, ds, args.split, cfg.seed if args.seed is None else args.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    print("table\tpsnr\tssim\trows")
    for name, records in tables.items():
        (out / f"{name}.tsv").write_text(format_table(records))
        p, s = mean_metrics(records)
        print(f"{name}\t{p:.4f}\t{s:.4f}\t{len(records)}")
    return EXIT_OK


def cmd_sweep(args, cfg: Config) -> int:
    from .evaluation import sweep_views

    model = _load_model(cfg)
    ds = load_dataset(cfg.dataset)
    try:
        result = sweep_views(model, ds, args.split, args.pose)
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    text = result.format()
    (out / "sweep_views.tsv").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "sweep-views": cmd_sweep}


def main(argv=None) -> int:
    from .trainer import NumericError

    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, KeyError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
