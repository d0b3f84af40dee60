"""Command-line entry point: ``tcdepth <subcommand> ...``.

Exit codes: 0 on success, 1 for invalid input or I/O failures, 2 for
numerical failures (non-finite values, degenerate targets, failed checks).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .align import DegenerateTargetError, DepthMap, ssimae_value
from .corpus import CorpusConfig
from .dataset import (
    MANIFEST_NAME,
    clip_split,
    load_clip,
    read_depth,
    stereo_split,
    write_dataset,
)
from .flowgeom import FlowField, MaskConfig, correspondence_mask, disparity_from_rectified_flow, warp
from .gradcheck import KinkError, run_gradcheck
from .io import (
    FormatError,
    read_config,
    read_flo,
    read_image,
    read_manifest,
    write_config,
    write_image,
    write_mask,
    write_pfm,
)
from .model import ModelPair, load_checkpoint, save_checkpoint
from .temporal_eval import evaluate_clip, temporal_inconsistency
from .train import TrainConfig, TrainData, TrainingCollapse, train

logger = logging.getLogger("tcdepth")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


class CheckFailed(Exception):
    """A numerical check ran to completion but did not pass."""


def _csv_writer(path: Optional[str]):
    fh = open(path, "w", newline="") if path else sys.stdout
    return fh, csv.writer(fh, lineterminator="\n")


def _close(fh) -> None:
    if fh is not sys.stdout:
        fh.close()


def _fmt(x: float) -> str:
    return repr(float(x))


def _noisy(flow: FlowField, sigma: float, rng: np.random.Generator) -> FlowField:
    if sigma <= 0:
        return flow
    return FlowField(flow.uv + rng.normal(0.0, sigma, size=flow.uv.shape), flow.valid)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = CorpusConfig(
        height=args.height,
        width=args.width,
        clip_frames=args.clip_frames,
        brightness_jitter=args.brightness_jitter,
    )
    n_stereo = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    n_clips = {"train": args.n_train_clips, "test": args.n_test_clips}
    manifest = write_dataset(args.out, n_stereo, n_clips, args.seed, cfg)
    print(f"wrote {len(manifest.records)} records to {Path(args.out) / MANIFEST_NAME}")
    return EXIT_OK


def _flow_pairs(args) -> list[tuple[str, FlowField, FlowField, Optional[DepthMap]]]:
    """(id, forward, backward, disparity GT) from a manifest's stereo records or an explicit pair."""
    if args.manifest:
        manifest = read_manifest(args.manifest)
        return [
            (
                r["id"],
                read_flo(manifest.path(r["flow_lr"])),
                read_flo(manifest.path(r["flow_rl"])),
                read_depth(manifest.path(r["disparity"])),
            )
            for r in manifest.split(args.split, "stereo")
        ]
    if not (args.flow_ab and args.flow_ba):
        raise ValueError("give --manifest or both --flow-ab and --flow-ba")
    gt = read_depth(args.gt) if getattr(args, "gt", None) else None
    return [(Path(args.flow_ab).stem, read_flo(args.flow_ab), read_flo(args.flow_ba), gt)]


def cmd_mask(args) -> int:
    cfg = MaskConfig(epsilon_px=args.epsilon)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, w = _csv_writer(args.csv)
    w.writerow(["id", "n_pixels", "masked_fraction"])
    for pid, f_ab, f_ba, _ in _flow_pairs(args):
        mask = correspondence_mask(f_ab, f_ba, cfg)
        write_mask(out / f"{pid}_mask.png", mask)
        w.writerow([pid, mask.size, _fmt(1.0 - mask.mean())])
    _close(fh)
    return EXIT_OK


def cmd_disparity(args) -> int:
    cfg = MaskConfig(epsilon_px=args.epsilon)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, w = _csv_writer(args.csv)
    w.writerow(["id", "n_valid", "masked_fraction", "mae_px"])
    for pid, f_lr, f_rl, gt in _flow_pairs(args):
        res = disparity_from_rectified_flow(_noisy(f_lr, args.flow_noise, rng), _noisy(f_rl, args.flow_noise, rng), cfg)
        d = res.disparity
        write_pfm(out / f"{pid}_disparity.pfm", np.where(d.valid, d.values, np.nan))
        mae = float("nan")
        if gt is not None:
            both = d.valid & gt.valid
            if both.any():
                mae = float(np.abs(d.values[both] - gt.values[both]).mean())
        w.writerow([pid, int(d.valid.sum()), _fmt(res.masked_fraction), _fmt(mae)])
    _close(fh)
    return EXIT_OK


def cmd_warp(args) -> int:
    flow = read_flo(args.flow)
    target_path = Path(args.target)
    if target_path.suffix.lower() == ".pfm":
        warped, valid = warp(flow, read_depth(target_path))
        write_pfm(args.out, np.where(valid, warped, np.nan))
    else:
        warped, valid = warp(flow, read_image(target_path))
        write_image(args.out, np.where(valid[..., None], warped, 0.0))
    if args.mask_out:
        write_mask(args.mask_out, valid)
    print(f"valid_fraction={float(valid.mean())!r}")
    return EXIT_OK


def _predictions(args, ids: Sequence[str], images: Sequence[np.ndarray]) -> list[np.ndarray]:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint, requires_grad=False)
        return list(net.predict(np.stack(images)))
    if args.pred_dir:
        return [read_depth(Path(args.pred_dir) / f"{i}.pfm").values for i in ids]
    raise ValueError("give --checkpoint or --pred-dir")


def cmd_eval_ssimae(args) -> int:
    manifest = read_manifest(args.manifest)
    records = manifest.split(args.split, "stereo")
    if not records:
        raise ValueError(f"no stereo records in split {args.split!r}")
    samples = stereo_split(manifest, args.split)
    preds = _predictions(args, [r["id"] for r in records], [img for img, _ in samples])
    fh, w = _csv_writer(args.csv)
    w.writerow(["id", "n_pixels", "ssimae"])
    scores = []
    for r, pred, (_, gt) in zip(records, preds, samples):
        s = ssimae_value(pred, gt)
        scores.append(s)
        w.writerow([r["id"], int(gt.valid.sum()), _fmt(s)])
    w.writerow(["mean", sum(int(gt.valid.sum()) for _, gt in samples), _fmt(np.mean(scores))])
    _close(fh)
    return EXIT_OK


def cmd_eval_temporal(args) -> int:
    manifest = read_manifest(args.manifest)
    records = manifest.split(args.split, "clip")
    if not records:
        raise ValueError(f"no clip records in split {args.split!r}")
    cfg = MaskConfig(epsilon_px=args.epsilon)
    net = load_checkpoint(args.checkpoint, requires_grad=False) if args.checkpoint else None
    fh, w = _csv_writer(args.csv)
    w.writerow(["clip_id", "n_frames", "n_tracked", "inconsistency"])
    all_trajs = []
    for r in records:
        clip = load_clip(manifest, r)
        if net is not None:
            mono = list(net.predict(np.stack(clip.frames)))
        elif args.pred_dir:
            mono = [read_depth(Path(args.pred_dir) / r["id"] / f"{k:03d}.pfm").values for k in range(len(clip))]
        else:
            raise ValueError("give --checkpoint or --pred-dir")
        reports, trajs = evaluate_clip(clip, mono, cfg)
        all_trajs += trajs
        for rep in reports:
            w.writerow([rep.clip_id, rep.n_frames, rep.n_tracked, _fmt(rep.inconsistency)])
    if not all_trajs:
        _close(fh)
        raise DegenerateTargetError("no clip section could be tracked")
    n_tracked = sum(t.mono.shape[0] for t in all_trajs)
    n_frames = sum(t.mono.shape[1] for t in all_trajs)
    w.writerow(["all", n_frames, n_tracked, _fmt(temporal_inconsistency(all_trajs))])
    _close(fh)
    if args.figures:
        from .report import plot_trajectories

        Path(args.figures).mkdir(parents=True, exist_ok=True)
        plot_trajectories(all_trajs, Path(args.figures) / "trajectories.png", seed=args.seed)
    return EXIT_OK


_TRAIN_FLAGS = ("batch_size", "lr", "clip_norm", "batches_per_epoch", "patience_epochs", "max_epochs",
                "enabled_losses", "ema_decay", "epsilon_px", "seed")


def _train_config(args) -> TrainConfig:
    values: dict = dict(read_config(args.config)) if args.config else {}
    for name in _TRAIN_FLAGS:
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    return TrainConfig.from_mapping(values)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = read_manifest(args.manifest)
    clips = clip_split(manifest, "train")
    data = TrainData(
        supervised=stereo_split(manifest, "train"),
        clips=clips,
        unlabeled=[f for c in clips for f in c.frames],
        validation=stereo_split(manifest, "val"),
    )
    pair = ModelPair.init(cfg.seed, cfg.ema_decay)
    best, log = train(pair, data, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best.fast, out / "checkpoint.bin")
    log.write_csv(out / "steps.csv", out / "validation.csv")
    write_config(out / "config.txt", cfg.to_mapping())
    if args.figures:
        from .report import plot_training

        plot_training(log, out / "training.png")
    print(f"best epoch {log.best_epoch}, validation SSIMAE {min(log.val_ssimae)!r}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(range(args.seed, args.seed + args.n_seeds), (args.size, args.size))
    fh, w = _csv_writer(args.csv)
    w.writerow(["seed", "loss", "n_params", "draw", "max_rel_error", "passed"])
    worst = 0.0
    for seed, r in results:
        worst = max(worst, r.max_rel_error)
        w.writerow([seed, r.name, r.n_params, r.draw, _fmt(r.max_rel_error), int(r.passed(args.tol))])
    _close(fh)
    print(f"max relative error {worst:.3e} (tolerance {args.tol:g})", file=sys.stderr)
    if worst >= args.tol:
        raise CheckFailed(f"gradient check failed: {worst:.3e} >= {args.tol:g}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _add_flow_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="process every stereo record of a split")
    p.add_argument("--split", default="test")
    p.add_argument("--flow-ab", help="forward flow (.flo) when not using a manifest")
    p.add_argument("--flow-ba", help="backward flow (.flo) when not using a manifest")
    p.add_argument("--epsilon", type=float, default=2.0, help="loop-check threshold in pixels")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--csv", help="summary CSV path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset with manifest")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=24)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--clip-frames", type=int, default=12)
    p.add_argument("--brightness-jitter", type=float, default=0.1)
    p.add_argument("--n-train", type=int, default=20)
    p.add_argument("--n-val", type=int, default=10)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--n-train-clips", type=int, default=20)
    p.add_argument("--n-test-clips", type=int, default=5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="loop-consistency masks from flow pairs")
    _add_flow_inputs(p)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("disparity", help="disparity pseudo ground truth from rectified flow pairs")
    _add_flow_inputs(p)
    p.add_argument("--flow-noise", type=float, default=0.0, help="std of Gaussian noise added to flows (px)")
    p.add_argument("--gt", help="ground-truth disparity (.pfm) for an explicit flow pair")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_disparity)

    p = sub.add_parser("warp", help="resample an image or PFM map along a flow")
    p.add_argument("flow")
    p.add_argument("target")
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_warp)

    for name, func, help_ in [
        ("eval-ssimae", cmd_eval_ssimae, "per-image and mean SSIMAE on stereo records"),
        ("eval-temporal", cmd_eval_temporal, "temporal inconsistency on clip records"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--checkpoint")
        p.add_argument("--pred-dir", help="directory of PFM predictions named by record id")
        p.add_argument("--csv", help="output CSV path (default: stdout)")
        p.add_argument("--seed", type=int, default=0)
        if name == "eval-temporal":
            p.add_argument("--epsilon", type=float, default=2.0)
            p.add_argument("--figures", help="directory for trajectory figures")
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train the toy network from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--figures", action="store_true", help="also render training curves")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--patience-epochs", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--losses", dest="enabled_losses", help="comma-separated subset of sup,temp,aug")
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--epsilon-px", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference check of all three losses")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--csv", help="output CSV path (default: stdout)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DegenerateTargetError, TrainingCollapse, KinkError, CheckFailed, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (FormatError, ValueError, KeyError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
