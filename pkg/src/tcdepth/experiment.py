"""Loss-ablation experiment: does adding the temporal loss lower temporal inconsistency?

Per seed, the toy network is first trained with the supervised loss alone
(standing in for a pretrained backbone). Two fine-tuning runs then start
from that same network with identical budgets: one with the supervised
loss only and one with the supervised plus temporal losses. Both are scored
on held-out clips (temporal inconsistency) and held-out images (SSIMAE).

Run as ``python -m tcdepth.experiment --out DIR`` to write ``comparison.csv``
and ``comparison.png``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .align import ssimae_value
from .corpus import CorpusConfig, clip_set, supervised_set
from .model import ModelPair
from .synth import ClipSample
from .temporal_eval import evaluate_clip, temporal_inconsistency
from .train import TrainConfig, TrainData, train

logger = logging.getLogger(__name__)

BASELINE = "sup"
TREATMENT = "sup,temp"
FINETUNE_SEED_OFFSET = 100


@dataclass
class ExperimentConfig:
    """Corpus sizes and the two training stages.

    Corpus splits use fixed seeds so every run sees the same data; the run
    seed only drives initialization and batch sampling.
    """

    seeds: tuple[int, ...] = (0, 1, 2)
    n_train_images: int = 20
    n_val_images: int = 10
    n_test_images: int = 20
    n_train_clips: int = 20
    n_eval_clips: int = 5
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(brightness_jitter=0.0))
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            batch_size=8, lr=3e-2, batches_per_epoch=20, patience_epochs=5, max_epochs=30,
            enabled_losses=("sup",), ema_decay=0.9,
        )
    )
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            batch_size=8, lr=1e-2, batches_per_epoch=20, patience_epochs=5, max_epochs=15,
            enabled_losses=("sup",), ema_decay=0.9,
        )
    )


@dataclass
class Corpus:
    data: TrainData
    test: list
    eval_clips: list[ClipSample]

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "Corpus":
        c = cfg.corpus
        data = TrainData(
            supervised=supervised_set(cfg.n_train_images, 1, c),
            clips=clip_set(cfg.n_train_clips, 4, c, "train"),
            validation=supervised_set(cfg.n_val_images, 2, c),
        )
        return cls(data, supervised_set(cfg.n_test_images, 3, c), clip_set(cfg.n_eval_clips, 5, c, "eval"))


def score(pair: ModelPair, corpus: Corpus) -> tuple[float, float]:
    """(temporal inconsistency over eval clips, mean SSIMAE over test images)."""
    trajs = []
    for clip in corpus.eval_clips:
        _, t = evaluate_clip(clip, list(pair.fast.predict(np.stack(clip.frames))))
        trajs += t
    preds = pair.fast.predict(np.stack([img for img, _ in corpus.test]))
    ssimae = float(np.mean([ssimae_value(p, gt) for p, (_, gt) in zip(preds, corpus.test)]))
    return temporal_inconsistency(trajs), ssimae


def run_seed(seed: int, cfg: ExperimentConfig, corpus: Corpus) -> list[dict]:
    """Pretrain once, then fine-tune the baseline and treatment arms from the same weights."""
    pre_cfg = replace(cfg.pretrain, seed=seed)
    pretrained, pre_log = train(ModelPair.init(seed, pre_cfg.ema_decay), corpus.data, pre_cfg)
    logger.info("seed %d: pretrained, best epoch %d", seed, pre_log.best_epoch)
    rows = []
    for losses in (BASELINE, TREATMENT):
        ft_cfg = replace(cfg.finetune, enabled_losses=losses, seed=seed + FINETUNE_SEED_OFFSET)
        start = time.perf_counter()
        pair, log = train(ModelPair.from_fast(pretrained.fast.copy(), ft_cfg.ema_decay), corpus.data, ft_cfg)
        inconsistency, ssimae = score(pair, corpus)
        rows.append(
            dict(
                seed=seed,
                losses=losses,
                inconsistency=inconsistency,
                ssimae=ssimae,
                best_epoch=log.best_epoch,
                epochs=len(log.val_ssimae),
                seconds=time.perf_counter() - start,
            )
        )
        logger.info("seed %d %s: inconsistency %.4f, SSIMAE %.4f", seed, losses, inconsistency, ssimae)
    return rows


@dataclass
class Verdict:
    """The directional check: treatment wins on inconsistency without costing much SSIMAE."""

    wins: int
    n_seeds: int
    ssimae_ratio: float
    min_wins: int
    max_ssimae_ratio: float

    @property
    def passed(self) -> bool:
        return self.wins >= self.min_wins and self.ssimae_ratio <= self.max_ssimae_ratio


def verdict(rows: Sequence[dict], min_wins: int = 2, max_ssimae_ratio: float = 1.10) -> Verdict:
    by = {(r["seed"], r["losses"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    wins = sum(by[(s, TREATMENT)]["inconsistency"] < by[(s, BASELINE)]["inconsistency"] for s in seeds)
    base = np.mean([by[(s, BASELINE)]["ssimae"] for s in seeds])
    treat = np.mean([by[(s, TREATMENT)]["ssimae"] for s in seeds])
    return Verdict(wins, len(seeds), float(treat / base), min_wins, max_ssimae_ratio)


def run(cfg: Optional[ExperimentConfig] = None) -> list[dict]:
    cfg = cfg or ExperimentConfig()
    corpus = Corpus.build(cfg)
    return [row for seed in cfg.seeds for row in run_seed(seed, cfg, corpus)]


COLUMNS = ("seed", "losses", "inconsistency", "ssimae", "best_epoch", "epochs", "seconds")


def write_rows(rows: Sequence[dict], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in COLUMNS])


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m tcdepth.experiment", description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="output directory for CSV and figure")
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = ExperimentConfig(seeds=tuple(int(s) for s in args.seeds.split(",")))
    rows = run(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "comparison.csv")
    from .report import plot_comparison

    plot_comparison(rows, out / "comparison.png")
    v = verdict(rows)
    print(f"{TREATMENT} lower inconsistency in {v.wins}/{v.n_seeds} seeds; mean SSIMAE ratio {v.ssimae_ratio:.4f}")
    return 0 if v.passed else 1


if __name__ == "__main__":
    sys.exit(main())
