"""On-disk synthetic datasets: writing rendered corpora and loading manifest records.

Layout under the dataset root::

    manifest.jsonl
    stereo/<id>/left.png right.png disparity.pfm flow_lr.flo flow_rl.flo
    clips/<id>/frame_000.png ... disparity_000.pfm ... flow_000_001.flo ...

Invalid disparity is stored as NaN in PFM files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .align import DepthMap
from .corpus import CorpusConfig, random_clip, stereo_sample
from .io import (
    Manifest,
    PathLike,
    read_flo,
    read_image,
    read_pfm,
    write_flo,
    write_image,
    write_pfm,
)
from .synth import ClipSample

MANIFEST_NAME = "manifest.jsonl"


def _write_depth(path: Path, depth: DepthMap) -> None:
    write_pfm(path, np.where(depth.valid, depth.values, np.nan))


def read_depth(path: PathLike) -> DepthMap:
    values = read_pfm(path).astype(np.float64)
    return DepthMap(values, np.isfinite(values))


def _write_stereo(root: Path, sid: str, split: str, sample: dict) -> dict:
    rel = Path("stereo") / sid
    (root / rel).mkdir(parents=True, exist_ok=True)
    write_image(root / rel / "left.png", sample["left"])
    write_image(root / rel / "right.png", sample["right"])
    _write_depth(root / rel / "disparity.pfm", sample["disparity"])
    write_flo(root / rel / "flow_lr.flo", sample["flow_lr"].flow)
    write_flo(root / rel / "flow_rl.flo", sample["flow_rl"].flow)
    files = {k: str(rel / f"{k}.{ext}") for k, ext in
             [("left", "png"), ("right", "png"), ("disparity", "pfm"), ("flow_lr", "flo"), ("flow_rl", "flo")]}
    return {"id": sid, "kind": "stereo", "split": split, **files}


def _write_clip(root: Path, clip: ClipSample, split: str) -> dict:
    rel = Path("clips") / clip.clip_id
    (root / rel).mkdir(parents=True, exist_ok=True)
    frames, disparity, flows = [], [], {}
    for i, (img, disp) in enumerate(zip(clip.frames, clip.disparity)):
        write_image(root / rel / f"frame_{i:03d}.png", img)
        _write_depth(root / rel / f"disparity_{i:03d}.pfm", disp)
        frames.append(str(rel / f"frame_{i:03d}.png"))
        disparity.append(str(rel / f"disparity_{i:03d}.pfm"))
    n = len(clip)
    for i in range(n):
        for j in range(n):
            if i != j:
                name = f"flow_{i:03d}_{j:03d}.flo"
                write_flo(root / rel / name, clip.flow(i, j))
                flows[f"{i}-{j}"] = str(rel / name)
    return {
        "id": clip.clip_id,
        "kind": "clip",
        "split": split,
        "frames": frames,
        "disparity": disparity,
        "timestamps": [float(t) for t in clip.timestamps],
        "flows": flows,
    }


def write_dataset(
    root: PathLike,
    n_stereo: dict[str, int],
    n_clips: dict[str, int],
    seed: int,
    cfg: CorpusConfig | None = None,
) -> Manifest:
    """Render a corpus into ``root`` and write its manifest.

    Args:
        root: Output directory, created if needed.
        n_stereo: Number of stereo samples per split name.
        n_clips: Number of clips per split name.
        seed: Seeds every random draw; equal seeds give identical files.
        cfg: Corpus settings.
    """
    cfg = cfg or CorpusConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for split, n in n_stereo.items():
        for k in range(n):
            records.append(_write_stereo(root, f"{split}_stereo_{k:04d}", split, stereo_sample(rng, cfg)))
    for split, n in n_clips.items():
        for k in range(n):
            records.append(_write_clip(root, random_clip(rng, cfg, f"{split}_clip_{k:04d}"), split))
    manifest = Manifest(root, records)
    manifest.write(root / MANIFEST_NAME)
    return manifest


def load_stereo(manifest: Manifest, record: dict) -> tuple[np.ndarray, DepthMap]:
    """Left image and its disparity ground truth."""
    return read_image(manifest.path(record["left"])), read_depth(manifest.path(record["disparity"]))


def load_clip(manifest: Manifest, record: dict) -> ClipSample:
    flows = {}
    for key, rel in record["flows"].items():
        i, j = (int(s) for s in key.split("-"))
        flows[(i, j)] = read_flo(manifest.path(rel))
    return ClipSample(
        [read_image(manifest.path(p)) for p in record["frames"]],
        np.asarray(record["timestamps"], dtype=np.float64),
        [read_depth(manifest.path(p)) for p in record["disparity"]],
        flows=flows,
        clip_id=record["id"],
    )


def stereo_split(manifest: Manifest, split: str) -> list[tuple[np.ndarray, DepthMap]]:
    return [load_stereo(manifest, r) for r in manifest.split(split, "stereo")]


def clip_split(manifest: Manifest, split: str) -> list[ClipSample]:
    return [load_clip(manifest, r) for r in manifest.split(split, "clip")]

