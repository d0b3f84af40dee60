"""PNG / PFM / Middlebury .flo readers and writers, manifests and config files."""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image

from .flowgeom import FlowField

PathLike = Union[str, Path]

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e10
# Middlebury convention: components above this magnitude mean "unknown"
FLO_UNKNOWN_THRESHOLD = 1e9
MANIFEST_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom to top."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got shape {values.shape}")
    h, w = values.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.flipud(values).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: missing or malformed PFM header")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if kind != b"Pf":
        raise FormatError(f"{path}: only single-channel PFM ('Pf') is supported, found {kind.decode()!r}")
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero")
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end() :]
    expected = 4 * w * h
    if len(body) < expected:
        raise FormatError(f"{path}: truncated PFM data ({len(body)} of {expected} bytes)")
    data = np.frombuffer(body[:expected], dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_flo(path: PathLike, flow: FlowField) -> None:
    """Middlebury .flo: float32 magic, int32 width and height, interleaved float32 (dx, dy)."""
    h, w = flow.shape
    uv = np.where(flow.valid[..., None], flow.uv, FLO_UNKNOWN).astype("<f4")
    header = struct.pack("<fii", FLO_MAGIC, w, h)
    Path(path).write_bytes(header + uv.tobytes())


def read_flo(path: PathLike) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a .flo header")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r} (expected {FLO_MAGIC})")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo dimensions {w}x{h}")
    expected = 8 * w * h
    if len(raw) - 12 < expected:
        raise FormatError(f"{path}: truncated .flo data ({len(raw) - 12} of {expected} bytes)")
    uv = np.frombuffer(raw[12 : 12 + expected], dtype="<f4").reshape(h, w, 2)
    valid = (np.abs(uv) < FLO_UNKNOWN_THRESHOLD).all(axis=2)
    return FlowField(np.where(valid[..., None], uv, 0.0).astype(np.float64), valid)


def write_image(path: PathLike, image: np.ndarray) -> None:
    """8-bit RGB PNG from floats in [0, 1]."""
    q = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def quantize_image(image: np.ndarray) -> np.ndarray:
    """The values an image takes after an 8-bit PNG round trip."""
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255) / 255.0


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def read_config(path: PathLike) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_config(path: PathLike, values: dict[str, str]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))


@dataclass
class Manifest:
    """Line-oriented dataset index: a header line, then one JSON record per line.

    Paths inside records are relative to ``root``.
    """

    root: Path
    records: list[dict] = field(default_factory=list)
    format_version: int = MANIFEST_VERSION

    def split(self, name: str, kind: str | None = None) -> list[dict]:
        return [r for r in self.records if r["split"] == name and (kind is None or r["kind"] == kind)]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"format_version": self.format_version, "kind": "header"}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def _referenced_files(record: dict) -> Iterable[str]:
    for key, value in record.items():
        if key in ("split", "kind", "id", "timestamps"):
            continue
        if isinstance(value, str):
            yield value
        elif isinstance(value, list):
            yield from (v for v in value if isinstance(v, str))
        elif isinstance(value, dict):
            yield from (v for v in value.values() if isinstance(v, str))


def read_manifest(path: PathLike) -> Manifest:
    """Load and validate a manifest: files must exist and splits must be disjoint."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON line ({exc})") from exc
    if header.get("kind") != "header" or header.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest header {header}")
    root = path.parent
    owner: dict[str, str] = {}
    ids = set()
    for r in records:
        for key in ("id", "kind", "split"):
            if key not in r:
                raise FormatError(f"{path}: record missing {key!r}: {r}")
        if r["split"] not in ("train", "val", "test"):
            raise FormatError(f"{path}: unknown split {r['split']!r}")
        if r["id"] in ids:
            raise FormatError(f"{path}: duplicate record id {r['id']!r}")
        ids.add(r["id"])
        for rel in _referenced_files(r):
            if not (root / rel).exists():
                raise FormatError(f"{path}: record {r['id']!r} references missing file {rel}")
            prev = owner.setdefault(rel, r["split"])
            if prev != r["split"]:
                raise FormatError(f"{path}: {rel} appears in both {prev!r} and {r['split']!r} splits")
    return Manifest(root, records, header["format_version"])
