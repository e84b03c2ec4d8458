"""Caption-image dataset persistence: manifest plus a directory of images.

The manifest is a UTF-8, tab-separated, line-delimited file sorted by
caption id with one row per pair. Images live under images/{caption_id}.ppm
as binary PPM (P6): lossless and byte-deterministic, so file checksums are
stable across machines and runs. Full rewrites are atomic; incremental
appends during a generation run keep a valid, sorted prefix at all times.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MANIFEST_NAME = "manifest.tsv"
IMAGES_DIR = "images"
STATUS_OK = "ok"
STATUS_FAILED = "failed"


@dataclass(frozen=True)
class ManifestEntry:
    caption_id: int
    concept_id: int
    caption: str
    image_path: str  # relative to the dataset root; "-" for failed rows
    checksum: str  # sha256 of the image file bytes; "-" for failed rows
    backend: str  # "remote" | "mock"
    seed: int
    status: str  # "ok" | "failed"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_ppm(pixels: np.ndarray) -> bytes:
    """Binary PPM (P6) encoding of an HxWx3 uint8 array."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected HxWx3 uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + pixels.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    # Header is three whitespace-separated tokens after the magic, then
    # exactly one whitespace byte before the raster.
    idx = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while idx < len(data) and data[idx : idx + 1].isspace():
            idx += 1
        start = idx
        while idx < len(data) and not data[idx : idx + 1].isspace():
            idx += 1
        tokens.append(int(data[start:idx]))
    idx += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise ValueError(f"unsupported PPM maxval {maxval}")
    raster = data[idx : idx + w * h * 3]
    if len(raster) != w * h * 3:
        raise ValueError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def _entry_to_line(e: ManifestEntry) -> str:
    return "\t".join(
        [
            str(e.caption_id),
            str(e.concept_id),
            e.caption,
            e.image_path,
            e.checksum,
            e.backend,
            str(e.seed),
            e.status,
        ]
    )


def _line_to_entry(line: str) -> ManifestEntry:
    caption_id, concept_id, caption, image_path, checksum, backend, seed, status = (
        line.split("\t")
    )
    return ManifestEntry(
        caption_id=int(caption_id),
        concept_id=int(concept_id),
        caption=caption,
        image_path=image_path,
        checksum=checksum,
        backend=backend,
        seed=int(seed),
        status=status,
    )


def _validate_entries(entries: Sequence[ManifestEntry]) -> None:
    seen_ids: set[int] = set()
    seen_paths: set[str] = set()
    for e in entries:
        if e.caption_id in seen_ids:
            raise ValueError(f"duplicate caption_id {e.caption_id}")
        seen_ids.add(e.caption_id)
        if e.status not in (STATUS_OK, STATUS_FAILED):
            raise ValueError(f"invalid status {e.status!r}")
        if "\t" in e.caption or "\n" in e.caption:
            raise ValueError(f"caption for id {e.caption_id} contains tab/newline")
        if e.status == STATUS_OK:
            if e.image_path in seen_paths:
                raise ValueError(f"duplicate image path {e.image_path}")
            seen_paths.add(e.image_path)


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> None:
    """Write all rows sorted by caption_id, atomically replacing the file."""
    ordered = sorted(entries, key=lambda e: e.caption_id)
    _validate_entries(ordered)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for e in ordered:
            f.write(_entry_to_line(e) + "\n")
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_manifest(path: Path, tolerate_partial_tail: bool = False) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for raw in f:
            line = raw.rstrip("\n")
            if not line:
                continue
            try:
                entries.append(_line_to_entry(line))
            except ValueError:
                if tolerate_partial_tail and raw == line:  # no trailing newline: torn write
                    break
                raise
    return entries


@dataclass(frozen=True)
class VerifyReport:
    ok_count: int
    failed_count: int
    corrupt: list[tuple[int, str]]  # (caption_id, reason); reason in {missing, checksum_mismatch}


def verify_dataset(manifest_path: Path, root: Path) -> VerifyReport:
    """Re-checksum every ok entry's file; pure, report-only."""
    entries = read_manifest(manifest_path)
    ok = failed = 0
    corrupt: list[tuple[int, str]] = []
    for e in entries:
        if e.status != STATUS_OK:
            failed += 1
            continue
        path = root / e.image_path
        if not path.exists():
            corrupt.append((e.caption_id, "missing"))
            continue
        if sha256_bytes(path.read_bytes()) != e.checksum:
            corrupt.append((e.caption_id, "checksum_mismatch"))
            continue
        ok += 1
    return VerifyReport(ok_count=ok, failed_count=failed, corrupt=corrupt)


def pack_shards(manifest_path: Path, root: Path, shard_size: int = 100_000):
    """Reserved packed-archive layout for runs beyond ~1e6 images.

    The flat directory-of-files layout is deliberate at desk scale
    (debuggability first); packing only pays off once directory listings
    and per-file overhead dominate.
    """
    raise NotImplementedError(
        "shard packing is reserved for large runs; the directory layout "
        "covers the supported scale"
    )


class DatasetStore:
    """Root-directory handle used by the image generation run."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST_NAME
        self.images_dir = self.root / IMAGES_DIR

    def prepare(self) -> None:
        self.images_dir.mkdir(parents=True, exist_ok=True)

    def load_entries(self) -> list[ManifestEntry]:
        if not self.manifest_path.exists():
            return []
        return read_manifest(self.manifest_path, tolerate_partial_tail=True)

    def append_entry(self, entry: ManifestEntry) -> None:
        _validate_entries([entry])
        with open(self.manifest_path, "a", encoding="utf-8", newline="\n") as f:
            f.write(_entry_to_line(entry) + "\n")
            f.flush()

    def write_image(self, caption_id: int, encoded: bytes) -> str:
        """Write encoded image bytes; returns the manifest-relative path."""
        rel = f"{IMAGES_DIR}/{caption_id}.ppm"
        (self.root / rel).write_bytes(encoded)
        return rel

    def read_image(self, entry: ManifestEntry) -> np.ndarray:
        return decode_ppm((self.root / entry.image_path).read_bytes())
