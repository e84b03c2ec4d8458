"""Image generation: remote text-to-image rendering and its offline twin.

The remote path posts a caption to a diffusion endpoint and stores the
returned image center-cropped and box-downscaled to the storage size.
The mock path paints a deterministic 8x8 grid of solid color blocks
whose colors are a signed-hash projection of the caption's character
3-gram multiset — image content is a recoverable, roughly linear signal
of the caption's n-gram features, which is what makes the downstream
contrastive training testable offline.

Generation runs are idempotent and resumable: caption ids already in the
manifest are skipped, requests are bounded by a concurrency limit, and
manifest rows are flushed in caption-id order so an interrupted run
leaves a valid sorted prefix.
"""

from __future__ import annotations

import io
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .captions import CaptionRecord
from .clients import HttpTtiClient, TtiRequestError
from .seeding import derive_seed, stable_digest
from .store import DatasetStore, ManifestEntry, STATUS_FAILED, STATUS_OK, encode_ppm, sha256_bytes
from .trainer import char_trigrams

log = logging.getLogger(__name__)

GRID = 8  # blocks per image side in the mock renderer
_MOCK_GAIN = 3.0


@dataclass(frozen=True)
class TtiParams:
    guidance_scale: float = 2.0
    num_steps: int = 50
    gen_width: int = 512
    gen_height: int = 512
    store_size: int = 256
    seed_base: int = 0

    def __post_init__(self):
        if self.store_size > min(self.gen_width, self.gen_height):
            raise ValueError("store_size must not exceed generation size")
        if self.store_size % GRID != 0:
            raise ValueError(f"store_size must be a multiple of {GRID}")


@dataclass
class ImageRecord:
    caption_id: int
    pixels: np.ndarray | None  # store_size x store_size x 3 uint8; None when failed
    checksum: str
    backend: str  # "remote" | "mock"
    seed: int
    status: str  # "ok" | "failed"
    attempts: int = 1


class TtiBackend(Protocol):
    name: str

    def render(self, caption: str, params: TtiParams, caption_id: int) -> ImageRecord: ...


def image_seed(params: TtiParams, caption_id: int) -> int:
    return derive_seed("image-seed", params.seed_base, caption_id)


def mock_block_colors(caption: str) -> np.ndarray:
    """The mock renderer's 8x8x3 color table for a caption.

    Each unique 3-gram contributes a fixed ±1 pattern over the 192 block
    channels (one blake2b digest per gram, one bit per channel); patterns
    are averaged with multiset counts, scaled, clipped, and quantized.
    An empty caption yields a uniform mid-gray canvas.
    """
    grams = Counter(char_trigrams(caption))
    total = sum(grams.values())
    signal = np.zeros(GRID * GRID * 3, dtype=np.float64)
    for gram, count in grams.items():
        digest = stable_digest(24, "mock-image", gram)
        bits = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))
        signal += count * (bits.astype(np.float64) * 2.0 - 1.0)
    if total:
        signal /= total
    scaled = np.clip(signal * _MOCK_GAIN, -1.0, 1.0)
    colors = np.rint(127.5 + 127.5 * scaled).astype(np.uint8)
    return colors.reshape(GRID, GRID, 3)


def render_mock(caption: str, params: TtiParams, caption_id: int) -> ImageRecord:
    colors = mock_block_colors(caption)
    block = params.store_size // GRID
    pixels = np.repeat(np.repeat(colors, block, axis=0), block, axis=1)
    return ImageRecord(
        caption_id=caption_id,
        pixels=pixels,
        checksum=sha256_bytes(encode_ppm(pixels)),
        backend="mock",
        seed=image_seed(params, caption_id),
        status=STATUS_OK,
    )


def box_downscale(pixels: np.ndarray, factor: int) -> np.ndarray:
    """Mean over aligned factor x factor blocks; float64 in, float64 out.

    Exact box filtering preserves the overall mean, which is the property
    the storage path relies on.
    """
    h, w = pixels.shape[:2]
    if h % factor or w % factor:
        raise ValueError("image size not divisible by downscale factor")
    view = pixels.reshape(h // factor, factor, w // factor, factor, 3)
    return view.mean(axis=(1, 3))


def prepare_store_pixels(pixels: np.ndarray, store_size: int) -> np.ndarray:
    """Center-keep and box-downscale a decoded image to the storage size."""
    h, w = pixels.shape[:2]
    factor = min(h, w) // store_size
    if factor < 1:
        raise ValueError(f"image {h}x{w} smaller than store size {store_size}")
    side = store_size * factor
    top = (h - side) // 2
    left = (w - side) // 2
    crop = pixels[top : top + side, left : left + side].astype(np.float64)
    means = box_downscale(crop, factor)
    return np.clip(np.rint(means), 0, 255).astype(np.uint8)


def decode_image_bytes(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"))


def render_remote(
    client: HttpTtiClient,
    caption: str,
    params: TtiParams,
    caption_id: int,
    retries: int = 3,
) -> ImageRecord:
    """One caption through the remote endpoint, with bounded retries.

    Persistent failures produce a `failed` placeholder instead of
    aborting: a multi-day run should not die on one bad render.
    """
    seed = image_seed(params, caption_id)
    payload = {
        "prompt": caption,
        "guidance_scale": params.guidance_scale,
        "num_inference_steps": params.num_steps,
        "width": params.gen_width,
        "height": params.gen_height,
        "seed": seed,
    }
    attempts = 0
    while attempts < retries:
        attempts += 1
        try:
            data = client.generate(payload)
            pixels = prepare_store_pixels(decode_image_bytes(data), params.store_size)
        except (TtiRequestError, ValueError, OSError) as exc:
            log.warning("render %d attempt %d failed: %s", caption_id, attempts, exc)
            continue
        return ImageRecord(
            caption_id=caption_id,
            pixels=pixels,
            checksum=sha256_bytes(encode_ppm(pixels)),
            backend="remote",
            seed=seed,
            status=STATUS_OK,
            attempts=attempts,
        )
    return ImageRecord(
        caption_id=caption_id,
        pixels=None,
        checksum="-",
        backend="remote",
        seed=seed,
        status=STATUS_FAILED,
        attempts=attempts,
    )


class MockTtiBackend:
    name = "mock"

    def render(self, caption: str, params: TtiParams, caption_id: int) -> ImageRecord:
        return render_mock(caption, params, caption_id)


class RemoteTtiBackend:
    name = "remote"

    def __init__(self, client: HttpTtiClient, retries: int = 3):
        self.client = client
        self.retries = retries

    def render(self, caption: str, params: TtiParams, caption_id: int) -> ImageRecord:
        return render_remote(self.client, caption, params, caption_id, self.retries)


def run_generation(
    captions: Sequence[CaptionRecord],
    backend: TtiBackend,
    params: TtiParams,
    concurrency: int,
    store: DatasetStore,
) -> list[ManifestEntry]:
    """Render every caption not already in the manifest; returns all entries.

    At most `concurrency` renders execute at once. Completed rows are
    appended in caption-id order (images are written before their row),
    so a crash leaves a resumable prefix and a rerun performs exactly the
    missing renders.
    """
    store.prepare()
    existing = store.load_entries()
    done_ids = {e.caption_id for e in existing}
    todo = sorted(
        (c for c in captions if c.id not in done_ids), key=lambda c: c.id
    )
    entries = list(existing)
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = [
            (cap, pool.submit(backend.render, cap.text, params, cap.id)) for cap in todo
        ]
        for cap, fut in futures:
            record = fut.result()
            if record.status == STATUS_OK:
                rel = store.write_image(cap.id, encode_ppm(record.pixels))
            else:
                rel = "-"
            entry = ManifestEntry(
                caption_id=cap.id,
                concept_id=cap.source_concept_id,
                caption=cap.text,
                image_path=rel,
                checksum=record.checksum,
                backend=record.backend,
                seed=record.seed,
                status=record.status,
            )
            store.append_entry(entry)
            entries.append(entry)
    return sorted(entries, key=lambda e: e.caption_id)
