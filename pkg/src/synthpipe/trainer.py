"""Desk-scale dual-encoder contrastive training.

Deterministic hand-crafted features stand in for the full towers: text
is a signed-hash bag of character 3-grams (512 buckets), images are 8x8
per-block RGB means (192 values). Each modality gets a linear encoder
into a shared embedding space; rows are L2-normalized and trained with
the symmetric temperature-scaled contrastive loss. Gradients are fully
analytic (through the normalization and the temperature) and checked
against finite differences in the test suite.

The optimizer is first-order with decoupled weight decay (AdamW-style
moment estimates; decay applied directly to the weights, never to the
temperature), with a linear warmup into a cosine schedule.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import stable_u64
from .store import DatasetStore, STATUS_OK

D_TEXT = 512
D_IMAGE = 192
GRID = 8

TAU_MIN = 0.01
TAU_MAX = 100.0
LOG_TAU_INIT = math.log(1 / 0.07)

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def char_trigrams(text: str) -> list[str]:
    """Character 3-grams of the lowercased text.

    Texts shorter than three characters fall back to a single whole-text
    gram so that any non-empty input produces a non-degenerate feature.
    """
    t = text.lower()
    if len(t) < 3:
        return [t] if t else []
    return [t[i : i + 3] for i in range(len(t) - 2)]


def extract_text_features(caption: str) -> np.ndarray:
    """Signed-hash bag of 3-grams in D_TEXT buckets, L2-normalized.

    An empty caption yields the all-zero vector, which downstream code
    treats as the degenerate flag.
    """
    v = np.zeros(D_TEXT, dtype=np.float64)
    for gram, count in Counter(char_trigrams(caption)).items():
        h = stable_u64("text-feature", gram)
        bucket = h % D_TEXT
        sign = 1.0 if (h >> 32) & 1 else -1.0
        v[bucket] += sign * count
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v
    return v / norm


def is_degenerate(features: np.ndarray) -> bool:
    return not np.any(features)


def extract_image_features(pixels: np.ndarray) -> np.ndarray:
    """Per-block RGB means on an 8x8 grid, scaled to [0,1], L2-normalized."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
        raise ValueError(f"expected square HxWx3 image, got {pixels.shape}")
    side = pixels.shape[0]
    if side % GRID != 0:
        raise ValueError(f"image side {side} not divisible by grid {GRID}")
    block = side // GRID
    view = pixels.astype(np.float64).reshape(GRID, block, GRID, block, 3)
    means = view.mean(axis=(1, 3)) / 255.0
    v = means.reshape(-1)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v
    return v / norm


@dataclass
class EncoderParams:
    w_text: np.ndarray  # d x D_TEXT
    w_image: np.ndarray  # d x D_IMAGE
    log_tau: float

    @property
    def embed_dim(self) -> int:
        return self.w_text.shape[0]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-2
    weight_decay: float = 1e-4
    warmup_epochs: int = 1
    seed: int = 0
    embed_dim: int = 64
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """The published large-run schedule, kept as configuration only."""
        return cls(epochs=40, batch_size=4096, base_lr=5e-4, weight_decay=0.5, warmup_epochs=1)


@dataclass
class ClipGrads:
    w_text: np.ndarray
    w_image: np.ndarray
    log_tau: float


def _normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate (zero-norm) embedding row")
    return m / norms[:, None], norms


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp with exactly-rounded accumulation.

    math.fsum makes the inner sum independent of term order, which is
    what makes the loss bit-exact under joint batch permutations.
    """
    shift = logits.max(axis=1)
    exp = np.exp(logits - shift[:, None])
    sums = np.array([math.fsum(row) for row in exp])
    return shift + np.log(sums)


def clip_loss_and_grad(
    params: EncoderParams, text_feats: np.ndarray, image_feats: np.ndarray
) -> tuple[float, ClipGrads]:
    """Symmetric contrastive loss and analytic gradients.

    h_k = normalize(W_image f_image_k), z_k = normalize(W_text f_text_k),
    logits = (H Z^T) / tau with tau = exp(log_tau); the loss averages the
    row-wise and column-wise cross-entropies against the diagonal.
    """
    b = text_feats.shape[0]
    if b < 2:
        raise ValueError("batch size must be >= 2")
    if not (np.isfinite(text_feats).all() and np.isfinite(image_feats).all()):
        raise ValueError("non-finite features")

    u = image_feats @ params.w_image.T  # B x d
    v = text_feats @ params.w_text.T
    h, u_norms = _normalize_rows(u)
    z, v_norms = _normalize_rows(v)

    tau = math.exp(params.log_tau)
    sims = h @ z.T
    logits = sims / tau

    lse_rows = _logsumexp_rows(logits)
    lse_cols = _logsumexp_rows(logits.T)
    diag = np.arange(b)
    diag_logits = logits[diag, diag]
    ce_rows = math.fsum(lse_rows - diag_logits) / b
    ce_cols = math.fsum(lse_cols - diag_logits) / b
    loss = 0.5 * (ce_rows + ce_cols)

    # d loss / d logits
    p_rows = np.exp(logits - lse_rows[:, None])
    p_cols = np.exp(logits - lse_cols[None, :])
    eye = np.eye(b)
    g = ((p_rows - eye) + (p_cols - eye)) / (2.0 * b)

    d_log_tau = float(-(g * logits).sum())
    dh = (g @ z) / tau
    dz = (g.T @ h) / tau
    # back through the row normalization: du = (dh - (dh . h) h) / |u|
    du = (dh - (dh * h).sum(axis=1, keepdims=True) * h) / u_norms[:, None]
    dv = (dz - (dz * z).sum(axis=1, keepdims=True) * z) / v_norms[:, None]

    return float(loss), ClipGrads(
        w_text=dv.T @ text_feats,
        w_image=du.T @ image_feats,
        log_tau=d_log_tau,
    )


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Step size at 0-based global step: linear warmup then cosine to zero."""
    t = (step + 1) / steps_per_epoch  # epochs elapsed after this step
    if cfg.warmup_epochs > 0 and t <= cfg.warmup_epochs:
        return cfg.base_lr * t / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    if span <= 0:
        return cfg.base_lr
    progress = (t - cfg.warmup_epochs) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingData:
    """Feature matrices for the ok rows of a manifest, ordered by caption id."""

    caption_ids: list[int]
    concept_ids: list[int]
    text_feats: np.ndarray  # N x D_TEXT
    image_feats: np.ndarray  # N x D_IMAGE
    pixels: list[np.ndarray] | None = None  # retained when augmentation is on

    def __len__(self) -> int:
        return len(self.caption_ids)


def load_training_data(store: DatasetStore, keep_pixels: bool = False) -> TrainingData:
    entries = [e for e in store.load_entries() if e.status == STATUS_OK]
    entries.sort(key=lambda e: e.caption_id)
    pixels = [store.read_image(e) for e in entries]
    data = TrainingData(
        caption_ids=[e.caption_id for e in entries],
        concept_ids=[e.concept_id for e in entries],
        text_feats=np.stack([extract_text_features(e.caption) for e in entries])
        if entries
        else np.zeros((0, D_TEXT)),
        image_feats=np.stack([extract_image_features(p) for p in pixels])
        if entries
        else np.zeros((0, D_IMAGE)),
        pixels=pixels if keep_pixels else None,
    )
    return data


def _augmented_image_feats(
    pixels: Sequence[np.ndarray], rng: np.random.Generator
) -> np.ndarray:
    """Random sub-window per image (area scale 0.5-1.0), then block features."""
    feats = []
    for img in pixels:
        side = img.shape[0]
        area = rng.uniform(0.5, 1.0)
        crop = int(round(side * math.sqrt(area)))
        crop -= crop % GRID
        crop = max(GRID, min(side, crop))
        top = int(rng.integers(0, side - crop + 1))
        left = int(rng.integers(0, side - crop + 1))
        feats.append(extract_image_features(img[top : top + crop, left : left + crop]))
    return np.stack(feats)


def train(data: TrainingData, cfg: TrainConfig) -> tuple[EncoderParams, list[float]]:
    """Run the contrastive loop; returns final params and per-epoch mean loss.

    Deterministic for a fixed config: parameter init, per-epoch shuffles,
    and augmentation draws all come from one seeded generator, and the
    reduction order is fixed.
    """
    n = len(data)
    if n < cfg.batch_size:
        raise ValueError(f"dataset has {n} usable pairs; need >= {cfg.batch_size}")

    rng = np.random.default_rng(cfg.seed)
    d = cfg.embed_dim
    params = EncoderParams(
        w_text=rng.normal(0.0, 1.0 / math.sqrt(D_TEXT), (d, D_TEXT)),
        w_image=rng.normal(0.0, 1.0 / math.sqrt(D_IMAGE), (d, D_IMAGE)),
        log_tau=LOG_TAU_INIT,
    )

    state = {
        "m_t": np.zeros_like(params.w_text),
        "v_t": np.zeros_like(params.w_text),
        "m_i": np.zeros_like(params.w_image),
        "v_i": np.zeros_like(params.w_image),
        "m_tau": 0.0,
        "v_tau": 0.0,
    }

    steps_per_epoch = n // cfg.batch_size
    curve: list[float] = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.augment:
            if data.pixels is None:
                raise ValueError("augmentation requires pixels; load with keep_pixels=True")
            image_feats = _augmented_image_feats(data.pixels, rng)
        else:
            image_feats = data.image_feats
        losses = []
        for batch_idx in range(steps_per_epoch):
            sel = order[batch_idx * cfg.batch_size : (batch_idx + 1) * cfg.batch_size]
            loss, grads = clip_loss_and_grad(
                params, data.text_feats[sel], image_feats[sel]
            )
            lr = learning_rate(cfg, step, steps_per_epoch)
            step += 1
            _adamw_update(params, grads, state, lr, cfg.weight_decay, step)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return params, curve


def _adamw_update(
    params: EncoderParams,
    grads: ClipGrads,
    state: dict,
    lr: float,
    weight_decay: float,
    step: int,
) -> None:
    bc1 = 1.0 - _ADAM_BETA1**step
    bc2 = 1.0 - _ADAM_BETA2**step

    for key, w, g in (("t", params.w_text, grads.w_text), ("i", params.w_image, grads.w_image)):
        m = state[f"m_{key}"]
        v = state[f"v_{key}"]
        m *= _ADAM_BETA1
        m += (1 - _ADAM_BETA1) * g
        v *= _ADAM_BETA2
        v += (1 - _ADAM_BETA2) * g * g
        w *= 1.0 - lr * weight_decay  # decoupled decay, weights only
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + _ADAM_EPS)

    state["m_tau"] = _ADAM_BETA1 * state["m_tau"] + (1 - _ADAM_BETA1) * grads.log_tau
    state["v_tau"] = _ADAM_BETA2 * state["v_tau"] + (1 - _ADAM_BETA2) * grads.log_tau**2
    params.log_tau -= lr * (state["m_tau"] / bc1) / (math.sqrt(state["v_tau"] / bc2) + _ADAM_EPS)
    params.log_tau = min(max(params.log_tau, math.log(TAU_MIN)), math.log(TAU_MAX))


def embed_text(params: EncoderParams, text_feats: np.ndarray) -> np.ndarray:
    h, _ = _normalize_rows(np.atleast_2d(text_feats) @ params.w_text.T)
    return h


def embed_image(params: EncoderParams, image_feats: np.ndarray) -> np.ndarray:
    h, _ = _normalize_rows(np.atleast_2d(image_feats) @ params.w_image.T)
    return h


_HEADER = struct.Struct("<IIId")


def save_params(path: Path, params: EncoderParams) -> None:
    """Header {d, D_t, D_i, log_tau} then the two weight matrices, float64 LE."""
    d = params.embed_dim
    with open(path, "wb") as f:
        f.write(_HEADER.pack(d, D_TEXT, D_IMAGE, params.log_tau))
        f.write(params.w_text.astype("<f8").tobytes())
        f.write(params.w_image.astype("<f8").tobytes())


def load_params(path: Path) -> EncoderParams:
    data = Path(path).read_bytes()
    d, d_t, d_i, log_tau = _HEADER.unpack_from(data)
    offset = _HEADER.size
    w_text = np.frombuffer(data, dtype="<f8", count=d * d_t, offset=offset).reshape(d, d_t)
    offset += d * d_t * 8
    w_image = np.frombuffer(data, dtype="<f8", count=d * d_i, offset=offset).reshape(d, d_i)
    return EncoderParams(w_text=w_text.copy(), w_image=w_image.copy(), log_tau=log_tau)


def curve_to_lines(curve: Iterable[float]) -> list[str]:
    return [f"{epoch}\t{loss:.12g}" for epoch, loss in enumerate(curve, start=1)]
