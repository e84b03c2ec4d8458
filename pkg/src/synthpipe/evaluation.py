"""Five-task evaluation protocol and the relative-improvement aggregate.

Tasks: linear probing, few-shot classification (a shot-limited probe),
image retrieval, text retrieval, zero-shot classification. The aggregate
score is the mean signed relative improvement over a baseline across the
five task metrics, in percent. All evaluations are pure functions with
deterministic tie-breaking (lower index wins), so results do not depend
on input ordering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .trainer import EncoderParams, embed_image, embed_text, extract_text_features

DEFAULT_TEMPLATE = "a photo of a {label}"


TASKS = ("lin_prob", "few_shot", "img_ret", "text_ret", "zero_shot")


@dataclass(frozen=True)
class MetricsReport:
    lin_prob: float
    few_shot: float
    img_ret: float
    text_ret: float
    zero_shot: float
    # One flag per task; all five metrics here are higher-is-better.
    lower_is_better: tuple[bool, ...] = (False,) * 5

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.values()):
            raise ValueError("metrics must be finite")
        if len(self.lower_is_better) != len(TASKS):
            raise ValueError("need one lower_is_better flag per task")

    def values(self) -> list[float]:
        return [getattr(self, name) for name in TASKS]

    def to_lines(self) -> list[str]:
        return [f"{name}\t{getattr(self, name):.6g}" for name in TASKS]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "MetricsReport":
        data = {}
        for line in lines:
            line = line.strip()
            if not line:
                continue
            task, value = line.split("\t")
            data[task] = float(value)
        return cls(**data)

    def table(self) -> str:
        header = "".join(f"{n:>12}" for n in TASKS)
        row = "".join(f"{getattr(self, n):>12.2f}" for n in TASKS)
        return header + "\n" + row + "\n"


@dataclass(frozen=True)
class RetrievalResult:
    image_to_text: float  # percent of image queries whose caption ranks in top k
    text_to_image: float


def _recall_direction(sims: np.ndarray, k: int) -> float:
    """Recall@k when row i's true partner is column i, ties to lower index."""
    n = sims.shape[0]
    diag = sims[np.arange(n), np.arange(n)]
    better = (sims > diag[:, None]).sum(axis=1)
    cols = np.arange(n)
    tied_before = ((sims == diag[:, None]) & (cols[None, :] < np.arange(n)[:, None])).sum(axis=1)
    ranks = 1 + better + tied_before
    return float((ranks <= k).mean() * 100.0)


def recall_at_k(h: np.ndarray, z: np.ndarray, k: int) -> RetrievalResult:
    """Bidirectional retrieval over row-aligned unit-norm embeddings."""
    if h.shape[0] == 0:
        raise ValueError("empty embedding set")
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = h @ z.T
    return RetrievalResult(
        image_to_text=_recall_direction(sims, k),
        text_to_image=_recall_direction(sims.T, k),
    )


def zero_shot_classify(
    params: EncoderParams,
    image_features: np.ndarray,
    labels: Sequence[int],
    class_names: Sequence[str],
    template: str = DEFAULT_TEMPLATE,
) -> float:
    """Accuracy (%) of nearest templated-class-name prediction."""
    if len(class_names) == 0:
        raise ValueError("empty class list")
    prompts = [template.format(label=name) for name in class_names]
    class_emb = embed_text(params, np.stack([extract_text_features(p) for p in prompts]))
    image_emb = embed_image(params, image_features)
    sims = image_emb @ class_emb.T
    preds = sims.argmax(axis=1)  # argmax takes the lowest index on ties
    return float((preds == np.asarray(labels)).mean() * 100.0)


def linear_probe(
    features: np.ndarray,
    labels: Sequence[int],
    shots: int | None = None,
    seed: int = 0,
    l2: float = 1e-3,
    max_iters: int = 10_000,
    grad_tol: float = 1e-6,
) -> float:
    """Multinomial logistic probe on frozen features; accuracy in percent.

    With `shots` set, a seeded per-class sample of that size trains the
    probe and the remaining examples are scored; when nothing remains
    (shots == everything) the training set is scored, which makes the
    shot-limited probe coincide with the unrestricted one. Full-batch
    gradient descent with a Lipschitz step size runs until the gradient
    norm drops below `grad_tol` or `max_iters` is reached.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[c] for c in labels])

    if shots is None:
        train_idx = np.arange(len(y))
        eval_idx = np.arange(len(y))
    else:
        rng = np.random.default_rng(seed)
        picks = []
        for ci in range(len(classes)):
            members = np.flatnonzero(y == ci)
            if len(members) < shots:
                raise ValueError(
                    f"class {classes[ci]} has {len(members)} examples, fewer than shots={shots}"
                )
            picks.append(rng.choice(members, size=shots, replace=False))
        train_idx = np.sort(np.concatenate(picks))
        eval_mask = np.ones(len(y), dtype=bool)
        eval_mask[train_idx] = False
        eval_idx = np.flatnonzero(eval_mask)
        if len(eval_idx) == 0:
            eval_idx = train_idx
    if len(np.unique(y[train_idx])) != len(classes):
        raise ValueError("a class is absent from the training split")

    x = np.asarray(features, dtype=np.float64)[train_idx]
    yt = y[train_idx]
    n, d = x.shape
    k = len(classes)
    xb = np.hstack([x, np.ones((n, 1))])  # bias column, unpenalized

    w = np.zeros((d + 1, k))
    penalty = np.ones((d + 1, 1))
    penalty[-1] = 0.0
    # Softmax Hessian is bounded by 0.5/n * X^T X plus the ridge term.
    lip = 0.5 * np.linalg.norm(xb, 2) ** 2 / n + l2
    lr = 1.0 / lip
    onehot = np.zeros((n, k))
    onehot[np.arange(n), yt] = 1.0
    for _ in range(max_iters):
        logits = xb @ w
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = xb.T @ (p - onehot) / n + l2 * (penalty * w)
        if np.linalg.norm(grad) < grad_tol:
            break
        w -= lr * grad

    xe = np.asarray(features, dtype=np.float64)[eval_idx]
    preds = (np.hstack([xe, np.ones((len(xe), 1))]) @ w).argmax(axis=1)
    return float((preds == y[eval_idx]).mean() * 100.0)


def delta_mtl(model: MetricsReport, baseline: MetricsReport) -> float:
    """Mean signed relative improvement over the baseline, in percent.

    Each task contributes (-1)^flag * (M - M_b) / M_b; all five tasks
    here are higher-is-better, so the flags are normally all False.
    """
    total = 0.0
    for m, b, lower in zip(model.values(), baseline.values(), model.lower_is_better):
        if b == 0:
            raise ValueError("baseline metric is zero; relative improvement undefined")
        term = (m - b) / b
        total += -term if lower else term
    return 100.0 / 5.0 * total
