"""Probability-balanced caption subsampling with a target-size solver.

A caption's keep probability is tied to its rarest matched concept:
min(1, t / count) maximized over the matched set, so every caption whose
rarest concept occurs at most t times survives with certainty while
head-concept captions are thinned. The threshold t is solved so that the
expected subset size hits a target. Expected size is monotone
non-decreasing and piecewise linear in t, which the solver exploits:
bisection per the contract, then an exact solve on the final linear
segment. A noisy-OR combiner is available behind a flag; max is the
default.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .captions import CaptionRecord
from .seeding import counter_uniform, stable_u64

COMBINERS = ("max", "noisy_or")


@dataclass(frozen=True)
class BalancePlan:
    counts: dict[int, int]
    t_threshold: float
    keep_prob: dict[int, float]
    target_size: int
    expected_size: float


def keep_probability(
    matches: Iterable[int],
    counts: Mapping[int, int],
    t_threshold: float,
    combiner: str = "max",
) -> float:
    """Keep probability for one caption given its matched concept ids.

    Empty match sets get probability 0: generation is concept-conditioned,
    so a caption matching nothing signals degenerate output.
    """
    if t_threshold <= 0:
        raise ValueError("t_threshold must be positive")
    if combiner not in COMBINERS:
        raise ValueError(f"unknown combiner {combiner!r}")
    probs = []
    for cid in matches:
        count = counts.get(cid, 0)
        if count < 1:
            raise ValueError(f"concept {cid} has count < 1")
        probs.append(min(1.0, t_threshold / count))
    if not probs:
        return 0.0
    if combiner == "max":
        return max(probs)
    survive = 1.0
    for p in probs:
        survive *= 1.0 - p
    return 1.0 - survive


def _rarest_counts(
    match_sets: Sequence[Iterable[int]], counts: Mapping[int, int]
) -> list[int]:
    """Min matched count per caption; 0 marks an unmatched caption.

    Under the max combiner min(1, t/count) is maximized by the smallest
    count, so each caption reduces to a single integer.
    """
    rarest = []
    for matches in match_sets:
        vals = [counts[cid] for cid in matches]
        if vals and min(vals) < 1:
            raise ValueError("matched concept with count < 1")
        rarest.append(min(vals) if vals else 0)
    return rarest


def expected_size(
    match_sets: Sequence[Iterable[int]],
    counts: Mapping[int, int],
    t_threshold: float,
    combiner: str = "max",
) -> float:
    return sum(
        keep_probability(m, counts, t_threshold, combiner) for m in match_sets
    )


def solve_threshold(
    match_sets: Sequence[Iterable[int]],
    counts: Mapping[int, int],
    target_size: int,
    tolerance: float = 0.5,
    combiner: str = "max",
) -> float:
    """Threshold t whose expected subset size meets the target.

    Bisects over [min_count * target/matchable, max_count] for up to 60
    iterations, stopping once |E(t) - target| <= tolerance. For the max
    combiner the result is then refined exactly on the surrounding linear
    segment of E(t), so closed-form cases come out exact.
    """
    rarest = _rarest_counts(match_sets, counts)
    matchable = [r for r in rarest if r > 0]
    n_matchable = len(matchable)
    if target_size <= 0:
        raise ValueError("target_size must be positive")
    if target_size > n_matchable:
        raise ValueError(
            f"target {target_size} exceeds {n_matchable} matchable captions"
        )

    def e_of(t: float) -> float:
        if combiner == "max":
            return float(sum(min(1.0, t / r) for r in matchable))
        return expected_size(match_sets, counts, t, combiner)

    lo = min(matchable) * target_size / n_matchable
    hi = float(max(matchable))
    t = hi
    for _ in range(60):
        t = (lo + hi) / 2.0
        e = e_of(t)
        if abs(e - target_size) <= tolerance:
            break
        if e < target_size:
            lo = t
        else:
            hi = t

    if combiner != "max":
        return t
    return _refine_on_segment(matchable, target_size, t)


def _refine_on_segment(matchable: list[int], target_size: int, t: float) -> float:
    """Exact solve of sum(min(1, t/r)) = target over the piecewise-linear E.

    On the segment (a, b] between consecutive distinct counts, captions
    with r <= a contribute 1 and the rest contribute t/r, so
    E(t) = saturated + t * sum(n_r / r). Scanning segments left to right
    and solving the linear equation on each finds the smallest exact
    solution; grouping the slope by distinct r keeps simple cases exact
    in float arithmetic. Falls back to the bisection value if no segment
    admits a solution (cannot happen when target <= matchable count).
    """
    groups = Counter(matchable)
    prev = 0.0
    for edge in sorted(groups):
        saturated = sum(n for r, n in groups.items() if r <= prev)
        slope = sum(n / r for r, n in groups.items() if r > prev)
        candidate = (target_size - saturated) / slope
        if prev < candidate <= edge:
            return candidate
        prev = float(edge)
    return t


def build_plan(
    records: Sequence[CaptionRecord],
    counts: Mapping[int, int],
    target_size: int,
    tolerance: float = 0.5,
    combiner: str = "max",
) -> BalancePlan:
    match_sets = [sorted(r.matched_concept_ids) for r in records]
    t = solve_threshold(match_sets, counts, target_size, tolerance, combiner)
    keep = {
        r.id: keep_probability(m, counts, t, combiner)
        for r, m in zip(records, match_sets)
    }
    return BalancePlan(
        counts=dict(counts),
        t_threshold=t,
        keep_prob=keep,
        target_size=target_size,
        expected_size=float(sum(keep.values())),
    )


def sample_balanced(
    records: Sequence[CaptionRecord], plan: BalancePlan, seed: int
) -> list[CaptionRecord]:
    """Independent Bernoulli(keep_prob) per caption, keyed by (seed, id).

    The draw for a caption depends only on the seed and the caption id,
    never on position, so permuting the corpus cannot change which ids
    are kept. Output preserves caption id order.
    """
    missing = [r.id for r in records if r.id not in plan.keep_prob]
    if missing:
        raise ValueError(f"plan does not cover caption ids {missing[:5]}")
    ordered = sorted(records, key=lambda r: r.id)
    ids = np.array([r.id for r in ordered], dtype=np.uint64)
    probs = np.array([plan.keep_prob[r.id] for r in ordered], dtype=np.float64)
    u = counter_uniform(seed, ids)
    return [r for r, keep in zip(ordered, u < probs) if keep]


def sample_random(
    records: Sequence[CaptionRecord], size: int, seed: int
) -> list[CaptionRecord]:
    """Uniform subset of the given size; the plain baseline sampler."""
    if size < 0 or size > len(records):
        raise ValueError(f"sample size {size} outside [0, {len(records)}]")
    ranked = sorted(records, key=lambda r: stable_u64("random-sampling", seed, r.id))
    return sorted(ranked[:size], key=lambda r: r.id)


def plan_to_lines(plan: BalancePlan, kept_ids: set[int]) -> list[str]:
    """Serialize as `caption_id<TAB>keep_prob<TAB>kept(0|1)` lines."""
    lines = []
    for cid in sorted(plan.keep_prob):
        kept = 1 if cid in kept_ids else 0
        lines.append(f"{cid}\t{plan.keep_prob[cid]:.10g}\t{kept}")
    return lines
