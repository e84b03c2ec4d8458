"""Concept bank: loading, normalization, subsetting, and safety flagging.

The bank is the seed of the whole pipeline. It is immutable after
construction, iterates in sorted-by-text order, and assigns dense ids
0..N-1 so that every downstream artifact is reproducible.
"""

from __future__ import annotations

import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Protocol

from .seeding import stable_u64

if TYPE_CHECKING:
    from .matching import Matcher

#: System prompt sent to the safety classifier, one concept per request.
NSFW_SYSTEM_PROMPT = (
    "You will be my assistant in flagging concepts that might be NSFW meaning "
    "they are sexual, harmful, racist, abusive or explicit content. You will "
    "be presented with a concept and you will return 1 if the sample is NSFW "
    "and 0 otherwise. You will only return either 1 or 0 and nothing else. No "
    "explanations or anything are needed. Only flag concepts you are sure "
    "about being NSFW."
)


def normalize_text(text: str) -> str:
    """Canonical text form shared by the bank and the matcher.

    NFC, lowercase, internal whitespace collapsed to single spaces,
    surrounding whitespace stripped. Nothing else (no stemming, no
    accent folding) so matching sees exactly the stored forms.
    """
    text = unicodedata.normalize("NFC", text)
    return " ".join(text.split()).lower()


@dataclass(frozen=True)
class ConceptBank:
    """Ordered, deduplicated list of (id, normalized concept text)."""

    concepts: tuple[tuple[int, str], ...]
    name: str = "concepts"

    @classmethod
    def from_texts(cls, texts: Iterable[str], name: str = "concepts") -> "ConceptBank":
        unique = {normalize_text(t) for t in texts}
        unique.discard("")
        ordered = sorted(unique)
        return cls(tuple(enumerate(ordered)), name=name)

    @property
    def size(self) -> int:
        return len(self.concepts)

    def texts(self) -> list[str]:
        return [text for _, text in self.concepts]

    def text_of(self, concept_id: int) -> str:
        return self.concepts[concept_id][1]

    def __iter__(self):
        return iter(self.concepts)

    def __len__(self) -> int:
        return len(self.concepts)


@dataclass(frozen=True)
class NsfwFlagReport:
    """Per-concept flag decisions plus the overall flagged fraction."""

    flags: dict[int, bool]
    flagged_fraction: float
    warnings: int = 0


class ConceptClassifier(Protocol):
    def classify(self, system_prompt: str, concept: str) -> str:
        """Return the raw endpoint reply for one concept."""
        ...


class NsfwAbortError(RuntimeError):
    """Classifier endpoint became unreachable; carries the partial report."""

    def __init__(self, message: str, partial: NsfwFlagReport):
        super().__init__(message)
        self.partial = partial


def load_concepts(source: Iterable[str], name: str = "concepts") -> ConceptBank:
    """Build a bank from a line-delimited text stream, one concept per line.

    Raises ValueError("empty concept bank") when no non-empty concept
    survives normalization.
    """
    bank = ConceptBank.from_texts(source, name=name)
    if bank.size == 0:
        raise ValueError("empty concept bank")
    return bank


def derive_subset_from_corpus(
    bank: ConceptBank, corpus: Iterable[str], matcher: "Matcher"
) -> ConceptBank:
    """Subset of the bank containing every concept matched anywhere in corpus.

    The subset is renumbered densely (and re-sorted, which the dense
    renumbering implies). An empty corpus yields an empty bank; the
    caller decides whether that is an error.
    """
    matched_ids: set[int] = set()
    for caption in corpus:
        matched_ids |= matcher.match_caption(caption)
    texts = [bank.text_of(cid) for cid in matched_ids]
    return ConceptBank.from_texts(texts, name=f"{bank.name}-corpus-subset")


def random_subset(bank: ConceptBank, n: int, seed: int) -> ConceptBank:
    """Uniform sample of n concepts without replacement, deterministic in seed.

    Selection sorts concepts by a keyed hash and takes the first n, which
    is a uniform sample and reproduces bit-for-bit on any platform.
    """
    if n < 0 or n > bank.size:
        raise ValueError(f"subset size {n} outside [0, {bank.size}]")
    ranked = sorted(bank.texts(), key=lambda t: stable_u64("random-subset", seed, t))
    return ConceptBank.from_texts(ranked[:n], name=f"{bank.name}-rand-{n}")


def flag_nsfw(
    bank: ConceptBank,
    classifier: ConceptClassifier,
    retries: int = 3,
    concurrency: int = 4,
) -> NsfwFlagReport:
    """Ask the classifier about every concept once and collect boolean flags.

    Replies other than "1"/"0" are retried up to `retries` times, then
    recorded as clean with one warning for that concept (the filter is
    advisory, so we fail open). An unreachable endpoint aborts with the
    partial report attached to the raised NsfwAbortError.
    """
    from .clients import EndpointError  # local import, avoids cycle at module load

    if bank.size == 0:
        return NsfwFlagReport(flags={}, flagged_fraction=0.0, warnings=0)

    def classify_one(concept: str) -> tuple[bool, int]:
        for _ in range(1 + retries):
            reply = classifier.classify(NSFW_SYSTEM_PROMPT, concept).strip()
            if reply == "1":
                return True, 0
            if reply == "0":
                return False, 0
        return False, 1

    flags: dict[int, bool] = {}
    warnings = 0
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = [(cid, pool.submit(classify_one, text)) for cid, text in bank]
        for cid, fut in futures:
            try:
                flagged, warned = fut.result()
            except EndpointError as exc:
                for _, pending in futures:
                    pending.cancel()
                done = dict(sorted(flags.items()))
                partial = NsfwFlagReport(
                    flags=done,
                    flagged_fraction=_fraction(done, bank.size),
                    warnings=warnings,
                )
                raise NsfwAbortError(f"classifier endpoint unreachable: {exc}", partial)
            flags[cid] = flagged
            warnings += warned
    return NsfwFlagReport(
        flags=dict(sorted(flags.items())),
        flagged_fraction=_fraction(flags, bank.size),
        warnings=warnings,
    )


def _fraction(flags: dict[int, bool], total: int) -> float:
    if total == 0:
        return 0.0
    return sum(1 for v in flags.values() if v) / total


def flag_report_to_lines(bank: ConceptBank, report: NsfwFlagReport) -> list[str]:
    """Serialize as `id<TAB>text<TAB>0|1` lines ordered by concept id."""
    lines = []
    for cid in sorted(report.flags):
        bit = "1" if report.flags[cid] else "0"
        lines.append(f"{cid}\t{bank.text_of(cid)}\t{bit}")
    return lines


def parse_flag_lines(lines: Iterable[str]) -> dict[int, bool]:
    flags: dict[int, bool] = {}
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        cid, _text, bit = line.split("\t")
        flags[int(cid)] = bit == "1"
    return flags
