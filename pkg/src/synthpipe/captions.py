"""Caption generation: prompt construction, LLM driving, validation.

The prompt template is fixed; only the concept is substituted. Returned
text goes through a cleaning pass (labels, quotes, trailing junk) and a
validity gate (non-empty, single output, word budget). Concept presence
is checked with the same word-boundary rule the matcher uses; absent
concepts are flagged rather than dropped by default, since balancing
operates on matched concepts anyway.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Protocol

from .concepts import ConceptBank, normalize_text
from .matching import has_boundary_match
from .seeding import derive_seed

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "Your task is to write me an image caption that includes and visually "
    "describes a scene around a concept. Your concept is {concept}. Output "
    "one single grammatically correct caption that is no longer than 15 "
    "words. Do not output any notes, word counts, facts, etc. Output one "
    "single sentence only."
)

_LABEL_RE = re.compile(
    r"^(?:caption|output|answer|result|sentence)\s*\d*\s*[:\-]\s*", re.IGNORECASE
)
_QUOTE_CHARS = "\"'“”‘’«»"
_TERMINATORS = ".!?"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    presence_penalty: float = 1.0
    frequency_penalty: float = 1.0
    max_tokens: int = 64
    seed: int = 0


@dataclass(frozen=True)
class PromptRequest:
    concept: str
    prompt_text: str
    sampling: SamplingParams


@dataclass
class GenerationConfig:
    n_per_concept: int = 1
    max_words: int = 25
    max_attempts: int = 4
    dedup: bool = True
    drop_concept_absent: bool = False

    def __post_init__(self):
        if self.n_per_concept < 1:
            raise ValueError("n_per_concept must be >= 1")
        if self.max_words < 15:
            raise ValueError("max_words must be >= 15")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass
class CaptionRecord:
    id: int
    text: str
    source_concept_id: int
    attempt: int
    concept_absent: bool = False
    matched_concept_ids: frozenset[int] = field(default_factory=frozenset)


@dataclass(frozen=True)
class Rejection:
    reason: str  # one of: empty, too_long, multi_output


class ChatClient(Protocol):
    def complete(self, request: PromptRequest) -> str: ...


class CaptionGenerationAborted(RuntimeError):
    """Endpoint died mid-run; carries everything generated so far."""

    def __init__(self, message: str, partial: list[CaptionRecord], done_concepts: set[int]):
        super().__init__(message)
        self.partial = partial
        self.done_concepts = done_concepts


def build_prompt(concept: str, sampling: SamplingParams | None = None) -> PromptRequest:
    """Fill the template with the concept; deterministic, byte-stable."""
    if not concept:
        raise ValueError("empty concept")
    if concept != normalize_text(concept):
        raise ValueError(f"concept not normalized: {concept!r}")
    return PromptRequest(
        concept=concept,
        prompt_text=PROMPT_TEMPLATE.format(concept=concept),
        sampling=sampling or SamplingParams(),
    )


def clean_caption(raw: str) -> str:
    """Cleaning pass applied to raw endpoint text.

    Order matters: collapse whitespace, strip a leading label like
    "Caption:", drop a leading quote, truncate at the first sentence
    terminator (which also removes trailing commentary), then drop any
    orphan trailing quotes.
    """
    text = " ".join(raw.split())
    text = _LABEL_RE.sub("", text)
    while text and text[0] in _QUOTE_CHARS:
        text = text[1:].lstrip()
    for i, ch in enumerate(text):
        if ch in _TERMINATORS:
            text = text[: i + 1]
            break
    return text.rstrip(_QUOTE_CHARS + " ")


def validate_caption(
    raw: str, concept: str, cfg: GenerationConfig
) -> CaptionRecord | Rejection:
    """Clean raw text and accept or reject it.

    Accepted records come back with placeholder id/source/attempt fields;
    the generation loop fills those in. Rejections carry one of the
    reasons {empty, too_long, multi_output} and are not errors.
    """
    if sum(1 for line in raw.splitlines() if line.strip()) >= 2:
        return Rejection("multi_output")
    text = clean_caption(raw)
    if not text:
        return Rejection("empty")
    if len(text.split()) > cfg.max_words:
        return Rejection("too_long")
    absent = not has_boundary_match(normalize_text(text), normalize_text(concept))
    return CaptionRecord(
        id=-1, text=text, source_concept_id=-1, attempt=0, concept_absent=absent
    )


def _request_for(concept: str, run_seed: int, n: int, attempt: int) -> PromptRequest:
    # Distinct seed per (slot, attempt) so retries can change the sample
    # while the run stays reproducible end to end.
    seed = derive_seed("caption-request", run_seed, concept, n, attempt) % 2**31
    return build_prompt(concept, SamplingParams(seed=seed))


def generate_captions(
    bank: ConceptBank,
    client: ChatClient,
    cfg: GenerationConfig,
    seed: int,
    concurrency: int = 4,
    skip_concepts: set[int] | None = None,
) -> list[CaptionRecord]:
    """Generate up to n_per_concept validated captions for every concept.

    Caption ids are `concept_id * n_per_concept + slot`, so they are
    stable under resume and shortfalls simply leave gaps. Requests run
    concurrently across concepts; duplicate texts (when cfg.dedup) are
    resolved in a second, sequential pass in (concept, slot) order so the
    output is identical no matter how threads interleave.

    ``skip_concepts`` supports resuming: those ids are not regenerated.
    """
    from .clients import EndpointError

    skip = skip_concepts or set()
    todo = [(cid, text) for cid, text in bank if cid not in skip]
    concept_texts = dict(todo)

    def first_valid(cid: int, concept: str) -> tuple[int, CaptionRecord | None, int]:
        """Return (slot result) tuples for one concept."""
        results = []
        for n in range(cfg.n_per_concept):
            record = None
            attempt = 0
            while attempt < cfg.max_attempts:
                attempt += 1
                raw = client.complete(_request_for(concept, seed, n, attempt))
                out = validate_caption(raw, concept, cfg)
                if isinstance(out, CaptionRecord):
                    if cfg.drop_concept_absent and out.concept_absent:
                        continue
                    record = replace(
                        out,
                        id=cid * cfg.n_per_concept + n,
                        source_concept_id=cid,
                        attempt=attempt,
                    )
                    break
            results.append((n, record, attempt))
        return results

    per_concept: dict[int, list] = {}
    aborted: Exception | None = None
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = [(cid, text, pool.submit(first_valid, cid, text)) for cid, text in todo]
        for cid, _text, fut in futures:
            try:
                per_concept[cid] = fut.result()
            except EndpointError as exc:
                aborted = exc
                for _, _, pending in futures:
                    pending.cancel()
                break

    def fail_with_partial(exc: Exception) -> CaptionGenerationAborted:
        partial = _dedup_pass(per_concept, concept_texts, cfg, client, seed, allow_requests=False)
        return CaptionGenerationAborted(
            f"chat endpoint unreachable mid-run: {exc}",
            partial=partial,
            done_concepts=set(per_concept) | skip,
        )

    if aborted is not None:
        raise fail_with_partial(aborted)

    try:
        return _dedup_pass(per_concept, concept_texts, cfg, client, seed, allow_requests=True)
    except EndpointError as exc:
        raise fail_with_partial(exc)


def _dedup_pass(
    per_concept: dict[int, list],
    concept_texts: dict[int, str],
    cfg: GenerationConfig,
    client: ChatClient,
    seed: int,
    allow_requests: bool,
) -> list[CaptionRecord]:
    """Sequential (concept, slot) sweep resolving duplicates deterministically."""
    records: list[CaptionRecord] = []
    seen: set[str] = set()
    for cid in sorted(per_concept):
        concept = concept_texts[cid]
        for n, record, attempts_used in per_concept[cid]:
            while (
                cfg.dedup
                and record is not None
                and record.text in seen
                and allow_requests
                and attempts_used < cfg.max_attempts
            ):
                attempts_used += 1
                raw = client.complete(_request_for(concept, seed, n, attempts_used))
                out = validate_caption(raw, concept, cfg)
                if isinstance(out, CaptionRecord) and not (
                    cfg.drop_concept_absent and out.concept_absent
                ):
                    record = replace(
                        out,
                        id=cid * cfg.n_per_concept + n,
                        source_concept_id=cid,
                        attempt=attempts_used,
                    )
                else:
                    record = None
            if record is None:
                log.warning("caption shortfall: concept %d slot %d", cid, n)
                continue
            if cfg.dedup and record.text in seen:
                log.warning("caption shortfall (duplicate): concept %d slot %d", cid, n)
                continue
            seen.add(record.text)
            records.append(record)
    records.sort(key=lambda r: r.id)
    return records


def captions_to_lines(records: Iterable[CaptionRecord]) -> list[str]:
    """Serialize as `id<TAB>concept_id<TAB>text` lines."""
    return [f"{r.id}\t{r.source_concept_id}\t{r.text}" for r in records]


def parse_caption_lines(lines: Iterable[str]) -> list[CaptionRecord]:
    records = []
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        cid, concept_id, text = line.split("\t", 2)
        records.append(
            CaptionRecord(
                id=int(cid), text=text, source_concept_id=int(concept_id), attempt=0
            )
        )
    return records
