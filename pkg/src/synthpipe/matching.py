"""Multi-pattern concept matching over captions, plus corpus statistics.

The matcher is an Aho-Corasick automaton built once from the concept
bank. A caption is scanned in a single left-to-right pass regardless of
bank size; every occurrence of every concept is reported, then filtered
by a word-boundary rule: a match counts only when the characters next to
it (if any) are non-alphanumeric. This keeps "cat" from matching inside
"catalog", which would silently corrupt the balancing counts downstream.
Raw substring semantics remain available behind a flag for comparison.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .concepts import ConceptBank, normalize_text


def has_boundary_match(text: str, pattern: str, word_boundary: bool = True) -> bool:
    """True iff pattern occurs in text as a (boundary-respecting) substring.

    Both arguments are assumed already normalized. Shared by the caption
    validator so that "concept present" means the same thing everywhere.
    """
    if not pattern:
        return False
    start = text.find(pattern)
    while start != -1:
        if not word_boundary:
            return True
        end = start + len(pattern)
        left_ok = start == 0 or not text[start - 1].isalnum()
        right_ok = end == len(text) or not text[end].isalnum()
        if left_ok and right_ok:
            return True
        start = text.find(pattern, start + 1)
    return False


class Matcher:
    """Aho-Corasick automaton over the bank's normalized concepts.

    Immutable after construction and safe to share across threads.
    """

    def __init__(self, bank: ConceptBank, word_boundary: bool = True):
        self.bank = bank
        self.word_boundary = word_boundary
        self._pattern_len: list[int] = [len(text) for _, text in bank]
        # goto is a list of dicts char -> state; fail and out are parallel.
        self._goto: list[dict[str, int]] = [{}]
        self._fail: list[int] = [0]
        self._out: list[tuple[int, ...]] = [()]
        for cid, text in bank:
            self._insert(text, cid)
        self._build_links()

    def _insert(self, pattern: str, pattern_id: int) -> None:
        state = 0
        for ch in pattern:
            nxt = self._goto[state].get(ch)
            if nxt is None:
                nxt = len(self._goto)
                self._goto.append({})
                self._fail.append(0)
                self._out.append(())
                self._goto[state][ch] = nxt
            state = nxt
        self._out[state] = self._out[state] + (pattern_id,)

    def _build_links(self) -> None:
        # BFS from the root: a node's failure link is the longest proper
        # suffix of its path that is also a path in the trie. Outputs are
        # propagated along failure links so each state knows every
        # pattern ending at its position.
        queue: deque[int] = deque()
        for state in self._goto[0].values():
            self._fail[state] = 0
            queue.append(state)
        while queue:
            current = queue.popleft()
            for ch, nxt in self._goto[current].items():
                fallback = self._fail[current]
                while fallback and ch not in self._goto[fallback]:
                    fallback = self._fail[fallback]
                self._fail[nxt] = self._goto[fallback].get(ch, 0)
                if self._fail[nxt] == nxt:
                    self._fail[nxt] = 0
                self._out[nxt] = self._out[nxt] + self._out[self._fail[nxt]]
                queue.append(nxt)

    def match_caption(self, caption: str) -> set[int]:
        """Concept ids occurring in the caption (normalized internally)."""
        text = normalize_text(caption)
        matched: set[int] = set()
        state = 0
        n = len(text)
        for pos, ch in enumerate(text):
            while state and ch not in self._goto[state]:
                state = self._fail[state]
            state = self._goto[state].get(ch, 0)
            if not self._out[state]:
                continue
            end = pos + 1
            for pattern_id in self._out[state]:
                if pattern_id in matched:
                    continue
                if self.word_boundary:
                    start = end - self._pattern_len[pattern_id]
                    left_ok = start == 0 or not text[start - 1].isalnum()
                    right_ok = end == n or not text[end].isalnum()
                    if not (left_ok and right_ok):
                        continue
                matched.add(pattern_id)
        return matched


@dataclass(frozen=True)
class ConceptStats:
    """Per-concept appearance counts over a corpus plus coverage summaries.

    counts[c] is the number of captions containing concept c (a concept
    appearing twice in one caption counts once). coverage[k] is the
    number of concepts with count >= k. The average appearance is taken
    over concepts with count >= 25 and reported as 0 with avg_defined
    False when no concept reaches the threshold.
    """

    counts: dict[int, int]
    coverage: dict[int, int]
    avg_appearance_k25: float
    avg_defined: bool


COVERAGE_THRESHOLDS = (1, 25, 50)


def corpus_stats(matcher: Matcher, corpus: Iterable[str]) -> ConceptStats:
    counts = {cid: 0 for cid, _ in matcher.bank}
    for caption in corpus:
        for cid in matcher.match_caption(caption):
            counts[cid] += 1
    coverage = {
        k: sum(1 for v in counts.values() if v >= k) for k in COVERAGE_THRESHOLDS
    }
    tail = [v for v in counts.values() if v >= 25]
    if tail:
        return ConceptStats(counts, coverage, sum(tail) / len(tail), True)
    return ConceptStats(counts, coverage, 0.0, False)


def format_stats_table(stats: ConceptStats, dataset_name: str) -> str:
    """Plain-text table: coverage at k=1/25/50 and the k>=25 average."""
    avg = f"{stats.avg_appearance_k25:.1f}" if stats.avg_defined else "0 (undefined)"
    header = f"{'Dataset':<20}{'k=1':>10}{'k=25':>10}{'k=50':>10}{'Average Appearance k>=25':>28}"
    row = (
        f"{dataset_name:<20}{stats.coverage[1]:>10}{stats.coverage[25]:>10}"
        f"{stats.coverage[50]:>10}{avg:>28}"
    )
    return header + "\n" + row + "\n"
