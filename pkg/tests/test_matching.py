import random

from synthpipe.concepts import load_concepts, normalize_text
from synthpipe.matching import (
    ConceptStats,
    Matcher,
    corpus_stats,
    format_stats_table,
    has_boundary_match,
)

from conftest import WORDS, naive_boundary_scan


def ids_to_texts(bank, ids):
    return sorted(bank.text_of(i) for i in ids)


def test_paper_example_bird_tree():
    bank = load_concepts(["bird", "tree", "cat"])
    matcher = Matcher(bank)
    got = matcher.match_caption("a bird is resting on a tree")
    assert ids_to_texts(bank, got) == ["bird", "tree"]


def test_empty_caption():
    matcher = Matcher(load_concepts(["bird"]))
    assert matcher.match_caption("") == set()


def test_word_boundary_blocks_embedded_match():
    bank = load_concepts(["cat"])
    matcher = Matcher(bank)
    text = "a catalog of categories"
    assert matcher.match_caption(text) == set()
    assert naive_boundary_scan(normalize_text(text), dict(bank.concepts)) == set()
    assert matcher.match_caption("a cat, a dog") == {0}


def test_raw_substring_mode():
    bank = load_concepts(["cat"])
    raw = Matcher(bank, word_boundary=False)
    assert raw.match_caption("a catalog") == {0}


def test_multiword_concepts_match_across_spaces():
    bank = load_concepts(["eiffel tower", "tower"])
    matcher = Matcher(bank)
    got = matcher.match_caption("the  Eiffel   Tower at dusk")
    assert ids_to_texts(bank, got) == ["eiffel tower", "tower"]


def test_overlapping_and_nested_patterns():
    bank = load_concepts(["sea", "sea lion", "lion", "a sea lion cub"])
    matcher = Matcher(bank)
    text = "a sea lion cub sleeps"
    expected = naive_boundary_scan(normalize_text(text), dict(bank.concepts))
    assert matcher.match_caption(text) == expected
    assert ids_to_texts(bank, expected) == ["a sea lion cub", "lion", "sea", "sea lion"]


def _random_instances(rng, n_banks, captions_per_bank, max_concepts=200, max_words=40):
    """Random (bank, caption) pairs whose captions reuse bank fragments so
    boundary cases (substrings, shared prefixes) actually occur."""
    vocab = WORDS + [w[:4] for w in WORDS] + [w + "s" for w in WORDS[:50]]
    for _ in range(n_banks):
        size = rng.randint(1, max_concepts)
        concepts = set()
        while len(concepts) < size:
            if rng.random() < 0.3:
                concepts.add(rng.choice(vocab) + " " + rng.choice(vocab))
            else:
                concepts.add(rng.choice(vocab))
        bank = load_concepts(sorted(concepts))
        matcher = Matcher(bank)
        for _ in range(captions_per_bank):
            n_words = rng.randint(0, max_words)
            words = [rng.choice(vocab) for _ in range(n_words)]
            caption = " ".join(words)
            if rng.random() < 0.3:
                caption = caption.replace(" ", "", 1)  # glue two words together
            yield bank, matcher, caption


def test_automaton_equals_naive_scan_randomized():
    rng = random.Random(1234)
    checked = 0
    for bank, matcher, caption in _random_instances(rng, n_banks=30, captions_per_bank=40):
        expected = naive_boundary_scan(normalize_text(caption), dict(bank.concepts))
        assert matcher.match_caption(caption) == expected, (caption, bank.texts())
        checked += 1
    assert checked == 1200


def test_single_pass_over_caption_text():
    # Structural check: the automaton consumes each character of the
    # normalized caption exactly once, independent of bank size.
    consumed = []

    class CountingStr(str):
        def __iter__(self):
            for ch in super().__iter__():
                consumed.append(ch)
                yield ch

    bank = load_concepts(WORDS)
    matcher = Matcher(bank)
    caption = "the walrus waits near the lighthouse with a violin"
    import synthpipe.matching as matching_mod

    original = matching_mod.normalize_text
    matching_mod.normalize_text = lambda text: CountingStr(original(text))
    try:
        matcher.match_caption(caption)
    finally:
        matching_mod.normalize_text = original
    assert len(consumed) == len(original(caption))


def test_corpus_stats_hand_counts():
    bank = load_concepts(["bird", "tree"])
    matcher = Matcher(bank)
    stats = corpus_stats(matcher, ["a bird", "a bird and a tree", "tree"])
    assert stats.counts == {0: 2, 1: 2}
    assert stats.coverage[1] == 2
    assert stats.coverage[25] == 0
    assert not stats.avg_defined


def test_corpus_stats_empty_corpus():
    bank = load_concepts(["bird", "tree"])
    stats = corpus_stats(Matcher(bank), [])
    assert all(v == 0 for v in stats.counts.values())
    assert stats.coverage[1] == 0
    assert stats.avg_appearance_k25 == 0.0
    assert not stats.avg_defined


def test_corpus_stats_counts_once_per_caption():
    bank = load_concepts(["bird"])
    stats = corpus_stats(Matcher(bank), ["bird bird bird"])
    assert stats.counts[0] == 1


def test_corpus_stats_matches_naive_recount_10k():
    bank = load_concepts(WORDS[:60])
    matcher = Matcher(bank)
    rng = random.Random(99)
    corpus = [
        " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 12)))
        for _ in range(10_000)
    ]
    stats = corpus_stats(matcher, corpus)
    patterns = dict(bank.concepts)
    recount = {cid: 0 for cid in patterns}
    for caption in corpus:
        for cid in naive_boundary_scan(normalize_text(caption), patterns):
            recount[cid] += 1
    assert stats.counts == recount
    for k in (1, 25, 50):
        assert stats.coverage[k] == sum(1 for v in recount.values() if v >= k)
    tail = [v for v in recount.values() if v >= 25]
    assert stats.avg_appearance_k25 == sum(tail) / len(tail)
    assert stats.avg_appearance_k25 >= 25


def test_stats_order_independence():
    bank = load_concepts(WORDS[:20])
    matcher = Matcher(bank)
    corpus = [f"a {w} and a {v}" for w in WORDS[:20] for v in WORDS[5:15]]
    forward = corpus_stats(matcher, corpus)
    backward = corpus_stats(matcher, list(reversed(corpus)))
    assert forward == backward


def test_stats_table_format():
    stats = ConceptStats(counts={}, coverage={1: 300, 25: 36, 50: 23}, avg_appearance_k25=1000.0, avg_defined=True)
    table = format_stats_table(stats, "demo")
    assert "k=1" in table and "k=25" in table and "k=50" in table
    assert "1000.0" in table and "demo" in table


def test_has_boundary_match_helper():
    assert has_boundary_match("a cat sat", "cat")
    assert not has_boundary_match("a catalog", "cat")
    assert has_boundary_match("a catalog", "cat", word_boundary=False)
    assert has_boundary_match("cat", "cat")
    assert not has_boundary_match("", "cat")
