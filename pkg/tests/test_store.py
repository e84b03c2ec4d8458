import numpy as np
import pytest

from synthpipe.store import (
    DatasetStore,
    ManifestEntry,
    decode_ppm,
    encode_ppm,
    read_manifest,
    sha256_bytes,
    verify_dataset,
    write_manifest,
)


def _entry(cid, status="ok", path=None, checksum="c" * 64):
    return ManifestEntry(
        caption_id=cid,
        concept_id=cid % 3,
        caption=f"caption number {cid}.",
        image_path=path if path is not None else f"images/{cid}.ppm",
        checksum=checksum,
        backend="mock",
        seed=cid * 31,
        status=status,
    )


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.tsv"
    entries = [_entry(2), _entry(0), _entry(1)]
    write_manifest(path, entries)
    got = read_manifest(path)
    assert got == sorted(entries, key=lambda e: e.caption_id)


def test_manifest_sorts_unsorted_input(tmp_path):
    path = tmp_path / "manifest.tsv"
    write_manifest(path, [_entry(5), _entry(1), _entry(3)])
    assert [e.caption_id for e in read_manifest(path)] == [1, 3, 5]


def test_manifest_duplicate_caption_id_errors(tmp_path):
    with pytest.raises(ValueError, match="duplicate caption_id"):
        write_manifest(tmp_path / "m.tsv", [_entry(1), _entry(1, path="images/x.ppm")])


def test_manifest_rejects_tab_in_caption(tmp_path):
    bad = ManifestEntry(1, 0, "has\ttab", "images/1.ppm", "c" * 64, "mock", 0, "ok")
    with pytest.raises(ValueError, match="tab"):
        write_manifest(tmp_path / "m.tsv", [bad])


def test_manifest_rewrite_is_atomic(tmp_path):
    path = tmp_path / "manifest.tsv"
    write_manifest(path, [_entry(1)])
    before = path.read_bytes()
    with pytest.raises(ValueError):
        write_manifest(path, [_entry(2), _entry(2, path="images/other.ppm")])
    assert path.read_bytes() == before  # failed rewrite left the file intact


def test_ppm_round_trip():
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(16, 24, 3), dtype=np.uint8)
    data = encode_ppm(pixels)
    assert data.startswith(b"P6\n24 16\n255\n")
    assert np.array_equal(decode_ppm(data), pixels)


def test_ppm_rejects_bad_input():
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        decode_ppm(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError, match="truncated"):
        decode_ppm(b"P6\n4 4\n255\n\x00\x00")


def _write_dataset(tmp_path, n=4):
    store = DatasetStore(tmp_path)
    store.prepare()
    entries = []
    for cid in range(n):
        pixels = np.full((8, 8, 3), 10 * cid, dtype=np.uint8)
        data = encode_ppm(pixels)
        rel = store.write_image(cid, data)
        entries.append(_entry(cid, path=rel, checksum=sha256_bytes(data)))
    write_manifest(store.manifest_path, entries)
    return store, entries


def test_verify_clean_dataset(tmp_path):
    store, entries = _write_dataset(tmp_path)
    report = verify_dataset(store.manifest_path, store.root)
    assert report.ok_count == len(entries)
    assert report.failed_count == 0
    assert report.corrupt == []


def test_verify_detects_flipped_byte(tmp_path):
    store, entries = _write_dataset(tmp_path)
    target = store.root / entries[2].image_path
    blob = bytearray(target.read_bytes())
    blob[-1] ^= 0xFF
    target.write_bytes(bytes(blob))
    report = verify_dataset(store.manifest_path, store.root)
    assert (2, "checksum_mismatch") in report.corrupt
    assert report.ok_count == len(entries) - 1


def test_verify_detects_missing_file(tmp_path):
    store, entries = _write_dataset(tmp_path)
    (store.root / entries[1].image_path).unlink()
    report = verify_dataset(store.manifest_path, store.root)
    assert (1, "missing") in report.corrupt


def test_verify_skips_failed_entries(tmp_path):
    store, entries = _write_dataset(tmp_path, n=2)
    entries.append(_entry(9, status="failed", path="-", checksum="-"))
    write_manifest(store.manifest_path, entries)
    report = verify_dataset(store.manifest_path, store.root)
    assert report.failed_count == 1
    assert report.ok_count == 2


def test_load_entries_tolerates_torn_tail(tmp_path):
    store, entries = _write_dataset(tmp_path, n=3)
    with open(store.manifest_path, "a", encoding="utf-8") as f:
        f.write("17\t0\thalf a row")  # no newline, missing fields
    got = store.load_entries()
    assert [e.caption_id for e in got] == [0, 1, 2]
