import numpy as np
import pytest

from synthpipe.evaluation import (
    DEFAULT_TEMPLATE,
    MetricsReport,
    delta_mtl,
    linear_probe,
    recall_at_k,
    zero_shot_classify,
)
from synthpipe.trainer import D_IMAGE, D_TEXT, EncoderParams

# Task-level averages of the published benchmark tables; model rows are
# the large synthetic run, baselines the two real-data runs.
MODEL_30M = MetricsReport(75.0, 84.9, 61.7, 77.1, 30.5)
MODEL_3M = MetricsReport(63.7, 73.8, 33.9, 46.0, 9.5)
BASELINE_CC3M = MetricsReport(63.3, 74.2, 33.7, 42.9, 14.9)
BASELINE_CC12M = MetricsReport(76.7, 84.9, 58.9, 71.7, 33.6)


def _unit_rows(rng, n, d):
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


# --- retrieval ---------------------------------------------------------------


def test_recall_identity_pairing_is_100():
    rng = np.random.default_rng(0)
    h = _unit_rows(rng, 12, 8)
    r = recall_at_k(h, h, 1)
    assert r.image_to_text == 100.0
    assert r.text_to_image == 100.0


def test_recall_k_at_least_n_is_100():
    rng = np.random.default_rng(1)
    h = _unit_rows(rng, 6, 4)
    z = _unit_rows(rng, 6, 4)
    r = recall_at_k(h, z, 6)
    assert r.image_to_text == 100.0
    assert r.text_to_image == 100.0


def test_recall_hand_similarity_matrix():
    # Rank by rows of a fixed 3x3 similarity matrix: every diagonal entry
    # wins its row, so image->text R@1 is 100%.
    sims = np.array([[0.9, 0.1, 0.2], [0.3, 0.8, 0.1], [0.2, 0.2, 0.4]])
    # Construct H, Z with H @ Z.T == sims: H = sims, Z = I (rows not unit
    # norm, but recall only uses the inner products).
    h = sims
    z = np.eye(3)
    r = recall_at_k(h, z, 1)
    assert r.image_to_text == 100.0
    # text->image ranks columns: column 2's diagonal 0.4 beats 0.2, 0.1;
    # columns 0 and 1 also won by diagonal -> 100% as well
    assert r.text_to_image == 100.0


def test_recall_tie_broken_by_lower_index():
    sims = np.array([[0.5, 0.5], [0.5, 0.5]])
    r = recall_at_k(sims, np.eye(2), 1)
    # row 0: tie at index 0 -> query 0 succeeds; row 1: index 0 precedes -> fails
    assert r.image_to_text == 50.0


def test_recall_monotone_in_k():
    rng = np.random.default_rng(2)
    h = _unit_rows(rng, 30, 6)
    z = _unit_rows(rng, 30, 6)
    values = [recall_at_k(h, z, k).image_to_text for k in range(1, 31)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert values[-1] == 100.0


def test_recall_empty_errors():
    with pytest.raises(ValueError):
        recall_at_k(np.zeros((0, 4)), np.zeros((0, 4)), 1)


# --- zero-shot ---------------------------------------------------------------


def _identity_params(d=16):
    rng = np.random.default_rng(123)
    return EncoderParams(
        w_text=rng.normal(size=(d, D_TEXT)) / np.sqrt(D_TEXT),
        w_image=rng.normal(size=(d, D_IMAGE)) / np.sqrt(D_IMAGE),
        log_tau=0.0,
    )


def test_zero_shot_single_class_is_100():
    rng = np.random.default_rng(4)
    params = _identity_params()
    feats = rng.normal(size=(5, D_IMAGE))
    acc = zero_shot_classify(params, feats, [0] * 5, ["cat"])
    assert acc == 100.0


def test_zero_shot_empty_class_list_errors():
    params = _identity_params()
    with pytest.raises(ValueError):
        zero_shot_classify(params, np.zeros((1, D_IMAGE)), [0], [])


def test_zero_shot_untrained_is_chance_level():
    # 10 classes, random encoders: accuracy concentrates near 10% chance.
    rng = np.random.default_rng(9)
    class_names = [f"class{i}" for i in range(10)]
    accs = []
    for seed in range(20):
        local = np.random.default_rng(seed)
        params = EncoderParams(
            w_text=local.normal(size=(8, D_TEXT)),
            w_image=local.normal(size=(8, D_IMAGE)),
            log_tau=0.0,
        )
        feats = rng.normal(size=(500, D_IMAGE))
        labels = rng.integers(0, 10, size=500)
        accs.append(zero_shot_classify(params, feats, labels, class_names))
    mean_acc = float(np.mean(accs))
    assert 5.0 <= mean_acc <= 15.0


def test_zero_shot_uses_template():
    assert DEFAULT_TEMPLATE.format(label="cat") == "a photo of a cat"


# --- linear probe ------------------------------------------------------------


def _blobs(rng, n_per_class, centers, spread=0.05):
    feats, labels = [], []
    for label, center in enumerate(centers):
        pts = center + spread * rng.normal(size=(n_per_class, len(center)))
        feats.append(pts)
        labels += [label] * n_per_class
    return np.vstack(feats), np.array(labels)


def test_probe_separable_blobs_100():
    rng = np.random.default_rng(0)
    feats, labels = _blobs(rng, 30, [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    assert linear_probe(feats, labels) == 100.0


def test_probe_shots_all_equals_unrestricted():
    rng = np.random.default_rng(1)
    feats, labels = _blobs(rng, 20, [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])], spread=0.4)
    assert linear_probe(feats, labels, shots=20, seed=3) == linear_probe(feats, labels)


def test_probe_deterministic():
    rng = np.random.default_rng(2)
    feats, labels = _blobs(rng, 25, [np.array([1.0, 0.0]), np.array([0.3, 0.9])], spread=0.3)
    a = linear_probe(feats, labels, shots=5, seed=7)
    b = linear_probe(feats, labels, shots=5, seed=7)
    assert a == b


def test_probe_too_few_examples_for_shots_errors():
    rng = np.random.default_rng(3)
    feats, labels = _blobs(rng, 3, [np.array([1.0, 0.0]), np.array([0.0, 1.0])])
    with pytest.raises(ValueError, match="fewer than shots"):
        linear_probe(feats, labels, shots=5)


def test_probe_few_shot_generalizes_on_blobs():
    rng = np.random.default_rng(5)
    feats, labels = _blobs(rng, 40, [np.array([1.0, 0.0]), np.array([0.0, 1.0])], spread=0.1)
    acc = linear_probe(feats, labels, shots=5, seed=0)
    assert acc > 95.0


# --- the aggregate -----------------------------------------------------------


def test_delta_mtl_published_30m_vs_cc3m():
    # Recomputed from the task averages; the published table says +60.1%.
    value = delta_mtl(MODEL_30M, BASELINE_CC3M)
    assert round(value, 1) == 60.1


def test_delta_mtl_published_30m_vs_cc12m():
    # +0.17 recomputed, published as +0.20 after table-level rounding.
    value = delta_mtl(MODEL_30M, BASELINE_CC12M)
    assert value == pytest.approx(0.17, abs=0.05)
    assert abs(value - 0.2) <= 0.1


def test_delta_mtl_published_3m_vs_cc3m():
    # -5.67 recomputed vs published -5.60.
    value = delta_mtl(MODEL_3M, BASELINE_CC3M)
    assert value == pytest.approx(-5.67, abs=0.05)
    assert abs(value - (-5.60)) <= 0.2


def test_delta_mtl_identity_is_zero():
    assert delta_mtl(MODEL_30M, MODEL_30M) == 0.0


def test_delta_mtl_rescaling_invariance():
    # Scaling one slot by a common positive factor in model and baseline
    # leaves the aggregate unchanged.
    scaled_model = MetricsReport(75.0 * 3, 84.9, 61.7, 77.1, 30.5)
    scaled_base = MetricsReport(63.3 * 3, 74.2, 33.7, 42.9, 14.9)
    assert delta_mtl(scaled_model, scaled_base) == pytest.approx(
        delta_mtl(MODEL_30M, BASELINE_CC3M), abs=1e-12
    )


def test_delta_mtl_zero_baseline_errors():
    bad = MetricsReport(1.0, 1.0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        delta_mtl(MODEL_30M, bad)


def test_metrics_report_rejects_non_finite():
    with pytest.raises(ValueError, match="finite"):
        MetricsReport(1.0, 2.0, float("nan"), 4.0, 5.0)
    with pytest.raises(ValueError, match="flag per task"):
        MetricsReport(1.0, 2.0, 3.0, 4.0, 5.0, lower_is_better=(False,))


def test_metrics_report_line_round_trip():
    lines = MODEL_30M.to_lines()
    assert lines[0] == "lin_prob\t75"
    parsed = MetricsReport.from_lines(lines)
    assert parsed == MODEL_30M
    assert "75.00" in MODEL_30M.table()
