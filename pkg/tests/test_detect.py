import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from caedet.data import FrameSequence
from caedet.detect import (SCORE_HEADER, FrameScore, equal_error_rate, evaluate, fit_threshold,
                           normalize_scores, read_scores_csv, roc_auc, roc_curve, score_frames,
                           write_scores_csv)
from caedet.errors import DimensionError, DomainError
from caedet.model import AutoencoderModel


def pairwise_auc(scores, labels):
    """Brute-force count over every positive/negative pair, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert abs(roc_auc([0.4, 0.3, 0.2, 0.1], [1, 0, 1, 0]) - 0.75) < 1e-9
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.2], [0, 0]) is None


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 30), elements=st.sampled_from([0.0, 0.1, 0.5, 0.7, 1.0])),
       st.integers(0, 2**32 - 1))
def test_auc_matches_pairwise_count(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, size=scores.size)
    if labels.all() or not labels.any():
        labels[0] = 1 - labels[0]
    assert abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.1, 2.0, size=40)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    base = roc_auc(raw, labels)
    assert roc_auc(np.exp(3 * raw), labels) == base
    assert roc_auc(np.log(raw) * 2 + 7, labels) == base
    assert roc_auc(normalize_scores(raw), labels) == base
    np.testing.assert_array_equal(np.argsort(raw), np.argsort(normalize_scores(raw)))


def test_normalize():
    np.testing.assert_allclose(normalize_scores([2.0, 4.0, 3.0]), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(normalize_scores([1.5, 1.5]), [0.5, 0.5])


def test_fit_threshold():
    assert fit_threshold([0, 0.25, 0.5, 0.75, 1.0], 0.5) == 0.5
    assert fit_threshold([0.3, 0.9, 0.1], 1.0) == 0.9
    u = np.random.default_rng(0).uniform(size=1000)
    assert abs(fit_threshold(u, 0.99) - 0.99) < 0.02
    # linear interpolation between order statistics
    assert fit_threshold([0.0, 1.0], 0.25) == 0.25
    with pytest.raises(DomainError):
        fit_threshold([], 0.5)
    with pytest.raises(DomainError):
        fit_threshold([0.1], 1.5)


def test_evaluate_perfect_separation():
    r = evaluate([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 0.5)
    assert r.accuracy == 1.0 and r.auc == 1.0 and r.precision == 1.0 and r.recall == 1.0
    assert r.eer == 0.0 and r.n_anomalous == 2 and r.n_frames == 4


def test_evaluate_threshold_extremes():
    rng = np.random.default_rng(1)
    s, y = rng.uniform(size=50), rng.integers(0, 2, size=50)
    assert evaluate(s, y, s.min() - 1).accuracy == pytest.approx(y.mean())
    assert evaluate(s, y, s.max()).accuracy == pytest.approx(1 - y.mean())


def test_evaluate_errors_and_single_class():
    with pytest.raises(DimensionError):
        evaluate([0.1, 0.2], [0], 0.5)
    r = evaluate([0.1, 0.7], [0, 0], 0.5)
    assert r.auc is None and r.eer is None and r.accuracy == 0.5


def test_eer_on_roc():
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = rng.normal(size=60)
        y = (s + rng.normal(size=60) > 0).astype(int)
        eer = equal_error_rate(s, y)
        fpr, tpr = roc_curve(s, y)
        assert 0 <= eer <= 1
        fnr = 1 - tpr
        # (eer, 1 - eer) lies on a segment of the piecewise-linear ROC where fpr - fnr changes sign
        d = fpr - fnr
        i = int(np.argmax(d >= 0))
        t = 0.0 if d[i] == 0 or i == 0 else -d[i - 1] / (d[i] - d[i - 1])
        point = (fpr[i - 1] + t * (fpr[i] - fpr[i - 1]), fnr[i - 1] + t * (fnr[i] - fnr[i - 1])) if i else (fpr[0], fnr[0])
        assert abs(point[0] - eer) < 1e-9 and abs(point[1] - eer) < 1e-9


def test_eer_symmetric_case():
    # positives 0.6, 0.4 and negatives 0.5, 0.3: one crossing at fpr = fnr = 0.5
    assert equal_error_rate([0.6, 0.5, 0.4, 0.3], [1, 0, 1, 0]) == pytest.approx(0.5)


def test_score_frames_and_csv(tmp_path):
    model = AutoencoderModel((16, 16, 1), 32, 8, seed=0, dtype=np.float32)
    rng = np.random.default_rng(0)
    frames = rng.uniform(size=(3, 16, 16, 1)).astype(np.float32)
    clips = [FrameSequence("a", frames, (16, 16)), FrameSequence("b", frames.copy(), (16, 16))]
    scores = score_frames(model, clips)
    assert [(s.clip_id, s.frame) for s in scores] == [("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 1), ("b", 2)]
    # duplicated frames score identically
    assert [s.raw_error for s in scores[:3]] == [s.raw_error for s in scores[3:]]
    norm = np.array([s.normalized_score for s in scores])
    assert norm.min() == 0.0 and norm.max() == 1.0
    assert scores[int(np.argmin([s.raw_error for s in scores]))].normalized_score == 0.0
    with pytest.raises(DomainError):
        score_frames(model, [])

    path = tmp_path / "s.csv"
    write_scores_csv(path, scores, labels=[0, 1, 0, 0, 1, 0], threshold=0.5)
    assert path.read_text().splitlines()[0] == ",".join(SCORE_HEADER)
    rows = read_scores_csv(path)
    assert len(rows) == 6 and float(rows[0]["raw_error"]) == scores[0].raw_error
    assert rows[1]["prediction"] == str(int(scores[1].normalized_score > 0.5))


def test_evaluate_keeps_traces():
    scores = [FrameScore("x", 0, 1.0, 0.2), FrameScore("x", 1, 2.0, 0.9), FrameScore("y", 0, 0.5, 0.0)]
    r = evaluate(scores, [0, 1, 0], 0.5)
    assert r.accuracy == 1.0
    np.testing.assert_array_equal(r.traces["x"], [0.2, 0.9])
