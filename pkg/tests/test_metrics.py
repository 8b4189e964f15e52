import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vislang.metrics import (EvalReport, accuracy, clip_score, codebook_utilization, psnr,
                             rank_percentile_score)
from vislang.model import TokenMap


def test_accuracy_all_and_none():
    assert accuracy([("a", "a"), ("b", "b")]) == 1.0
    assert accuracy([("a", "b"), ("b", "a")]) == 0.0


def test_accuracy_three_of_four():
    episodes = [("cat", "cat"), ("dog", "dog"), ("fox", "fox"), ("owl", "cat")]
    assert accuracy(episodes) == 0.75


def test_accuracy_empty_rejected():
    with pytest.raises(ValueError):
        accuracy([])


def test_clip_score_identical_unit_vectors():
    v = np.array([1.0, 0.0, 0.0])
    assert clip_score(v, np.stack([v, v])) == pytest.approx(1.0, abs=1e-15)


def test_clip_score_orthogonal():
    assert clip_score(np.array([1.0, 0.0]), np.array([[0.0, 1.0]])) == pytest.approx(0.0, abs=1e-15)


def test_clip_score_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    img = rng.standard_normal(8)
    toks = rng.standard_normal((5, 8))
    expected = np.mean([
        float(img @ t) / (np.linalg.norm(img) * np.linalg.norm(t)) for t in toks
    ])
    assert clip_score(img, toks) == pytest.approx(expected, abs=1e-12)


def test_clip_score_scale_invariant():
    rng = np.random.default_rng(1)
    img = rng.standard_normal(6)
    toks = rng.standard_normal((4, 6))
    base = clip_score(img, toks)
    assert clip_score(img * 7.5, toks * 0.002) == pytest.approx(base, abs=1e-12)


def test_rank_percentile_score_top_for_aligned():
    rng = np.random.default_rng(2)
    vocab = rng.standard_normal((50, 6))
    img = vocab[3] * 2.0
    score = rank_percentile_score(img, [3], vocab, draws=200, seed=0)
    assert score > 0.95


def test_psnr_identical_images_inf():
    x = np.random.default_rng(3).uniform(0, 1, (3, 8, 8))
    assert psnr(x, x) == math.inf


def test_psnr_closed_form_20db():
    x = np.zeros((10, 10))
    y = np.full((10, 10), 0.1)  # MSE = 0.01
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-12)


def test_psnr_zero_vs_one():
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1)),
       arrays(np.float64, (3, 5), elements=st.floats(0, 1)))
def test_psnr_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_utilization_single_repeated_id():
    tm = TokenMap(np.array([0]), np.full((4, 4), 7, dtype=np.int64))
    hist, frac = codebook_utilization([tm], codebook_size=32)
    assert frac == 1 / 32
    assert hist[7] == 16 and hist.sum() == 16


def test_utilization_full_coverage():
    tm = TokenMap(np.array([0]), np.arange(16).reshape(4, 4))
    _, frac = codebook_utilization([tm], codebook_size=16)
    assert frac == 1.0


def test_utilization_histogram_sums_to_token_count():
    rng = np.random.default_rng(4)
    maps = [TokenMap(rng.integers(0, 64, 3), rng.integers(0, 64, (4, 4))) for _ in range(5)]
    hist, _ = codebook_utilization(maps, codebook_size=64)
    assert hist.sum() == 5 * 16
    ghist, _ = codebook_utilization(maps, codebook_size=64, which="global")
    assert ghist.sum() == 5 * 3


def test_report_roundtrip(tmp_path):
    report = EvalReport(task_accuracy={"classify": 0.75},
                        mean_clip_score=0.4,
                        psnr_values=[20.0, math.inf, 13.25],
                        utilization=0.5,
                        histogram=[1, 2, 3],
                        metadata={"run": "x"})
    path = tmp_path / "report.json"
    report.save(path)
    back = EvalReport.load(path)
    assert back == report
    assert back.psnr_values[1] == math.inf


def test_report_summary_text():
    report = EvalReport(task_accuracy={"classify": 1.0}, psnr_values=[10.0, 30.0])
    text = report.summary_text()
    assert "accuracy[classify] = 1.0000" in text
    assert "psnr" in text
