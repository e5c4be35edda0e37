import math

import pytest

import moelab


def test_pass_at_k_values():
    assert moelab.pass_at_k(5, 2, 2) == pytest.approx(0.7, abs=1e-12)
    assert moelab.pass_at_k(10, 0, 3) == 0.0
    assert moelab.pass_at_k(10, 10, 1) == 1.0
    assert moelab.pass_at_k(8, 3, 1) == pytest.approx(3 / 8, abs=1e-12)
    curve = [moelab.pass_at_k(20, 6, k) for k in range(1, 21)]
    assert curve == sorted(curve)
    assert moelab.pass_at_k(40, 13, 7) == pytest.approx(
        moelab.pass_at_k_log(40, 13, 7), abs=1e-12
    )


def test_input_validation_raises():
    with pytest.raises(moelab.MoelabError):
        moelab.pass_at_k(0, 0, 1)
    with pytest.raises(moelab.MoelabError):
        moelab.pass_at_k(5, 2, 6)
    with pytest.raises(moelab.MoelabError):
        moelab.epo_loss(0.5, [0, 1], [2], [0.0] * 4, [0.0] * 4, 0.1)


def test_bootstrap_ci_degenerate_and_ordered():
    lo, hi = moelab.bootstrap_ci([(0, 10, 10), (1, 10, 10)], k=1, resamples=200, seed=7)
    assert (lo, hi) == (1.0, 1.0)
    lo, hi = moelab.bootstrap_ci([(0, 20, 10)], k=1, resamples=2000, seed=7)
    assert lo <= hi
    assert 0.0 <= lo and hi <= 1.0


def test_preference_loss_reference_point():
    scores = [0.3, -1.2, 0.8, 0.1, -0.4, 2.0]
    assert moelab.epo_loss(0.5, [1, 4], [2, 5], scores, scores, 0.1) == pytest.approx(
        0.5 * math.log(2), abs=1e-9
    )
    grad = moelab.epo_score_grad(0.5, [1, 4], [2, 5], scores, scores, 0.1)
    assert grad[0] == 0.0 and grad[3] == 0.0  # off-support experts
    assert sum(grad) == pytest.approx(0.0, abs=1e-15)


def test_summarize_candidates_fixture():
    s = moelab.summarize_candidates(0.30, [0.25, 0.60, 0.30, 0.45], hi=0.9, lo=0.5)
    assert s["p_best"] == pytest.approx(0.60)
    assert s["gap"] == pytest.approx(0.30)
    assert s["rank"] == 3
    assert s["p_bar"] == pytest.approx(0.40)
    assert s["bin"] == "Fragile"
    assert moelab.summarize_candidates(0.9, [0.95, 0.95])["bin"] == "Confident"


def test_gumbel_top_k_collapses():
    scores = [0.5, 2.0, -1.0, 1.5, 0.9]
    assert moelab.gumbel_top_k(scores, 2, seed=3, scale=1e-12) == [1, 3]
    probs = moelab.softmax(scores)
    assert sum(probs) == pytest.approx(1.0, abs=1e-12)


def test_switch_lb_balanced_minimum():
    f = [0.25] * 4
    p = [0.25] * 4
    balanced = moelab.switch_lb_loss(f, p, tokens=10, k=1, lambda_=0.01)
    assert balanced == pytest.approx(0.01, abs=1e-15)
    collapsed = moelab.switch_lb_loss([1.0, 0, 0, 0], [1.0, 0, 0, 0], 10, 1, 0.01)
    assert collapsed > balanced
    assert moelab.lb_grad(p, f, 1.0, 1) == [0.0] * 4


def test_full_pipeline_smoke(tmp_path):
    paths = moelab.run_pipeline(str(tmp_path), profile="smoke")
    with open(paths["report_bins"]) as fh:
        assert fh.readline().rstrip("\n") == "metric,Confident,Ambiguous,Fragile"
    curve = moelab.load_curve_csv(paths["passk_standard_curve"])
    assert curve["k_values"] == [1, 2, 4, 8, 16, 32]
    assert all(0.0 <= m <= 1.0 for m in curve["mean"])
    assert curve["mean"] == sorted(curve["mean"])
    assert moelab.file_hash_hex(paths["checkpoint_standard"]) != moelab.file_hash_hex(
        paths["checkpoint_epo"]
    )
