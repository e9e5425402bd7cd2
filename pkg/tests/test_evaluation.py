import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanesnn.dataset import read_pgm
from lanesnn.evaluation import (
    best_threshold,
    confusion,
    evaluate,
    f_measure,
    fmt_num,
    iou,
    precision_recall,
    save_rate_masks,
    threshold_candidates,
    write_csv,
    write_pr_csv,
    write_report_csv,
)
from lanesnn.numerics import Rng


def test_confusion_counts_and_strictness():
    rates = np.array([0.0, 0.5, 0.5, 1.0])
    label = np.array([0.0, 1.0, 0.0, 1.0])
    # at th=0.5 the two 0.5 rates are NOT predicted (strict >)
    assert confusion(rates, label, 0.5) == (1, 0, 1, 2)
    assert confusion(rates, label, 0.4) == (2, 1, 0, 1)


def test_precision_recall_zero_denominators():
    assert precision_recall(0, 0, 0) == (0.0, 0.0)
    assert precision_recall(0, 0, 5) == (0.0, 0.0)
    assert precision_recall(3, 1, 0) == (0.75, 1.0)


def test_f_measure_values():
    assert f_measure(0.0, 0.0) == 0.0
    assert f_measure(1.0, 1.0) == 1.0
    assert f_measure(0.5, 1.0) == pytest.approx(2 / 3)


def test_candidate_grid_shape():
    cands = threshold_candidates(30)
    assert len(cands) == 32
    assert cands[0] == pytest.approx(-0.5 / 30)
    assert cands[0] < 0.0
    assert cands[-1] == 1.0
    assert cands[-2] == pytest.approx(29.5 / 30)
    with pytest.raises(ValueError):
        threshold_candidates(0)


def test_candidates_separate_every_attainable_rate():
    # between any two adjacent rates k/T there is exactly one candidate
    T = 12
    cands = np.array(threshold_candidates(T))
    rates = np.arange(T + 1) / T
    for lo, hi in zip(rates[:-1], rates[1:]):
        assert np.sum((cands > lo) & (cands < hi)) == 1


def dense_grid_best(rates, label, n=1000):
    """Brute-force threshold sweep over a uniform grid."""
    best_f = -1.0
    best_th = None
    for th in np.linspace(-0.01, 1.0, n):
        tp, fp, fn, _ = confusion(rates, label, th)
        f = f_measure(*precision_recall(tp, fp, fn))
        if f > best_f:
            best_f = f
            best_th = th
    return best_th, best_f


@given(seed=st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_candidate_sweep_matches_dense_grid(seed):
    T = 10
    rng = Rng(seed)
    rates = rng.integers(0, T + 1, size=60).astype(np.float64) / T
    label = (rng.uniform(size=60) < 0.3).astype(np.float64)
    th_c, f_c = best_threshold(rates, label, T)
    th_d, f_d = dense_grid_best(rates, label)
    assert f_c == pytest.approx(f_d, abs=1e-12)
    assert abs(th_c - th_d) <= 1.0 / T


def test_ties_resolve_to_the_smallest_threshold():
    # rates never in (0.35, 1.0): all candidates in that window tie
    rates = np.array([0.1, 1.0, 1.0])
    label = np.array([0.0, 1.0, 1.0])
    th, f = best_threshold(rates, label, 10)
    assert f == 1.0
    assert th == pytest.approx(0.15)


def test_iou_values():
    rates = np.array([0.9, 0.9, 0.1, 0.1])
    label = np.array([1.0, 0.0, 1.0, 0.0])
    assert iou(rates, label, 0.5) == pytest.approx(1 / 3)
    assert iou(rates, label, 0.95) == 0.0
    # empty prediction and empty label agree perfectly
    assert iou(np.zeros(4), np.zeros(4), 0.5) == 1.0


def test_perfect_prediction_scores_one():
    label = np.array([1.0, 0.0, 1.0, 0.0])
    report = evaluate([("a", label.copy())], [label], steps=10)
    assert report.mean_iou == 1.0
    assert report.rows[0].best_f == 1.0
    f_at = {th: f for th, _, _, f in report.pr_curve}
    # pooled curve contains the perfect point at the chosen threshold
    assert max(f_at.values()) == 1.0


def test_mean_threshold_protocol_hand_example():
    # image A is best cut low, image B high; both are scored at the average
    a = np.array([0.3, 0.0])
    la = np.array([1.0, 0.0])
    b = np.array([0.9, 0.6])
    lb = np.array([1.0, 0.0])
    report = evaluate([("a", a), ("b", b)], [la, lb], steps=10)
    tha = report.rows[0].best_th
    thb = report.rows[1].best_th
    # F=1 from 0.05 through 0.25 on image A; the tie picks 0.05
    assert tha == pytest.approx(0.05)
    assert thb == pytest.approx(0.65)
    assert report.mean_best_th == pytest.approx(0.35)
    assert report.rows[0].iou_at_mean_th == 0.0  # 0.3 > 0.35 fails
    assert report.rows[1].iou_at_mean_th == pytest.approx(0.5)
    assert report.mean_iou == pytest.approx(0.25)


def test_evaluate_validates_inputs():
    with pytest.raises(ValueError, match="same length"):
        evaluate([("a", np.zeros(4))], [], steps=5)
    with pytest.raises(ValueError, match="empty"):
        evaluate([], [], steps=5)


def test_number_formatting():
    assert fmt_num(0.25) == "0.25"
    assert fmt_num(1 / 3) == "0.333333"
    assert fmt_num(1234567.0) == "1.23457e+06"
    assert fmt_num(1) == "1"


def test_csv_writers_golden_strings(tmp_path):
    path = str(tmp_path / "t.csv")
    write_csv(path, ["a", "b"], [["1", "2"], ["3", "4"]])
    assert open(path, newline="").read() == "a,b\n1,2\n3,4\n"

    rates = np.array([1.0, 0.0])
    label = np.array([1.0, 0.0])
    report = evaluate([("img0", rates)], [label], steps=2)
    rp = str(tmp_path / "report.csv")
    write_report_csv(report, rp)
    lines = open(rp, newline="").read().split("\n")
    assert lines[0] == "image_id,best_th,iou_at_mean_th"
    assert lines[1].startswith("img0,")
    assert lines[2].startswith("mean,")
    assert lines[-1] == ""

    pp = str(tmp_path / "pr.csv")
    write_pr_csv(report, pp)
    lines = open(pp, newline="").read().split("\n")
    assert lines[0] == "threshold,precision,recall,f_measure"
    assert len(lines) == len(report.pr_curve) + 2


def test_rate_masks_round_trip(tmp_path):
    rates = np.array([0.0, 0.5, 1.0, 0.25]).reshape(2, 2)
    out = str(tmp_path / "masks")
    save_rate_masks([("img7", rates.reshape(-1))], (2, 2), 0.4, out)
    gray = read_pgm(str(tmp_path / "masks" / "img7.pgm"))
    assert gray.tolist() == [[0, 128], [255, 64]]
    binary = read_pgm(str(tmp_path / "masks" / "img7.bin.pgm"))
    assert binary.tolist() == [[0, 255], [255, 0]]
