from fractions import Fraction

import numpy as np
import pytest

from masv.errors import ContractError, ParseError
from masv.metrics import (DcfConfig, Trial, TrialSet, compute_eer, compute_min_dcf, cosine_score, eer_with_threshold,
                          metrics_report, operating_points, read_trials, write_metrics, write_trials)


# -- brute-force oracles -----------------------------------------------------------------

def brute_points(scores, labels):
    """Exact (P_fa, P_miss) for every threshold: each score value and +inf."""
    n_t = sum(1 for lab in labels if lab)
    n_n = len(labels) - n_t
    pts = set()
    for th in sorted(set(scores)) + [float("inf")]:
        fa = sum(1 for s, lab in zip(scores, labels) if not lab and s >= th)
        miss = sum(1 for s, lab in zip(scores, labels) if lab and s < th)
        pts.add((Fraction(fa, n_n), Fraction(miss, n_t)))
    return pts


def brute_eer(scores, labels):
    """Lowest point where any segment between two operating points meets P_fa == P_miss.

    Every such segment lies inside the ROC convex hull, and the hull's lowest
    diagonal point sits on one of them, so the minimum is the hull EER.
    """
    pts = list(brute_points(scores, labels))
    best = None
    for x1, y1 in pts:
        for x2, y2 in pts:
            d1, d2 = x1 - y1, x2 - y2
            if d1 <= 0 <= d2:
                if d1 == d2:
                    v = x1
                else:
                    lam = d1 / (d1 - d2)
                    v = x1 + lam * (x2 - x1)
                best = v if best is None else min(best, v)
    return best


def brute_min_dcf(scores, labels, cfg=DcfConfig()):
    p = Fraction(cfg.p_target)
    cm, cf = Fraction(cfg.c_miss), Fraction(cfg.c_fa)
    norm = min(cm * p, cf * (1 - p))
    return min((cm * p * miss + cf * (1 - p) * fa) / norm for fa, miss in brute_points(scores, labels))


def random_case(rng, n=None, ties=False):
    n = n or int(rng.integers(2, 13))
    labels = rng.permutation(np.r_[1, 0, rng.integers(0, 2, n - 2)]).astype(bool)
    scores = rng.integers(0, 4, n) / 4.0 if ties else rng.normal(size=n)
    return scores, labels


# -- EER ----------------------------------------------------------------------------------------

def test_interpolated_example():
    scores = [0.9, 0.8, 0.85, 0.1]
    labels = [1, 1, 0, 0]
    assert compute_eer(scores, labels) == 0.25
    assert brute_eer(scores, [bool(x) for x in labels]) == Fraction(1, 4)


def test_perfect_separation_and_total_inversion():
    assert compute_eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0
    assert compute_min_dcf([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0
    # Fully inverted scores: the hull chord between accept-all and reject-all caps the EER at 0.5.
    assert compute_eer([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.5


@pytest.mark.parametrize("ties", [False, True])
def test_matches_brute_force_oracle(ties):
    rng = np.random.default_rng(0 if not ties else 1)
    for _ in range(300):
        s, lab = random_case(rng, ties=ties)
        assert compute_eer(s, lab) == float(brute_eer(list(s), list(lab)))
        assert compute_min_dcf(s, lab) == float(brute_min_dcf(list(s), list(lab)))


def test_min_dcf_four_point_case_and_other_costs():
    rng = np.random.default_rng(2)
    s, lab = random_case(rng, n=4)
    assert compute_min_dcf(s, lab) == float(brute_min_dcf(list(s), list(lab)))
    cfg = DcfConfig(p_target=0.3, c_fa=2.0, c_miss=0.5)
    for _ in range(50):
        s, lab = random_case(rng)
        assert compute_min_dcf(s, lab, cfg) == float(brute_min_dcf(list(s), list(lab), cfg))


def test_invariances():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s, lab = random_case(rng, n=40)
        e, d = compute_eer(s, lab), compute_min_dcf(s, lab)
        for f in (np.exp, lambda x: 3 * x - 7, lambda x: np.arctan(x) ** 3):
            assert compute_eer(f(s), lab) == e
            assert compute_min_dcf(f(s), lab) == d
        assert compute_eer(-s, ~lab) == e


def test_min_dcf_bounded_by_trivial_policies():
    rng = np.random.default_rng(4)
    cfg = DcfConfig()
    norm = min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    accept_all = cfg.c_fa * (1 - cfg.p_target) / norm
    reject_all = cfg.c_miss * cfg.p_target / norm
    for _ in range(100):
        s, lab = random_case(rng, n=30)
        d = compute_min_dcf(s, lab)
        assert 0 <= d <= min(accept_all, reject_all) and d <= 1.0


def test_random_scores_give_half():
    rng = np.random.default_rng(5)
    s, lab = rng.normal(size=10000), rng.integers(0, 2, 10000).astype(bool)
    assert abs(compute_eer(s, lab) - 0.5) < 0.05


def test_operating_points_and_threshold():
    op = operating_points([0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0])
    assert op.thresholds[0] == -np.inf and op.thresholds[-1] == np.inf
    np.testing.assert_array_equal(op.misses, [0, 0, 1, 1, 2])
    np.testing.assert_array_equal(op.false_alarms, [2, 1, 1, 0, 0])
    eer, thr = eer_with_threshold([0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0])
    assert eer == 0.25 and np.isfinite(thr)


def test_degenerate_labels():
    with pytest.raises(ContractError):
        compute_eer([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        compute_min_dcf([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        compute_eer([0.1], [1, 0])
    with pytest.raises(ContractError):
        DcfConfig(p_target=1.0)


def test_cosine_score():
    e = np.array([0.6, 0.8])
    assert cosine_score(e, e) == 1.0
    assert cosine_score(e, -e) == -1.0
    assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


# -- trial I/O ------------------------------------------------------------------------------------

def test_trial_round_trip(tmp_path):
    ts = TrialSet([Trial(1, "a.wav", "b.wav"), Trial(0, "a.wav", "c.wav")], np.array([0.5, -0.25]))
    write_trials(tmp_path / "t.txt", ts)
    back = read_trials(tmp_path / "t.txt")
    assert back.trials == ts.trials
    np.testing.assert_array_equal(back.labels, [1, 0])
    write_trials(tmp_path / "s.txt", ts, with_scores=True)
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert lines[1].split()[-1] == "-0.2500000000"
    assert read_trials(tmp_path / "s.txt").trials == ts.trials


def test_trial_parse_error_reports_offset(tmp_path):
    (tmp_path / "t.txt").write_text("# header\n1 a b\nyes a b\n")
    with pytest.raises(ParseError) as e:
        read_trials(tmp_path / "t.txt")
    assert e.value.offset == len("# header\n1 a b\n") and ":3:" in str(e.value)


def test_metrics_report(tmp_path):
    rep = metrics_report([0.9, 0.8, 0.85, 0.1], [1, 1, 0, 0])
    assert set(rep) == {"eer", "min_dcf", "n_target", "n_nontarget", "threshold_at_eer"}
    assert rep["eer"] == 0.25 and rep["n_target"] == 2
    write_metrics(tmp_path / "m.json", rep)
    assert '"eer": 0.25' in (tmp_path / "m.json").read_text()
