import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcascade import ceu
from qcascade.model import ValidationError


def sorted_simplex(rng, n):
    p = rng.dirichlet(np.ones(n))
    return np.sort(p)[::-1]


def spv(probs):
    probs = np.asarray(probs, dtype=np.float64)
    return ceu.SortedProbVector(probs, np.arange(len(probs)))


def brute_force_score(p, m, n):
    """Oracle: term-by-term evaluation of the generalised score."""
    total = 0.0
    for i in range(1, m + 1):
        total += p[i - 1]
    for j in range(m + 1, n + 1):
        total -= p[j - 1]
    return total


class TestGbvsb:
    def test_one_hot_scores_one(self):
        p = spv([1.0, 0.0, 0.0, 0.0])
        for m, n in [(1, 2), (1, 4), (2, 3), (3, 4)]:
            assert ceu.gbvsb(p, m, n) == 1.0

    def test_direct_evaluation_examples(self):
        assert ceu.gbvsb(spv([0.6, 0.3, 0.1]), 1, 2) == pytest.approx(0.3)
        assert ceu.gbvsb(spv([0.5, 0.3, 0.2]), 2, 3) == pytest.approx(0.6)

    def test_m1_n2_is_best_vs_second_best(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = sorted_simplex(rng, 10)
            assert ceu.gbvsb(spv(p), 1, 2) == pytest.approx(p[0] - p[1])

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n_classes = rng.integers(2, 12)
            p = sorted_simplex(rng, n_classes)
            m = int(rng.integers(1, n_classes))
            n = int(rng.integers(m + 1, n_classes + 1))
            assert ceu.gbvsb(spv(p), m, n) == pytest.approx(
                brute_force_score(p, m, n), abs=1e-12
            )

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = sorted_simplex(rng, 8)
            m = int(rng.integers(1, 8))
            n = int(rng.integers(m + 1, 9))
            s = ceu.gbvsb(spv(p), m, n)
            assert -1.0 < s <= p[:m].sum() + 1e-12 <= 1.0 + 1e-12

    def test_index_bounds_checked(self):
        p = spv([0.6, 0.4])
        with pytest.raises(ValidationError):
            ceu.gbvsb(p, 0, 2)
        with pytest.raises(ValidationError):
            ceu.gbvsb(p, 1, 3)
        with pytest.raises(ValidationError):
            ceu.gbvsb(p, 2, 2)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_in_n(self, seed):
        # growing N never raises the score, so it never shrinks the forwarded set
        rng = np.random.default_rng(seed)
        p = sorted_simplex(rng, 10)
        m = int(rng.integers(1, 9))
        scores = [ceu.gbvsb(spv(p), m, n) for n in range(m + 1, 11)]
        assert all(a >= b - 1e-12 for a, b in zip(scores, scores[1:]))


class TestIsConfident:
    def test_vacuous_threshold(self):
        rng = np.random.default_rng(3)
        cfg = ceu.CeuConfig(1, 2, -1.0)
        for _ in range(50):
            assert ceu.is_confident(spv(sorted_simplex(rng, 6)), cfg)

    def test_unreachable_threshold(self):
        rng = np.random.default_rng(4)
        cfg = ceu.CeuConfig(1, 2, 1.0 + 1e-9)
        for _ in range(50):
            assert not ceu.is_confident(spv(sorted_simplex(rng, 6)), cfg)
        assert ceu.is_confident(spv([1.0, 0.0]), ceu.CeuConfig(1, 2, 1.0))

    def test_uniform_not_confident(self):
        p = spv(np.full(10, 0.1))
        assert ceu.gbvsb(p, 1, 2) == pytest.approx(0.0)
        assert not ceu.is_confident(p, ceu.CeuConfig(1, 2, 0.05))

    def test_threshold_monotonicity_of_forwarded_set(self):
        rng = np.random.default_rng(5)
        preds = [spv(sorted_simplex(rng, 10)) for _ in range(100)]
        prev = None
        for th in np.linspace(-1, 1.1, 23):
            cfg = ceu.CeuConfig(1, 2, float(th))
            fwd = {i for i, p in enumerate(preds) if not ceu.is_confident(p, cfg)}
            if prev is not None:
                assert prev <= fwd  # raising th never shrinks the forwarded set
            prev = fwd

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            ceu.CeuConfig(2, 2, 0.0)


def make_predictions(rng, n, num_classes, lpu_correct, hpu_correct, margins):
    """Sorted prob vectors with controlled top-1 correctness and spikiness."""
    labels = rng.integers(0, num_classes, n)
    preds = []
    hpu_top1 = []
    for i in range(n):
        top = labels[i] if lpu_correct[i] else (labels[i] + 1) % num_classes
        rest = rng.dirichlet(np.ones(num_classes - 1)) * (1 - margins[i])
        p = np.empty(num_classes)
        p[top] = margins[i]
        p[np.arange(num_classes) != top] = rest
        # ensure the intended class really is the argmax
        if p.max() > margins[i]:
            p *= 0.25 * margins[i] / p.max()
            p[top] = 1 - p[np.arange(num_classes) != top].sum()
        preds.append(ceu.SortedProbVector.from_probs(p))
        hpu_top1.append(labels[i] if hpu_correct[i] else (labels[i] + 2) % num_classes)
    return preds, np.array(hpu_top1), labels


class TestTuneCeu:
    def test_loose_tolerance_forwards_nothing(self):
        rng = np.random.default_rng(6)
        n = 60
        lpu_ok = rng.random(n) > 0.3
        hpu_ok = np.ones(n, dtype=bool)
        margins = rng.uniform(0.5, 0.95, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 10, lpu_ok, hpu_ok, margins)
        cfg, rep = ceu.tune_ceu(preds, hpu_top1, labels, 1.0, split=False)
        assert rep.forwarded_fraction == 0.0
        scores = [ceu.gbvsb(p, cfg.M, cfg.N) for p in preds]
        assert cfg.th <= min(scores)

    def test_zero_tolerance_with_disagreement_forwards(self):
        rng = np.random.default_rng(7)
        n = 80
        lpu_ok = np.ones(n, dtype=bool)
        lpu_ok[:20] = False  # wrong but confident cases force forwarding
        hpu_ok = np.ones(n, dtype=bool)
        margins = rng.uniform(0.85, 0.99, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 10, lpu_ok, hpu_ok, margins)
        cfg, rep = ceu.tune_ceu(preds, hpu_top1, labels, 0.0, split=False)
        assert rep.forwarded_fraction > 0.0
        assert rep.cascade_error <= rep.hpu_error + 1e-12

    def test_constructed_thirty_percent_optimum(self):
        # LPU wrong exactly on the 30% least-spiky samples: the tuner should
        # forward just those and recover the HPU error exactly
        rng = np.random.default_rng(8)
        n = 100
        lpu_ok = np.ones(n, dtype=bool)
        lpu_ok[:30] = False
        hpu_ok = np.ones(n, dtype=bool)
        margins = np.empty(n)
        margins[:30] = rng.uniform(0.3, 0.45, 30)  # uncertain and wrong
        margins[30:] = rng.uniform(0.8, 0.99, 70)  # spiky and right
        preds, hpu_top1, labels = make_predictions(rng, n, 10, lpu_ok, hpu_ok, margins)
        cfg, rep = ceu.tune_ceu(preds, hpu_top1, labels, 0.0, split=False)
        assert rep.forwarded_fraction == pytest.approx(0.30, abs=0.02)
        assert rep.cascade_error == rep.hpu_error

    def test_forward_everything_reproduces_hpu_error(self):
        rng = np.random.default_rng(9)
        n = 50
        lpu_ok = rng.random(n) > 0.5
        hpu_ok = rng.random(n) > 0.1
        margins = rng.uniform(0.3, 0.99, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 10, lpu_ok, hpu_ok, margins)
        cfg, rep = ceu.tune_ceu(preds, hpu_top1, labels, 0.0, split=False)
        assert rep.cascade_error <= rep.hpu_error + 1e-12

    def test_split_report_fields(self):
        rng = np.random.default_rng(10)
        n = 100
        lpu_ok = rng.random(n) > 0.3
        hpu_ok = np.ones(n, dtype=bool)
        margins = rng.uniform(0.4, 0.99, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 10, lpu_ok, hpu_ok, margins)
        cfg, rep = ceu.tune_ceu(preds, hpu_top1, labels, 0.02, split=True, seed=3)
        assert rep.split
        assert rep.validate_cascade_error is not None
        assert len(rep.tune_indices) == 50

    def test_order_independence_of_tie_breaks(self):
        # tuning twice gives the identical config (total tie-break order)
        rng = np.random.default_rng(11)
        n = 40
        lpu_ok = rng.random(n) > 0.4
        hpu_ok = np.ones(n, dtype=bool)
        margins = rng.uniform(0.4, 0.9, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 6, lpu_ok, hpu_ok, margins)
        a, _ = ceu.tune_ceu(preds, hpu_top1, labels, 0.05, split=False)
        b, _ = ceu.tune_ceu(preds, hpu_top1, labels, 0.05, split=False)
        assert a == b

    def test_pareto_is_front(self):
        rng = np.random.default_rng(12)
        n = 60
        lpu_ok = rng.random(n) > 0.4
        hpu_ok = np.ones(n, dtype=bool)
        margins = rng.uniform(0.3, 0.99, n)
        preds, hpu_top1, labels = make_predictions(rng, n, 8, lpu_ok, hpu_ok, margins)
        _, rep = ceu.tune_ceu(preds, hpu_top1, labels, 0.05, split=False)
        fr = [p.forwarded_fraction for p in rep.pareto]
        er = [p.cascade_error for p in rep.pareto]
        assert fr == sorted(fr)
        assert er == sorted(er, reverse=True)

    def test_json_round_trip(self):
        cfg = ceu.CeuConfig(2, 5, 0.125)
        assert ceu.CeuConfig.from_json(cfg.to_json()) == cfg
