import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetloss.ensemble import (HARMONIC, MAX_VOTE, EnsembleConfig, batch_decide, decide,
                              harmonic_mean_probs, read_confidences_csv, read_decisions_csv,
                              write_confidences_csv, write_decisions_csv)


def literal_rule(models, theta, eps=1e-6):
    """Step-by-step transcription of the decision rule using plain Python lists."""
    best_conf, best_model = -1.0, None
    for k, p in enumerate(models):
        conf = max(p)
        if conf > best_conf:
            best_conf, best_model = conf, k
    if best_conf > theta:
        p = list(models[best_model])
        return p.index(max(p)), best_conf, MAX_VOTE
    n_classes = len(models[0])
    hm = []
    for c in range(n_classes):
        hm.append(len(models) / sum(1.0 / max(p[c], eps) for p in models))
    total = sum(hm)
    hm = [v / total for v in hm]
    label = hm.index(max(hm))
    return label, hm[label], HARMONIC


def random_confidences(rng, K=7, n_c=2, ties=False):
    if ties:
        vals = rng.choice([0.5, 0.6, 0.97, 0.99, 0.4], size=K)
        P = np.stack([vals, 1 - vals], axis=1)
    else:
        P = rng.dirichlet(np.full(n_c, rng.choice([0.2, 1.0, 5.0])), size=K)
    return P


class TestHarmonicMean:
    def test_equal_halves(self):
        np.testing.assert_allclose(harmonic_mean_probs([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5])

    def test_direct_arithmetic(self):
        P = np.array([[0.2, 0.8], [0.8, 0.2]])
        raw = 2 / (1 / 0.2 + 1 / 0.8)
        assert raw == pytest.approx(0.32)
        np.testing.assert_allclose(harmonic_mean_probs(P), [0.5, 0.5], rtol=1e-15)

    def test_zero_probability_clamped(self):
        out = harmonic_mean_probs([[1.0, 0.0]], epsilon_clamp=1e-6)
        assert np.all(np.isfinite(out))
        assert out[1] < 1e-5 and out.sum() == pytest.approx(1.0)


class TestDecide:
    def test_max_vote(self):
        P = [[0.97, 0.03]] + [[0.6, 0.4]] * 6
        d = decide(P, EnsembleConfig(theta=0.95))
        assert (d.label, d.confidence, d.rule) == (0, 0.97, MAX_VOTE)

    def test_total_ambiguity(self):
        d = decide([[0.5, 0.5]] * 7, EnsembleConfig(theta=0.95))
        assert (d.label, d.rule) == (0, HARMONIC)
        assert d.confidence == pytest.approx(0.5)

    def test_threshold_is_strict(self):
        d = decide([[0.95, 0.05], [0.6, 0.4]], EnsembleConfig(theta=0.95))
        assert d.rule == HARMONIC

    def test_lowest_model_wins_ties(self):
        d = decide([[0.3, 0.7], [0.99, 0.01], [0.01, 0.99]], EnsembleConfig(theta=0.95))
        assert d.label == 0 and d.rule == MAX_VOTE

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_literal_transcription(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            P = random_confidences(rng, ties=rng.random() < 0.3)
            d = decide(P, EnsembleConfig(theta=0.98))
            label, conf, rule = literal_rule(P.tolist(), 0.98)
            assert (d.label, d.rule) == (label, rule)
            assert d.confidence == pytest.approx(conf, rel=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EnsembleConfig(theta=0.5)
        with pytest.raises(ValueError):
            EnsembleConfig(theta=1.0)
        with pytest.raises(ValueError):
            decide([[0.5, 0.5]], EnsembleConfig(epsilon_clamp=0.6))
        with pytest.raises(ValueError):
            decide([[0.5, 0.6]], EnsembleConfig())

    def test_k1_low_theta_is_argmax(self):
        d = decide([[0.02, 0.98]], EnsembleConfig(theta=0.9))
        assert (d.label, d.rule) == (1, MAX_VOTE)
        d = decide([[0.3, 0.7]], EnsembleConfig(theta=0.9))
        assert (d.label, d.rule) == (1, HARMONIC)
        assert d.confidence == pytest.approx(0.7)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([0.95, 0.98]))
    def test_permutation_invariance(self, seed, theta):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet([1.0, 1.0, 1.0], size=5)
        base = decide(P, EnsembleConfig(theta=theta))
        for perm in itertools.islice(itertools.permutations(range(5)), 0, 120, 17):
            assert decide(P[list(perm)], EnsembleConfig(theta=theta)).label == base.label

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
    def test_harmonic_argmax_scale_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet([2.0, 2.0], size=7)
        a = harmonic_mean_probs(P, 1e-12)
        b = harmonic_mean_probs(P * scale, 1e-12)
        assert np.argmax(a) == np.argmax(b)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_decided_class_is_maximal(self, seed):
        rng = np.random.default_rng(seed)
        P = rng.dirichlet([0.5, 0.5, 0.5], size=7)
        d = decide(P, EnsembleConfig(theta=0.95))
        final = P[int(np.argmax(P.max(axis=1)))] if d.rule == MAX_VOTE else harmonic_mean_probs(P)
        assert final[d.label] == final.max()


class TestBatchDecide:
    def test_all_max_vote(self):
        out = batch_decide([[[0.99, 0.01], [0.5, 0.5]]] * 4, EnsembleConfig(theta=0.95))
        assert out.rule_fractions[MAX_VOTE] == 1.0

    def test_all_harmonic_near_one(self):
        theta = 1.0 - 1e-9
        out = batch_decide([[[0.99, 0.01], [0.5, 0.5]]] * 4, EnsembleConfig(theta=theta))
        assert out.rule_fractions[HARMONIC] == 1.0

    def test_fraction_counts(self):
        rng = np.random.default_rng(3)
        samples = [random_confidences(rng) for _ in range(200)]
        out = batch_decide(samples, EnsembleConfig(theta=0.95))
        count = sum(1 for P in samples if P.max() > 0.95)
        assert out.rule_fractions[MAX_VOTE] == count / 200
        assert out.rule_fractions[HARMONIC] == (200 - count) / 200

    def test_k_mismatch(self):
        with pytest.raises(ValueError, match="sample 1"):
            batch_decide([np.full((3, 2), 0.5), np.full((2, 2), 0.5)], EnsembleConfig())


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    probs = [rng.dirichlet([1, 1], size=4) for _ in range(3)]
    path = tmp_path / "conf.csv"
    write_confidences_csv(path, [10, 11, 12, 13], probs)
    ids, per_sample = read_confidences_csv(path)
    assert ids == [10, 11, 12, 13]
    assert per_sample[2].shape == (3, 2)
    np.testing.assert_array_equal(per_sample[2][1], probs[1][2])
    assert path.read_text().splitlines()[0] == "sample_id,model_id,p_class0,p_class1"

    out = batch_decide(per_sample, EnsembleConfig(theta=0.95))
    write_decisions_csv(tmp_path / "dec.csv", ids, out.decisions)
    ids2, decs = read_decisions_csv(tmp_path / "dec.csv")
    assert ids2 == ids and decs == out.decisions
