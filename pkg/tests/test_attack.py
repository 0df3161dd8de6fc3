import numpy as np
import pytest

from paimfl.attack import (AttackConfig, AttackResult, AttackRun, NonInvertibleGradient, REPORT_COLUMNS,
                           analytic_fc_invert, attack_condition, attack_experiment, defense_report,
                           iterative_dra, matching_objective, mse)
from paimfl.fl_engine import setup_experiment
from paimfl.config import ExperimentConfig
from paimfl.grad_core import GradientVector, sparsify
from paimfl.model_data import MlpModel, forward_backward
from paimfl.privacy_ops import PrivacyParams, apply_pipeline

DIMS = (784, 64, 10)


@pytest.fixture(scope="module")
def victim():
    return MlpModel.init(DIMS, seed=0)


@pytest.fixture(scope="module")
def samples(mnist):
    test = mnist[1]
    return [(test.inputs[i], int(test.labels[i])) for i in (0, 1, 2, 3, 4)]


def grad_of(model, x, y):
    return forward_backward(model, (x[None], [y]))[1]


class TestMse:
    def test_examples(self):
        assert mse(np.arange(4.0), np.arange(4.0)) == 0
        assert mse(np.zeros((2, 2)), np.ones((2, 2))) == 1.0
        assert mse([0, 1], [1, 0]) == 1.0

    def test_symmetric(self, rng):
        a, b = rng.random(9), rng.random(9)
        assert mse(a, b) == mse(b, a)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse([1, 2], [1])


class TestAnalytic:
    def test_exact_single_sample(self, victim, samples):
        for x, y in samples:
            r = analytic_fc_invert(grad_of(victim, x, y), y, victim, target=x)
            assert r.mse <= 1e-8 and r.mode == "analytic"

    def test_batch_is_a_mixture(self, victim, samples):
        (x0, y0), (x1, y1) = samples[:2]
        _, g = forward_backward(victim, (np.stack([x0, x1]), [y0, y1]))
        single = analytic_fc_invert(grad_of(victim, x0, y0), y0, victim, target=x0).mse
        mixed = analytic_fc_invert(g, y0, victim, target=x0).mse
        assert mixed > single

    def test_zero_gradient(self, victim):
        with pytest.raises(NonInvertibleGradient):
            analytic_fc_invert(GradientVector.zeros(victim.d), 0, victim)


class TestIterative:
    def test_objective_gradient_fd(self, victim, samples, rng):
        x, y = samples[0]
        t = grad_of(victim, x, y).values
        for dist in ("squared-l2", "cosine"):
            xd = rng.random(784)
            _, gx = matching_objective(victim, xd, y, t, dist)
            for i in rng.choice(784, 8, replace=False):
                e = np.zeros(784)
                e[i] = 1e-6
                fd = (matching_objective(victim, xd + e, y, t, dist)[0]
                      - matching_objective(victim, xd - e, y, t, dist)[0]) / 2e-6
                assert abs(fd - gx[i]) <= 1e-5 * max(1.0, np.abs(gx).max())

    def test_undefended_reconstructs(self, mnist):
        # the experiment's own victim shard and round-0 model
        cfg = ExperimentConfig(attack_targets=5)
        res = attack_condition(cfg, None, setup_experiment(cfg, *mnist))
        assert np.median([r.mse for r in res]) <= 0.01

    def test_defended_much_worse(self, victim, samples):
        x, y = samples[0]
        g = grad_of(victim, x, y)
        clean = iterative_dra(sparsify(g), victim, y, target=x).mse
        noisy, _ = apply_pipeline(g, PrivacyParams(gamma=0.07, epsilon=0.1), 0, np.random.default_rng(0))
        assert iterative_dra(sparsify(noisy), victim, y, target=x).mse >= 10 * clean

    def test_zero_steps_is_init(self, victim, samples):
        x, y = samples[0]
        cfg = AttackConfig(optimizer_steps=0, init_seed=4)
        r = iterative_dra(grad_of(victim, x, y), victim, y, cfg)
        init = np.random.default_rng(4).normal(cfg.init_mean, cfg.init_std, 784)
        assert np.array_equal(r.reconstruction, init) and r.iterations == 0

    def test_best_iterate_monotone(self, victim, samples):
        x, y = samples[1]
        t = grad_of(victim, x, y)
        objs = [iterative_dra(t, victim, y, AttackConfig(optimizer_steps=n)).objective for n in (1, 20, 80, 200)]
        assert all(a >= b for a, b in zip(objs, objs[1:]))

    def test_victim_untouched_and_deterministic(self, victim, samples):
        x, y = samples[2]
        before = victim.weights.copy()
        cfg = AttackConfig(optimizer_steps=50)
        a = iterative_dra(grad_of(victim, x, y), victim, y, cfg, target=x)
        b = iterative_dra(grad_of(victim, x, y), victim, y, cfg, target=x)
        assert np.array_equal(victim.weights, before)
        assert np.array_equal(a.reconstruction, b.reconstruction)
        assert a.mse == mse(x, a.reconstruction) >= 0

    def test_nonfinite_stops_early(self, victim, samples, monkeypatch):
        import paimfl.attack as A
        real = A.matching_objective
        calls = []

        def flaky(*a, **k):
            calls.append(1)
            J, g = real(*a, **k)
            return (float("nan"), g) if len(calls) > 5 else (J, g)

        monkeypatch.setattr(A, "matching_objective", flaky)
        x, y = samples[0]
        r = iterative_dra(grad_of(victim, x, y), victim, y, AttackConfig(optimizer_steps=50))
        assert r.iterations == 5 and np.isfinite(r.objective)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AttackConfig(distance="l1")
        assert AttackConfig().known_label is True


class TestReport:
    def _res(self, v):
        return AttackResult(np.zeros(1), v, 0, "iterative")

    def test_singleton(self):
        rep = defense_report([AttackRun("undefended", 1.0, float("inf"), 0, [self._res(0.3)])])
        row = rep.row("undefended")
        assert row["mean_mse"] == 0.3 and row["std_mse"] == 0.0 and row["n_targets"] == 1

    def test_csv_columns(self):
        rep = defense_report([AttackRun("a", 0.07, 0.1, 100, [self._res(1.0), self._res(3.0)])])
        head, line = rep.to_csv().strip().split("\n")
        assert tuple(head.split(",")) == REPORT_COLUMNS
        assert rep.row("a")["std_mse"] == 1.0

    def test_empty_condition(self):
        with pytest.raises(ValueError):
            defense_report([AttackRun("a", 0.07, 0.1, 100, [])])


def _paired_mean_gap(lo, hi):
    """Mean of hi - lo over paired targets and its standard error."""
    d = np.array([b.mse - a.mse for a, b in zip(lo, hi)])
    return d.mean(), d.std(ddof=1) / np.sqrt(d.size)


class TestExperiment:
    def test_deterministic_report(self, mnist):
        cfg = ExperimentConfig(attack_targets=2, attack_steps=30)
        assert attack_experiment(cfg, *mnist).to_csv() == attack_experiment(cfg, *mnist).to_csv()

    @pytest.mark.slow
    def test_defended_beats_undefended_every_seed(self, mnist):
        for seed in range(10):
            cfg = ExperimentConfig(master_seed=seed, attack_targets=3, attack_steps=500)
            rep = attack_experiment(cfg, *mnist)
            assert rep.row("pa-imfl")["mean_mse"] >= rep.row("undefended")["mean_mse"], seed

    @pytest.mark.slow
    def test_gamma_monotone(self, mnist):
        # statistical property: means over 20 paired targets, compared within 3 standard errors
        cfg = ExperimentConfig(attack_targets=20)
        exp = setup_experiment(cfg, *mnist)
        res = {g: attack_condition(cfg, cfg.privacy.with_(gamma=g), exp) for g in (0.25, 0.15, 0.07)}
        for hi_g, lo_g in ((0.25, 0.15), (0.15, 0.07)):
            gap, se = _paired_mean_gap(res[hi_g], res[lo_g])
            assert gap >= -3 * se, (hi_g, lo_g, gap, se)
