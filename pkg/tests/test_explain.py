import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from a2cr.collector import Purpose
from a2cr.env import WorldSpec, generate_world
from a2cr.errors import ContractError, ShapeError
from a2cr.explain import (Distribution, SaliencyMap, TheoremSimSpec, bilinear_upsample, classify, classify_batch,
                          convergence, convergence_trace, entropy_sweep, gradcam, gradcam_all, instability,
                          jacobian_saliency, labelled_stream, mann_whitney_greater, max_normalize,
                          occlusion_effect, perturb_policy, pre_failure_flag, pre_terminal_instability, rollout,
                          simulate_theorem, spearman)
from a2cr.networks import PolicyValueNet, ReasonerNet, policy_entropy
from a2cr.training import HyperParams

A, B = "A", "B"


class TestInstability:
    def test_worked_example(self):
        scores = instability([A, A, A, B, A, B, B, A], window=4)
        assert_allclose(scores, [1 / 3, 2 / 3, 1, 2 / 3, 2 / 3])
        assert scores[-1] == pytest.approx(2 / 3)

    def test_constant_and_alternating(self):
        assert_array_equal(instability([1] * 20, 16), 0.0)
        assert_array_equal(instability([0, 1] * 10, 16), 1.0)

    def test_against_loop(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, 200)
        got = instability(labels, 16)
        want = [np.mean(labels[i + 1:i + 16] != labels[i:i + 15]) for i in range(200 - 15)]
        assert_allclose(got, want)

    def test_contract(self):
        with pytest.raises(ContractError):
            instability([A, B, A], window=4)
        with pytest.raises(ContractError):
            instability([A, B, A], window=1)

    def test_flag_and_pre_terminal(self):
        assert pre_failure_flag([0.1, 0.6]) and not pre_failure_flag([0.5, 0.2])
        labels = [0] * 100 + [0, 1] * 32
        assert pre_terminal_instability(labels, 16, 64) == 1.0
        assert pre_terminal_instability([0] * 100, 16, 64) == 0.0
        assert np.isnan(pre_terminal_instability([0] * 10, 16, 64))


def _plateau(t_switch=50, total=120):
    a = np.array([0.1 * (-1) ** t if t < t_switch else 0.0 for t in range(total)])
    return np.stack([0.25 + a, 0.25 - a, np.full(total, 0.25), np.full(total, 0.25)], axis=1)


class TestConvergence:
    def test_plateau_flip_index(self):
        flags = convergence_trace(_plateau(), window=10, epsilon=0.05)
        assert int(np.argmax(flags)) == 59
        assert flags[59:].all() and not flags[:59].any()

    def test_result(self):
        res = convergence(_plateau(), window=10)
        assert res.complete and res.converged.all()
        assert_allclose(res.final, 0.25)
        noisy = convergence(_plateau(t_switch=120), window=10)
        assert not noisy.complete
        assert_array_equal(noisy.converged, [False, False, True, True])
        assert_allclose(noisy.spreads[:2], 0.2)

    def test_linear_drift_never_converges(self):
        t = np.linspace(0.0, 1.0, 200)[:, None]
        drift = np.hstack([0.1 + 0.3 * t, 0.4 - 0.3 * t, np.full_like(t, 0.25), np.full_like(t, 0.25)])
        res = convergence(drift, window=40)
        assert not res.converged[:2].any()
        assert not convergence_trace(drift, window=40, epsilon=0.05).any()

    def test_contract(self):
        with pytest.raises(ContractError):
            convergence(np.full((15, 4), 0.25), window=10)
        with pytest.raises(ShapeError):
            convergence(np.zeros((30, 3)), window=5)


class TestPerturb:
    def test_formula(self):
        p = np.random.default_rng(1).dirichlet(np.ones(12))
        assert_array_equal(perturb_policy(p, 0), p / p.sum())
        assert_allclose(perturb_policy(p, 7), (p + 0.007) / (1 + 12 * 0.007))

    def test_entropy_monotone(self):
        p = np.zeros(12)
        p[2] = 0.9
        p[5] = 0.1
        ent = [policy_entropy(perturb_policy(p, k)) for k in range(20)]
        assert all(b > a for a, b in zip(ent, ent[1:]))
        assert ent[-1] < np.log(12)
        assert_allclose(perturb_policy(p, 10**9), 1 / 12, atol=1e-6)

    def test_negative_k(self):
        with pytest.raises(ValueError):
            perturb_policy(np.ones(12) / 12, -1)


def test_bilinear_upsample():
    g = np.array([[0.0, 1.0], [0.0, 1.0]])
    up = bilinear_upsample(g, 4, 4)
    assert_allclose(up[0], [0, 0.25, 0.75, 1])
    assert_allclose(up[:, 2], 0.75)
    assert_allclose(bilinear_upsample(np.full((4, 4), 3.0), 64, 64), 3.0)


def test_max_normalize_and_map_validation():
    assert_allclose(max_normalize([[-1.0, 2.0], [1.0, 0.0]]), [[0, 1], [0.5, 0]])
    assert_array_equal(max_normalize(np.zeros((2, 2))), 0.0)
    with pytest.raises(ContractError):
        SaliencyMap(np.full((2, 2), 2.0), None, "gradcam")
    with pytest.raises(ValueError):
        SaliencyMap(np.zeros((2, 2)), None, "lime")


def _single_channel_reasoner():
    """Logit 0 equals the sum of conv3 channel 0; logit 1 is constant."""
    net = ReasonerNet(seed=0)
    for name in ("trunk.fc.weight", "reasoner.fc1.weight", "reasoner.fc2.weight", "reasoner.fc3.weight"):
        net.params[name].data[...] = 0.0
    net.params["trunk.fc.weight"].data[0, :16] = 1.0
    net.params["reasoner.fc1.weight"].data[0, 0] = 1.0
    net.params["reasoner.fc2.weight"].data[0, 0] = 1.0
    net.params["reasoner.fc3.weight"].data[0, 0] = 1.0
    return net


class TestGradCAM:
    def test_single_channel_fixture(self):
        net = _single_channel_reasoner()
        delta = np.random.default_rng(2).uniform(-1, 1, (3, 64, 64)).astype(np.float32)
        keep = {}
        net.forward_logits(delta, keep=keep)
        act = keep["conv3"].data[0, 0].astype(np.float64)
        assert act.max() > 0
        cam0, cam1 = gradcam_all(net, delta, [0, 1])
        assert_allclose(cam0.grid, max_normalize(bilinear_upsample(act, 64, 64)), atol=1e-6)
        assert cam0.category is Purpose.BREAKOUT and cam0.method == "gradcam"
        assert_array_equal(cam1.grid, 0.0)

    def test_batch_equals_single_and_clears_grads(self):
        net = ReasonerNet(seed=3)
        delta = np.random.default_rng(4).uniform(-1, 1, (3, 64, 64))
        maps = gradcam_all(net, delta)
        assert len(maps) == 4
        for c in range(4):
            assert_allclose(gradcam(net, delta, c).grid, maps[c].grid, atol=1e-7)
            assert maps[c].grid.shape == (64, 64)
            assert 0 <= maps[c].grid.min() and maps[c].grid.max() <= 1
        assert all(t.grad is None or not np.any(t.grad) for _, t in net.params.items())

    def test_bad_class(self):
        with pytest.raises(ValueError):
            gradcam(ReasonerNet(seed=0), np.zeros((3, 64, 64)), 4)

    def test_occlusion_effect(self):
        net = ReasonerNet(seed=5)
        delta = np.random.default_rng(6).uniform(-1, 1, (3, 64, 64))
        top, rand = occlusion_effect(net, delta, 0, np.random.default_rng(7))
        assert top >= 0 and rand >= 0


class TestJacobian:
    def test_one_tap_fixture(self):
        """With a single non-zero conv1 tap only pixels on the stride grid can matter."""
        net = PolicyValueNet(seed=8)
        k = net.params["trunk.conv1.kernel"].data
        k[...] = 0.0
        k[:, 0, 0, 0] = np.random.default_rng(9).uniform(0.5, 1.0, k.shape[0])
        net.params["trunk.conv1.bias"].data[...] = 0.01
        state = np.random.default_rng(10).random((3, 64, 64))
        sal = jacobian_saliency(net, state, 3)
        mask = np.zeros((64, 64), dtype=bool)
        mask[0:57:4, 0:57:4] = True
        assert_array_equal(sal.grid[~mask], 0.0)
        assert sal.grid.max() == pytest.approx(1.0)
        assert sal.method == "jacobian" and sal.category is None

    def test_double_precision_network(self):
        net = PolicyValueNet(seed=11)
        net.params.astype(np.float64)
        state = np.random.default_rng(12).random((3, 64, 64))
        sal = jacobian_saliency(net, state, 5).grid
        assert sal.shape == (64, 64) and sal.max() == pytest.approx(1.0)

    def test_contract(self):
        net = PolicyValueNet(seed=0)
        with pytest.raises(ValueError):
            jacobian_saliency(net, np.zeros((3, 64, 64)), 12)
        with pytest.raises(ShapeError):
            jacobian_saliency(net, np.zeros((2, 3, 64, 64)), 0)


def _short_world():
    return WorldSpec(columns="#" * 11 + "_" + "#" * 11 + "G", time_limit=60)


class TestRollouts:
    def test_classify(self):
        net = ReasonerNet(seed=0)
        d = np.random.default_rng(0).uniform(-1, 1, (3, 64, 64))
        cat, scores = classify(net, d)
        assert isinstance(cat, Purpose) and scores.shape == (4,)
        assert np.all((scores > 0) & (scores < 1))
        cats, batch = classify_batch(net, np.stack([d, d]))
        assert_array_equal(cats, [cat, cat])
        with pytest.raises(ShapeError):
            classify(net, np.stack([d, d]))

    def test_rollout_trace(self):
        pol, rsn = PolicyValueNet(seed=0), ReasonerNet(seed=1)
        from a2cr.collector import ExploringPool
        pool = ExploringPool(20, seed=0, warmup=5)
        tr = rollout(pol, rsn, _short_world(), np.random.default_rng(0), pool=pool)
        n = len(tr)
        assert 1 <= n <= 60
        assert len(tr.rewards) == len(tr.categories) == len(tr.gains) == len(tr.explorations) == len(tr.pseudo) == n
        assert [w for _, w in tr.pseudo[:5]] == [True] * min(5, n)
        assert tr.failed == (not tr.goal)
        assert_allclose(tr.proportions().sum(), 1.0)
        again = rollout(pol, rsn, _short_world(), np.random.default_rng(0))
        assert again.actions == tr.actions and again.categories == tr.categories

    def test_labelled_stream(self):
        pol, rsn = PolicyValueNet(seed=0), ReasonerNet(seed=1)
        pred, truth = labelled_stream(pol, rsn, _short_world(), 30, seed=0, hp=HyperParams(pool_capacity=20))
        assert pred.shape == truth.shape == (30,)
        assert set(pred) <= {0, 1, 2, 3} and set(truth) <= {0, 1, 2, 3}

    def test_entropy_sweep(self):
        pol, rsn = PolicyValueNet(seed=0), ReasonerNet(seed=1)
        res = entropy_sweep(pol, rsn, [_short_world()], k_max=2, episodes_per_k=2, seed=0)
        rows = res.rows()
        assert len(rows) == 3 * 4
        assert rows[0] == {"k": 0, "category": "Breakout", "mean": res.means[0, 0], "std": res.stds[0, 0]}
        assert_allclose(res.means.sum(axis=1), 1.0)
        again = entropy_sweep(pol, rsn, [_short_world()], k_max=2, episodes_per_k=2, seed=0)
        assert_array_equal(res.means, again.means)
        with pytest.raises(ValueError):
            entropy_sweep(pol, rsn, [_short_world()], k_max=0)


class TestTheoremSimulation:
    def test_distribution_parse(self):
        d = Distribution.parse("normal:5,2")
        assert d.family == "normal" and d.params == (5.0, 2.0)
        assert d.cdf_at_mean() == pytest.approx(0.5)
        assert Distribution.parse("exponential:1").cdf_at_mean() == pytest.approx(1 - np.exp(-1))
        assert Distribution.parse("uniform:0,4").cdf_at_mean() == pytest.approx(0.5)
        for bad in ("cauchy:0,1", "normal:5", "normal:0,-1", "exponential:0", "uniform:2,1", "normal:a,b"):
            with pytest.raises(ValueError):
                Distribution.parse(bad)

    def test_single_feature_targets(self):
        res = simulate_theorem(TheoremSimSpec((Distribution.parse("exponential:1"),), capacity=200, n=5000))
        assert res.labels == ("label_0", "label_1")
        assert_allclose(res.analytic, [1 - np.exp(-1), np.exp(-1)])
        assert_allclose(res.empirical.sum(), 1.0)
        assert res.abs_error.max() < 0.05

    def test_two_feature_product(self):
        spec = TheoremSimSpec((Distribution.parse("exponential:2"), Distribution.parse("normal:0,1")),
                              capacity=200, n=5000, seed=1)
        res = simulate_theorem(spec)
        f = 1 - np.exp(-1)
        # bit 1 means "at or above the mean", which has probability 1 - F(mu)
        assert_allclose(res.analytic, [(1 - f) * 0.5, (1 - f) * 0.5, f * 0.5, f * 0.5])
        assert res.abs_error.max() < 0.05
        rows = res.rows(5000)
        assert rows[0]["label"] == "Breakout" and rows[0]["n"] == 5000

    def test_deterministic(self):
        spec = TheoremSimSpec((Distribution.parse("uniform:0,1"),), capacity=50, n=500, seed=4)
        assert_array_equal(simulate_theorem(spec).empirical, simulate_theorem(spec).empirical)

    def test_spec_validation(self):
        d = Distribution.parse("normal:0,1")
        with pytest.raises(ValueError):
            TheoremSimSpec((d, d, d))
        with pytest.raises(ValueError):
            TheoremSimSpec((d,), capacity=1)


def test_statistics_helpers():
    assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0
    _, p = mann_whitney_greater([5, 6, 7, 8, 9, 10], [0, 1, 2, 3, 4, 5])
    assert p < 0.01
    _, p = mann_whitney_greater([0, 1, 2], [5, 6, 7])
    assert p > 0.5
