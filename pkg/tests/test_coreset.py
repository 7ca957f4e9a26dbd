import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coretokens import coreset as cs
from coretokens import tensor as tn
from coretokens.errors import ContractError
from coretokens.tensor import Tape
from coretokens.vit import ModelConfig, ViT

from oracles import (
    brute_force_step_gains,
    central_difference,
    facility_location,
    max_relative_error,
    omp_reference,
)


def _feats(G, ids=None):
    ids = range(len(G)) if ids is None else ids
    return [cs.GradientFeature(i, np.asarray(g, dtype=float)) for i, g in zip(ids, G)]


@pytest.fixture(scope="module")
def model():
    return ViT(ModelConfig(embed_dim=16, heads=2, blocks=2, classes=3, seed=2))


class TestPerSampleGradients:
    def test_duplicates_match(self, model):
        x = np.random.default_rng(0).uniform(0, 1, (2, 16, 49))
        feats = cs.per_sample_gradients(model, np.stack([x[0], x[1], x[0]]), [1, 2, 1])
        assert feats[0].g.tobytes() == feats[2].g.tobytes()
        assert feats[0].g.shape == (16 * 3 + 3,)

    def test_matches_finite_differences(self, model):
        x = np.random.default_rng(1).uniform(0, 1, (1, 16, 49))
        feat = cs.per_sample_gradients(model, x, [2])[0].g
        det = model.detached()
        W, b = model["head.W"].data, model["head.b"].data

        def loss(flat):
            det.params["head.W"] = tn.Tensor(flat[: W.size].reshape(W.shape))
            det.params["head.b"] = tn.Tensor(flat[W.size:])
            return tn.cross_entropy(det.forward(det.embed(x))[0], [2]).item()

        numeric = central_difference(loss, np.concatenate([W.ravel(), b]))
        assert max_relative_error(feat, numeric) < 1e-4

    def test_sum_equals_batch_gradient(self, model):
        rng = np.random.default_rng(2)
        x, y = rng.uniform(0, 1, (6, 16, 49)), rng.integers(0, 3, 6)
        total = sum(f.g for f in cs.per_sample_gradients(model, x, y))
        model.zero_grad()
        with Tape() as tape:
            loss = tn.cross_entropy(model.forward(model.embed(x))[0], y, reduction="sum")
        tape.backward(loss)
        batch = np.concatenate([model["head.W"].grad.ravel(), model["head.b"].grad])
        model.zero_grad()
        assert np.max(np.abs(total - batch)) < 1e-9


class TestCraig:
    def test_full_budget(self):
        G = np.random.default_rng(0).normal(size=(9, 4))
        sel = cs.craig_select(_feats(G), 9)
        assert sorted(sel.indices.tolist()) == list(range(9))
        assert np.all(sel.weights >= 1) and sel.weights.sum() == 9

    def test_two_clusters(self):
        G = np.vstack([np.zeros((5, 3)), np.full((3, 3), 10.0)])
        sel = cs.craig_select(_feats(G), 2)
        assert sel.indices.tolist() == [0, 5]
        assert sel.weights.tolist() == [5.0, 3.0]

    @pytest.mark.parametrize("seed", range(6))
    def test_greedy_steps_match_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 13))
        G = rng.normal(size=(n, 3))
        budget = int(rng.integers(1, 4))
        sel = cs.craig_select(_feats(G), budget)
        dist = cs.pairwise_distances(G)
        chosen = []
        # replay the greedy order to compare each step with brute force
        remaining = set(sel.indices.tolist())
        for gain in sel.trace:
            best = brute_force_step_gains(dist, chosen)
            assert abs(gain - best) < 1e-9
            j = next(j for j in sorted(remaining)
                     if abs(facility_location(dist, chosen + [j]) - facility_location(dist, chosen) - gain) < 1e-9)
            chosen.append(j)
            remaining.discard(j)
        assert not remaining

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_objective_monotone_with_diminishing_gains(self, seed):
        G = np.random.default_rng(seed).normal(size=(20, 4))
        sel = cs.craig_select(_feats(G), 8)
        gains = np.array(sel.trace)
        assert np.all(gains >= -1e-12)
        assert np.all(np.diff(gains) <= 1e-9)

    def test_budget_range(self):
        with pytest.raises(ContractError):
            cs.craig_select(_feats(np.zeros((3, 2))), 4)
        with pytest.raises(ContractError):
            cs.craig_select(_feats(np.zeros((3, 2))), 0)


class TestGradMatch:
    def test_exact_representation(self):
        G = np.random.default_rng(0).normal(size=(6, 4))
        sel = cs.gradmatch_select(_feats(G), 6, lam=0.0)
        target = G.mean(axis=0)
        recon = sel.weights @ G[sel.indices]
        assert np.linalg.norm(recon - target) <= 1e-6 * np.linalg.norm(target)

    def test_mean_among_features(self):
        G = np.random.default_rng(1).normal(size=(5, 3))
        G = np.vstack([G, G.mean(axis=0)])
        # the appended row makes the mean of all six equal to the appended row itself
        target = G.mean(axis=0)
        np.testing.assert_allclose(G[5], target)
        sel = cs.gradmatch_select(_feats(G), 1, lam=0.0)
        assert sel.indices.tolist() == [5]
        assert abs(sel.weights[0] - 1.0) < 1e-9

    @pytest.mark.parametrize("seed", range(8))
    def test_residuals_match_normal_equation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        G = rng.normal(size=(8, 5))
        lam = [0.0, 0.5][seed % 2]
        sel = cs.gradmatch_select(_feats(G), 3, lam=lam)
        ref_idx, ref_norms = omp_reference(G, G.mean(axis=0), 3, lam)
        assert sorted(ref_idx) == sel.indices.tolist()
        np.testing.assert_allclose(sel.trace, ref_norms, atol=1e-8, rtol=0)
        assert np.all(np.diff(sel.trace) <= 1e-12)
        assert np.all(sel.weights >= 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 2.0))
    def test_residual_non_increasing(self, seed, lam):
        G = np.random.default_rng(seed).normal(size=(15, 6))
        sel = cs.gradmatch_select(_feats(G), 6, lam=lam)
        assert len(sel.indices) == len(set(sel.indices.tolist())) == 6
        assert np.all(np.diff(sel.trace) <= 1e-10)
        assert np.all(sel.weights >= 0)

    def test_early_exit_fills_budget(self):
        G = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]] * 4)
        sel = cs.gradmatch_select(_feats(G), 5, lam=0.0)
        assert len(set(sel.indices.tolist())) == 5
        assert len(sel.trace) < 5

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            cs.gradmatch_select(_feats(np.ones((3, 2))), 4)
        with pytest.raises(ContractError):
            cs.gradmatch_select(_feats(np.ones((3, 2))), 2, lam=-1.0)


class TestRandom:
    def test_full(self):
        assert cs.random_select(7, 7, 0).indices.tolist() == list(range(7))

    def test_seeded(self):
        assert cs.random_select(50, 5, 3).indices.tolist() == cs.random_select(50, 5, 3).indices.tolist()

    def test_over_budget(self):
        with pytest.raises(ContractError):
            cs.random_select(3, 4, 0)

    def test_uniform_frequencies(self):
        N, budget, trials = 20, 5, 10_000
        rng = np.random.default_rng(9)
        counts = np.zeros(N)
        for _ in range(trials):
            counts[cs.random_select(N, budget, rng).indices] += 1
        p = budget / N
        sigma = np.sqrt(trials * p * (1 - p))
        assert np.all(np.abs(counts - trials * p) < 5 * sigma)


class TestDispatch:
    @pytest.mark.parametrize("method", cs.METHODS)
    def test_exact_budget_and_balance(self, method):
        rng = np.random.default_rng(0)
        labels = np.repeat([3, 4, 7], [10, 12, 9])
        feats = _feats(rng.normal(size=(31, 5)), ids=range(100, 131))
        sel = cs.select(method, feats, labels, 11, lam=0.5, seed=1)
        assert len(sel.indices) == len(set(sel.indices.tolist())) == 11
        assert np.all(sel.weights >= 0)
        per_class = [np.sum(labels[sel.indices - 100] == c) for c in (3, 4, 7)]
        assert max(per_class) - min(per_class) <= 1

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, 30)
        feats = _feats(rng.normal(size=(30, 4)))
        for m in cs.METHODS:
            a = cs.select(m, feats, labels, 7, seed=4)
            b = cs.select(m, feats, labels, 7, seed=4)
            assert a.indices.tolist() == b.indices.tolist()
            assert a.weights.tobytes() == b.weights.tobytes()

    def test_class_budgets_respect_capacity(self):
        share = cs.class_budgets([0] * 2 + [1] * 10 + [2] * 10, 12)
        assert share == {0: 2, 1: 5, 2: 5}

    def test_unknown_method(self):
        with pytest.raises(ContractError):
            cs.select("glister", None, [0, 1], 1)

    def test_csv_export(self, tmp_path):
        sel = cs.CoresetSelection([4, 9], [2.0, 1.5], "craig", 2)
        path = tmp_path / "sel.csv"
        cs.export_selection_csv(path, sel)
        assert path.read_text().splitlines() == [
            "sample_id,weight,method,budget", "4,2.0,craig,2", "9,1.5,craig,2"]
