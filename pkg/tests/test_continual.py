import numpy as np
import pytest

from coretokens import continual as ct
from coretokens import tensor as tn
from coretokens import tokenset as ts
from coretokens.errors import ContractError, StateError
from coretokens.vit import ModelConfig, ViT


def _model(classes=4, seed=0):
    return ViT(ModelConfig(embed_dim=16, heads=2, blocks=1, classes=classes, seed=seed))


def _stream(n=12, tasks=2, per=2, seed=0):
    rng = np.random.default_rng(seed)
    k = tasks * per
    y = np.tile(np.arange(k), n)
    x = rng.uniform(0, 1, (len(y), 16, 49))
    yt = np.arange(k).repeat(3)
    xt = rng.uniform(0, 1, (len(yt), 16, 49))
    return ct.split_classes(x, y, xt, yt, per)


class TestTaskStream:
    def test_disjoint_classes_required(self):
        t = ct.Task(np.zeros((1, 16, 49)), np.zeros(1), np.zeros((1, 16, 49)), np.zeros(1), (0, 1))
        with pytest.raises(ContractError):
            ct.TaskStream([t, t])

    def test_empty(self):
        with pytest.raises(ContractError):
            ct.TaskStream([])

    def test_split(self):
        s = _stream(tasks=3)
        assert [s.classes(i) for i in range(3)] == [(0, 1), (2, 3), (4, 5)]
        x, y = s.train(1)
        assert set(y.tolist()) == {2, 3} and len(x) == len(y)
        assert s.access_log == [("train", 1)]

    def test_uneven_split(self):
        with pytest.raises(ContractError):
            ct.split_classes(np.zeros((3, 16, 49)), [0, 1, 2], np.zeros((3, 16, 49)), [0, 1, 2], 2)


class TestTrainConfig:
    @pytest.mark.parametrize("r", [-0.1, 1.0])
    def test_drop_rate_range(self, r):
        with pytest.raises(ContractError):
            ct.TrainConfig(drop_rate=r)

    def test_optimizer_name(self):
        with pytest.raises(ContractError):
            ct.TrainConfig(optimizer="lbfgs")


class TestDropout:
    def test_zero_rate_is_identity(self):
        m = _model()
        seq = m.embed(np.random.default_rng(0).uniform(0, 1, (3, 16, 49)))
        assert ct.apply_token_dropout(seq, 0.0, 1, m) is seq

    def test_kept_count_statistics(self):
        # keep-prob 0.3 over 10^4 draws of 16 tokens: binomial mean 4.8
        mask = ct.dropout_mask(10_000, 16, 0.7, 0)
        kept = mask.sum(axis=1)
        sigma = np.sqrt(16 * 0.3 * 0.7 / 10_000)
        assert abs(kept.mean() - 4.8) < 5 * sigma

    def test_same_seed_same_mask(self):
        assert ct.dropout_mask(5, 16, 0.5, 3).tobytes() == ct.dropout_mask(5, 16, 0.5, 3).tobytes()

    def test_fresh_draws_from_a_stream(self):
        rng = np.random.default_rng(0)
        assert ct.dropout_mask(5, 16, 0.5, rng).tobytes() != ct.dropout_mask(5, 16, 0.5, rng).tobytes()

    def test_class_token_kept_and_patches_zeroed(self):
        m = _model()
        x = np.random.default_rng(1).uniform(0.5, 1, (4, 16, 49))
        out = ct.apply_token_dropout(m.embed(x), 0.6, 2, m)
        assert out.mask[:, 0].all()
        dropped = ~out.mask[:, 1:]
        assert dropped.any()
        assert not out.patches[dropped].any()
        np.testing.assert_array_equal(out.patches[~dropped], x[~dropped])

    def test_never_revives_absent_tokens(self):
        m = _model()
        x = np.ones((2, 16, 49))
        keep = np.zeros((2, 16), dtype=bool)
        keep[:, :3] = True
        out = ct.apply_token_dropout(m.embed(x, keep), 0.1, 0, m)
        assert not out.mask[:, 4:].any()

    def test_single_sequence(self):
        m = _model()
        out = ct.apply_token_dropout(m.embed(np.ones((16, 49))), 0.5, 0, m)
        assert out.tokens.shape == (17, 16) and out.mask.shape == (17,)

    def test_needs_patches(self):
        m = _model()
        seq = m.embed(np.ones((16, 49)))
        seq.patches = None
        with pytest.raises(StateError):
            ct.apply_token_dropout(seq, 0.5, 0, m)


class TestTraining:
    def test_loss_additivity(self):
        m = _model()
        rng = np.random.default_rng(0)
        new = (rng.uniform(0, 1, (5, 16, 49)), rng.random((5, 16)) < 0.5, np.array([0, 1, 0, 1, 1]))
        rep = (rng.uniform(0, 1, (3, 16, 49)), rng.random((3, 16)) < 0.5, np.array([2, 3, 2]))
        total, _, _ = ct.combined_loss(m, new, rep)
        a = tn.cross_entropy(m.forward(m.embed(new[0], new[1]))[0], new[2]).item()
        b = tn.cross_entropy(m.forward(m.embed(rep[0], rep[1]))[0], rep[2]).item()
        assert total.item() == a + b

    def test_weighted_replay_loss(self):
        m = _model()
        rng = np.random.default_rng(1)
        x, mask, y = rng.uniform(0, 1, (3, 16, 49)), np.ones((3, 16), bool), np.array([0, 1, 2])
        per = tn.cross_entropy(m.forward(m.embed(x))[0], y, reduction="none").data
        w = np.array([1.0, 3.0, 0.0])
        got = ct.batch_loss(m, x, mask, y, w).item()
        assert abs(got - (per[0] + 3 * per[1]) / 4) < 1e-12

    def test_adam_first_step(self):
        p = tn.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0])
        ct.Adam([p], lr=0.1).step()
        # the bias-corrected first step moves each coordinate by lr * sign(grad)
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_sgd_momentum(self):
        p = tn.Tensor(np.array([1.0]), requires_grad=True)
        opt = ct.SGD([p], lr=0.1, momentum=0.5)
        p.grad = np.array([1.0])
        opt.step()
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 - 0.1 - 0.15])

    def test_training_reduces_loss(self):
        s = _stream(n=10, tasks=1)
        x, y = s.train(0)
        m = _model()
        losses = ct.train_task(m, x, y, None, ct.TrainConfig(epochs=15, batch_size=8, lr=3e-3),
                               np.random.default_rng(0))
        assert np.mean(losses[-3:]) < np.mean(losses[:3])

    def test_empty_buffer_means_no_replay_forward(self):
        s = _stream(n=4, tasks=1)
        x, y = s.train(0)
        m = _model()
        ct.train_task(m, x, y, ct.ReplayMemory.empty(16, 49), ct.TrainConfig(epochs=1, batch_size=4),
                      np.random.default_rng(0))
        assert m.forward_calls == 2

    def test_replay_batch_capped_by_memory(self):
        m = _model()
        mem = ct.ReplayMemory.empty(16, 49)
        e = ts.TokensetEntry(0, 3, [1, 2], np.ones((2, 49)))
        mem.add(ts.TokensetBuffer([e], 16, 49, 0.125, 1.0, 0.125, pool_size=1))
        x, y = np.ones((4, 16, 49)), np.zeros(4, dtype=int)
        ct.train_task(m, x, y, mem, ct.TrainConfig(epochs=1, batch_size=4), np.random.default_rng(0))
        assert m.forward_calls == 2
        assert mem.stored_token_count == 2

    def test_keep_probability_controls_new_data_masks(self, monkeypatch):
        seen = []
        real = ct.dropout_mask

        def spy(n, T, r, seed):
            seen.append(r)
            return real(n, T, r, seed)

        monkeypatch.setattr(ct, "dropout_mask", spy)
        s = _stream(n=4, tasks=1)
        x, y = s.train(0)
        ct.train_task(_model(), x, y, None, ct.TrainConfig(epochs=1, batch_size=8), np.random.default_rng(0), keep=0.25)
        ct.train_task(_model(), x, y, None, ct.TrainConfig(epochs=1, batch_size=8, drop_rate=0.1),
                      np.random.default_rng(0), keep=0.25)
        assert seen == [0.75, 0.1]


class TestEvaluate:
    def test_chance_level(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (400, 16, 49))
        y = np.repeat([0, 1], 200)
        acc = ct.evaluate(_model(classes=2, seed=3), x, y)
        assert abs(acc - 0.5) < 4 * np.sqrt(0.25 / 400)

    def test_duplicate_and_repeat(self):
        s = _stream()
        x, y = s.test(0)
        m = _model()
        a = ct.evaluate(m, x, y)
        assert ct.evaluate(m, np.concatenate([x, x]), np.concatenate([y, y])) == a
        assert ct.evaluate(m, x, y) == a


class TestMetrics:
    def test_forgetting(self):
        acc = np.array([[0.9, np.nan, np.nan], [0.5, 0.8, np.nan], [0.6, 0.4, 0.7]])
        m = ct.Metrics(acc)
        np.testing.assert_allclose(m.forgetting(), [0.3, 0.4, 0.0])
        assert abs(m.average() - 1.7 / 3) < 1e-12
        assert abs(m.average(1) - 0.65) < 1e-12
        assert abs(m.average_forgetting() - 0.35) < 1e-12

    def test_csv(self, tmp_path):
        m = ct.Metrics(np.array([[1.0, np.nan], [0.5, 0.75]]), "naive", 1.0, 3)
        ct.write_metrics_csv(tmp_path / "m.csv", [m])
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "after_task,eval_task,accuracy,method,R,seed"
        assert lines[1:] == ["1,1,1.0,naive,1.0,3", "2,1,0.5,naive,1.0,3", "2,2,0.75,naive,1.0,3"]
        ct.write_summary_csv(tmp_path / "s.csv", [m])
        assert (tmp_path / "s.csv").read_text().splitlines()[1] == "naive,1.0,0.625,0.5"


class TestPolicies:
    def test_names_and_fractions(self):
        assert ct.BufferPolicy("core-tokenset", 0.04, "craig", "atman").name == "core-tokenset:craig+atman"
        assert abs(ct.BufferPolicy("core-tokenset", 0.04).token_fraction() - 0.2) < 1e-12
        assert ct.BufferPolicy("core-tokens", 0.3).token_fraction() == 0.3
        assert ct.BufferPolicy("coreset", 0.3).token_fraction() == 1.0

    def test_unknown(self):
        with pytest.raises(ContractError):
            ct.BufferPolicy("reservoir")

    def test_single_task(self):
        s = _stream(tasks=1)
        m = ct.run_sequence(s, _model(), ct.TrainConfig(epochs=1, batch_size=8), ct.BufferPolicy("cumulative"))
        assert m.acc.shape == (1, 1)
        assert m.stored_tokens == [0]

    def test_no_future_access_and_upper_triangle(self):
        s = _stream(tasks=3)
        log = []

        def check(i, model, memory):
            log.append(list(s.access_log))

        m = ct.run_sequence(s, _model(classes=6), ct.TrainConfig(epochs=1, batch_size=8),
                            ct.BufferPolicy("core-tokenset", 0.25, "random", "random"), callback=check)
        for i, seen in enumerate(log):
            assert max(t for _, t in seen) == i
        assert np.isnan(m.acc[np.triu_indices(3, 1)]).all()
        assert not np.isnan(m.acc[np.tril_indices(3)]).any()

    def test_cumulative_stores_everything(self):
        s = _stream(n=6, tasks=3)
        m = ct.run_sequence(s, _model(classes=6), ct.TrainConfig(epochs=1, batch_size=8), ct.BufferPolicy("cumulative"))
        assert m.stored_tokens == [12 * 16, 24 * 16, 24 * 16]

    def test_reproducible(self):
        runs = []
        for _ in range(2):
            s = _stream(tasks=2)
            runs.append(ct.run_sequence(s, _model(), ct.TrainConfig(epochs=2, batch_size=8, seed=4),
                                        ct.BufferPolicy("core-tokens", 0.5, token_method="rollout")))
        assert runs[0].acc.tobytes() == runs[1].acc.tobytes()
