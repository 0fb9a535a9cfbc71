import io
import math

import numpy as np
import pytest

from tppgraph import diffcore as dc
from tppgraph import synth, trainer
from tppgraph.diffcore import Tensor
from tppgraph.events import EventSequence
from tppgraph.model import PointProcessModel, TypeHead, cross_entropy, predicted_times
from tppgraph.trainer import (Adam, TrainConfig, build_model, evaluate, joint_loss,
                              load_checkpoint, mape_values, save_checkpoint, topk_hits,
                              train, type_distribution)

from util import param_grad_check


def poisson_seqs(n, seed=0, rate=1.0, horizon=30.0, marks=1):
    def gen(rng):
        seq = synth.gen_poisson(rate, horizon, rng)
        if seq is None or marks == 1:
            return seq
        mk = np.random.Generator(np.random.PCG64(int(seq.times[0] * 1e6) % 2**31))
        return EventSequence(seq.times, mk.integers(1, marks + 1, len(seq)))
    return synth.gen_dataset(gen, n, seed)


class TestTypeDistribution:
    def test_single_type_is_certain(self):
        head = TypeHead(4, 1, np.random.default_rng(0))
        probs = type_distribution(Tensor(np.random.default_rng(1).normal(size=(3, 4))), head)
        assert np.allclose(probs.value, 1.0)

    def test_zero_logits_uniform(self):
        head = TypeHead(4, 5, np.random.default_rng(0))
        head.w.value[...] = 0.0
        head.b.value[...] = 0.0
        probs = type_distribution(Tensor(np.ones((2, 4))), head)
        assert np.allclose(probs.value, 0.2)

    def test_shift_invariance(self):
        logits = np.random.default_rng(2).normal(size=(4, 3))
        a = dc.softmax(Tensor(logits), axis=1).value
        b = dc.softmax(Tensor(logits + 7.5), axis=1).value
        assert np.allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        head = TypeHead(4, 3, np.random.default_rng(3))
        probs = type_distribution(Tensor(np.random.default_rng(4).normal(size=(6, 4))), head)
        assert np.allclose(probs.value.sum(axis=1), 1.0, atol=1e-12)


class TestJointLoss:
    def test_perfect_classifier_adds_nothing(self):
        logits = np.full((3, 2), -50.0)
        marks = np.array([1, 2, 1])
        logits[np.arange(3), marks - 1] = 50.0
        nll = Tensor(np.array(1.23))
        total = joint_loss(nll, Tensor(logits), marks)
        assert float(total.value) == pytest.approx(1.23, abs=1e-8)

    def test_uniform_classifier_adds_log_m(self):
        logits = np.zeros((4, 5))
        total = joint_loss(Tensor(np.array(0.0)), Tensor(logits), np.array([1, 2, 3, 4]))
        assert float(total.value) == pytest.approx(math.log(5), abs=1e-12)

    def test_gradient_wrt_classifier_weights(self):
        rng = np.random.default_rng(5)
        head = TypeHead(3, 4, rng)
        h_val = rng.normal(size=(6, 3))
        marks = rng.integers(1, 5, 6)

        def loss():
            return joint_loss(Tensor(np.array(0.5)), head.logits(Tensor(h_val)), marks)

        assert param_grad_check(loss, [head.w, head.b]) < 1e-4


class TestMetricsFixture:
    """Hand-computed five-event fixture for Top-k ACC and both MAPE variants."""

    logits = np.array([
        [0.1, 0.5, 0.4],
        [0.9, 0.05, 0.05],
        [0.2, 0.3, 0.5],
        [0.3, 0.3, 0.4],
        [0.25, 0.5, 0.25],
    ])
    marks = np.array([2, 1, 1, 1, 3])

    def test_top1(self):
        hits = topk_hits(self.logits, self.marks, 1)
        # argmax per row: 2, 1, 3, 3, 2 -> hits on events 1 and 2
        assert hits.tolist() == [True, True, False, False, False]

    def test_top3_all_hit_with_three_types(self):
        assert topk_hits(self.logits, self.marks, 3).all()

    def test_top2(self):
        hits = topk_hits(self.logits, self.marks, 2)
        assert hits.tolist() == [True, True, False, True, False]

    def test_tie_breaks_to_lower_index(self):
        logits = np.array([[0.5, 0.5, 0.1]])
        assert topk_hits(logits, np.array([1]), 1).tolist() == [True]
        assert topk_hits(logits, np.array([2]), 1).tolist() == [False]

    def test_acc1_never_exceeds_acc3(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(100, 4))
        marks = rng.integers(1, 5, 100)
        acc1 = topk_hits(logits, marks, 1).mean()
        acc3 = topk_hits(logits, marks, 3).mean()
        assert acc1 <= acc3

    def test_mape_interval_perfect_is_zero(self):
        tau = np.array([0.5, 1.0, 2.0, 0.25, 4.0])
        assert mape_values(tau, tau, "interval") == 0.0

    def test_mape_printed_perfect_is_one(self):
        tau = np.array([0.5, 1.0, 2.0, 0.25, 4.0])
        assert mape_values(tau, tau, "printed") == pytest.approx(1.0, abs=1e-12)

    def test_mape_hand_computed(self):
        tau_true = np.array([1.0, 2.0, 4.0, 0.5, 1.0])
        tau_hat = np.array([1.5, 1.0, 4.0, 1.0, 0.5])
        expected_interval = np.mean([0.5, 0.5, 0.0, 1.0, 0.5])
        expected_printed = np.mean([1.5, 0.5, 1.0, 2.0, 0.5])
        assert mape_values(tau_hat, tau_true, "interval") == pytest.approx(expected_interval)
        assert mape_values(tau_hat, tau_true, "printed") == pytest.approx(expected_printed)

    def test_predicted_times_offsets(self):
        seqs = [EventSequence([1.0, 3.0], [1, 1])]
        t_hat = predicted_times(seqs, np.array([0.7, 0.7]))
        assert np.allclose(t_hat, [0.7, 1.7])


class TestAdam:
    def test_one_step_decreases_loss_tiny_lr(self):
        rng = np.random.default_rng(7)
        model = PointProcessModel(1, "weibull", "gru", embed_dim=8, K=2, seed=0)
        seqs = poisson_seqs(4, seed=1)
        loss0, _ = model.training_loss(seqs)
        opt = Adam(model.params(), lr=1e-6)
        opt.zero_grad()
        dc.backward(loss0)
        opt.step()
        loss1, _ = model.training_loss(seqs)
        assert float(loss1.value) < float(loss0.value)

    def test_clipping_bounds_update_norm(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        p.grad = np.array([1e6, 0.0, 0.0])
        opt = Adam([p], lr=1.0, grad_clip=10.0)
        opt.step()
        # clipped direction has unit-scale first component only
        assert abs(p.value[0]) > 0 and np.allclose(p.value[1:], 0.0)


class TestTrainLoop:
    def _cfg(self, **kw):
        base = dict(learning_rate=5e-3, embed_dim=8, batch_size=16, max_epochs=6,
                    patience=2, seed=0, K=1, family="weibull", encoder="gru",
                    mode="overall")
        base.update(kw)
        return TrainConfig(**base)

    def test_best_checkpoint_retained(self):
        seqs = poisson_seqs(30, seed=2)
        cfg = self._cfg()
        model = build_model(cfg, 1)
        result = train(model, seqs[:20], seqs[20:], cfg)
        vals = [row["val_nll"] for row in result.log]
        assert result.best_val_nll == pytest.approx(min(vals))
        total, n = model.evaluate_nll(seqs[20:])
        assert total / n == pytest.approx(result.best_val_nll, abs=1e-9)

    def test_zero_epochs_keeps_initialization(self):
        seqs = poisson_seqs(10, seed=3)
        cfg = self._cfg(max_epochs=0)
        model = build_model(cfg, 1)
        before = [p.value.copy() for p in model.params()]
        train(model, seqs[:8], seqs[8:], cfg)
        after = model.params()
        assert all(np.array_equal(a, b.value) for a, b in zip(before, after))

    def test_fixed_seed_reproduces_log(self):
        seqs = poisson_seqs(20, seed=4)
        cfg = self._cfg(max_epochs=3)
        logs = []
        for _ in range(2):
            model = build_model(cfg, 1)
            res = train(model, seqs[:15], seqs[15:], cfg)
            logs.append([(r["train_nll"], r["val_nll"]) for r in res.log])
        assert logs[0] == logs[1]

    def test_early_stopping_triggers(self):
        seqs = poisson_seqs(16, seed=5)
        cfg = self._cfg(max_epochs=50, patience=2, learning_rate=0.5)  # will overshoot
        model = build_model(cfg, 1)
        res = train(model, seqs[:12], seqs[12:], cfg)
        assert len(res.log) < 50


class TestEvaluate:
    def test_report_fields_and_padding_exclusion(self):
        seqs = poisson_seqs(8, seed=6)
        cfg = TrainConfig(embed_dim=8, K=1, family="weibull", encoder="gru", seed=1)
        model = build_model(cfg, 1)
        report = evaluate(model, seqs)
        assert set(report) >= {"nll", "mape", "mape_interval", "mape_printed",
                               "mape_variant", "acc1", "acc3", "n_events"}
        assert report["n_events"] == sum(len(s) for s in seqs)
        assert report["acc1"] == 1.0     # single type
        assert report["acc1"] <= report["acc3"]

    def test_typewise_evaluation_runs(self):
        seqs = poisson_seqs(6, seed=7, marks=2)
        cfg = TrainConfig(embed_dim=8, K=2, family="lognorm", encoder="gru",
                          mode="typewise", seed=1)
        model = build_model(cfg, 2)
        report = evaluate(model, seqs)
        assert np.isfinite(report["nll"]) and np.isfinite(report["mape"])


class TestCheckpoint:
    def test_round_trip_plain(self, tmp_path):
        cfg = TrainConfig(embed_dim=8, K=2, family="lognorm", encoder="gru", seed=9)
        model = build_model(cfg, 2)
        seqs = poisson_seqs(5, seed=8, marks=2)
        before = evaluate(model, seqs)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model, rng=np.random.default_rng(1), extra={"note": 1})
        clone, meta = load_checkpoint(path)
        after = evaluate(clone, seqs)
        assert before["nll"] == pytest.approx(after["nll"], abs=1e-12)
        assert meta["extra"]["note"] == 1
        for (n1, p1), (n2, p2) in zip(model.named_params(), clone.named_params()):
            assert n1 == n2 and np.array_equal(p1.value, p2.value)

    def test_round_trip_granger(self, tmp_path):
        cfg = TrainConfig(embed_dim=8, K=2, lag=4, family="lognorm", encoder="gru",
                          mode="granger", seed=10)
        model = build_model(cfg, 2)
        model.set_eval_graph(np.array([[1.0, 0.2], [0.8, 1.0]]))
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, model)
        clone, _ = load_checkpoint(path)
        assert np.allclose(clone.eval_graph_matrix, model.eval_graph_matrix)
        assert clone.config == model.config
