"""Training-loop semantics: optimizer algebra, step pipeline replay,
warmup audits, determinism, and evaluation."""

import numpy as np
import pytest

from dualhead.config import RunConfig, validate_config
from dualhead.data import make_blobs
from dualhead.keypool import EmptyPoolError, MemoryBank, MocoQueues
from dualhead.model import ModelDims, ModelParams, forward_key, init_params, init_twin
from dualhead.ndgrad import Tensor
from dualhead.trainer import (
    OptimizerState,
    _Batcher,
    advance_schedule,
    evaluate,
    fit,
    init_optimizer,
    metrics_csv_lines,
    prepare_data,
    resolve_schedule,
    sgd_apply,
    step,
    warmup,
)


def small_cfg(**over):
    cfg = RunConfig()
    cfg.seed = over.pop("seed", 0)
    cfg.dataset.kind = "blobs"
    cfg.dataset.classes = 2
    cfg.dataset.per_class = 12
    cfg.dataset.dim = 3
    cfg.dataset.separation = 5.0
    cfg.dataset.noise = 0.8
    cfg.dataset.seed = 21
    cfg.model.hidden = (6,)
    cfg.model.feature_dim = 5
    cfg.model.projector_dim = 4
    cfg.optimizer.iterations = over.pop("iterations", 20)
    cfg.optimizer.batch_size = 4
    cfg.optimizer.base_lr = over.pop("base_lr", 0.003)
    cfg.losses.reduction = "mean"
    cfg.keys.queue_size = 4
    cfg.keys.keys_per_class = 2
    cfg.keys.momentum = 0.9
    for key, value in over.items():
        section, field = key.split("__")
        setattr(getattr(cfg, section), field, value)
    return validate_config(cfg)


def np_encode_raw(layers, x):
    h = x.copy()
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i != len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def np_log_softmax(row):
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


class TestOptimizer:
    def test_head_moves_ten_times_farther(self):
        dims = ModelDims(in_dim=3, hidden=(4,), feature_dim=3, class_count=2, projector_dim=3)
        params = init_params(dims, np.random.default_rng(0))
        cfg = small_cfg()
        cfg.optimizer.weight_decay = 0.0
        cfg.optimizer.base_lr = 0.05
        opt = init_optimizer(params, cfg)
        before = {name: t.data.copy() for name, t in params.named_parameters()}
        for _, t in params.named_parameters():
            t.grad = np.ones_like(t.data)
        sgd_apply(params, opt)
        enc_delta = before["encoder.0.weight"] - params.encoder_layers[0][0].data
        head_delta = before["classifier.weight"] - params.classifier_W.data
        np.testing.assert_allclose(enc_delta, 0.05, atol=1e-15)
        np.testing.assert_allclose(head_delta, 0.5, atol=1e-15)
        np.testing.assert_allclose(head_delta.mean() / enc_delta.mean(), 10.0, atol=1e-12)

    def test_weight_decay_enters_gradient_before_momentum(self):
        # Closed-form single-parameter trajectory: v <- mu v + (g + wd * w),
        # w <- w - lr * v, replayed in plain floats.
        dims = ModelDims(in_dim=2, hidden=(), feature_dim=2, class_count=2, projector_dim=2)
        params = init_params(dims, np.random.default_rng(1))
        cfg = small_cfg()
        cfg.optimizer.weight_decay = 0.1
        cfg.optimizer.sgd_momentum = 0.9
        cfg.optimizer.base_lr = 0.01
        opt = init_optimizer(params, cfg)
        name = "projector.bias"
        w = params.projector_b.data.copy()
        v = np.zeros_like(w)
        g = 0.5
        for _ in range(5):
            params.projector_b.grad = np.full_like(w, g)
            sgd_apply(params, opt)
            v = 0.9 * v + (g + 0.1 * w)
            w = w - 0.01 * 10.0 * v  # projector is a head parameter
        np.testing.assert_allclose(params.projector_b.data, w, atol=1e-15)

    def test_untouched_parameters_are_skipped(self):
        dims = ModelDims(in_dim=2, hidden=(), feature_dim=2, class_count=2, projector_dim=2)
        params = init_params(dims, np.random.default_rng(2))
        opt = init_optimizer(params, small_cfg())
        before = params.projector_w.data.copy()
        params.classifier_W.grad = np.ones_like(params.classifier_W.data)
        sgd_apply(params, opt)
        np.testing.assert_array_equal(params.projector_w.data, before)

    def test_schedule_resolution_and_advance(self):
        assert resolve_schedule("none", 100) == ()
        assert resolve_schedule("auto", 900) == ((600, 0.1), (750, 0.1))
        assert resolve_schedule(((5, 0.5),), 100) == ((5, 0.5),)
        opt = OptimizerState(base_lr=1.0, schedule=((3, 0.1), (7, 0.5)))
        mults = []
        for it in range(1, 9):
            advance_schedule(opt, it)
            mults.append(opt.lr_mult)
        assert mults == [1.0, 1.0, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05]


class TestStep:
    def setup_run(self, cfg, warm=True):
        train, _ = prepare_data(cfg)
        ss = np.random.SeedSequence(cfg.seed)
        _, _, _, s_init, _, _ = ss.spawn(6)
        dims = ModelDims(
            in_dim=train.in_dim,
            hidden=cfg.model.hidden,
            feature_dim=cfg.model.feature_dim,
            class_count=train.class_count,
            projector_dim=cfg.model.projector_dim,
        )
        params = init_params(dims, np.random.default_rng(s_init))
        twin = init_twin(params, cfg.keys.momentum)
        if cfg.keys.generator == "membank":
            pool = MemoryBank(train.labels, m_bank=cfg.keys.bank_momentum)
        else:
            pool = MocoQueues(train.class_count, cfg.keys.queue_size)
        if warm:
            warmup(params, twin, pool, train, cfg)
        opt = init_optimizer(params, cfg)
        batch = (train.features[:4], train.labels[:4], train.example_ids[:4])
        return train, params, twin, pool, opt, batch

    def test_ce_only_reduces_to_vanilla_fine_tuning(self):
        import dualhead.losses as losses_mod
        import dualhead.model as model_mod

        cfg = small_cfg(losses__cce=0.0, losses__ccl=0.0)
        _, params, twin, pool, opt, batch = self.setup_run(cfg, warm=False)
        _, _, logits = model_mod.forward_query(params, Tensor(batch[0]))
        expect = losses_mod.ce(logits, batch[1], reduction="mean").item()
        terms = step(params, twin, pool, batch, opt, cfg, np.random.default_rng(0))
        assert terms.cce is None and terms.ccl is None
        assert abs(terms.ce.item() - expect) <= 1e-12
        assert abs(terms.total.item() - expect) <= 1e-12
        assert len(pool) == 0  # vanilla fine-tuning touches no key machinery

    def test_zero_learning_rate_freezes_parameters(self):
        cfg = small_cfg(base_lr=0.0)
        _, params, twin, pool, opt, batch = self.setup_run(cfg)
        before = {name: t.data.copy() for name, t in params.named_parameters()}
        terms = step(params, twin, pool, batch, opt, cfg, np.random.default_rng(0))
        assert terms.total.item() > 0.0
        for name, t in params.named_parameters():
            np.testing.assert_array_equal(t.data, before[name])

    def test_empty_pool_with_contrastive_terms(self):
        cfg = small_cfg()
        _, params, twin, pool, opt, batch = self.setup_run(cfg, warm=False)
        with pytest.raises(EmptyPoolError):
            step(params, twin, pool, batch, opt, cfg, np.random.default_rng(0))

    def test_scripted_replay_of_all_stages(self):
        """Independent numpy replay of stages 1-6 on a fixed seed."""
        cfg = small_cfg()
        train, params, twin, pool, opt, batch = self.setup_run(cfg)
        x, y, ids = batch
        tau = cfg.losses.tau
        kpc = cfg.keys.keys_per_class

        # Freeze pre-step state for the replay.
        pre_queues = [pool.entries(c) for c in range(train.class_count)]
        pre_params = {name: t.data.copy() for name, t in params.named_parameters()}
        pre_twin_pw = twin.projector_w.data.copy()
        enc_layers = [(w.data.copy(), b.data.copy()) for w, b in params.encoder_layers]

        terms = step(params, twin, pool, batch, opt, cfg, np.random.default_rng(321))

        # Stage 1: live forward.
        h = np_encode_raw(enc_layers, x)
        z = h @ pre_params["projector.weight"] + pre_params["projector.bias"]
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        logits = h @ pre_params["classifier.weight"].T
        h_norm = h / np.linalg.norm(h, axis=1, keepdims=True)

        # Stage 2: key forward. The twin still equals the pre-step parameters
        # here (its momentum update happens after the optimizer step).
        hk = np_encode_raw(enc_layers, x)
        zk = hk @ pre_params["projector.weight"] + pre_params["projector.bias"]
        zk /= np.linalg.norm(zk, axis=1, keepdims=True)
        hk_norm = hk / np.linalg.norm(hk, axis=1, keepdims=True)

        # Stage 3: sampling replay with the same generator.
        rng = np.random.default_rng(321)
        banks = []
        for i in range(len(y)):
            rows_h, rows_z, labels = [hk_norm[i]], [zk[i]], [int(y[i])]
            for c in range(train.class_count):
                buf = pre_queues[c]
                if not buf:
                    continue
                idx = rng.integers(0, len(buf), size=kpc)
                for j in idx:
                    rows_h.append(buf[int(j)].h_key)
                    rows_z.append(buf[int(j)].z_key)
                    labels.append(c)
            banks.append((np.array(rows_h), np.array(rows_z), np.array(labels)))

        # Stage 4: loss values.
        b = len(y)
        ce_val = sum(-np_log_softmax(logits[i])[y[i]] for i in range(b)) / b
        cce_val = 0.0
        ccl_val = 0.0
        for i in range(b):
            rows_h, rows_z, labels = banks[i]
            bank = np.vstack([h_norm[i][None, :], rows_h[1:]])
            sims = (bank @ pre_params["classifier.weight"][y[i]]) / tau
            mult = int((labels == y[i]).sum())
            cce_val += mult * -np_log_softmax(sims)[0]
            sims_z = (rows_z @ z[i]) / tau
            lsz = np_log_softmax(sims_z)
            ccl_val += -lsz[labels == y[i]].sum()
        cce_val /= b
        ccl_val /= b

        assert abs(terms.ce.item() - ce_val) <= 1e-12 * max(1.0, abs(ce_val))
        assert abs(terms.cce.item() - cce_val) <= 1e-12 * max(1.0, abs(cce_val))
        assert abs(terms.ccl.item() - ccl_val) <= 1e-12 * max(1.0, abs(ccl_val))
        total = ce_val + cce_val + ccl_val
        assert abs(terms.total.item() - total) <= 1e-12 * max(1.0, abs(total))

        # Stage 5: twin mixed with the POST-update parameters.
        m = cfg.keys.momentum
        expect_twin = m * pre_twin_pw + (1 - m) * params.projector_w.data
        np.testing.assert_allclose(twin.projector_w.data, expect_twin, atol=1e-15)
        wrong_twin = m * pre_twin_pw + (1 - m) * pre_params["projector.weight"]
        assert not np.allclose(twin.projector_w.data, wrong_twin, atol=1e-12)

        # Stage 6: this batch's keys entered the queues after sampling, so
        # each class buffer now ends with the batch's last key of that class.
        for c in set(int(v) for v in y):
            last = max(j for j in range(len(y)) if y[j] == c)
            np.testing.assert_allclose(pool.entries(c)[-1].h_key, hk_norm[last], atol=1e-15)

    def test_bank_mode_mixes_live_features(self):
        cfg = small_cfg(keys__generator="membank")
        train, params, twin, pool, opt, batch = self.setup_run(cfg)
        x, y, ids = batch
        pre_snap = pool.h_snap.copy()
        enc_layers = [(w.data.copy(), b.data.copy()) for w, b in params.encoder_layers]
        step(params, twin, pool, batch, opt, cfg, np.random.default_rng(5))
        h = np_encode_raw(enc_layers, x)
        h_norm = h / np.linalg.norm(h, axis=1, keepdims=True)
        mixed = cfg.keys.bank_momentum * pre_snap[ids] + (1 - cfg.keys.bank_momentum) * h_norm
        mixed /= np.linalg.norm(mixed, axis=1, keepdims=True)
        np.testing.assert_allclose(pool.h_snap[ids], mixed, atol=1e-12)


class TestWarmup:
    def test_queue_mode_fills_newest_per_class(self):
        cfg = small_cfg(keys__queue_size=2)
        ds = make_blobs(2, 5, dim=3, separation=5.0, noise=0.5, seed=3)
        dims = ModelDims(in_dim=3, hidden=(6,), feature_dim=5, class_count=2, projector_dim=4)
        params = init_params(dims, np.random.default_rng(4))
        twin = init_twin(params, 0.9)
        pool = MocoQueues(2, queue_size=2)
        warmup(params, twin, pool, ds, cfg)
        assert pool.class_sizes() == [2, 2]
        # Class blocks are contiguous: newest two of class c are its last rows.
        for c, newest_ids in ((0, [3, 4]), (1, [8, 9])):
            h_t, _ = forward_key(twin, Tensor(ds.features[newest_ids]))
            got = pool.entries(c)
            for row, e in zip(h_t.data, got):
                np.testing.assert_allclose(e.h_key, row, atol=1e-15)

    def test_bank_mode_snapshots_every_example(self):
        cfg = small_cfg(keys__generator="membank")
        ds = make_blobs(2, 7, dim=3, separation=5.0, noise=0.5, seed=5)
        dims = ModelDims(in_dim=3, hidden=(6,), feature_dim=5, class_count=2, projector_dim=4)
        params = init_params(dims, np.random.default_rng(6))
        twin = init_twin(params, 0.9)
        bank = MemoryBank(ds.labels, m_bank=0.5)
        warmup(params, twin, bank, ds, cfg)
        assert len(bank) == len(ds)
        np.testing.assert_allclose(np.linalg.norm(bank.h_snap, axis=1), 1.0, atol=1e-12)
        first = bank.h_snap.copy()
        warmup(params, twin, bank, ds, cfg)  # re-initialization is idempotent
        np.testing.assert_array_equal(bank.h_snap, first)


class TestEvaluate:
    def constant_predictor(self, class_count=3, in_dim=2):
        dims = ModelDims(in_dim=in_dim, hidden=(), feature_dim=in_dim, class_count=class_count, projector_dim=2)
        params = ModelParams(dims=dims)
        params.encoder_layers.append((Tensor(np.zeros((in_dim, in_dim)), grad_enabled=True),
                                      Tensor(np.zeros(in_dim), grad_enabled=True)))
        params.classifier_W = Tensor(np.zeros((class_count, in_dim)), grad_enabled=True)
        params.projector_w = Tensor(np.ones((in_dim, 2)), grad_enabled=True)
        params.projector_b = Tensor(np.zeros(2), grad_enabled=True)
        return params

    def test_constant_class_zero_on_all_zero_labels(self):
        from dualhead.data import Dataset

        params = self.constant_predictor()
        ds = Dataset(np.random.default_rng(0).normal(size=(6, 2)), np.zeros(6, dtype=int), np.arange(6), 3)
        assert evaluate(params, ds) == 1.0

    def test_constant_predictor_on_balanced_set(self):
        from dualhead.data import Dataset

        params = self.constant_predictor(class_count=2)
        labels = np.array([0, 1] * 5)
        ds = Dataset(np.random.default_rng(1).normal(size=(10, 2)), labels, np.arange(10), 2)
        assert evaluate(params, ds) == 0.5

    def test_hand_built_logits_table(self):
        from dualhead.data import Dataset

        dims = ModelDims(in_dim=2, hidden=(), feature_dim=2, class_count=2, projector_dim=2)
        params = ModelParams(dims=dims)
        params.encoder_layers.append((Tensor(np.eye(2), grad_enabled=True), Tensor(np.zeros(2), grad_enabled=True)))
        params.classifier_W = Tensor(np.eye(2), grad_enabled=True)
        params.projector_w = Tensor(np.ones((2, 2)), grad_enabled=True)
        params.projector_b = Tensor(np.zeros(2), grad_enabled=True)
        logits_table = np.array([[2.0, 1.0], [0.0, 3.0], [5.0, 5.0], [1.0, 0.0]])
        labels = np.array([0, 1, 1, 1])  # predictions: 0, 1, 0 (tie), 0 -> 2/4
        ds = Dataset(logits_table, labels, np.arange(4), 2)
        assert evaluate(params, ds) == 0.5

    def test_empty_dataset_rejected(self):
        from dualhead.data import DataError

        with pytest.raises(DataError):
            evaluate(self.constant_predictor(), type("Fake", (), {"__len__": lambda self: 0})())


class TestFit:
    def test_zero_iterations_yields_initial_eval_only(self):
        run = fit(small_cfg(iterations=0))
        assert len(run.metric_log) == 1
        row = run.metric_log[0]
        assert row.iteration == 0 and row.val_acc is not None and row.ce is None

    def test_same_seed_same_metric_log(self):
        r1 = fit(small_cfg(iterations=30))
        r2 = fit(small_cfg(iterations=30))
        assert metrics_csv_lines(r1) == metrics_csv_lines(r2)

    def test_different_seed_differs(self):
        r1 = fit(small_cfg(iterations=30, seed=0))
        r2 = fit(small_cfg(iterations=30, seed=1))
        assert metrics_csv_lines(r1) != metrics_csv_lines(r2)

    def test_deferred_warmup_trains(self):
        cfg = small_cfg(iterations=15, keys__warmup_mode="defer")
        run = fit(cfg)
        assert len(run.pool) > 0
        assert run.metric_log[-1].cce is not None

    def test_membank_fit_runs(self):
        run = fit(small_cfg(iterations=25, keys__generator="membank"))
        assert run.final_val_acc >= 0.0
        assert run.pool.initialized

    def test_csv_lines_format(self):
        # log_every=10, eval_every=100, 10 iterations: rows at 0 and 10 only.
        run = fit(small_cfg(iterations=10))
        lines = metrics_csv_lines(run)
        assert lines[0] == "iteration,ce,cce,ccl,total,val_acc"
        assert lines[1].startswith("0,,,,,")
        assert len(lines) == 3
        final = lines[2].split(",")
        assert final[0] == "10" and final[1] and final[5]

    def test_batcher_covers_all_examples_each_epoch(self):
        rng = np.random.default_rng(0)
        batcher = _Batcher(n=10, batch_size=4, rng=rng)
        seen = np.concatenate([batcher.next() for _ in range(3)])
        assert sorted(seen.tolist()) == list(range(10))
