"""Queue and memory-bank behavior: routing, eviction, sampling, mixing."""

import numpy as np
import pytest

from dualhead.keypool import (
    EmptyPoolError,
    KeyEntry,
    MemoryBank,
    MocoQueues,
    bank_sample,
    bank_update,
    enqueue,
    sample_keys,
)


def unit(vec):
    v = np.asarray(vec, dtype=float)
    return v / np.linalg.norm(v)


def entry(label, d=3, L=2, seed=None, tag=0.0):
    if seed is None:
        h = np.zeros(d)
        h[label % d] = 1.0
        z = np.zeros(L)
        z[label % L] = 1.0
        if tag:
            h = unit(h + tag)
            z = unit(z + tag)
        return KeyEntry(h_key=h, z_key=z, label=label)
    rng = np.random.default_rng(seed)
    return KeyEntry(h_key=unit(rng.normal(size=d)), z_key=unit(rng.normal(size=L)), label=label)


class TestKeyEntry:
    def test_requires_unit_norm(self):
        with pytest.raises(ValueError):
            KeyEntry(h_key=np.array([1.0, 1.0]), z_key=np.array([1.0, 0.0]), label=0)

    def test_requires_vectors(self):
        with pytest.raises(ValueError):
            KeyEntry(h_key=np.eye(2), z_key=np.array([1.0, 0.0]), label=0)


class TestMocoQueues:
    def test_fifo_eviction(self):
        pool = MocoQueues(class_count=1, queue_size=2)
        a, b, c = (entry(0, seed=s) for s in (1, 2, 3))
        enqueue(pool, [a, b, c])
        kept = pool.entries(0)
        assert len(kept) == 2
        np.testing.assert_array_equal(kept[0].h_key, b.h_key)
        np.testing.assert_array_equal(kept[1].h_key, c.h_key)

    def test_push_to_empty(self):
        pool = MocoQueues(class_count=2, queue_size=4)
        enqueue(pool, [entry(1, seed=0)])
        assert pool.class_sizes() == [0, 1]

    def test_interleaved_routing_label_audit(self):
        # Exhaustive replay: every entry must land in its label's buffer.
        pool = MocoQueues(class_count=3, queue_size=8)
        rng = np.random.default_rng(42)
        pushed = [entry(int(rng.integers(3)), seed=i) for i in range(30)]
        enqueue(pool, pushed)
        for c in range(3):
            expect = [e for e in pushed if e.label == c][-8:]
            got = pool.entries(c)
            assert [e.label for e in got] == [c] * len(got)
            assert len(got) == len(expect)
            for e_got, e_want in zip(got, expect):
                np.testing.assert_array_equal(e_got.h_key, e_want.h_key)

    def test_label_out_of_range(self):
        pool = MocoQueues(class_count=2, queue_size=2)
        with pytest.raises(IndexError):
            enqueue(pool, [entry(5, seed=0)])

    def test_forced_replacement_single_entry(self):
        pool = MocoQueues(class_count=1, queue_size=4)
        e = entry(0, seed=7)
        enqueue(pool, [e])
        q = entry(0, seed=8)
        batch = sample_keys(pool, keys_per_class=2, query_entry=q, rng=np.random.default_rng(0))
        assert batch.labels.tolist() == [0, 0, 0]
        np.testing.assert_array_equal(batch.h_keys.data[0], q.h_key)
        np.testing.assert_array_equal(batch.h_keys.data[1], e.h_key)
        np.testing.assert_array_equal(batch.h_keys.data[2], e.h_key)

    def test_bank_dimension_arithmetic(self):
        pool = MocoQueues(class_count=3, queue_size=4)
        for c in range(3):
            enqueue(pool, [entry(c, seed=10 + c), entry(c, seed=20 + c)])
        batch = sample_keys(pool, 2, entry(1, seed=30), np.random.default_rng(1))
        assert batch.size == 6  # keys_per_class x non-empty classes
        assert batch.h_keys.shape == (7, 3)
        assert batch.z_keys.shape == (7, 2)
        assert batch.labels[0] == 1

    def test_seeded_sampling_replays(self):
        pool = MocoQueues(class_count=2, queue_size=8)
        for i in range(10):
            enqueue(pool, [entry(i % 2, seed=i)])
        q = entry(0, seed=99)
        b1 = sample_keys(pool, 3, q, np.random.default_rng(123))
        b2 = sample_keys(pool, 3, q, np.random.default_rng(123))
        np.testing.assert_array_equal(b1.h_keys.data, b2.h_keys.data)
        np.testing.assert_array_equal(b1.labels, b2.labels)

    def test_empty_pool_rejected(self):
        pool = MocoQueues(class_count=2, queue_size=2)
        with pytest.raises(EmptyPoolError):
            sample_keys(pool, 1, entry(0, seed=0), np.random.default_rng(0))

    def test_positive_set_never_empty(self):
        pool = MocoQueues(class_count=2, queue_size=2)
        enqueue(pool, [entry(1, seed=0)])  # no keys of class 0 present
        q = entry(0, seed=1)
        batch = sample_keys(pool, 2, q, np.random.default_rng(0))
        mask = batch.positive_mask(0)
        assert mask[0]
        assert mask.sum() >= 1


class TestMemoryBank:
    def make_bank(self, n=6, d=3, L=2, m=0.5):
        labels = np.arange(n) % 3
        bank = MemoryBank(labels, m_bank=m)
        rng = np.random.default_rng(0)
        h = rng.normal(size=(n, d))
        z = rng.normal(size=(n, L))
        bank.initialize(h, z)
        return bank

    def test_snapshot_count_and_norms(self):
        bank = self.make_bank()
        assert len(bank) == 6
        np.testing.assert_allclose(np.linalg.norm(bank.h_snap, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(bank.z_snap, axis=1), 1.0, atol=1e-12)

    def test_update_m0_replaces(self):
        bank = self.make_bank(m=0.0)
        new_h = unit([1.0, 0.0, 0.0])[None, :]
        new_z = unit([0.0, 1.0])[None, :]
        bank_update(bank, np.array([2]), new_h, new_z)
        np.testing.assert_allclose(bank.h_snap[2], new_h[0], atol=1e-12)
        np.testing.assert_allclose(bank.z_snap[2], new_z[0], atol=1e-12)

    def test_update_m1_frozen(self):
        bank = self.make_bank(m=1.0)
        before = bank.h_snap[3].copy()
        bank_update(bank, np.array([3]), unit([1, 1, 1])[None, :], unit([1, 1])[None, :])
        np.testing.assert_array_equal(bank.h_snap[3], before)

    def test_hand_mix_and_renormalize(self):
        labels = np.array([0])
        bank = MemoryBank(labels, m_bank=0.5)
        bank.initialize(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        bank_update(bank, np.array([0]), np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]))
        expect = np.array([np.sqrt(0.5), np.sqrt(0.5)])
        np.testing.assert_allclose(bank.h_snap[0], expect, atol=1e-12)
        np.testing.assert_allclose(bank.z_snap[0], expect, atol=1e-12)

    def test_update_out_of_range(self):
        bank = self.make_bank()
        with pytest.raises(IndexError):
            bank_update(bank, np.array([17]), unit([1, 0, 0])[None, :], unit([1, 0])[None, :])

    def test_uninitialized_bank_rejected(self):
        bank = MemoryBank(np.array([0, 1]), m_bank=0.5)
        with pytest.raises(EmptyPoolError):
            bank_sample(bank, 1, entry(0, seed=0), np.random.default_rng(0))

    def test_single_item_per_class_is_deterministic(self):
        labels = np.array([0, 1, 2])
        bank = MemoryBank(labels, m_bank=0.5)
        rng = np.random.default_rng(1)
        bank.initialize(rng.normal(size=(3, 3)), rng.normal(size=(3, 2)))
        q = entry(0, seed=5)
        batch = bank_sample(bank, 1, q, np.random.default_rng(9))
        assert batch.labels.tolist() == [0, 0, 1, 2]
        np.testing.assert_allclose(batch.h_keys.data[1], bank.h_snap[0], atol=0)

    def test_seeded_sampling_replays(self):
        bank = self.make_bank(n=12)
        q = entry(1, seed=3)
        b1 = bank_sample(bank, 2, q, np.random.default_rng(77))
        b2 = bank_sample(bank, 2, q, np.random.default_rng(77))
        np.testing.assert_array_equal(b1.h_keys.data, b2.h_keys.data)
        np.testing.assert_array_equal(b1.labels, b2.labels)

    def test_balanced_label_histogram(self):
        bank = self.make_bank(n=12)
        batch = bank_sample(bank, 4, entry(0, seed=2), np.random.default_rng(5))
        counts = np.bincount(batch.labels[1:], minlength=3)
        np.testing.assert_array_equal(counts, [4, 4, 4])

    def test_uniform_mode_keeps_size(self):
        bank = self.make_bank(n=12)
        batch = bank_sample(bank, 4, entry(0, seed=2), np.random.default_rng(5), uniform=True)
        assert batch.size == 12  # 4 per class x 3 classes, drawn globally


class TestContractParity:
    def test_same_batch_shape_and_guarantees(self):
        d, L = 3, 2
        pool = MocoQueues(class_count=2, queue_size=4)
        labels = np.array([0, 0, 1, 1])
        rng = np.random.default_rng(0)
        h = rng.normal(size=(4, d))
        z = rng.normal(size=(4, L))
        bank = MemoryBank(labels, m_bank=0.5)
        bank.initialize(h, z)
        hn = h / np.linalg.norm(h, axis=1, keepdims=True)
        zn = z / np.linalg.norm(z, axis=1, keepdims=True)
        enqueue(pool, [KeyEntry(hn[i], zn[i], int(labels[i])) for i in range(4)])
        q = entry(1, seed=4)
        for batch in (
            pool.sample(2, q, np.random.default_rng(3)),
            bank.sample(2, q, np.random.default_rng(3)),
        ):
            assert batch.h_keys.shape == (5, d)
            assert batch.z_keys.shape == (5, L)
            assert batch.labels[0] == q.label
            assert not batch.h_keys.grad_enabled and not batch.z_keys.grad_enabled
            np.testing.assert_allclose(np.linalg.norm(batch.h_keys.data, axis=1), 1.0, atol=1e-9)
