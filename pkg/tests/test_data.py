import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psyn.data import (cv_split, dataset_bytes, dataset_from_bytes, epoch_permutation,
                       load_dataset, make_synthetic, save_dataset, shard)
from psyn.errors import InputError

GOLDEN = Path(__file__).parent / "data" / "shard_golden.json"


def power_iteration_cond(x: np.ndarray, iters: int = 500) -> float:
    """sigma_max / sigma_min of x by power iteration on X^T X and inverse iteration."""
    a = x.T @ x
    v = np.ones(a.shape[0])
    for _ in range(iters):
        v = a @ v
        v /= np.linalg.norm(v)
    u = np.ones(a.shape[0])
    for _ in range(iters):
        u = np.linalg.solve(a, u)
        u /= np.linalg.norm(u)
    return float(np.sqrt((v @ a @ v) / (u @ a @ u)))


class TestSynthetic:
    def test_noiseless_recovery(self):
        from psyn.numkit import DATA_STREAM, rng
        ds = make_synthetic("linreg", 500, 12, 0.0, 10.0, 5)
        w = np.linalg.lstsq(ds.features, ds.targets, rcond=None)[0]
        # w* is the draw that follows the feature matrix on the data stream
        g = rng(5, DATA_STREAM)
        g.standard_normal((500, 12)), g.standard_normal((12, 12))
        w_star = g.standard_normal(12)
        assert np.linalg.norm(w - w_star) / np.linalg.norm(w_star) < 1e-8

    def test_deterministic(self):
        for task in ("linreg", "logreg", "mlp-teacher"):
            a = make_synthetic(task, 50, 4, 0.1, 3.0, 9)
            b = make_synthetic(task, 50, 4, 0.1, 3.0, 9)
            assert dataset_bytes(a) == dataset_bytes(b)

    def test_condition_number(self):
        ds = make_synthetic("linreg", 2000, 20, 0.0, 100.0, 1)
        assert power_iteration_cond(ds.features) == pytest.approx(100.0, rel=0.05)

    def test_labels(self):
        assert set(np.unique(make_synthetic("logreg", 200, 3, 0.1, 1.0, 0).targets)) <= {0.0, 1.0}
        y = make_synthetic("mlp-teacher", 200, 3, 0.0, 1.0, 0, n_classes=3).targets
        assert set(np.unique(y)) <= {0.0, 1.0, 2.0}

    @pytest.mark.parametrize("kw", [dict(n=0), dict(d=0), dict(noise=-1.0), dict(cond=0.5),
                                    dict(task="images")])
    def test_invalid(self, kw):
        args = dict(task="linreg", n=10, d=2, noise=0.0, cond=1.0, seed=0) | kw
        with pytest.raises(InputError):
            make_synthetic(**args)


class TestShard:
    def test_example(self):
        ds = make_synthetic("linreg", 80, 2, seed=0)
        blocks = shard(ds, 4, 2, 10, 0).blocks(0)
        assert len(blocks) == 1 and not blocks[0].short
        assert [len(s) for s in blocks[0].splits] == [20, 20, 20, 20]

    def test_short_block_kept(self):
        ds = make_synthetic("linreg", 95, 2, seed=0)
        blocks = shard(ds, 4, 2, 10, 0).blocks(0)
        assert [b.short for b in blocks] == [False, True]
        assert sum(len(s) for s in blocks[1].splits) == 15

    def test_minibatch_too_large(self):
        ds = make_synthetic("linreg", 30, 2, seed=0)
        with pytest.raises(InputError):
            shard(ds, 4, 1, 10, 0)

    @settings(max_examples=100, deadline=None)
    @given(n_workers=st.integers(1, 6), tau=st.integers(1, 5), mb=st.integers(1, 8),
           extra=st.integers(0, 90), seed=st.integers(0, 2**32), epoch=st.integers(0, 3))
    def test_disjoint_cover(self, n_workers, tau, mb, extra, seed, epoch):
        n = n_workers * mb + extra
        sh = shard(make_synthetic("linreg", n, 1, seed=1), n_workers, tau, mb, seed)
        seen = []
        for b in sh.blocks(epoch):
            assert len(b.splits) == n_workers
            for s in b.splits:
                seen.extend(s.tolist())
                if not b.short:
                    assert len(s) == tau * mb
                    assert len(sh.minibatches(s)) == tau
        assert sorted(seen) == list(range(n))

    def test_reshuffle(self):
        ds = make_synthetic("linreg", 60, 1, seed=1)
        on = shard(ds, 2, 3, 5, 4)
        off = shard(ds, 2, 3, 5, 4, reshuffle=False)
        first = lambda sh, e: sh.blocks(e)[0].splits[0].tolist()
        assert first(on, 0) != first(on, 1)
        assert first(off, 0) == first(off, 1) == first(on, 0)
        assert np.array_equal(epoch_permutation(60, 4, 2), epoch_permutation(60, 4, 2))

    def test_golden(self):
        gold = json.loads(GOLDEN.read_text())
        ds = make_synthetic("linreg", gold["n"], gold["d"], 0.0, 1.0, gold["seed"])
        sh = shard(ds, gold["n_workers"], gold["sync_period"], gold["minibatch"], gold["seed"])
        for epoch, blocks in gold["epochs"].items():
            got = [{"short": b.short, "splits": [s.tolist() for s in b.splits]}
                   for b in sh.blocks(int(epoch))]
            assert got == blocks


class TestCvSplit:
    def test_sizes_and_partition(self):
        ds = make_synthetic("linreg", 1000, 3, seed=2)
        train, cv = cv_split(ds, 0.1, 2)
        assert (train.n, cv.n) == (900, 100)
        rows = {r.tobytes() for r in ds.features}
        got = [r.tobytes() for r in np.vstack([train.features, cv.features])]
        assert len(set(got)) == 1000 and set(got) == rows

    def test_empty_cv_rejected(self):
        with pytest.raises(InputError):
            cv_split(make_synthetic("linreg", 4, 1, seed=0), 0.1)

    @pytest.mark.parametrize("fraction", [0.0, 0.6, -0.1])
    def test_fraction_range(self, fraction):
        with pytest.raises(InputError):
            cv_split(make_synthetic("linreg", 100, 1, seed=0), fraction)

    def test_deterministic(self):
        ds = make_synthetic("linreg", 50, 2, seed=3)
        a, b = cv_split(ds, 0.2, 8)[1], cv_split(ds, 0.2, 8)[1]
        assert dataset_bytes(a) == dataset_bytes(b)


class TestCache:
    @pytest.mark.parametrize("task", ["linreg", "logreg", "mlp-teacher"])
    def test_round_trip(self, task, tmp_path):
        ds = make_synthetic(task, 40, 5, 0.2, 4.0, 11)
        save_dataset(ds, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin")
        assert back.task == task
        assert back.features.tobytes() == ds.features.tobytes()
        assert back.targets.tobytes() == ds.targets.tobytes()

    def test_truncated(self):
        raw = dataset_bytes(make_synthetic("linreg", 5, 2, seed=0))
        with pytest.raises(InputError):
            dataset_from_bytes(raw[:-1])
