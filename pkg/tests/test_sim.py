import math

import numpy as np
import pytest

from psyn.data import cv_split, epoch_permutation, make_synthetic, shard
from psyn.errors import InputError
from psyn.numkit import backward, init_model, sgd_step
from psyn.sim import (SERVER, SimConfig, barrier_sync, curve_csv, measure_speedup,
                      read_curve_csv, run_simulation, sequential_sgd, trace_csv, warm_start)
from psyn.strategies import StrategyConfig


def problem(n=240, d=5, seed=3, noise=0.1, cond=5.0):
    ds = make_synthetic("linreg", n, d, noise, cond, seed)
    train, cv = cv_split(ds, 0.2, seed)
    model = warm_start(init_model("linear", (d, 1)), train, 8, 0.05, seed)
    return model, train, cv


def run(kind, n_workers, tau, mb=4, times=None, cost=0.0, epochs=3, seed=3, lr=0.05,
        reshuffle=True, record=False, data=None, **kw):
    model, train, cv = data or problem(seed=seed)
    st = StrategyConfig(kind, n_workers, tau, lr, **kw)
    cfg = SimConfig(st, times or (1.0,) * n_workers, cost, epochs, seed, record)
    sh = shard(train, n_workers, tau, mb, seed, reshuffle)
    return run_simulation(cfg, model, sh, cv)


class TestReductions:
    @pytest.mark.parametrize("kind,kw", [("bsp", {}), ("asgd", {}), ("bmuf", {}),
                                         ("bmuf", {"block_momentum": 0.0}),
                                         ("easgd-async", {"elastic_alpha": 0.0})])
    def test_single_worker_is_sequential_sgd(self, kind, kw):
        model, train, cv = data = problem()
        ref = sequential_sgd(model, train, 4, 0.05, 1.0, 6, 3, True, cv)
        res = run(kind, 1, 1, epochs=6, data=data, **kw)
        assert res.final_global.tobytes() == ref.final_global.tobytes()
        assert res.learning_curve == ref.learning_curve
        assert res.simulated_wall_clock == ref.simulated_wall_clock
        assert measure_speedup(res, ref) == 1.0

    @pytest.mark.parametrize("n,tau", [(2, 1), (4, 5), (3, 2)])
    def test_bmuf_zeta0_is_bsp(self, n, tau):
        data = problem()
        a = run("bsp", n, tau, data=data, record=True)
        b = run("bmuf", n, tau, data=data, record=True, block_momentum=0.0)
        assert len(a.global_history) == len(b.global_history) > 0
        for x, y in zip(a.global_history, b.global_history):
            assert x.tobytes() == y.tobytes()


class TestTiming:
    def test_barrier(self):
        assert barrier_sync([3, 5, 4, 4.5], 0.5) == 5.5
        assert barrier_sync([2.0], 0.25) == 2.25
        with pytest.raises(InputError):
            barrier_sync([], 0.0)

    def test_bsp_linear_speedup(self):
        data = problem(n=400)
        model, train, cv = data
        res = run("bsp", 4, 5, mb=4, epochs=1, data=data)
        ref = sequential_sgd(model, train, 4, 0.05, 1.0, 1, 3, True, cv)
        assert res.simulated_wall_clock == ref.simulated_wall_clock / 4
        assert measure_speedup(res, ref) == 4.0

    def test_straggler_sets_the_pace(self):
        data = problem(n=400)
        res = run("bsp", 4, 5, mb=4, times=(1.0, 1.0, 1.0, 10.0), epochs=1, data=data)
        # 320 training samples, 80-sample blocks: four blocks of 5 steps at 10 s per step
        assert res.simulated_wall_clock == 4 * 5 * 10.0

    def test_async_fast_workers_take_more_work(self):
        data = problem(n=400)
        res = run("asgd", 4, 1, mb=4, times=(1.0, 1.0, 1.0, 10.0), epochs=1, data=data)
        done = [sum(1 for e in res.trace if e.kind == "compute-done" and e.worker == i)
                for i in range(4)]
        assert sum(done) == 80 and done[3] < done[0]

    def test_exchange_cost_per_round(self):
        data = problem(n=400)
        res = run("bmuf", 4, 5, mb=4, cost=0.5, epochs=1, data=data)
        assert res.simulated_wall_clock == 4 * (5 * 1.0 + 0.5)


class TestStaleness:
    def test_two_worker_script(self):
        ds = make_synthetic("linreg", 8, 3, 0.1, 2.0, 1)
        model = init_model("linear", (3, 1)).with_params(np.array([0.3, -0.2, 0.1]))
        lr = 0.1
        st = StrategyConfig("asgd", 2, 1, lr)
        sh = shard(ds, 2, 1, 1, 5)
        res = run_simulation(SimConfig(st, (1.0, 3.0), 0.0, 1, 5), model, sh)
        pushes = [(e.time, e.worker, e.staleness_k) for e in res.trace if e.kind == "push"]
        assert pushes == [(1.0, 0, 0), (2.0, 0, 0), (3.0, 0, 0), (3.0, 1, 3),
                          (4.0, 0, 1), (5.0, 0, 0), (6.0, 0, 0), (6.0, 1, 3)]

        # replay the server by hand: sample order is the epoch permutation, one per split
        s = epoch_permutation(8, 5, 0)
        g = lambda w, i: backward(model.with_params(w), ds.batch(s[i:i + 1]))
        w = [model.params]
        step = lambda base, i: w.append(sgd_step(w[-1], g(base, i), lr))
        step(w[0], 0)   # t=1 worker 0, pulled v0
        step(w[1], 2)   # t=2 worker 0, pulled v1
        step(w[2], 3)   # t=3 worker 0, pulled v2
        step(w[0], 1)   # t=3 worker 1, pulled v0: three updates behind
        step(w[3], 4)   # t=4 worker 0, pulled v3
        step(w[5], 6)   # t=5
        step(w[6], 7)   # t=6 worker 0
        step(w[4], 5)   # t=6 worker 1, pulled v4
        assert res.final_global.tobytes() == w[-1].tobytes()

    def test_single_worker_never_stale(self):
        res = run("asgd", 1, 2)
        ks = [e.staleness_k for e in res.trace if e.kind == "push"]
        assert ks and all(k == 0 for k in ks)

    def test_sync_events_have_no_staleness(self):
        for kind in ("bsp", "bmuf", "easgd-sync"):
            res = run(kind, 3, 2)
            assert all(e.staleness_k is None for e in res.trace)


class TestDeterminism:
    @pytest.mark.parametrize("kind", ["asgd", "easgd-async", "bmuf", "easgd-sync"])
    def test_bitwise_rerun(self, kind):
        a = run(kind, 3, 2, times=(1.0, 1.7, 0.4), cost=0.3)
        b = run(kind, 3, 2, times=(1.0, 1.7, 0.4), cost=0.3)
        assert a.final_global.tobytes() == b.final_global.tobytes()
        assert trace_csv(a.trace) == trace_csv(b.trace)
        assert curve_csv(a.learning_curve) == curve_csv(b.learning_curve)

    @pytest.mark.parametrize("kind", ["asgd", "easgd-async", "bsp", "easgd-sync"])
    def test_trace_totally_ordered(self, kind):
        res = run(kind, 4, 3, times=(1.0, 1.0, 2.0, 0.5), cost=0.25, epochs=3)
        keys = [(e.time, e.worker) for e in res.trace]
        assert keys == sorted(keys)
        assert [e.seq for e in res.trace] == list(range(len(res.trace)))
        assert {e.worker for e in res.trace} <= {0, 1, 2, 3, SERVER}

    def test_every_sample_once_per_epoch(self):
        data = problem(n=250)
        for kind in ("asgd", "bsp"):
            res = run(kind, 3, 4, mb=3, epochs=2, data=data, lr=0.01)
            n_batches = sum(1 for e in res.trace if e.kind == "compute-done")
            per_epoch = sum(len(sh) for b in shard(data[1], 3, 4, 3, 3).blocks(0)
                            for sh in [shard(data[1], 3, 4, 3, 3).minibatches(s) for s in b.splits])
            assert n_batches == per_epoch * res.epochs


class TestOutcomes:
    def test_divergence(self):
        res = run("asgd", 2, 1, lr=50.0)
        assert res.status == "diverged" and res.diverged
        assert res.final_cv_loss == math.inf

    def test_easgd_alpha0_server_untouched(self):
        model, _, _ = data = problem()
        res = run("easgd-async", 2, 2, data=data, record=True, elastic_alpha=0.0)
        assert all(g.tobytes() == model.params.tobytes() for g in res.global_history)

    def test_curve_round_trip(self):
        res = run("bsp", 2, 2)
        assert read_curve_csv(curve_csv(res.learning_curve)) == res.learning_curve
        assert res.learning_curve[0].epoch == 0 and res.learning_curve[0].sim_time == 0.0

    def test_mismatched_shards(self):
        model, train, cv = problem()
        cfg = SimConfig(StrategyConfig("bsp", 2, 2), (1.0, 1.0))
        with pytest.raises(InputError):
            run_simulation(cfg, model, shard(train, 2, 3, 4), cv)

    def test_config_validation(self):
        with pytest.raises(InputError):
            SimConfig(StrategyConfig("bsp", 2), (1.0,))
        with pytest.raises(InputError):
            SimConfig(StrategyConfig("bsp", 1), (0.0,))
