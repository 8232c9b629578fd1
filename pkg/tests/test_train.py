import numpy as np
import pytest

import gatedmtl.train as train_mod
from gatedmtl.data import SyntheticTaskset, default_tasks, generate_dataset
from gatedmtl.gates import SparsityConfig, gate_statistics
from gatedmtl.model import (ArchConfig, build_encoder, encoder_to_dict, freeze_gates, load_checkpoint,
                            save_checkpoint, task_losses, total_loss)
from gatedmtl.tensor import ContractError
from gatedmtl.train import (DEFAULT_LAMBDAS, TAU_LEVELS, OptimizerConfig, SweepPlan, build_gated, evaluate,
                            factorial_taus, fit, import_single_task, pareto_front, partition_params, run_sweep,
                            train_interrogate, train_mtl_uniform, train_single_task, uniform_taus)

TASKS = default_tasks()
ARCH = ArchConfig(stem_channels=4, widths=[4, 4], pool_after=[1])


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SyntheticTaskset(train_size=96, test_size=64, seed=1))


def cfg(**kw):
    return OptimizerConfig(**{"epochs": 1, "batch_size": 32, "seed": 1, **kw})


class TestConfig:
    def test_dict_sections(self):
        c = OptimizerConfig(main={"lr": 0.01}, gate={"lr": 0.5}, lr_schedule={"kind": "step", "step_size": 2})
        assert c.main.lr == 0.01 and c.gate.lr == 0.5 and c.lr_schedule.scale(5, 10) == pytest.approx(1 / 9)

    @pytest.mark.parametrize("kw", [{"main": {"lr": 0.0}}, {"gate": {"lr": -1.0}}, {"epochs": -1},
                                    {"batch_size": 0}, {"main": {"kind": "sgd"}}])
    def test_rejects(self, kw):
        with pytest.raises(ContractError):
            OptimizerConfig(**kw)

    def test_polynomial_schedule(self):
        c = OptimizerConfig(lr_schedule={"kind": "polynomial", "power": 1.0})
        assert c.lr_schedule.scale(0, 4) == 1.0 and c.lr_schedule.scale(2, 4) == 0.5


class TestPartition:
    def test_disjoint_and_routing_only_in_gate_group(self):
        enc = build_gated(ARCH, TASKS, cfg())
        main, gate = partition_params(enc, cfg())
        assert set(gate) == {"gates.alpha", "mixer.beta"}
        assert not {id(p) for p in main.values()} & {id(p) for p in gate.values()}
        assert all(not k.startswith("stem.") for k in main)  # fixed stem

    def test_mixer_switch(self):
        c = cfg(gate={"include_mixer": False})
        main, gate = partition_params(build_gated(ARCH, TASKS, c), c)
        assert set(gate) == {"gates.alpha"} and "mixer.beta" in main

    def test_frozen_gates_leave_gate_group_empty(self):
        enc = build_gated(ARCH, TASKS, cfg())
        freeze_gates(enc, "shared")
        assert partition_params(enc, cfg())[1] == {}

    def test_optimizers_touch_only_their_group(self, data):
        tr, _ = data
        enc = build_gated(ARCH, TASKS, cfg())
        main, gate = partition_params(enc, cfg())
        stem = {k: v.data.copy() for k, v in enc.params.items() if k.startswith("stem.")}
        before = {k: v.data.copy() for k, v in {**main, **gate}.items()}
        # a gate lr of ~0 isolates what the main optimizer changes and vice versa
        fit(enc, tr, cfg(gate={"lr": 1e-300}), SparsityConfig(0.05, [0.0] * 3))
        for k in gate:
            assert np.array_equal(gate[k].data, before[k]), k
        assert any(not np.array_equal(main[k].data, before[k]) for k in main)
        enc2 = build_gated(ARCH, TASKS, cfg())
        m2, g2 = partition_params(enc2, cfg())
        b2 = {k: v.data.copy() for k, v in m2.items()}
        fit(enc2, tr, cfg(main={"lr": 1e-300, "weight_decay": 0.0}), SparsityConfig(0.05, [0.0] * 3))
        for k in m2:
            np.testing.assert_allclose(m2[k].data, b2[k], rtol=0, atol=1e-200)
        for k, v in stem.items():
            assert np.array_equal(enc.params[k].data, v)


class TestFit:
    def test_zero_epochs_is_initialization(self, data):
        tr, _ = data
        enc = build_gated(ARCH, TASKS, cfg(epochs=0))
        ref = encoder_to_dict(build_gated(ARCH, TASKS, cfg(epochs=0)))
        hist = fit(enc, tr, cfg(epochs=0))
        assert len(hist) == 1 and hist[0]["epoch"] == 0
        assert encoder_to_dict(enc) == ref

    def test_deterministic(self, data):
        tr, te = data

        def run():
            enc = build_gated(ARCH, TASKS, cfg(epochs=2))
            hist = fit(enc, tr, cfg(epochs=2), SparsityConfig(0.05, [0.25] * 3), test=te)
            return hist, encoder_to_dict(enc)
        assert run() == run()

    def test_zero_lambda_gradient_is_task_gradient(self, data):
        tr, _ = data
        batch = tr.batch(np.arange(16))
        grads = []
        for scfg in (SparsityConfig(0.0, [0.0] * 3), SparsityConfig(variant="none")):
            enc = build_gated(ARCH, TASKS, cfg())
            _, weighted = task_losses(enc, batch)
            total_loss(weighted, enc.bank, scfg).backward()
            grads.append(enc.bank.alpha.grad.copy())
        enc = build_gated(ARCH, TASKS, cfg())
        task_losses(enc, batch)[1].backward()
        assert grads[0].tobytes() == grads[1].tobytes() == enc.bank.alpha.grad.tobytes()

    def test_all_shared_gates_leave_task_branches_without_gradient(self, data):
        tr, _ = data
        enc = build_encoder(ARCH, TASKS, seed=2)
        freeze_gates(enc, "shared")
        task_losses(enc, tr.batch(np.arange(16)), prune_dead=False)[1].backward()
        for k, p in enc.main_params().items():
            if ".task" in k:
                assert np.all(p.grad == 0), k
            elif k.startswith(("block", "head")) and k.endswith(".w"):
                assert np.any(p.grad != 0), k

    def test_history_ratios_match_checkpoint(self, data, tmp_path):
        tr, _ = data
        enc = build_gated(ARCH, TASKS, cfg(epochs=3))
        seen = []

        def snap(rec):
            path = save_checkpoint(enc, tmp_path / f"e{rec['epoch']}.json")
            back, _ = load_checkpoint(path)
            seen.append((rec["selection_ratio"], gate_statistics(back.bank, back.mixer).selection_ratio))
        fit(enc, tr, cfg(epochs=3), SparsityConfig(0.1, [0.0] * 3), on_epoch=snap)
        assert len(seen) == 4
        for a, b in seen:
            assert a == b

    def test_strong_sparsity_saturates(self):
        tr, _ = generate_dataset(SyntheticTaskset(train_size=320, test_size=50, seed=1))
        c = cfg(epochs=2)
        enc = build_gated(ArchConfig(), TASKS, c)
        _, hist = train_interrogate(enc, tr, c, SparsityConfig(10.0, [0.0] * 3))
        assert all(r < 0.05 for r in hist[-1]["selection_ratio"])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reported(self, data):
        tr, _ = data
        enc = build_gated(ARCH, TASKS, cfg())
        enc.params["block0.shared.w"].data[:] = np.inf
        with pytest.raises(train_mod.TrainingDiverged):
            fit(enc, tr, cfg())


class TestFamilies:
    def test_stl_import_reproduces_single_task_metrics(self, data):
        tr, te = data
        stl = [train_single_task(t, ARCH, TASKS, tr, cfg(), test=te) for t in range(3)]
        stl_metrics = {}
        for _, hist in stl:
            stl_metrics.update(hist[-1]["test_metrics"])
        enc = build_gated(ARCH, TASKS, cfg(epochs=0))
        enc.bank.set_all(30.0)
        _, hist = train_interrogate(enc, tr, cfg(epochs=0), SparsityConfig(0.05, [0.0] * 3),
                                    init="from_single_task", stl=[e for e, _ in stl], test=te)
        assert hist[0]["test_metrics"] == stl_metrics

    def test_stl_import_contracts(self, data):
        enc = build_gated(ARCH, TASKS, cfg())
        with pytest.raises(ContractError):
            import_single_task(enc, [])
        with pytest.raises(ContractError):
            train_interrogate(enc, data[0], cfg(), SparsityConfig(), init="from_single_task")
        with pytest.raises(ContractError):
            train_interrogate(enc, data[0], cfg(), SparsityConfig(), init="warm")

    def test_mtl_uniform_is_frozen_all_shared(self, data):
        tr, te = data
        enc, hist = train_mtl_uniform(ARCH, TASKS, tr, cfg(), test=te)
        assert not enc.bank.trainable and hist[-1]["selection_ratio"] == [0.0, 0.0, 0.0]
        assert set(hist[-1]["test_metrics"]) == {"quadrant.accuracy", "mass.l1_error", "parity.accuracy"}

    def test_evaluate_batches_agree(self, data):
        tr, te = data
        enc = build_encoder(ARCH, TASKS, seed=0)
        assert evaluate(enc, te, batch_size=7) == pytest.approx(evaluate(enc, te, batch_size=64), abs=1e-12)


class TestSweep:
    def test_grids(self):
        assert tuple(DEFAULT_LAMBDAS) == (0.01, 0.03, 0.05, 0.07, 0.10)
        assert tuple(TAU_LEVELS) == (0.0, 0.25, 0.75, 1.0)
        assert uniform_taus(2) == [[0.0, 0.0], [0.25, 0.25], [0.75, 0.75], [1.0, 1.0]]
        fact = factorial_taus(3)
        assert len(fact) == 64 and len({tuple(t) for t in fact}) == 64
        assert len(SweepPlan().cells(3)) == 20

    @pytest.mark.parametrize("kw", [{"lambdas": []}, {"seeds": []}, {"taus": []}, {"lambdas": [-0.1]},
                                    {"init": "warm"}])
    def test_plan_contracts(self, kw):
        with pytest.raises(ContractError):
            SweepPlan(**kw)

    def test_pareto_front_non_dominated(self):
        rng = np.random.default_rng(0)
        recs = [{"status": "ok", "flops": int(f), "delta_mtl": float(d)}
                for f, d in zip(rng.integers(1, 20, 40), np.round(rng.normal(size=40), 1))]
        recs.append({"status": "failed"})
        front = pareto_front(recs)
        ok = [r for r in recs if r["status"] == "ok"]
        for r in front:
            assert not any(o["flops"] <= r["flops"] and o["delta_mtl"] >= r["delta_mtl"]
                           and (o["flops"], o["delta_mtl"]) != (r["flops"], r["delta_mtl"]) for o in ok)
        for r in ok:
            if r not in front:
                assert any(f["flops"] <= r["flops"] and f["delta_mtl"] >= r["delta_mtl"] for f in front)
        assert [r["flops"] for r in front] == sorted(r["flops"] for r in front)

    def test_single_cell_and_failure_isolation(self, data, monkeypatch):
        tr, te = data
        plan = SweepPlan(lambdas=[0.05], taus=[[0.0] * 3], epochs=1, baseline_epochs=1)
        rep = run_sweep(plan, ARCH, TASKS, tr, te, cfg())
        assert len(rep.records) == 1 and len(rep.pareto) == 1
        rec = rep.records[0]
        assert rec["status"] == "ok" and rec["max_rel_deviation"] < 1e-9
        assert set(rec["metrics"]) == set(rep.metric_keys)

        real = train_mod.run_cell

        def flaky(lam, *a, **k):
            if lam == 0.03:
                raise RuntimeError("boom")
            return real(lam, *a, **k)
        monkeypatch.setattr(train_mod, "run_cell", flaky)
        plan = SweepPlan(lambdas=[0.03, 0.05], taus=[[0.0] * 3], epochs=1, baseline_epochs=1)
        rep2 = run_sweep(plan, ARCH, TASKS, tr, te, cfg())
        assert [r["status"] for r in rep2.records] == ["failed", "ok"]
        assert "boom" in rep2.records[0]["error"]
        # the surviving cell is unaffected by its failed neighbour
        assert rep2.records[1]["delta_mtl"] == rec["delta_mtl"]
