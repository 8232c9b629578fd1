"""Optimizers and training loops for single-task, hard-sharing and gated
multi-task models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import Dataset
from .gates import SparsityConfig, gate_statistics
from .model import (ArchConfig, GatedEncoder, TaskSpec, build_encoder, freeze_gates, predict,
                    task_losses, total_loss)
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"non-finite value at epoch {epoch}, step {step}: {detail}")
        self.epoch, self.step, self.detail = epoch, step, detail


@dataclass
class MainOptimizer:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class GateOptimizer:
    kind: str = "sgd"
    # large relative to full-scale recipes: the per-gate sparsity gradient
    # carries a 1/(T*L*C) factor
    lr: float = 3.0
    # the mixer logits train with the gates unless this is switched off
    include_mixer: bool = True


@dataclass
class Schedule:
    kind: str = "none"  # none | step | polynomial
    step_size: int = 20
    factor: float = 1.0 / 3.0
    power: float = 0.9

    def scale(self, epoch: int, total_epochs: int) -> float:
        if self.kind == "none":
            return 1.0
        if self.kind == "step":
            return self.factor ** (epoch // self.step_size)
        if self.kind == "polynomial":
            return (1.0 - epoch / max(total_epochs, 1)) ** self.power
        raise ContractError(f"unknown schedule {self.kind!r}")


@dataclass
class OptimizerConfig:
    main: MainOptimizer = field(default_factory=MainOptimizer)
    gate: GateOptimizer = field(default_factory=GateOptimizer)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lr_schedule: Schedule = field(default_factory=Schedule)
    # initial gate logit: just above the threshold, so every gate starts
    # task-specific but can be flipped within a few steps
    gate_init: float = 0.02

    def __post_init__(self):
        for name in ("main", "gate", "lr_schedule"):
            v = getattr(self, name)
            if isinstance(v, dict):
                cls = {"main": MainOptimizer, "gate": GateOptimizer, "lr_schedule": Schedule}[name]
                setattr(self, name, cls(**v))
        if isinstance(self.main.betas, list):
            self.main.betas = tuple(self.main.betas)
        if self.main.kind != "adam" or self.gate.kind != "sgd":
            raise ContractError("supported optimizers: adam (main) and sgd (gates)")
        if self.main.lr <= 0 or self.gate.lr <= 0:
            raise ContractError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ContractError("epochs must be >= 0 and batch_size > 0")


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, Tensor], cfg: MainOptimizer):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr_scale: float = 1.0) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        lr = self.cfg.lr * lr_scale
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.cfg.weight_decay:
                g = g + self.cfg.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.cfg.eps)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self, lr_scale: float = 1.0) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - self.lr * lr_scale * p.grad


def partition_params(enc: GatedEncoder, cfg: OptimizerConfig) -> tuple[dict, dict]:
    """Disjoint (main, gate) parameter groups; routing logits never get weight decay."""
    gate = {}
    if enc.bank.alpha.requires_grad:
        gate["gates.alpha"] = enc.bank.alpha
    main = enc.main_params()
    if enc.mixer.beta.requires_grad:
        if cfg.gate.include_mixer:
            gate["mixer.beta"] = enc.mixer.beta
        else:
            main = dict(main, **{"mixer.beta": enc.mixer.beta})
    return main, gate


def evaluate(enc: GatedEncoder, data: Dataset, batch_size: int = 250) -> dict[str, float]:
    """Test metrics keyed ``<task>.<metric>``."""
    preds = [[] for _ in enc.tasks]
    with tn.no_grad():
        for start in range(0, len(data), batch_size):
            x, _ = data.batch(slice(start, start + batch_size))
            for t, out in enumerate(predict(enc, x)):
                preds[t].append(out.data)
    return score_predictions(enc.tasks, [np.concatenate(p) for p in preds], data.labels)


def score_predictions(tasks: Sequence[TaskSpec], preds: Sequence[np.ndarray], labels) -> dict[str, float]:
    out = {}
    for spec, p, y in zip(tasks, preds, labels):
        if spec.metric == "accuracy":
            val = float(np.mean(np.argmax(p, axis=1) == y))
        else:
            err = p.reshape(len(y), -1)[:, 0] - np.asarray(y, dtype=float)
            val = float(np.mean(np.abs(err))) if spec.metric == "l1_error" else float(np.sqrt(np.mean(err ** 2)))
        out[f"{spec.name}.{spec.metric}"] = val
    return out


def fit(enc: GatedEncoder, train: Dataset, cfg: OptimizerConfig, scfg: SparsityConfig | None = None,
        test: Dataset | None = None, eval_every: int = 0,
        on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimize the weighted task loss plus the gate sparsity term.

    Adam updates network weights; plain SGD updates gate and mixer logits.
    Returns one history record per epoch, starting with the untrained state
    at epoch 0.
    """
    scfg = scfg or SparsityConfig(variant="none")
    main, gate = partition_params(enc, cfg)
    adam = Adam(main, cfg.main)
    sgd = SGD(gate, cfg.gate.lr)
    rng = np.random.default_rng(cfg.seed)
    names = [t.name for t in enc.tasks]
    history = []

    def record(epoch, losses, sp):
        stats = gate_statistics(enc.bank, enc.mixer, names)
        rec = {"epoch": epoch, "task_losses": losses, "sparsity_loss": sp,
               "selection_ratio": stats.selection_ratio}
        if test is not None and (epoch == 0 or epoch == cfg.epochs or (eval_every and epoch % eval_every == 0)):
            rec["test_metrics"] = evaluate(enc, test)
        history.append(rec)
        if on_epoch:
            on_epoch(rec)

    record(0, None, None)
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        scale = cfg.lr_schedule.scale(epoch - 1, cfg.epochs)
        order = rng.permutation(n)
        sums = np.zeros(enc.num_tasks)
        sp_sum, steps = 0.0, 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = train.batch(order[start:start + cfg.batch_size])
            for p in list(main.values()) + list(gate.values()):
                p.zero_grad()
            try:
                losses, weighted = task_losses(enc, batch)
                loss = total_loss(weighted, enc.bank, scfg)
                if scfg.active:
                    sp_sum += (loss.item() - weighted.item()) / scfg.lambda_s
                loss.backward()
            except NumericError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            adam.step(scale)
            sgd.step(scale)
            sums += [l.item() for l in losses]
            steps += 1
        record(epoch, (sums / steps).tolist(), sp_sum / steps if scfg.active else None)
        log.debug("epoch %d losses %s", epoch, history[-1]["task_losses"])
    return history


# ---------------------------------------------------------------------------
# the three model families


def single_task_spec_index(tasks: Sequence[TaskSpec], task: int) -> TaskSpec:
    if not 0 <= task < len(tasks):
        raise ContractError(f"task index {task} out of range")
    return tasks[task]


def train_single_task(task: int, arch: ArchConfig, tasks: Sequence[TaskSpec], train: Dataset,
                      cfg: OptimizerConfig, test: Dataset | None = None):
    """Independent network for one task: a one-task encoder whose gates are
    pinned to the task branch (the shared branch is never computed)."""
    spec = single_task_spec_index(tasks, task)
    enc = build_encoder(arch, [spec], seed=cfg.seed)
    freeze_gates(enc, "task")
    sub = Dataset(train.x, [train.labels[task]], train.latents)
    sub_test = Dataset(test.x, [test.labels[task]], test.latents) if test is not None else None
    history = fit(enc, sub, cfg, test=sub_test)
    return enc, history


def train_mtl_uniform(arch: ArchConfig, tasks: Sequence[TaskSpec], train: Dataset, cfg: OptimizerConfig,
                      test: Dataset | None = None):
    """Hard parameter sharing: every gate pinned to the shared branch."""
    enc = build_encoder(arch, tasks, seed=cfg.seed)
    freeze_gates(enc, "shared")
    history = fit(enc, train, cfg, test=test)
    return enc, history


def import_single_task(enc: GatedEncoder, stl: Sequence[GatedEncoder]) -> None:
    """Copy each single-task network into its task branch and head."""
    if len(stl) != enc.num_tasks:
        raise ContractError(f"{len(stl)} single-task models for {enc.num_tasks} tasks")
    for t, src in enumerate(stl):
        if src.num_tasks != 1:
            raise ContractError("single-task checkpoints must hold exactly one task")
        for name, value in src.params.items():
            if name.startswith("stem."):
                target = name
            elif ".task0." in name:
                target = name.replace(".task0.", f".task{t}.")
            elif name.startswith("head0."):
                target = name.replace("head0.", f"head{t}.")
            else:
                continue
            dst = enc.params.get(target)
            if dst is None or dst.shape != value.shape:
                raise ContractError(f"shape mismatch importing {name} -> {target}")
            if name.startswith("stem.") and not enc.arch.train_stem:
                if not np.array_equal(dst.data, value.data):
                    raise ContractError("single-task stems differ from the gated model's fixed stem")
            dst.data = value.data.copy()


def train_interrogate(enc: GatedEncoder, train: Dataset, cfg: OptimizerConfig, scfg: SparsityConfig,
                      init: str = "scratch", stl: Sequence[GatedEncoder] | None = None,
                      test: Dataset | None = None, eval_every: int = 0):
    """Train a gated model; ``init="from_single_task"`` seeds every task
    branch with its single-task weights first."""
    if init == "from_single_task":
        if stl is None:
            raise ContractError("from_single_task initialization needs single-task models")
        import_single_task(enc, stl)
    elif init != "scratch":
        raise ContractError(f"unknown init {init!r}")
    history = fit(enc, train, cfg, scfg, test=test, eval_every=eval_every)
    return enc, history


def build_gated(arch: ArchConfig, tasks: Sequence[TaskSpec], cfg: OptimizerConfig) -> GatedEncoder:
    return build_encoder(arch, tasks, seed=cfg.seed, gate_init=cfg.gate_init)


# ---------------------------------------------------------------------------
# sweeps

DEFAULT_LAMBDAS = (0.01, 0.03, 0.05, 0.07, 0.10)
TAU_LEVELS = (0.0, 0.25, 0.75, 1.0)


def uniform_taus(num_tasks: int, levels: Sequence[float] = TAU_LEVELS) -> list[list[float]]:
    return [[float(v)] * num_tasks for v in levels]


def factorial_taus(num_tasks: int, levels: Sequence[float] = TAU_LEVELS) -> list[list[float]]:
    """Every per-task combination of the target levels."""
    grids = np.meshgrid(*[np.asarray(levels, dtype=float)] * num_tasks, indexing="ij")
    return [list(map(float, row)) for row in np.stack([g.reshape(-1) for g in grids], axis=1)]


@dataclass
class SweepPlan:
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    # None means one uniform vector per target level
    taus: list[list[float]] | None = None
    seeds: list[int] = field(default_factory=lambda: [1])
    epochs: int = 6
    baseline_epochs: int = 10
    variant: str = "hinge"
    init: str = "scratch"

    def __post_init__(self):
        if not self.lambdas or not self.seeds or (self.taus is not None and not self.taus):
            raise ContractError("sweep grid must be nonempty")
        if any(l < 0 for l in self.lambdas):
            raise ContractError("lambda_s values must be nonnegative")
        if self.init not in ("scratch", "from_single_task"):
            raise ContractError(f"unknown init {self.init!r}")

    def tau_vectors(self, num_tasks: int) -> list[list[float]]:
        taus = self.taus if self.taus is not None else uniform_taus(num_tasks)
        for tau in taus:
            if len(tau) != num_tasks:
                raise ContractError(f"tau vector {tau} does not have {num_tasks} entries")
        return [list(map(float, t)) for t in taus]

    def cells(self, num_tasks: int) -> list[tuple[float, list[float], int]]:
        return [(float(lam), tau, int(seed)) for seed in self.seeds for lam in self.lambdas
                for tau in self.tau_vectors(num_tasks)]


@dataclass
class Baselines:
    seed: int
    stl: list[GatedEncoder]
    mtl: GatedEncoder
    stl_metrics: dict[str, float]
    mtl_metrics: dict[str, float]


def metric_keys(tasks: Sequence[TaskSpec]) -> list[str]:
    return [f"{t.name}.{t.metric}" for t in tasks]


def score_table(tasks: Sequence[TaskSpec], stl_metrics: dict[str, float]):
    from .metrics import ScoreTable
    keys = metric_keys(tasks)
    return ScoreTable([t.name for t in tasks], [t.direction for t in tasks],
                      {"STL": [stl_metrics[k] for k in keys]})


def train_baselines(arch: ArchConfig, tasks: Sequence[TaskSpec], train: Dataset, test: Dataset,
                    cfg: OptimizerConfig, seed: int, epochs: int) -> Baselines:
    bcfg = OptimizerConfig(main=cfg.main, gate=cfg.gate, epochs=epochs, batch_size=cfg.batch_size,
                           seed=seed, lr_schedule=cfg.lr_schedule, gate_init=cfg.gate_init)
    stl, stl_metrics = [], {}
    for t in range(len(tasks)):
        enc, hist = train_single_task(t, arch, tasks, train, bcfg, test=test)
        stl.append(enc)
        stl_metrics.update(hist[-1]["test_metrics"])
    mtl, hist = train_mtl_uniform(arch, tasks, train, bcfg, test=test)
    return Baselines(seed, stl, mtl, stl_metrics, hist[-1]["test_metrics"])


def run_cell(lam: float, tau: list[float], seed: int, arch: ArchConfig, tasks: Sequence[TaskSpec],
             train: Dataset, test: Dataset, cfg: OptimizerConfig, plan: SweepPlan,
             baselines: Baselines, verify_size: int = 32) -> dict:
    """Train one gated model, collapse it, check the collapse, and score the
    collapsed network."""
    from .metrics import count_flops, delta_mtl
    from .prune import collapse, extract_pattern, pruned_predict, verify_equivalence

    ccfg = OptimizerConfig(main=cfg.main, gate=cfg.gate, epochs=plan.epochs, batch_size=cfg.batch_size,
                           seed=seed, lr_schedule=cfg.lr_schedule, gate_init=cfg.gate_init)
    scfg = SparsityConfig(lambda_s=lam, tau=tau, variant=plan.variant)
    enc = build_gated(arch, tasks, ccfg)
    enc, history = train_interrogate(enc, train, ccfg, scfg, init=plan.init,
                                     stl=baselines.stl if plan.init == "from_single_task" else None)
    pm = collapse(enc, extract_pattern(enc))
    eq = verify_equivalence(enc, pm, test.x[:verify_size])
    if not eq.passed:
        raise ContractError(f"collapsed model deviates by {max(eq.max_rel):.3e}")
    preds = [np.concatenate(p) for p in zip(*(pruned_predict(pm, test.x[i:i + 250])
                                                 for i in range(0, len(test), 250)))]
    metrics = score_predictions(tasks, preds, test.labels)
    table = score_table(tasks, baselines.stl_metrics)
    table.add("cell", [metrics[k] for k in metric_keys(tasks)])
    ledger = count_flops(pm)
    return {
        "lambda_s": lam, "tau": tau, "seed": seed, "status": "ok",
        "flops": ledger.encoder_flops(), "params": pm.param_count(),
        "delta_mtl": delta_mtl(table, "cell"), "metrics": metrics,
        "selection_ratio": history[-1]["selection_ratio"], "max_rel_deviation": max(eq.max_rel),
    }


def pareto_front(records: Sequence[dict]) -> list[dict]:
    """Records not dominated in (fewer FLOPs, higher delta), sorted by FLOPs."""
    ok = [r for r in records if r.get("status") == "ok"]
    front = []
    for r in ok:
        dominated = any(o["flops"] <= r["flops"] and o["delta_mtl"] >= r["delta_mtl"]
                        and (o["flops"] < r["flops"] or o["delta_mtl"] > r["delta_mtl"]) for o in ok)
        if not dominated:
            front.append(r)
    front.sort(key=lambda r: (r["flops"], -r["delta_mtl"]))
    # identical points appear once
    out = []
    for r in front:
        if not out or (out[-1]["flops"], out[-1]["delta_mtl"]) != (r["flops"], r["delta_mtl"]):
            out.append(r)
    return out


@dataclass
class SweepReport:
    records: list[dict]
    pareto: list[dict]
    baselines: dict[str, dict]
    metric_keys: list[str]

    def to_dict(self) -> dict:
        return {"records": self.records, "pareto": self.pareto, "baselines": self.baselines,
                "metric_keys": self.metric_keys, "flops_convention": "flops = 2 * macs, encoder only"}


def _cell_job(args):
    lam, tau, seed, rest = args
    try:
        return run_cell(lam, tau, seed, *rest)
    except Exception as exc:  # recorded, the sweep continues
        log.warning("cell lambda=%s tau=%s seed=%s failed: %s", lam, tau, seed, exc)
        return {"lambda_s": lam, "tau": tau, "seed": seed, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def run_sweep(plan: SweepPlan, arch: ArchConfig, tasks: Sequence[TaskSpec], train: Dataset, test: Dataset,
              cfg: OptimizerConfig, jobs: int = 1, baselines: dict[int, Baselines] | None = None,
              on_record: Callable[[dict], None] | None = None) -> SweepReport:
    """Baselines per seed, then every (lambda_s, tau, seed) cell.

    Cells are independent; with ``jobs > 1`` they run in worker processes
    and the collector restores grid order.
    """
    from .metrics import delta_mtl

    tasks = list(tasks)
    baselines = dict(baselines or {})
    summary = {}
    for seed in plan.seeds:
        if seed not in baselines:
            baselines[seed] = train_baselines(arch, tasks, train, test, cfg, seed, plan.baseline_epochs)
        b = baselines[seed]
        table = score_table(tasks, b.stl_metrics)
        table.add("MTL-uniform", [b.mtl_metrics[k] for k in metric_keys(tasks)])
        summary[str(seed)] = {"stl": b.stl_metrics, "mtl_uniform": b.mtl_metrics,
                              "mtl_uniform_delta": delta_mtl(table, "MTL-uniform")}

    cells = plan.cells(len(tasks))
    jobs_args = [(lam, tau, seed, (arch, tasks, train, test, cfg, plan, baselines[seed]))
                 for lam, tau, seed in cells]
    records: list[dict | None] = [None] * len(cells)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor, as_completed
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_cell_job, a): i for i, a in enumerate(jobs_args)}
            for fut in as_completed(futures):
                records[futures[fut]] = fut.result()
                if on_record:
                    on_record(records[futures[fut]])
    else:
        for i, a in enumerate(jobs_args):
            records[i] = _cell_job(a)
            if on_record:
                on_record(records[i])
    return SweepReport(records, pareto_front(records), summary, metric_keys(tasks))


def run_sparsity_ablation(lam: float, tau: list[float], arch: ArchConfig, tasks: Sequence[TaskSpec],
                          train: Dataset, test: Dataset, cfg: OptimizerConfig, plan: SweepPlan,
                          baselines: Baselines) -> list[dict]:
    """Hinge against plain L1 at a matched weight, plus the unregularized run."""
    rows = []
    for variant in ("none", "hinge", "l1"):
        vplan = SweepPlan(lambdas=[lam], taus=[tau], seeds=[baselines.seed], epochs=plan.epochs,
                          baseline_epochs=plan.baseline_epochs, variant=variant, init=plan.init)
        rec = _cell_job((lam if variant != "none" else 0.0, tau, baselines.seed,
                         (arch, tasks, train, test, cfg, vplan, baselines)))
        rec["variant"] = variant
        rows.append(rec)
    return rows
