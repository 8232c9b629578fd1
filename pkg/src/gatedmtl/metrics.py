"""Multi-task scores (relative delta against single-task baselines, mean rank)
and the MAC/parameter accountant.

FLOPs are reported as 2 x multiply-accumulates throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import ATTN_SITES
from .model import GatedEncoder
from .tensor import ContractError

FLOPS_PER_MAC = 2


@dataclass
class ScoreTable:
    """Per-method metric rows over a fixed task list.

    ``directions[i]`` is 1 when lower values of task ``i``'s metric are better.
    """

    tasks: list[str]
    directions: list[int]
    rows: dict[str, list[float]] = field(default_factory=dict)
    baseline: str = "STL"

    def __post_init__(self):
        if len(self.tasks) != len(self.directions):
            raise ContractError("one direction per task is required")
        if any(d not in (0, 1) for d in self.directions):
            raise ContractError("directions must be 0 (higher is better) or 1 (lower is better)")
        for name, vals in self.rows.items():
            self._check(name, vals)

    def _check(self, name, vals):
        if len(vals) != len(self.tasks):
            raise ContractError(f"row {name!r} has {len(vals)} values for {len(self.tasks)} tasks")

    def add(self, name: str, values: Sequence[float]) -> None:
        vals = [float(v) for v in values]
        self._check(name, vals)
        self.rows[name] = vals

    @property
    def methods(self) -> list[str]:
        return list(self.rows)


def delta_mtl(table: ScoreTable, method: str) -> float:
    """Mean signed relative change (percent) of ``method`` against the
    baseline row, with lower-is-better metrics sign-flipped."""
    if table.baseline not in table.rows:
        raise ContractError(f"baseline row {table.baseline!r} missing")
    if method not in table.rows:
        raise ContractError(f"method row {method!r} missing")
    base, vals = table.rows[table.baseline], table.rows[method]
    total = 0.0
    for b, m, d in zip(base, vals, table.directions):
        if b == 0:
            raise ContractError("baseline metric is zero; relative change undefined")
        total += (-1) ** d * (m - b) / b
    return 100.0 * total / len(base)


def _average_ranks(scores: Sequence[float], lower_better: bool) -> list[float]:
    """Rank 1 = best; tied scores share the mean of their positions."""
    keyed = sorted(range(len(scores)), key=lambda i: scores[i] if lower_better else -scores[i])
    ranks = [0.0] * len(scores)
    pos = 0
    while pos < len(keyed):
        end = pos
        while end + 1 < len(keyed) and scores[keyed[end + 1]] == scores[keyed[pos]]:
            end += 1
        shared = (pos + end) / 2.0 + 1.0
        for j in range(pos, end + 1):
            ranks[keyed[j]] = shared
        pos = end + 1
    return ranks


def mean_rank(table: ScoreTable) -> dict[str, float]:
    """Average over tasks of each method's rank among all rows."""
    names = table.methods
    if not names:
        return {}
    per_task = [_average_ranks([table.rows[n][i] for n in names], bool(d))
                for i, d in enumerate(table.directions)]
    return {n: float(np.mean([r[j] for r in per_task])) for j, n in enumerate(names)}


# ---------------------------------------------------------------------------
# FLOP / parameter accounting


@dataclass(frozen=True)
class FlopEntry:
    layer: str
    branch: str  # stem | shared | task<t> | mixer | gate | head<t>
    macs: int
    params: int


@dataclass
class FlopLedger:
    entries: list[FlopEntry] = field(default_factory=list)

    def add(self, layer: str, branch: str, macs: int, params: int) -> None:
        macs, params = int(macs), int(params)
        if macs < 0 or params < 0:
            raise ContractError("counts must be nonnegative")
        self.entries.append(FlopEntry(layer, branch, macs, params))

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def flops(self) -> int:
        return FLOPS_PER_MAC * self.macs

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    def encoder_macs(self) -> int:
        """MACs excluding the task heads."""
        return sum(e.macs for e in self.entries if not e.branch.startswith("head"))

    def encoder_flops(self) -> int:
        return FLOPS_PER_MAC * self.encoder_macs()

    def branch_macs(self, prefix: str) -> int:
        return sum(e.macs for e in self.entries if e.branch.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            "convention": "flops = 2 * macs",
            "entries": [{"layer": e.layer, "branch": e.branch, "macs": e.macs,
                         "flops": FLOPS_PER_MAC * e.macs, "params": e.params} for e in self.entries],
            "totals": {"macs": self.macs, "flops": self.flops, "params": self.params,
                       "encoder_flops": self.encoder_flops()},
        }


def conv_macs(c_out: int, c_in: int, k: int, h: int, w: int) -> int:
    return c_out * c_in * k * k * h * w


def conv_params(c_out: int, c_in: int, k: int) -> int:
    return c_out * (c_in * k * k + 1)


def linear_macs(rows: int, c_in: int, tokens: int) -> int:
    return rows * c_in * tokens


def attention_macs(tokens: int, width: int) -> int:
    """Scores plus weighted values, summed over heads: 2 * N^2 * C."""
    return 2 * tokens * tokens * width


def _site_dims(C: int, hidden: int) -> dict[str, tuple[int, int]]:
    return {"q": (C, C), "k": (C, C), "v": (C, C), "o": (C, C), "f1": (C, hidden), "f2": (hidden, C)}


def _stem(ledger: FlopLedger, arch) -> None:
    S = arch.image_size
    if arch.kind == "conv":
        k = arch.kernel
        ledger.add("stem", "stem", conv_macs(arch.stem_channels, arch.in_channels, k, S, S),
                   conv_params(arch.stem_channels, arch.in_channels, k))
    else:
        pdim = arch.in_channels * arch.patch ** 2
        N = arch.num_tokens
        ledger.add("stem", "stem", linear_macs(arch.dim, pdim, N), pdim * arch.dim + arch.dim + N * arch.dim)


def _heads(ledger: FlopLedger, arch, tasks) -> None:
    F = arch.final_width
    for t, spec in enumerate(tasks):
        ledger.add("heads", f"head{t}", F * spec.out_dim, F * spec.out_dim + spec.out_dim)


def _gated_ledger(enc: GatedEncoder) -> FlopLedger:
    """Every branch, mixer and gate of the trainable network, nothing removed."""
    arch, T = enc.arch, enc.num_tasks
    ledger = FlopLedger()
    _stem(ledger, arch)
    if arch.kind == "conv":
        k, S, c_in = arch.kernel, arch.image_size, arch.stem_channels
        for l, c in enumerate(arch.widths):
            name = f"block{l}"
            for br in ["shared"] + [f"task{t}" for t in range(T)]:
                ledger.add(name, br, conv_macs(c, c_in, k, S, S), conv_params(c, c_in, k))
            if l in arch.pool_after:
                S //= 2
            ledger.add(name, "gate", 0, 0)
            ledger.add(name, "mixer", c * T * S * S, c * T)
            c_in = c
    else:
        C, N = arch.dim, arch.num_tokens
        dims = _site_dims(C, arch.ffn_mult * C)
        for l in range(arch.depth):
            name = f"block{l}"
            for br in ["shared"] + [f"task{t}" for t in range(T)]:
                macs = sum(linear_macs(o, i, N) for i, o in dims.values()) + attention_macs(N, C)
                params = sum(i * o + o for i, o in dims.values()) + 4 * C
                ledger.add(name, br, macs, params)
            ledger.add(name, "gate", 0, 0)
            ledger.add(name, "mixer", C * T * N, C * T)
    _heads(ledger, arch, enc.tasks)
    return ledger


def count_flops(model, input_shape: Sequence[int] | None = None) -> FlopLedger:
    """Per-sample MAC and parameter ledger of a gated encoder (every branch
    computed) or of a collapsed model (only surviving rows)."""
    from .prune import PrunedModel

    if not isinstance(model, (PrunedModel, GatedEncoder)):
        raise ContractError(f"cannot count FLOPs of {type(model).__name__}")
    arch = model.arch
    if input_shape is not None and tuple(input_shape)[-3:] != tuple(arch.input_shape):
        raise ContractError(f"input shape {tuple(input_shape)} does not match {arch.input_shape}")
    if isinstance(model, PrunedModel):
        return _pruned_ledger(model)
    return _gated_ledger(model)


def _pruned_ledger(pm) -> FlopLedger:
    arch, T = pm.arch, pm.num_tasks
    ledger = FlopLedger()
    _stem(ledger, arch)
    if arch.kind == "conv":
        k, S, c_in = arch.kernel, arch.image_size, arch.stem_channels
        for l, blk in enumerate(pm.blocks):
            name = f"block{l}"
            n_sh = len(blk.shared_rows)
            ledger.add(name, "shared", conv_macs(n_sh, c_in, k, S, S), conv_params(n_sh, c_in, k))
            for t in range(T):
                n = len(blk.task_rows[t])
                ledger.add(name, f"task{t}", conv_macs(n, c_in, k, S, S), conv_params(n, c_in, k))
            if blk.pool:
                S //= 2
            ledger.add(name, "gate", 0, 0)
            n_mix = len(blk.mixer_channels)
            ledger.add(name, "mixer", n_mix * T * S * S, n_mix * T)
            c_in = blk.width
    else:
        C, N = arch.dim, arch.num_tokens
        dims = _site_dims(C, arch.ffn_mult * C)
        for l, blk in enumerate(pm.blocks):
            name = f"block{l}"
            macs = sum(linear_macs(len(blk.shared_rows[s]), dims[s][0], N) for s in ATTN_SITES)
            params = sum(len(blk.shared_rows[s]) * (dims[s][0] + 1) for s in ATTN_SITES)
            params += 2 * C * blk.shared_norms
            if blk.shared_attention:
                macs += attention_macs(N, C)
            ledger.add(name, "shared", macs, params)
            for t in range(T):
                rows = blk.task_rows[t]
                macs = sum(linear_macs(len(rows[s]), dims[s][0], N) for s in ATTN_SITES)
                if blk.tasks[t].attention:
                    macs += attention_macs(N, C)
                params = sum(len(rows[s]) * (dims[s][0] + 1) for s in ATTN_SITES)
                params += 2 * C * blk.task_norms[t]
                ledger.add(name, f"task{t}", macs, params)
            ledger.add(name, "gate", 0, 0)
            n_mix = len(blk.mixer_channels)
            ledger.add(name, "mixer", n_mix * T * N, n_mix * T)
    _heads(ledger, arch, pm.tasks)
    return ledger
