"""Multi-task gated encoders, task heads, objectives and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .gates import GateBank, SharedMixer, SparsityConfig, sparsity_loss
from .layers import (ATTN_SITES, AttnBlockParams, AttnBranch, ConvBlockParams, LayerNorm, Linear,
                     attn_block_forward, conv_block_forward)
from .tensor import ContractError, DimensionError, Tensor

CKPT_FORMAT = "interrogate-ckpt-v1"
# |logit| used to pin frozen gates fully shared (negative) or fully task-specific
FROZEN_LOGIT = 30.0

METRIC_DIRECTION = {"accuracy": 0, "l1_error": 1, "rmse": 1}
LOSSES = ("cross_entropy", "l1", "squared_error")


@dataclass
class TaskSpec:
    name: str
    kind: str = "classification"  # or "regression"
    out_dim: int = 2
    loss: str = "cross_entropy"
    weight: float = 1.0
    metric: str = "accuracy"

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.loss not in LOSSES:
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.metric not in METRIC_DIRECTION:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.weight <= 0:
            raise ContractError("task weight must be positive")
        if (self.kind == "classification") != (self.loss == "cross_entropy"):
            raise ContractError(f"loss {self.loss!r} does not fit a {self.kind} task")

    @property
    def direction(self) -> int:
        """1 when lower metric values are better."""
        return METRIC_DIRECTION[self.metric]


@dataclass
class ArchConfig:
    kind: str = "conv"
    in_channels: int = 1
    image_size: int = 16
    # conv
    stem_channels: int = 8
    widths: list[int] = field(default_factory=lambda: [8, 8, 16, 16])
    pool_after: list[int] = field(default_factory=lambda: [1, 3])
    kernel: int = 3
    # transformer
    patch: int = 4
    dim: int = 16
    depth: int = 2
    heads: int = 2
    ffn_mult: int = 4
    # the stem is a fixed seeded projection unless trained explicitly
    train_stem: bool = False
    stem_seed: int = 0
    # every task branch starts as a copy of the shared branch
    tied_init: bool = True

    def __post_init__(self):
        if self.kind not in ("conv", "transformer"):
            raise ContractError(f"unknown architecture {self.kind!r}")
        self.widths = [int(w) for w in self.widths]
        self.pool_after = [int(i) for i in self.pool_after]
        if self.kind == "transformer" and self.dim % self.heads:
            raise ContractError("dim must be divisible by heads")

    @property
    def num_blocks(self) -> int:
        return len(self.widths) if self.kind == "conv" else self.depth

    @property
    def gate_widths(self) -> list[int]:
        if self.kind == "conv":
            return list(self.widths)
        per_block = [self.dim, self.dim, self.dim, self.dim, self.ffn_mult * self.dim, self.dim]
        return per_block * self.depth

    @property
    def gate_site_names(self) -> list[str]:
        if self.kind == "conv":
            return [f"block{i}" for i in range(len(self.widths))]
        return [f"block{b}.{s}" for b in range(self.depth) for s in ATTN_SITES]

    @property
    def mixer_widths(self) -> list[int]:
        return list(self.widths) if self.kind == "conv" else [self.dim] * self.depth

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def final_width(self) -> int:
        if self.kind == "conv":
            return self.widths[-1] if self.widths else self.stem_channels
        return self.dim

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _stem_params(arch: ArchConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(arch.stem_seed)
    if arch.kind == "conv":
        k, c = arch.kernel, arch.in_channels
        return {"stem.w": _he(rng, (arch.stem_channels, c, k, k), c * k * k),
                "stem.b": np.zeros(arch.stem_channels)}
    pdim = arch.in_channels * arch.patch * arch.patch
    return {"stem.w": rng.normal(0.0, np.sqrt(1.0 / pdim), size=(pdim, arch.dim)),
            "stem.b": np.zeros(arch.dim),
            "stem.pos": rng.normal(0.0, 0.1, size=(arch.num_tokens, arch.dim))}


def _branch_names(arch: ArchConfig, num_tasks: int) -> list[str]:
    return ["shared"] + [f"task{t}" for t in range(num_tasks)]


def init_params(arch: ArchConfig, num_tasks: int, tasks: Sequence[TaskSpec], rng) -> dict[str, np.ndarray]:
    """Fresh parameters in a fixed name order (stem, blocks, heads)."""
    p = dict(_stem_params(arch))
    if arch.kind == "conv":
        cin, k = arch.stem_channels, arch.kernel
        for l, cout in enumerate(arch.widths):
            for br in _branch_names(arch, num_tasks):
                if arch.tied_init and br != "shared":
                    p[f"block{l}.{br}.w"] = p[f"block{l}.shared.w"].copy()
                else:
                    p[f"block{l}.{br}.w"] = _he(rng, (cout, cin, k, k), cin * k * k)
                p[f"block{l}.{br}.b"] = np.zeros(cout)
            cin = cout
    else:
        C, H = arch.dim, arch.ffn_mult * arch.dim
        dims = {"q": (C, C), "k": (C, C), "v": (C, C), "o": (C, C), "f1": (C, H), "f2": (H, C)}
        for l in range(arch.depth):
            for br in _branch_names(arch, num_tasks):
                pre = f"block{l}.{br}"
                for ln in ("ln1", "ln2"):
                    p[f"{pre}.{ln}.g"] = np.ones(C)
                    p[f"{pre}.{ln}.b"] = np.zeros(C)
                for name, (i, o) in dims.items():
                    gain = 2.0 if name == "f1" else 1.0
                    if arch.tied_init and br != "shared":
                        p[f"{pre}.{name}.w"] = p[f"block{l}.shared.{name}.w"].copy()
                    else:
                        p[f"{pre}.{name}.w"] = rng.normal(0.0, np.sqrt(gain / i), size=(i, o))
                    p[f"{pre}.{name}.b"] = np.zeros(o)
    F = arch.final_width
    for t, spec in enumerate(tasks):
        p[f"head{t}.w"] = rng.normal(0.0, np.sqrt(1.0 / F), size=(F, spec.out_dim))
        p[f"head{t}.b"] = np.zeros(spec.out_dim)
    return p


@dataclass
class GatedEncoder:
    arch: ArchConfig
    tasks: list[TaskSpec]
    params: dict[str, Tensor]
    bank: GateBank
    mixer: SharedMixer

    def __post_init__(self):
        L = self.arch.num_blocks
        if self.mixer.num_layers != L or len(self.arch.gate_widths) != self.bank.num_layers:
            raise DimensionError("layer counts of bank, mixer and blocks disagree")
        if self.bank.num_tasks != self.num_tasks or self.mixer.num_tasks != self.num_tasks:
            raise DimensionError("task counts of bank, mixer and task specs disagree")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_layers(self) -> int:
        return self.arch.num_blocks

    def conv_block(self, l: int) -> ConvBlockParams:
        p = self.params
        T = self.num_tasks
        return ConvBlockParams(
            shared_w=p[f"block{l}.shared.w"], shared_b=p[f"block{l}.shared.b"],
            task_w=[p[f"block{l}.task{t}.w"] for t in range(T)],
            task_b=[p[f"block{l}.task{t}.b"] for t in range(T)],
            pool=l in self.arch.pool_after)

    def attn_branch(self, l: int, br: str) -> AttnBranch:
        p = self.params
        pre = f"block{l}.{br}"
        return AttnBranch(
            ln1=LayerNorm(p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]),
            ln2=LayerNorm(p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]),
            proj={s: Linear(p[f"{pre}.{s}.w"], p[f"{pre}.{s}.b"]) for s in ATTN_SITES})

    def attn_block(self, l: int) -> AttnBlockParams:
        return AttnBlockParams(shared=self.attn_branch(l, "shared"),
                               tasks=[self.attn_branch(l, f"task{t}") for t in range(self.num_tasks)],
                               heads=self.arch.heads)

    def gate_params(self) -> dict[str, Tensor]:
        return {"gates.alpha": self.bank.alpha, "mixer.beta": self.mixer.beta}

    def main_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def all_tensors(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.gate_params())
        return out

    def network_param_count(self) -> int:
        """Stem, branches, heads and mixer logits; gate logits are routing
        metadata and not counted."""
        n = sum(v.size for v in self.params.values())
        return n + sum(w * self.num_tasks for w in self.mixer.widths)


def build_encoder(arch: ArchConfig, tasks: Sequence[TaskSpec], seed: int = 0,
                  gate_init: float = 0.0) -> GatedEncoder:
    tasks = list(tasks)
    rng = np.random.default_rng(seed)
    raw = init_params(arch, len(tasks), tasks, rng)
    params = {}
    for name, arr in raw.items():
        trainable = arch.train_stem or not name.startswith("stem.")
        params[name] = Tensor(arr, requires_grad=trainable)
    bank = GateBank.create(len(tasks), arch.gate_widths, init=gate_init, site_names=arch.gate_site_names)
    mixer = SharedMixer.create(len(tasks), arch.mixer_widths)
    return GatedEncoder(arch, tasks, params, bank, mixer)


def freeze_gates(enc: GatedEncoder, mode: str) -> None:
    """Pin every gate shared (``"shared"``) or task-specific (``"task"``) and
    stop gradients to the gate and mixer logits."""
    value = {"shared": -FROZEN_LOGIT, "task": FROZEN_LOGIT}[mode]
    enc.bank.set_all(value)
    enc.bank.alpha.requires_grad = False
    enc.mixer.beta.requires_grad = False


def stem_forward(enc: GatedEncoder, x: Tensor) -> Tensor:
    arch = enc.arch
    if x.shape[1:] != arch.input_shape:
        raise DimensionError(f"input {x.shape} does not match {arch.input_shape}")
    p = enc.params
    if arch.kind == "conv":
        return tn.relu(tn.conv2d(x, p["stem.w"], p["stem.b"]))
    B = x.shape[0]
    g, P = arch.image_size // arch.patch, arch.patch
    patches = tn.reshape(tn.transpose(tn.reshape(x, (B, arch.in_channels, g, P, g, P)), (0, 2, 4, 1, 3, 5)),
                         (B, g * g, arch.in_channels * P * P))
    return tn.add(tn.add(tn.matmul(patches, p["stem.w"]), p["stem.b"]), p["stem.pos"])


def encoder_forward(enc: GatedEncoder, x, prune_dead: bool | None = None) -> list[Tensor]:
    """Task representations after the last gated block.

    Shared and task streams all start from the stem output; each block then
    transforms, gates and mixes.  ``prune_dead`` (default: on when the gates
    are frozen) skips branch computations the gates never select.
    """
    x = tn.as_tensor(x)
    if prune_dead is None:
        prune_dead = not enc.bank.trainable
    h = stem_forward(enc, x)
    shared, feats = h, [h] * enc.num_tasks
    for l in range(enc.num_layers):
        if enc.arch.kind == "conv":
            shared, feats = conv_block_forward(enc.conv_block(l), enc.bank, enc.mixer, l, shared, feats,
                                               prune_dead=prune_dead)
        else:
            shared, feats = attn_block_forward(enc.attn_block(l), enc.bank, enc.mixer, l, shared, feats)
    return feats


def apply_heads(enc: GatedEncoder, feats: Sequence[Tensor]) -> list[Tensor]:
    """Global average pool (or token mean) followed by a per-task linear map."""
    outs = []
    for t, f in enumerate(feats):
        pooled = tn.mean(f, axis=(2, 3)) if enc.arch.kind == "conv" else tn.mean(f, axis=1)
        outs.append(tn.add(tn.matmul(pooled, enc.params[f"head{t}.w"]), enc.params[f"head{t}.b"]))
    return outs


def predict(enc: GatedEncoder, x, prune_dead: bool | None = None) -> list[Tensor]:
    return apply_heads(enc, encoder_forward(enc, x, prune_dead=prune_dead))


def task_loss(spec: TaskSpec, pred: Tensor, target) -> Tensor:
    if spec.loss == "cross_entropy":
        return tn.cross_entropy(pred, target)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    if spec.loss == "l1":
        return tn.l1_loss(pred, target)
    return tn.mse_loss(pred, target)


def task_losses(enc: GatedEncoder, batch, specs: Sequence[TaskSpec] | None = None,
                prune_dead: bool | None = None):
    """Per-task losses and their weighted sum for ``batch = (x, [y_t])``."""
    specs = list(specs) if specs is not None else enc.tasks
    x, labels = batch
    if labels is None or len(labels) != len(specs) or any(y is None for y in labels):
        raise ContractError("every task needs labels in the batch")
    preds = predict(enc, x, prune_dead=prune_dead)
    losses = [task_loss(s, p, y) for s, p, y in zip(specs, preds, labels)]
    weighted = tn.mul(losses[0], specs[0].weight)
    for s, l in zip(specs[1:], losses[1:]):
        weighted = tn.add(weighted, tn.mul(l, s.weight))
    return losses, weighted


def total_loss(weighted: Tensor, bank: GateBank, cfg: SparsityConfig) -> Tensor:
    """Task objective plus ``lambda_s`` times the gate sparsity term."""
    if not cfg.active:
        return weighted
    return tn.add(weighted, tn.mul(sparsity_loss(bank, cfg), cfg.lambda_s))


# ---------------------------------------------------------------------------
# checkpoints


def tensor_record(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def from_record(rec: dict) -> np.ndarray:
    return np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])


def gate_checksum(enc: GatedEncoder) -> str:
    h = hashlib.sha256()
    for arr in (enc.bank.alpha.data, enc.mixer.beta.data):
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def encoder_to_dict(enc: GatedEncoder, meta: dict | None = None) -> dict:
    return {
        "format": CKPT_FORMAT,
        "arch": asdict(enc.arch),
        "tasks": [asdict(t) for t in enc.tasks],
        "gates": {"threshold": enc.bank.threshold, "widths": list(enc.bank.widths),
                  "sites": list(enc.bank.site_names), "trainable": enc.bank.trainable},
        "mixer": {"widths": list(enc.mixer.widths), "trainable": enc.mixer.beta.requires_grad},
        "tensors": {name: tensor_record(t.data) for name, t in enc.all_tensors().items()},
        "frozen": sorted(k for k, v in enc.params.items() if not v.requires_grad),
        "meta": meta or {},
    }


def encoder_from_dict(doc: dict) -> GatedEncoder:
    if doc.get("format") != CKPT_FORMAT:
        raise ContractError(f"not an {CKPT_FORMAT} document: {doc.get('format')!r}")
    arch = ArchConfig(**doc["arch"])
    tasks = [TaskSpec(**t) for t in doc["tasks"]]
    frozen = set(doc.get("frozen", []))
    tensors = dict(doc["tensors"])
    alpha = Tensor(from_record(tensors.pop("gates.alpha")), requires_grad=doc["gates"]["trainable"])
    beta = Tensor(from_record(tensors.pop("mixer.beta")), requires_grad=doc["mixer"]["trainable"])
    params = {k: Tensor(from_record(v), requires_grad=k not in frozen) for k, v in tensors.items()}
    bank = GateBank(alpha, list(doc["gates"]["widths"]), threshold=doc["gates"]["threshold"],
                    site_names=list(doc["gates"]["sites"]))
    mixer = SharedMixer(beta, list(doc["mixer"]["widths"]))
    return GatedEncoder(arch, tasks, params, bank, mixer)


def save_checkpoint(enc: GatedEncoder, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(encoder_to_dict(enc, meta)))
    return path


def load_checkpoint(path) -> tuple[GatedEncoder, dict]:
    doc = json.loads(Path(path).read_text())
    return encoder_from_dict(doc), doc.get("meta", {})
