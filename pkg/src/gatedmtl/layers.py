"""Gated building blocks.

Both block types keep one shared branch and T task branches.  A task's
features at every gate site are a per-channel hard select between its own
branch and the shared branch; the shared stream entering the next block is a
softmax-weighted mix of the tasks' selected features.

Conv blocks gate at the block output::

    phi_t  = F(task_in_t; Phi_t)        psi = F(shared_in; Psi)
    phi'_t = G_t * phi_t + (1 - G_t) * psi
    psi'   = sum_t softmax_t(beta)[c, t] * phi'_t

so the outputs handed to the next block are already mixed.  Transformer
blocks gate each projection output (q, k, v, attention output, both FFN
linears) against the matching projection of a shared stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .gates import GateBank, SharedMixer, gate_mask, mix_shared, mix_task
from .tensor import DimensionError, Tensor

ATTN_SITES = ("q", "k", "v", "o", "f1", "f2")


@dataclass
class ConvBlockParams:
    shared_w: Tensor
    shared_b: Tensor
    task_w: list[Tensor]
    task_b: list[Tensor]
    pool: bool = False

    def __post_init__(self):
        if any(w.shape != self.shared_w.shape for w in self.task_w):
            raise DimensionError("task kernels must match the shared kernel shape")
        if self.shared_w.shape[2] % 2 == 0:
            raise DimensionError("kernel size must be odd")


def conv_transform(x: Tensor, w: Tensor, b: Tensor, pool: bool) -> Tensor:
    y = tn.relu(tn.conv2d(x, w, b))
    return tn.avg_pool2d(y) if pool else y


def conv_block_forward(params: ConvBlockParams, bank: GateBank, mixer: SharedMixer, layer: int,
                       shared_in: Tensor, task_ins: list[Tensor], prune_dead: bool = False):
    """One gated conv layer.  Returns ``(shared_out, [task_out_t])``.

    With ``prune_dead`` the branches whose outputs the (frozen) gates never
    select are not computed; the forward values are unchanged.
    """
    T = len(task_ins)
    if T != bank.num_tasks or T != len(params.task_w):
        raise DimensionError(f"{T} task inputs for {bank.num_tasks} gated tasks")
    if not 0 <= layer < bank.num_layers:
        raise IndexError(f"layer {layer} out of range")
    if any(x.shape != shared_in.shape for x in task_ins):
        raise DimensionError("task and shared inputs must share [C_in, H, W]")

    masks = [gate_mask(bank, t, layer) for t in range(T)]
    need_shared = need_task = None
    if prune_dead:
        hard = [m.data for m in masks]
        need_shared = any((h == 0).any() for h in hard)
        need_task = [bool(h.any()) for h in hard]

    psi = None
    if need_shared is None or need_shared:
        psi = conv_transform(shared_in, params.shared_w, params.shared_b, params.pool)
    mixed = []
    for t in range(T):
        if need_task is not None and not need_task[t]:
            mixed.append(psi)
            continue
        phi = conv_transform(task_ins[t], params.task_w[t], params.task_b[t], params.pool)
        mixed.append(phi if psi is None else mix_task(masks[t], phi, psi))
    shared_out = mix_shared(mixer, layer, mixed)
    return shared_out, mixed


# ---------------------------------------------------------------------------
# transformer


@dataclass
class Linear:
    w: Tensor  # [in, out]
    b: Tensor  # [out]

    def __call__(self, x: Tensor) -> Tensor:
        return tn.add(tn.matmul(x, self.w), self.b)


@dataclass
class LayerNorm:
    g: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.g, self.b)


@dataclass
class AttnBranch:
    """One branch (shared or task) of a gated transformer block."""

    ln1: LayerNorm
    ln2: LayerNorm
    proj: dict[str, Linear]


@dataclass
class AttnBlockParams:
    shared: AttnBranch
    tasks: list[AttnBranch]
    heads: int

    @property
    def dim(self) -> int:
        return self.shared.proj["q"].w.shape[0]

    def __post_init__(self):
        if self.dim % self.heads:
            raise DimensionError(f"width {self.dim} not divisible by {self.heads} heads")
        for br in self.tasks:
            for name in ATTN_SITES:
                if br.proj[name].w.shape != self.shared.proj[name].w.shape:
                    raise DimensionError(f"task projection {name} disagrees with the shared one")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over [B, N, C] with C split into heads."""
    B, N, C = q.shape
    d = C // heads

    def split(x):
        return tn.transpose(tn.reshape(x, (B, N, heads, d)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = tn.mul(tn.matmul(qh, tn.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    att = tn.softmax(scores, axis=-1)
    out = tn.matmul(att, vh)
    return tn.reshape(tn.transpose(out, (0, 2, 1, 3)), (B, N, C))


def site_index(block: int, name: str) -> int:
    return block * len(ATTN_SITES) + ATTN_SITES.index(name)


def shared_stream(br: AttnBranch, psi: Tensor, heads: int) -> dict[str, Tensor]:
    """Intermediate activations of the shared branch, keyed by gate site
    (pre-activation for f1)."""
    h = br.ln1(psi)
    acts = {name: br.proj[name](h) for name in ("q", "k", "v")}
    a = multi_head_attention(acts["q"], acts["k"], acts["v"], heads)
    acts["o"] = br.proj["o"](a)
    r = tn.add(psi, acts["o"])
    acts["f1"] = br.proj["f1"](br.ln2(r))
    acts["f2"] = br.proj["f2"](tn.relu(acts["f1"]))
    return acts


def attn_block_forward(params: AttnBlockParams, bank: GateBank, mixer: SharedMixer, layer: int,
                       shared_in: Tensor, task_ins: list[Tensor]):
    """One gated transformer block.  ``layer`` is the block index; its six
    gate sites occupy ``bank`` rows ``6*layer .. 6*layer+5``."""
    T = len(task_ins)
    if T != bank.num_tasks or T != len(params.tasks):
        raise DimensionError(f"{T} task inputs for {bank.num_tasks} gated tasks")
    if shared_in.ndim != 3 or shared_in.shape[1] < 1:
        raise DimensionError(f"expected [B, N, C] tokens, got {shared_in.shape}")
    if any(x.shape != shared_in.shape for x in task_ins):
        raise DimensionError("task and shared token inputs must agree")
    if shared_in.shape[2] != params.dim:
        raise DimensionError(f"token width {shared_in.shape[2]} != block width {params.dim}")

    sh = shared_stream(params.shared, shared_in, params.heads)

    def gated(t, name, x):
        m = gate_mask(bank, t, site_index(layer, name))
        return mix_task(m, params.tasks[t].proj[name](x), sh[name], channel_axis=-1)

    outs = []
    for t, phi in enumerate(task_ins):
        br = params.tasks[t]
        h = br.ln1(phi)
        q, k, v = gated(t, "q", h), gated(t, "k", h), gated(t, "v", h)
        a = multi_head_attention(q, k, v, params.heads)
        r = tn.add(phi, gated(t, "o", a))
        f = tn.relu(gated(t, "f1", br.ln2(r)))
        outs.append(tn.add(r, gated(t, "f2", f)))
    shared_out = mix_shared(mixer, layer, outs, channel_axis=-1)
    return shared_out, outs
