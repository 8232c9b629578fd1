"""Binary channel gates, the softmax shared-branch mixer and the sparsity
regularizers that push gates toward the shared branch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import ContractError, DimensionError, Tensor

THRESHOLD = 0.5
VARIANTS = ("hinge", "l1", "none")


def _validity(widths: Sequence[int], cmax: int) -> np.ndarray:
    valid = np.zeros((len(widths), cmax), dtype=bool)
    for i, w in enumerate(widths):
        valid[i, :w] = True
    return valid


@dataclass
class GateBank:
    """Gate logits ``alpha[t, l, c]`` for every task, gate site and channel.

    Sites narrower than the widest one use the leading ``widths[l]`` entries;
    the remainder is padding that never reaches a loss or a statistic.
    """

    alpha: Tensor
    widths: list[int]
    threshold: float = THRESHOLD
    site_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        T, L, C = self.alpha.shape
        if len(self.widths) != L or max(self.widths, default=0) > C:
            raise DimensionError(f"widths {self.widths} do not fit alpha {self.alpha.shape}")
        if not self.site_names:
            self.site_names = [f"layer{i}" for i in range(L)]

    @classmethod
    def create(cls, num_tasks: int, widths: Sequence[int], init: float = 0.0,
               site_names: Sequence[str] = ()) -> "GateBank":
        cmax = max(widths) if widths else 1
        alpha = np.full((num_tasks, len(widths), cmax), float(init))
        alpha[:, ~_validity(widths, cmax)] = 0.0
        return cls(Tensor(alpha, requires_grad=True), list(widths), site_names=list(site_names))

    @property
    def num_tasks(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_layers(self) -> int:
        return self.alpha.shape[1]

    @property
    def validity(self) -> np.ndarray:
        return _validity(self.widths, self.alpha.shape[2])

    @property
    def trainable(self) -> bool:
        return self.alpha.requires_grad

    def hard_masks(self) -> np.ndarray:
        """Boolean [T, L, C_max] array of thresholded gates (padding is False)."""
        s = tn._sigmoid_np(self.alpha.data)
        return (s > self.threshold) & self.validity[None]

    def set_all(self, value: float) -> None:
        data = np.full(self.alpha.shape, float(value))
        data[:, ~self.validity] = 0.0
        self.alpha.data = data


@dataclass
class SharedMixer:
    """Fusion logits ``beta[l, c, t]``; a softmax over tasks per (layer, channel)."""

    beta: Tensor
    widths: list[int]

    def __post_init__(self):
        L, C, T = self.beta.shape
        if len(self.widths) != L or max(self.widths, default=0) > C:
            raise DimensionError(f"widths {self.widths} do not fit beta {self.beta.shape}")

    @classmethod
    def create(cls, num_tasks: int, widths: Sequence[int]) -> "SharedMixer":
        cmax = max(widths) if widths else 1
        return cls(Tensor(np.zeros((len(widths), cmax, num_tasks)), requires_grad=True), list(widths))

    @property
    def num_tasks(self) -> int:
        return self.beta.shape[2]

    @property
    def num_layers(self) -> int:
        return self.beta.shape[0]

    @property
    def validity(self) -> np.ndarray:
        return _validity(self.widths, self.beta.shape[1])

    def weights(self, layer: int) -> Tensor:
        """Softmax-over-tasks weights for one layer as a [C, T] tensor."""
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"mixer layer {layer} out of range")
        C = self.widths[layer]
        return tn.softmax(self.beta[layer, :C, :], axis=1)

    def weights_np(self, layer: int) -> np.ndarray:
        C = self.widths[layer]
        z = self.beta.data[layer, :C, :]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class SparsityConfig:
    lambda_s: float = 0.0
    tau: list[float] | None = None
    variant: str = "hinge"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown sparsity variant {self.variant!r}")
        if self.lambda_s < 0:
            raise ContractError("lambda_s must be nonnegative")
        if self.variant == "hinge":
            if self.tau is None:
                raise ContractError("the hinge variant needs per-task targets tau")
            if any(not 0.0 <= t <= 1.0 for t in self.tau):
                raise ContractError(f"tau entries must lie in [0, 1], got {self.tau}")
        if self.tau is not None:
            self.tau = [float(t) for t in self.tau]

    @property
    def active(self) -> bool:
        return self.variant != "none" and self.lambda_s > 0


def gate_mask(bank: GateBank, task: int, layer: int) -> Tensor:
    """Binary [C] mask for one task and site; differentiable in alpha via the STE."""
    if not 0 <= task < bank.num_tasks:
        raise IndexError(f"task {task} out of range for {bank.num_tasks} tasks")
    if not 0 <= layer < bank.num_layers:
        raise IndexError(f"layer {layer} out of range for {bank.num_layers} gate sites")
    logits = bank.alpha[task, layer, :bank.widths[layer]]
    return tn.ste_threshold(tn.sigmoid(logits), bank.threshold)


def _mask_shape(C: int, ndim: int, channel_axis: int) -> tuple[int, ...]:
    ax = channel_axis % ndim
    return (C,) + (1,) * (ndim - ax - 1)


def mix_task(mask: Tensor, task_feat: Tensor, shared_feat: Tensor, channel_axis: int = -3) -> Tensor:
    """Per-channel hard select between task-specific and shared features.

    ``channel_axis`` is -3 for [.., C, H, W] feature maps and -1 for token
    embeddings [.., N, C].
    """
    if task_feat.shape != shared_feat.shape:
        raise DimensionError(f"task {task_feat.shape} vs shared {shared_feat.shape}")
    C = task_feat.shape[channel_axis]
    if mask.shape != (C,):
        raise DimensionError(f"mask {mask.shape} vs {C} channels")
    m = tn.reshape(mask, _mask_shape(C, task_feat.ndim, channel_axis))
    return tn.gate_mix(m, task_feat, shared_feat)


def mix_shared(mixer: SharedMixer, layer: int, task_feats: Sequence[Tensor],
               channel_axis: int = -3) -> Tensor:
    """Softmax-weighted sum of the tasks' mixed features, channel by channel."""
    if len(task_feats) != mixer.num_tasks:
        raise DimensionError(f"{len(task_feats)} feature maps for {mixer.num_tasks} tasks")
    return tn.channel_mix(mixer.weights(layer), task_feats, channel_axis=channel_axis)


def mean_activation(bank: GateBank) -> Tensor:
    """Per-task average over sites of the channel-mean of sigmoid(alpha): shape [T]."""
    valid = bank.validity.astype(float)
    widths = np.array(bank.widths, dtype=float)
    s = tn.sigmoid(bank.alpha)
    per_site = tn.div(tn.tsum(tn.mul(s, valid[None]), axis=2), widths[None])
    return tn.mean(per_site, axis=1)


def sparsity_loss(bank: GateBank, cfg: SparsityConfig) -> Tensor:
    """Budget regularizer on the gates.

    hinge: mean_t max(0, u_t - tau_t); l1: mean_t u_t, where u_t is the
    per-task mean gate activation from :func:`mean_activation`.
    """
    if cfg.variant == "none":
        raise ContractError("sparsity_loss called with variant 'none'; skip the term instead")
    u = mean_activation(bank)
    if cfg.variant == "l1":
        return tn.mean(u)
    if len(cfg.tau) != bank.num_tasks:
        raise ContractError(f"{len(cfg.tau)} targets for {bank.num_tasks} tasks")
    return tn.mean(tn.maximum(tn.sub(u, np.array(cfg.tau)), 0.0))


@dataclass
class GateReport:
    """Routing statistics: how much each task specializes and how much it feeds
    the shared branch."""

    selection_ratio: list[float]
    selection_ratio_per_layer: list[list[float]]
    contribution_share: list[float]
    contribution_share_per_layer: list[list[float]]
    site_names: list[str]
    task_names: list[str] | None = None

    def to_dict(self) -> dict:
        T = len(self.selection_ratio)
        names = self.task_names or [f"task{t}" for t in range(T)]
        return {
            "format": "interrogate-gates-v1",
            "tasks": names,
            "sites": list(self.site_names),
            "selection_ratio": {
                "overall": [float(x) for x in self.selection_ratio],
                "per_layer": [[float(x) for x in row] for row in self.selection_ratio_per_layer],
            },
            "shared_contribution": {
                "overall": [float(x) for x in self.contribution_share],
                "per_layer": [[float(x) for x in row] for row in self.contribution_share_per_layer],
            },
        }


def gate_statistics(bank: GateBank, mixer: SharedMixer,
                    task_names: Sequence[str] | None = None) -> GateReport:
    masks = bank.hard_masks()
    valid = bank.validity
    widths = np.array(bank.widths)
    per_layer = masks.sum(axis=2) / np.maximum(widths, 1)[None]
    overall = masks.sum(axis=(1, 2)) / max(int(valid.sum()), 1)

    T = mixer.num_tasks
    counts = np.zeros((T, mixer.num_layers))
    for layer in range(mixer.num_layers):
        winners = np.argmax(mixer.weights_np(layer), axis=1)  # argmax picks the lowest index on ties
        counts[:, layer] = np.bincount(winners, minlength=T)
    mwidths = np.array(mixer.widths)
    share_layer = counts / np.maximum(mwidths, 1)[None]
    share = counts.sum(axis=1) / max(int(mwidths.sum()), 1)
    return GateReport(
        selection_ratio=overall.tolist(),
        selection_ratio_per_layer=per_layer.tolist(),
        contribution_share=share.tolist(),
        contribution_share_per_layer=share_layer.tolist(),
        site_names=list(bank.site_names),
        task_names=list(task_names) if task_names is not None else None,
    )
