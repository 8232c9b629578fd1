"""Collapse a trained gated encoder into a static network.

Once the gates are frozen, every channel slot a task consumes is filled by
exactly one source row: its own branch where the gate is 1, the shared
branch where it is 0.  Rows no task reads are deleted, and the consumers
gather their inputs through a per-slot routing table, so they keep their full
input width.

Shared-mix channels whose contributions are identical for every task (each
task routed the same shared row there) carry the shared value straight
through: the softmax weights sum to one, so the mix is the identity up to
rounding.  Mixers whose output no surviving shared row reads are removed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .layers import ATTN_SITES, conv_transform, multi_head_attention
from .model import ArchConfig, GatedEncoder, TaskSpec, from_record, gate_checksum, predict, tensor_record
from .tensor import ContractError, Tensor

PRUNED_FORMAT = "interrogate-pruned-v1"
PATTERN_FORMAT = "interrogate-gate-pattern-v1"
EQUIVALENCE_TOL = 1e-9

SHARED, TASK = 0, 1


class StalePatternError(ContractError):
    """The gate pattern was not extracted from this encoder's current gates."""


@dataclass
class GatePattern:
    masks: list[np.ndarray]  # per gate site: bool [T, C_site]
    mixer_weights: list[np.ndarray]  # per block: [C, T]
    checksum: str
    site_names: list[str] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return self.masks[0].shape[0] if self.masks else 0

    def to_dict(self) -> dict:
        return {
            "format": PATTERN_FORMAT,
            "checksum": self.checksum,
            "sites": [{"name": n, "masks": m.astype(int).tolist()}
                      for n, m in zip(self.site_names, self.masks)],
            "mixer_weights": [w.tolist() for w in self.mixer_weights],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GatePattern":
        if doc.get("format") != PATTERN_FORMAT:
            raise ContractError(f"not a {PATTERN_FORMAT} document")
        return cls(masks=[np.array(s["masks"], dtype=bool) for s in doc["sites"]],
                   mixer_weights=[np.array(w, dtype=np.float64) for w in doc["mixer_weights"]],
                   checksum=doc["checksum"], site_names=[s["name"] for s in doc["sites"]])

    def equals(self, other: "GatePattern") -> bool:
        return (self.checksum == other.checksum and len(self.masks) == len(other.masks)
                and all(np.array_equal(a, b) for a, b in zip(self.masks, other.masks))
                and all(np.array_equal(a, b) for a, b in zip(self.mixer_weights, other.mixer_weights)))


def extract_pattern(enc: GatedEncoder) -> GatePattern:
    hard = enc.bank.hard_masks()
    masks = [hard[:, l, :w].copy() for l, w in enumerate(enc.bank.widths)]
    weights = [enc.mixer.weights_np(l) for l in range(enc.mixer.num_layers)]
    return GatePattern(masks, weights, gate_checksum(enc), list(enc.bank.site_names))


# ---------------------------------------------------------------------------
# pruned structures


@dataclass
class Route:
    """Where each of the C consumer slots reads from: ``source[c]`` is SHARED
    or TASK, ``index[c]`` the position within that branch's kept rows."""

    source: np.ndarray
    index: np.ndarray

    @classmethod
    def build(cls, task_selected: np.ndarray, shared_rows: np.ndarray, task_rows: np.ndarray) -> "Route":
        C = len(task_selected)
        source = np.where(task_selected, TASK, SHARED).astype(np.int64)
        index = np.empty(C, dtype=np.int64)
        spos = {int(c): i for i, c in enumerate(shared_rows)}
        tpos = {int(c): i for i, c in enumerate(task_rows)}
        for c in range(C):
            index[c] = tpos[c] if task_selected[c] else spos[c]
        return cls(source, index)

    def gather(self, task_vals: np.ndarray | None, shared_vals: np.ndarray | None, axis: int) -> np.ndarray:
        ref = task_vals if task_vals is not None else shared_vals
        shape = list(ref.shape)
        axis %= len(shape)
        shape[axis] = len(self.source)
        out = np.empty(shape)
        for src, vals in ((TASK, task_vals), (SHARED, shared_vals)):
            slots = np.nonzero(self.source == src)[0]
            if len(slots):
                dst = [slice(None)] * len(shape)
                dst[axis] = slots
                out[tuple(dst)] = np.take(vals, self.index[slots], axis=axis)
        return out

    def to_dict(self) -> dict:
        return {"source": self.source.tolist(), "index": self.index.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Route":
        return cls(np.array(d["source"], dtype=np.int64), np.array(d["index"], dtype=np.int64))


@dataclass
class MixerPlan:
    """Channels that still need the softmax mix, with their frozen weights.
    All other channels of the next shared input copy task 0's output."""

    live: bool
    channels: np.ndarray
    weights: np.ndarray  # [len(channels), T]


@dataclass
class PrunedConvBlock:
    width: int
    pool: bool
    shared_rows: np.ndarray
    shared_w: np.ndarray
    shared_b: np.ndarray
    task_rows: list[np.ndarray]
    task_w: list[np.ndarray]
    task_b: list[np.ndarray]
    routes: list[Route]
    mixer: MixerPlan

    @property
    def mixer_channels(self) -> np.ndarray:
        return self.mixer.channels if self.mixer.live else np.zeros(0, dtype=np.int64)


@dataclass
class PrunedProjection:
    rows: np.ndarray
    w: np.ndarray  # [in, len(rows)]
    b: np.ndarray


@dataclass
class PrunedAttnBranch:
    proj: dict[str, PrunedProjection]
    ln1: tuple[np.ndarray, np.ndarray] | None
    ln2: tuple[np.ndarray, np.ndarray] | None
    attention: bool

    @property
    def norms(self) -> int:
        return (self.ln1 is not None) + (self.ln2 is not None)


@dataclass
class PrunedAttnBlock:
    width: int
    heads: int
    shared: PrunedAttnBranch
    tasks: list[PrunedAttnBranch]
    routes: list[dict[str, Route]]
    mixer: MixerPlan

    @property
    def shared_rows(self) -> dict[str, np.ndarray]:
        return {s: self.shared.proj[s].rows for s in ATTN_SITES}

    @property
    def task_rows(self) -> list[dict[str, np.ndarray]]:
        return [{s: br.proj[s].rows for s in ATTN_SITES} for br in self.tasks]

    @property
    def shared_attention(self) -> bool:
        return self.shared.attention

    @property
    def shared_norms(self) -> int:
        return self.shared.norms

    @property
    def task_norms(self) -> list[int]:
        return [br.norms for br in self.tasks]

    @property
    def mixer_channels(self) -> np.ndarray:
        return self.mixer.channels if self.mixer.live else np.zeros(0, dtype=np.int64)


@dataclass
class PrunedModel:
    arch: ArchConfig
    tasks: list[TaskSpec]
    stem: dict[str, np.ndarray]
    blocks: list
    heads: list[tuple[np.ndarray, np.ndarray]]
    source_checksum: str

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def param_count(self) -> int:
        n = sum(v.size for v in self.stem.values())
        n += sum(w.size + b.size for w, b in self.heads)
        for blk in self.blocks:
            if isinstance(blk, PrunedConvBlock):
                n += blk.shared_w.size + blk.shared_b.size
                n += sum(w.size + b.size for w, b in zip(blk.task_w, blk.task_b))
            else:
                for br in [blk.shared] + blk.tasks:
                    n += sum(p.w.size + p.b.size for p in br.proj.values())
                    n += sum(g.size + b.size for g, b in (br.ln1, br.ln2) if g is not None) if br.norms else 0
            n += blk.mixer_channels.size * self.num_tasks
        return n


# ---------------------------------------------------------------------------
# collapse


def _rows(sel: np.ndarray) -> np.ndarray:
    return np.nonzero(sel)[0].astype(np.int64)


def _mixer_plan(live: bool, identical: np.ndarray, weights: np.ndarray) -> MixerPlan:
    if not live:
        return MixerPlan(False, np.zeros(0, dtype=np.int64), np.zeros((0, weights.shape[1])))
    ch = _rows(~identical)
    return MixerPlan(True, ch, weights[ch].copy())


def collapse(enc: GatedEncoder, pattern: GatePattern) -> PrunedModel:
    """Static network computing the same task outputs as ``enc`` under the
    frozen ``pattern``."""
    if pattern.checksum != gate_checksum(enc):
        raise StalePatternError("gate pattern checksum does not match the encoder's gates")
    p = {k: v.data for k, v in enc.params.items()}
    stem = {k: v.copy() for k, v in p.items() if k.startswith("stem.")}
    heads = [(p[f"head{t}.w"].copy(), p[f"head{t}.b"].copy()) for t in range(enc.num_tasks)]
    if enc.arch.kind == "conv":
        blocks = _collapse_conv(enc, pattern, p)
    else:
        blocks = _collapse_attn(enc, pattern, p)
    return PrunedModel(enc.arch, list(enc.tasks), stem, blocks, heads, pattern.checksum)


def _collapse_conv(enc, pattern, p) -> list[PrunedConvBlock]:
    L, T = enc.num_layers, enc.num_tasks
    shared_sel = [(~pattern.masks[l]).any(axis=0) for l in range(L)]
    blocks = []
    for l in range(L):
        m = pattern.masks[l]
        s_rows = _rows(shared_sel[l])
        t_rows = [_rows(m[t]) for t in range(T)]
        live = l + 1 < L and bool(shared_sel[l + 1].any())
        blocks.append(PrunedConvBlock(
            width=m.shape[1], pool=l in enc.arch.pool_after,
            shared_rows=s_rows, shared_w=p[f"block{l}.shared.w"][s_rows].copy(),
            shared_b=p[f"block{l}.shared.b"][s_rows].copy(),
            task_rows=t_rows,
            task_w=[p[f"block{l}.task{t}.w"][t_rows[t]].copy() for t in range(T)],
            task_b=[p[f"block{l}.task{t}.b"][t_rows[t]].copy() for t in range(T)],
            routes=[Route.build(m[t], s_rows, t_rows[t]) for t in range(T)],
            mixer=_mixer_plan(live, ~m.any(axis=0), pattern.mixer_weights[l])))
    return blocks


def _shared_attn_needs(masks: dict[str, np.ndarray], C: int, hidden: int):
    """Shared rows each site must compute, whether the shared attention runs,
    and whether the block reads its shared input at all."""
    wanted = {s: (~masks[s]).any(axis=0) for s in ATTN_SITES}
    rows = {"f2": wanted["f2"]}
    # f2 reads relu(f1) in full; f1 reads the full residual, which needs the
    # full attention output projection
    rows["f1"] = np.ones(hidden, bool) if rows["f2"].any() else wanted["f1"]
    rows["o"] = np.ones(C, bool) if rows["f1"].any() else wanted["o"]
    # tasks with no own q/k/v row reuse the shared attention output
    reuse = [not (masks["q"][t].any() or masks["k"][t].any() or masks["v"][t].any())
             for t in range(masks["q"].shape[0])]
    attention = bool(rows["o"].any()) or any(reuse)
    for s in ("q", "k", "v"):
        rows[s] = np.ones(C, bool) if attention else wanted[s]
    reads_input = bool(rows["f1"].any() or any(rows[s].any() for s in ("q", "k", "v")))
    return rows, attention, reuse, reads_input


def _projection(p, prefix: str, site: str, rows: np.ndarray) -> PrunedProjection:
    return PrunedProjection(rows, p[f"{prefix}.{site}.w"][:, rows].copy(), p[f"{prefix}.{site}.b"][rows].copy())


def _norm(p, prefix: str, name: str, keep: bool):
    return (p[f"{prefix}.{name}.g"].copy(), p[f"{prefix}.{name}.b"].copy()) if keep else None


def _collapse_attn(enc, pattern, p) -> list[PrunedAttnBlock]:
    arch, T = enc.arch, enc.num_tasks
    C, hidden, L = arch.dim, arch.ffn_mult * arch.dim, arch.depth
    needs = []
    for l in range(L):
        masks = {s: pattern.masks[l * len(ATTN_SITES) + i] for i, s in enumerate(ATTN_SITES)}
        needs.append((masks,) + _shared_attn_needs(masks, C, hidden))
    blocks = []
    # channels where every task's stream provably holds the same value
    identical = np.ones(C, bool)
    for l, (masks, rows, attention, reuse, _) in enumerate(needs):
        pre = f"block{l}.shared"
        shared = PrunedAttnBranch(
            proj={s: _projection(p, pre, s, _rows(rows[s])) for s in ATTN_SITES},
            ln1=_norm(p, pre, "ln1", any(rows[s].any() for s in ("q", "k", "v"))),
            ln2=_norm(p, pre, "ln2", bool(rows["f1"].any())), attention=attention)
        tasks, routes = [], []
        for t in range(T):
            tp = f"block{l}.task{t}"
            proj = {s: _projection(p, tp, s, _rows(masks[s][t])) for s in ATTN_SITES}
            tasks.append(PrunedAttnBranch(
                proj=proj, ln1=_norm(p, tp, "ln1", not reuse[t]),
                ln2=_norm(p, tp, "ln2", bool(masks["f1"][t].any())), attention=not reuse[t]))
            routes.append({s: Route.build(masks[s][t], shared.proj[s].rows, proj[s].rows) for s in ATTN_SITES})
        identical = identical & ~masks["o"].any(axis=0) & ~masks["f2"].any(axis=0)
        live = l + 1 < L and needs[l + 1][4]
        blocks.append(PrunedAttnBlock(C, arch.heads, shared, tasks, routes,
                                      _mixer_plan(live, identical, pattern.mixer_weights[l])))
    return blocks


# ---------------------------------------------------------------------------
# inference


def _t(a: np.ndarray) -> Tensor:
    return Tensor(a)


def _linear(x: np.ndarray, proj: PrunedProjection) -> np.ndarray | None:
    if not len(proj.rows):
        return None
    return tn.add(tn.matmul(_t(x), _t(proj.w)), _t(proj.b)).data


def _layer_norm(x: np.ndarray, ln) -> np.ndarray:
    return tn.layer_norm(_t(x), _t(ln[0]), _t(ln[1])).data


def _mix(plan: MixerPlan, outs: list[np.ndarray], axis: int) -> np.ndarray:
    mixed = outs[0].copy()
    if len(plan.channels):
        sub = [np.take(o, plan.channels, axis=axis) for o in outs]
        vals = tn.channel_mix(_t(plan.weights), [_t(s) for s in sub], channel_axis=axis).data
        idx = [slice(None)] * mixed.ndim
        idx[axis] = plan.channels
        mixed[tuple(idx)] = vals
    return mixed


def _conv_forward(pm: PrunedModel, x: np.ndarray) -> list[np.ndarray]:
    stem = pm.stem
    h = tn.relu(tn.conv2d(_t(x), _t(stem["stem.w"]), _t(stem["stem.b"]))).data
    shared, feats = h, [h] * pm.num_tasks
    for blk in pm.blocks:
        psi = None
        if len(blk.shared_rows):
            psi = conv_transform(_t(shared), _t(blk.shared_w), _t(blk.shared_b), blk.pool).data
        outs = []
        for t in range(pm.num_tasks):
            phi = None
            if len(blk.task_rows[t]):
                phi = conv_transform(_t(feats[t]), _t(blk.task_w[t]), _t(blk.task_b[t]), blk.pool).data
            outs.append(blk.routes[t].gather(phi, psi, axis=1))
        shared = _mix(blk.mixer, outs, axis=1) if blk.mixer.live else None
        feats = outs
    return feats


def _attn_forward(pm: PrunedModel, x: np.ndarray) -> list[np.ndarray]:
    arch, stem = pm.arch, pm.stem
    B, g, P = x.shape[0], arch.image_size // arch.patch, arch.patch
    patches = x.reshape(B, arch.in_channels, g, P, g, P).transpose(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(B, g * g, arch.in_channels * P * P)
    h = tn.add(tn.add(tn.matmul(_t(patches), _t(stem["stem.w"])), _t(stem["stem.b"])), _t(stem["stem.pos"])).data
    shared, feats = h, [h] * pm.num_tasks
    for blk in pm.blocks:
        sh = blk.shared
        acts: dict[str, np.ndarray | None] = {}
        hs = _layer_norm(shared, sh.ln1) if sh.ln1 is not None else None
        for s in ("q", "k", "v"):
            acts[s] = _linear(hs, sh.proj[s]) if hs is not None else None
        att_s = None
        if sh.attention:
            att_s = multi_head_attention(_t(acts["q"]), _t(acts["k"]), _t(acts["v"]), blk.heads).data
        acts["o"] = _linear(att_s, sh.proj["o"]) if att_s is not None else None
        acts["f1"] = acts["f2"] = None
        if sh.ln2 is not None:
            r_s = shared + acts["o"]
            acts["f1"] = _linear(_layer_norm(r_s, sh.ln2), sh.proj["f1"])
            if len(sh.proj["f2"].rows):
                acts["f2"] = _linear(np.maximum(acts["f1"], 0.0), sh.proj["f2"])
        outs = []
        for t, phi in enumerate(feats):
            br, route = blk.tasks[t], blk.routes[t]

            def site(name, inp):
                own = _linear(inp, br.proj[name]) if inp is not None and len(br.proj[name].rows) else None
                return route[name].gather(own, acts[name], axis=-1)

            if br.attention:
                ht = _layer_norm(phi, br.ln1)
                q, k, v = site("q", ht), site("k", ht), site("v", ht)
                a = multi_head_attention(_t(q), _t(k), _t(v), blk.heads).data
            else:
                a = att_s
            r = phi + site("o", a)
            f = np.maximum(site("f1", _layer_norm(r, br.ln2) if br.ln2 is not None else None), 0.0)
            outs.append(r + site("f2", f))
        shared = _mix(blk.mixer, outs, axis=-1) if blk.mixer.live else None
        feats = outs
    return feats


def pruned_features(pm: PrunedModel, x) -> list[np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != pm.arch.input_shape:
        raise ContractError(f"input {x.shape} does not match {pm.arch.input_shape}")
    with tn.no_grad():
        return _conv_forward(pm, x) if pm.arch.kind == "conv" else _attn_forward(pm, x)


def pruned_predict(pm: PrunedModel, x) -> list[np.ndarray]:
    feats = pruned_features(pm, x)
    outs = []
    with tn.no_grad():
        for (w, b), f in zip(pm.heads, feats):
            pooled = f.mean(axis=(2, 3)) if pm.arch.kind == "conv" else f.mean(axis=1)
            outs.append(tn.add(tn.matmul(_t(pooled), _t(w)), _t(b)).data)
    return outs


# ---------------------------------------------------------------------------
# equivalence


@dataclass
class EquivalenceReport:
    max_abs: list[float]
    max_rel: list[float]
    tolerance: float = EQUIVALENCE_TOL

    @property
    def passed(self) -> bool:
        return all(r < self.tolerance for r in self.max_rel)

    def to_dict(self) -> dict:
        return {"max_abs": self.max_abs, "max_rel": self.max_rel, "tolerance": self.tolerance,
                "passed": self.passed}


def verify_equivalence(enc: GatedEncoder, pm: PrunedModel, inputs) -> EquivalenceReport:
    """Per-task deviation between the gated and the collapsed predictions.

    The relative deviation is the largest absolute difference divided by the
    largest reference magnitude of that task's outputs.
    """
    with tn.no_grad():
        ref = [o.data for o in predict(enc, inputs, prune_dead=False)]
    got = pruned_predict(pm, inputs)
    abs_dev, rel_dev = [], []
    for a, b in zip(ref, got):
        d = float(np.max(np.abs(a - b))) if a.size else 0.0
        scale = float(np.max(np.abs(a))) if a.size else 0.0
        abs_dev.append(d)
        rel_dev.append(d / scale if scale > 0 else d)
    return EquivalenceReport(abs_dev, rel_dev)


# ---------------------------------------------------------------------------
# serialization


def _arr(a: np.ndarray) -> dict:
    return tensor_record(a)


def _idx(a: np.ndarray) -> list[int]:
    return [int(i) for i in a]


def _mixer_dict(m: MixerPlan) -> dict:
    return {"live": m.live, "channels": _idx(m.channels), "weights": _arr(m.weights)}


def _mixer_from(d: dict) -> MixerPlan:
    return MixerPlan(d["live"], np.array(d["channels"], dtype=np.int64), from_record(d["weights"]))


def _branch_dict(br: PrunedAttnBranch) -> dict:
    return {"attention": br.attention,
            "ln1": [_arr(br.ln1[0]), _arr(br.ln1[1])] if br.ln1 is not None else None,
            "ln2": [_arr(br.ln2[0]), _arr(br.ln2[1])] if br.ln2 is not None else None,
            "proj": {s: {"rows": _idx(pp.rows), "w": _arr(pp.w), "b": _arr(pp.b)} for s, pp in br.proj.items()}}


def _branch_from(d: dict) -> PrunedAttnBranch:
    def ln(v):
        return (from_record(v[0]), from_record(v[1])) if v is not None else None
    return PrunedAttnBranch(
        proj={s: PrunedProjection(np.array(v["rows"], dtype=np.int64), from_record(v["w"]), from_record(v["b"]))
              for s, v in d["proj"].items()},
        ln1=ln(d["ln1"]), ln2=ln(d["ln2"]), attention=d["attention"])


def pruned_to_dict(pm: PrunedModel) -> dict:
    blocks = []
    for blk in pm.blocks:
        if isinstance(blk, PrunedConvBlock):
            blocks.append({
                "kind": "conv", "width": blk.width, "pool": blk.pool,
                "shared": {"rows": _idx(blk.shared_rows), "w": _arr(blk.shared_w), "b": _arr(blk.shared_b)},
                "tasks": [{"rows": _idx(r), "w": _arr(w), "b": _arr(b)}
                          for r, w, b in zip(blk.task_rows, blk.task_w, blk.task_b)],
                "routes": [r.to_dict() for r in blk.routes],
                "mixer": _mixer_dict(blk.mixer)})
        else:
            blocks.append({
                "kind": "transformer", "width": blk.width, "heads": blk.heads,
                "shared": _branch_dict(blk.shared), "tasks": [_branch_dict(b) for b in blk.tasks],
                "routes": [{s: r.to_dict() for s, r in rt.items()} for rt in blk.routes],
                "mixer": _mixer_dict(blk.mixer)})
    return {
        "format": PRUNED_FORMAT,
        "arch": asdict(pm.arch),
        "tasks": [asdict(t) for t in pm.tasks],
        "source_checksum": pm.source_checksum,
        "tensors": {k: _arr(v) for k, v in pm.stem.items()},
        "heads": [{"w": _arr(w), "b": _arr(b)} for w, b in pm.heads],
        "blocks": blocks,
    }


def pruned_from_dict(doc: dict) -> PrunedModel:
    if doc.get("format") != PRUNED_FORMAT:
        raise ContractError(f"not an {PRUNED_FORMAT} document: {doc.get('format')!r}")
    blocks = []
    for d in doc["blocks"]:
        routes_raw = d["routes"]
        if d["kind"] == "conv":
            blocks.append(PrunedConvBlock(
                width=d["width"], pool=d["pool"],
                shared_rows=np.array(d["shared"]["rows"], dtype=np.int64),
                shared_w=from_record(d["shared"]["w"]), shared_b=from_record(d["shared"]["b"]),
                task_rows=[np.array(t["rows"], dtype=np.int64) for t in d["tasks"]],
                task_w=[from_record(t["w"]) for t in d["tasks"]],
                task_b=[from_record(t["b"]) for t in d["tasks"]],
                routes=[Route.from_dict(r) for r in routes_raw], mixer=_mixer_from(d["mixer"])))
        else:
            blocks.append(PrunedAttnBlock(
                width=d["width"], heads=d["heads"], shared=_branch_from(d["shared"]),
                tasks=[_branch_from(b) for b in d["tasks"]],
                routes=[{s: Route.from_dict(r) for s, r in rt.items()} for rt in routes_raw],
                mixer=_mixer_from(d["mixer"])))
    return PrunedModel(ArchConfig(**doc["arch"]), [TaskSpec(**t) for t in doc["tasks"]],
                       {k: from_record(v) for k, v in doc["tensors"].items()},
                       blocks, [(from_record(h["w"]), from_record(h["b"])) for h in doc["heads"]],
                       doc["source_checksum"])


def pruned_bytes(pm: PrunedModel) -> bytes:
    return json.dumps(pruned_to_dict(pm)).encode()


def save_pruned(pm: PrunedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pruned_bytes(pm))
    return path


def load_pruned(path) -> PrunedModel:
    return pruned_from_dict(json.loads(Path(path).read_text()))


def pruned_digest(pm: PrunedModel) -> str:
    return hashlib.sha256(pruned_bytes(pm)).hexdigest()
