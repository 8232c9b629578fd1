"""Walk through one gated conv block by hand.

A block runs a shared convolution and one convolution per task.  Each task
keeps, channel by channel, either its own output or the shared one; the
binary choice comes from thresholding sigmoid(alpha) at 0.5, and alpha still
gets a gradient through the straight-through rule.  A softmax over tasks
(the mixer) then fuses the per-task results into the next shared stream.
"""
import numpy as np

from gatedmtl import GateBank, SharedMixer, SparsityConfig, Tensor, gate_statistics, sparsity_loss
from gatedmtl import tensor as tn
from gatedmtl.gates import gate_mask, mix_shared, mix_task

rng = np.random.default_rng(0)
T, C = 2, 4

bank = GateBank.create(T, [C])
bank.alpha.data = np.array([[[2.0, -1.0, 0.0, 0.5]], [[-3.0, -3.0, 1.5, -0.2]]])
bank.alpha.requires_grad = True
print("sigmoid(alpha):\n", np.round(1 / (1 + np.exp(-bank.alpha.data[:, 0])), 3))
print("hard masks (1 = task-specific; an exact 0.5 goes to shared):\n", bank.hard_masks()[:, 0].astype(int))

shared = Tensor(rng.normal(size=(1, C, 3, 3)))
task_feats = [Tensor(rng.normal(size=(1, C, 3, 3))) for _ in range(T)]
mixed = [mix_task(gate_mask(bank, t, 0), task_feats[t], shared) for t in range(T)]
for t in range(T):
    src = ["task" if np.array_equal(mixed[t].data[0, c], task_feats[t].data[0, c]) else "shared"
           for c in range(C)]
    print(f"task {t} channel sources: {src}")

mixer = SharedMixer.create(T, [C])
fused = mix_shared(mixer, 0, mixed)
print("uniform mixer weights per channel:", mixer.weights_np(0)[0])
assert np.allclose(fused.data, (mixed[0].data + mixed[1].data) / 2)

# straight-through: d loss / d alpha = d loss / d mask * s * (1 - s)
loss = tn.tsum(mixed[0])
loss.backward()
print("alpha gradient for task 0:", np.round(bank.alpha.grad[0, 0], 4))

bank.alpha.grad = None
cfg = SparsityConfig(lambda_s=1.0, tau=[0.25, 0.25])
print("hinge sparsity loss with tau=0.25:", round(sparsity_loss(bank, cfg).item(), 4))
print("l1 sparsity loss:", round(sparsity_loss(bank, SparsityConfig(1.0, None, "l1")).item(), 4))
print("gate statistics:", gate_statistics(bank, mixer, ["left", "right"]).to_dict()["selection_ratio"])
