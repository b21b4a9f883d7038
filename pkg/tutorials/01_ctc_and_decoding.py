"""CTC loss, its gradient, and greedy versus beam decoding on a toy posterior."""

import numpy as np

from dcacnet.ctc import ctc_grad_logits, ctc_loss, decode_beam, decode_greedy, spike_diagnostics

rng = np.random.default_rng(0)
logits = rng.normal(scale=2.0, size=(8, 4))
log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
target = [1, 2, 2]

loss, lattice = ctc_loss(log_probs, target)
print(f"CTC loss for {target}: {loss:.4f}")

# gradient w.r.t. logits is softmax minus state occupancy; rows sum to zero
g = ctc_grad_logits(lattice)
print("gradient row sums:", np.round(g.sum(axis=1), 12) + 0.0)

print("greedy:", decode_greedy(log_probs))
print("beam 10:", decode_beam(log_probs, 10))

# how concentrated is the per-frame gradient?
norms = np.linalg.norm(g, axis=1)
print("spike diagnostics:", {k: round(v, 4) for k, v in spike_diagnostics(norms).items()})
