import numpy as np

from blockprune.importance import block_activation_norms, rank_block
from blockprune.io import markov_tokens, synth_model
from blockprune.pruner import PruneConfig, block_recon_error, calibration_stream, prune_block, uniform_masks
from blockprune.sparsity import CandidateRates, generate_mask, prune_probs

# %%
# Candidate rates and a soft allocation over them.
#
# With D = 4 the candidate rates are 1/4, 2/4, 3/4 and 1. The last coefficient
# is pinned to zero so the most important quarter of a row always survives.

rates = CandidateRates(4)
beta = np.array([0.2, 0.5, 0.3, 0.0])
print("rates", rates.rates, " expected sparsity", beta @ rates.rates)
print("per-rank prune probability", prune_probs(beta, rates, 8))

# %%
# A rank is dropped when its prune probability reaches the expected sparsity,
# so the pruned set is always a prefix of the importance ranking.

ranking = np.array([7, 6, 5, 4, 3, 2, 1, 0])
print(generate_mask(beta, rates, ranking, 8).astype(int))

# %%
# One toy block: learned allocation against a uniform 50% cut.

model = synth_model(seed=0)
x = calibration_stream(model, markov_tokens(16, 128, 256, 0, 0))
blk = model.blocks[0]

cfg = PruneConfig(target_sparsity=0.5, lam=100.0, max_steps=150)
masks, report, _ = prune_block(blk, x, cfg)
uni = uniform_masks(blk, rank_block(blk, block_activation_norms(blk, x)), 0.5)

print(f"learned: sparsity {report.block_sparsity:.4f}  recon {report.recon_loss:.5f}")
print(f"uniform: sparsity 0.5000  recon {block_recon_error(blk, x, uni):.5f}")

# %%
# Per-projection sparsity the allocation settled on. Rows inside a projection differ more.

for name, s in report.achieved.items():
    print(f"{name:>9}  {100 * s:6.2f}%")
