import numpy as np

from blockprune.io import markov_tokens, synth_model
from blockprune.model import PRUNABLE
from blockprune.pruner import PruneConfig, block_recon_error, calibration_stream, prune_block
from blockprune.quant import QuantParams, channel_params, quantize, round_trip_error

# %%
# Min-Max fake quantization of one row at 4 bits.

w = np.array([[-1.0, 0.0, 1.0]])
h, z, *_ = channel_params(w, np.ones(1), np.ones(1), 4)
print("step", h[0], "zero point", z[0])
print("dequantized", quantize(w, QuantParams.init(1, 4, learnable=False)).data)

# %%
# Clipping shrinks the range. Outliers get worse, the bulk gets better.

rng = np.random.default_rng(0)
row = rng.standard_normal((1, 256))
row[0, 0] = 8.0
for g in (1.0, 0.7, 0.5):
    q = QuantParams.init(1, 3, learnable=False)
    q.gamma0.data[:] = g
    q.gamma1.data[:] = g
    err = round_trip_error(row, q)[0]
    print(f"gamma {g}: mean abs err {err[1:].mean():.4f}, outlier err {err[0]:.3f}")

# %%
# Learning clips on a toy block (no pruning), then jointly with 50% sparsity.

model = synth_model(seed=0)
x = calibration_stream(model, markov_tokens(16, 128, 256, 0, 0))
blk = model.blocks[0]
plain = {n: QuantParams.init(getattr(blk, n).shape[0], 4, learnable=False) for n in PRUNABLE}
print("plain 4-bit recon", round(block_recon_error(blk, x, None, plain), 5))

_, rep, qs = prune_block(blk, x, PruneConfig(prune=False, quant_bits=4, max_steps=100))
print("learned clips recon", round(rep.recon_loss, 5))

_, rep, _ = prune_block(blk, x, PruneConfig(quant_bits=4, lam=100.0, max_steps=100))
print(f"joint 4-bit + {rep.block_sparsity:.3f} sparsity recon", round(rep.recon_loss, 5))
