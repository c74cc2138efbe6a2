import numpy as np

from blockprune.hwsim import SimConfig, dense_baseline, report_block, simulate_spmm
from blockprune.model import BlockConfig

# %%
# Reference shape: a 4096 x 4096 layer with one activation column costs 4096
# cycles on 4096 processing elements.

print(dense_baseline(4096, 4096))

# %%
# Unstructured 50% sparsity on the two-engine model. Whole empty columns cost
# nothing, scattered zeros only help the zero-skipping engine.

rng = np.random.default_rng(0)
m = rng.random((1024, 1024)) >= 0.5
cols = np.ones((1024, 1024), dtype=bool)
cols[:, ::2] = False
dense = dense_baseline(1024, 1024)
print("random 50%:", dense / simulate_spmm(m), " column 50%:", dense / simulate_spmm(cols))

# %%
# Speedup as a function of sparsity, against the ideal 1 / (1 - s).

for s in (0.3, 0.5, 0.7, 0.9):
    mk = rng.random((512, 512)) >= s
    sp = dense_baseline(512, 512) / simulate_spmm(mk)
    print(f"s={s:.1f}  speedup {sp:.2f}  ideal {1 / (1 - s):.2f}")

# %%
# A whole block, laid out as a per-projection table.

shapes = BlockConfig(d_model=512, n_heads=4, d_ff=1376).layer_shapes()
masks = {n: rng.random(s) >= 0.5 for n, s in shapes.items()}
print(report_block(masks, cfg=SimConfig()).to_text())
