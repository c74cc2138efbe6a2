"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerical code paths; everything is
written with plain loops, numpy, or scipy so that agreement is meaningful.
"""
import math

import numpy as np
from scipy.optimize import linprog


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# ------------------------------------------------------------------ block

def _silu(v):
    return v / (1.0 + math.exp(-v))


def _rms(row, gain, eps=1e-6):
    ms = sum(v * v for v in row) / len(row)
    r = 1.0 / math.sqrt(ms + eps)
    return [v * r * g for v, g in zip(row, gain)]


def _matvec(W, v):
    return [sum(W[o][i] * v[i] for i in range(len(v))) for o in range(len(W))]


def reference_block(weights: dict, x, n_heads: int):
    """Scalar-by-scalar pre-norm block: x + attn(norm(x)); h + mlp(norm(h))."""
    x = [list(map(float, row)) for row in np.asarray(x)]
    W = {k: np.asarray(v).tolist() for k, v in weights.items()}
    S, d = len(x), len(x[0])
    dh = d // n_heads
    z = [_rms(row, W["attn_norm_gain"]) for row in x]
    q = [_matvec(W["q_proj"], r) for r in z]
    k = [_matvec(W["k_proj"], r) for r in z]
    v = [_matvec(W["v_proj"], r) for r in z]
    ctx = [[0.0] * d for _ in range(S)]
    for hd in range(n_heads):
        sl = range(hd * dh, (hd + 1) * dh)
        for t in range(S):
            scores = [sum(q[t][c] * k[s][c] for c in sl) / math.sqrt(dh) for s in range(t + 1)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            tot = sum(e)
            for c in sl:
                ctx[t][c] = sum(e[s] / tot * v[s][c] for s in range(t + 1))
    a = [_matvec(W["o_proj"], r) for r in ctx]
    h = [[xi + ai for xi, ai in zip(xr, ar)] for xr, ar in zip(x, a)]
    z2 = [_rms(row, W["mlp_norm_gain"]) for row in h]
    out = []
    for hr, zr in zip(h, z2):
        g = _matvec(W["gate_proj"], zr)
        u = _matvec(W["up_proj"], zr)
        gated = [_silu(gi) * ui for gi, ui in zip(g, u)]
        m = _matvec(W["down_proj"], gated)
        out.append([hi + mi for hi, mi in zip(hr, m)])
    return np.array(out)


def reference_log_softmax_ppl(logits, tokens):
    """Perplexity with an explicit per-position log-softmax loop."""
    logits = np.asarray(logits, dtype=np.float64)
    tokens = np.asarray(tokens)
    if logits.ndim == 2:
        logits, tokens = logits[None], tokens[None]
    nll = []
    for b in range(tokens.shape[0]):
        for t in range(tokens.shape[1] - 1):
            row = logits[b, t]
            m = row.max()
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            nll.append(lse - row[tokens[b, t + 1]])
    return math.exp(sum(nll) / len(nll))


# ---------------------------------------------------------------- masks

def brute_topk_mask(delta_row, k):
    """Remove the k smallest entries (ties: lower column index first)."""
    order = sorted(range(len(delta_row)), key=lambda i: (delta_row[i], i))
    m = np.ones(len(delta_row), dtype=bool)
    for i in order[:k]:
        m[i] = False
    return m


# ------------------------------------------------------------------ hwsim

def lp_tile_time(col_nnz, rows, pd, ps):
    """Min makespan over fractional column splits between the two engines (LP).

    Variables: x_j in [0, 1] (share of column j on the denser engine) and T.
    """
    c = np.asarray(col_nnz, dtype=np.float64)
    n = len(c)
    if c.sum() == 0:
        return 0.0
    obj = np.zeros(n + 1)
    obj[-1] = 1.0
    # denser: sum x_j * rows / pd <= T ; sparser: sum (1 - x_j) c_j / ps <= T
    a1 = np.concatenate([np.full(n, rows / pd), [-1.0]])
    a2 = np.concatenate([-c / ps, [-1.0]])
    res = linprog(obj, A_ub=np.vstack([a1, a2]), b_ub=[0.0, -c.sum() / ps],
                  bounds=[(0, 1)] * n + [(0, None)], method="highs")
    assert res.status == 0
    return float(res.fun)
