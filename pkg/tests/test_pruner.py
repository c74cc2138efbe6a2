import math

import numpy as np
import pytest

from blockprune import tensor as T
from blockprune.errors import ConfigError, TrainingDivergence
from blockprune.importance import block_activation_norms, rank_block, sort_rows
from blockprune.io import markov_tokens, synth_model
from blockprune.model import PRUNABLE, BlockConfig, block_forward
from blockprune.pruner import (
    Adam, GroupTrainer, PruneConfig, block_loss, block_recon_error, calibration_stream, groups_for, prune_block,
    prune_model, uniform_baseline, uniform_counts, uniform_masks,
)
from blockprune.quant import QuantParams
from blockprune.sparsity import masks_from_counts
from blockprune.tensor import DTensor

from _oracles import brute_topk_mask

SMALL = BlockConfig(d_model=16, n_heads=2, d_ff=24, seq_len=16)


@pytest.fixture(scope="module")
def small():
    m = synth_model(SMALL, n_blocks=2, vocab=32, seed=0)
    toks = markov_tokens(8, 16, 32, 0, 1)
    return m, toks, calibration_stream(m, toks)


def quick(**kw):
    base = dict(max_steps=40, converge_min_steps=40)
    base.update(kw)
    return PruneConfig(**base)


# ------------------------------------------------------------------ loss

def test_block_loss_examples():
    out = np.random.default_rng(0).standard_normal((2, 3, 4))
    half = [np.array([[1.0, 0.0], [0.0, 1.0]])]
    assert block_loss(out, DTensor(out), half, 0.5, 1.0).item() == 0.0
    assert block_loss(out, DTensor(out), half, 0.4, 1.0).item() == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(ConfigError):
        block_loss(out, DTensor(out), half, 0.5, 1.0, total_params=3)


def test_block_loss_matches_reference_script():
    rng = np.random.default_rng(1)
    for _ in range(5):
        dense = rng.standard_normal((3, 5, 6))
        pruned = dense + 0.1 * rng.standard_normal(dense.shape)
        masks = [(rng.random((4, 6)) > 0.4).astype(float), (rng.random((6, 3)) > 0.6).astype(float)]
        lam, tgt = rng.uniform(0, 5), rng.uniform(0.1, 0.9)
        zeros = sum(float((m == 0).sum()) for m in masks)
        total = sum(m.size for m in masks)
        ref = ((dense - pruned) ** 2).sum() / (dense ** 2).sum() + lam * (zeros / total - tgt) ** 2
        assert abs(block_loss(dense, DTensor(pruned), masks, tgt, lam).item() - ref) <= 1e-12


def test_recon_error_zero_for_identity_masks(small):
    m, _, x = small
    ones = {n: np.ones(getattr(m.blocks[0], n).shape) for n in PRUNABLE}
    assert block_recon_error(m.blocks[0], x, ones) == 0.0


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("kw", [
    {"target_sparsity": 0.0}, {"target_sparsity": 1.5}, {"lam": -1.0}, {"epochs": 0}, {"max_steps": 0},
    {"granularity": "per_block"}, {"scope": "model"}, {"metric": "taylor"}, {"quant_bits": 1},
    {"sparsity_step": 0.3}, {"prune": False},
])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        PruneConfig(**kw).validate()


def test_groups():
    assert groups_for("two_blocks", 4) == [[0, 1], [2, 3]]
    assert groups_for("two_blocks", 3) == [[0, 1], [2]]
    assert groups_for("block", 3) == [[0], [1], [2]]
    with pytest.raises(ConfigError):
        groups_for("row", 2)


def test_adam_schedule_and_descent():
    p = DTensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, total_steps=200)
    assert opt.current_lr() == 0.1
    for _ in range(100):
        opt.zero_grad()
        with T.fresh_tape():
            T.backward(T.sum_all(T.square(p)))
        opt.step()
    assert opt.current_lr() == pytest.approx(0.05)
    assert np.all(np.abs(p.data) < 1.0)
    opt.t = 200
    assert opt.current_lr() == pytest.approx(0.0, abs=1e-15)


# -------------------------------------------------------------- baseline

def test_uniform_counts_exact_products():
    assert uniform_counts(10, 0.5) == 5
    assert uniform_counts(100, 0.07) == 7
    assert uniform_counts(172, 0.5) == 86


def test_uniform_baseline_ten_element_row():
    delta = np.array([[0.9, 0.1, 0.5, 0.3, 0.8, 0.2, 0.7, 0.05, 0.6, 0.4]])
    perm = sort_rows(delta)
    mask = masks_from_counts(perm, uniform_counts(10, 0.5))
    assert np.array_equal(mask[0], brute_topk_mask(delta[0], 5))
    assert (~mask).sum() == 5


def test_magnitude_ties_prune_prefix():
    perm = sort_rows(np.ones((1, 6)))
    mask = masks_from_counts(perm, uniform_counts(6, 0.5))
    assert mask[0].tolist() == [False, False, False, True, True, True]


def test_uniform_baseline_model(small):
    m, toks, _ = small
    masks = uniform_baseline(m, toks, 0.5)
    assert len(masks) == 2
    for ms in masks:
        for n, pm in ms.items():
            assert np.all(pm.row_zero_counts() == uniform_counts(pm.shape[1], 0.5))
    with pytest.raises(ConfigError):
        uniform_baseline(m, toks, 1.0)


# -------------------------------------------------------------- training

def test_layer_scope_one_hot_is_topk(small):
    m, _, x = small
    blk = m.blocks[0]
    rk = rank_block(blk, block_activation_norms(blk, x))
    tr = GroupTrainer([blk], [rk], x, quick(scope="layer", sparsity_step=0.25), [0])
    for p in tr.params[0].values():
        p.logits.data[:] = -50.0
        p.logits.data[:, 1] = 50.0  # all mass on rate 0.5
    got = tr.final_masks()[0]
    want = uniform_masks(blk, rk, 0.5)
    for n in PRUNABLE:
        assert np.array_equal(got[n], want[n])


@pytest.mark.parametrize("scope", ["layer", "attn_mlp", "block"])
def test_scopes_train_and_report(small, scope):
    m, _, x = small
    masks, rep, _ = prune_block(m.blocks[0], x, quick(scope=scope))
    assert set(masks) == set(PRUNABLE)
    assert rep.recon_loss >= 0 and rep.steps == 40
    for n, pm in masks.items():
        assert rep.achieved[n] == pm.achieved_sparsity


def test_large_lambda_hits_achievable_rate(small):
    m, _, x = small
    cfg = PruneConfig(target_sparsity=0.5, lam=1e3, sparsity_step=0.25, max_steps=300, converge_min_steps=300)
    _, rep, _ = prune_block(m.blocks[0], x, cfg)
    assert rep.block_sparsity == 0.5


def test_zero_lambda_drifts_below_target(small):
    m, _, x = small
    cfg = PruneConfig(target_sparsity=0.5, lam=0.0, max_steps=300, converge_min_steps=300, init_width=0.05,
                      learning_rate=5e-2)
    _, rep, _ = prune_block(m.blocks[0], x, cfg)
    assert rep.block_sparsity < 0.45


def test_divergence_raises_with_snapshot(small, monkeypatch):
    m, _, x = small

    def bad_loss(self, idx, masks):
        nan = DTensor(np.array(np.nan))
        return nan, nan, nan

    monkeypatch.setattr(GroupTrainer, "loss", bad_loss)
    with pytest.raises(TrainingDivergence) as ei:
        prune_block(m.blocks[0], x, quick())
    assert set(ei.value.state["logits"][0]) == set(PRUNABLE)


def test_converges_early_when_stable(small):
    m, _, x = small
    cfg = PruneConfig(target_sparsity=0.25, lam=1e3, sparsity_step=0.25, max_steps=300, converge_min_steps=20)
    _, rep, _ = prune_block(m.blocks[0], x, cfg)
    assert rep.converged and rep.steps < 300


# --------------------------------------------------------------- drivers

def test_single_block_model_equals_prune_block():
    m = synth_model(SMALL, n_blocks=1, vocab=32, seed=3)
    toks = markov_tokens(8, 16, 32, 1, 2)
    cfg = quick()
    res = prune_model(m, toks, cfg)
    masks, rep, _ = prune_block(m.blocks[0], calibration_stream(m, toks), cfg)
    for n in PRUNABLE:
        assert np.array_equal(res.masks[0][n].to_dense(), masks[n].to_dense())
    assert res.reports[0].record() == rep.record()


def test_blocks_are_pruned_on_the_pruned_stream(small):
    m, toks, x = small
    cfg = quick()
    res = prune_model(m, toks, cfg)
    m0, _, _ = prune_block(m.blocks[0], x, cfg)
    with T.no_grad():
        x1 = block_forward(m.blocks[0], x, m0).data
    m1, _, _ = prune_block(m.blocks[1], x1, cfg, block_index=1)
    for n in PRUNABLE:
        assert np.array_equal(res.masks[1][n].to_dense(), m1[n].to_dense())
    # pruned checkpoint stores W * M
    w = res.checkpoint.blocks[1].up_proj.data
    assert np.all(w[~m1["up_proj"].to_dense()] == 0.0)


def test_prune_model_is_deterministic(small):
    m, toks, _ = small
    a = prune_model(m, toks, quick(scope="two_blocks"))
    b = prune_model(m, toks, quick(scope="two_blocks"))
    assert [r.record() for r in a.reports] == [r.record() for r in b.reports]
    for ma, mb in zip(a.masks, b.masks):
        assert all(np.array_equal(ma[n].bits, mb[n].bits) for n in PRUNABLE)
    assert 0.4 < a.global_sparsity() < 0.6


def test_two_stream_option_runs(small):
    m, toks, _ = small
    res = prune_model(m, toks, quick(two_stream=True))
    assert len(res.reports) == 2


# ------------------------------------------------------------------ joint

def test_quantize_only_learns_clips(small):
    m, _, x = small
    cfg = PruneConfig(prune=False, quant_bits=3, max_steps=200)
    masks, rep, qs = prune_block(m.blocks[0], x, cfg)
    assert rep.block_sparsity == 0.0
    plain = {n: QuantParams.init(getattr(m.blocks[0], n).shape[0], 3, False) for n in PRUNABLE}
    assert rep.recon_loss < block_recon_error(m.blocks[0], x, None, plain)
    for q in qs.values():
        assert np.all((q.gamma0.data >= 0) & (q.gamma0.data <= 1))


def test_joint_with_frozen_clips_prunes_quantized_weights(small):
    m, _, x = small
    cfg = quick(quant_bits=4, learn_clip=False)
    masks, rep, qs = prune_block(m.blocks[0], x, cfg)
    assert all(np.all(q.gamma0.data == 1.0) and np.all(q.gamma1.data == 1.0) for q in qs.values())
    dense_masks = {n: pm.to_dense() for n, pm in masks.items()}
    assert rep.recon_loss == pytest.approx(block_recon_error(m.blocks[0], x, dense_masks, qs), rel=1e-12)
    assert math.isfinite(rep.recon_loss)
