import numpy as np
import pytest

from blockprune import tensor as T
from blockprune.errors import DataError, DimensionError, MaskError
from blockprune.io import synth_model
from blockprune.model import (
    GAINS, PRUNABLE, BlockConfig, BlockWeights, ModelCheckpoint, block_forward, embed_tokens, linear,
    model_forward, perplexity, perplexity_from_logits,
)
from blockprune.tensor import DTensor

from _oracles import fd_grad, reference_block, reference_log_softmax_ppl, rel_err


def random_block(cfg, seed=0):
    rng = np.random.default_rng(seed)
    shapes = cfg.layer_shapes()
    mats = [rng.standard_normal(shapes[n]) / np.sqrt(shapes[n][1]) for n in PRUNABLE]
    gains = [1.0 + 0.1 * rng.standard_normal(cfg.d_model) for _ in GAINS]
    return BlockWeights(cfg, *mats, *gains)


def test_config_contracts():
    with pytest.raises(DimensionError):
        BlockConfig(d_model=10, n_heads=3)
    with pytest.raises(DimensionError):
        BlockConfig(d_ff=0)
    cfg = BlockConfig()
    assert set(cfg.layer_shapes()) == set(PRUNABLE)
    assert len(PRUNABLE) == 7


def test_zero_blocks_rejected():
    m = synth_model(n_blocks=1)
    with pytest.raises(DataError):
        ModelCheckpoint(m.config, [], m.embed, m.head, m.final_norm_gain)


def test_tiny_block_matches_scalar_reference():
    cfg = BlockConfig(d_model=2, n_heads=1, d_ff=3, seq_len=2)
    blk = random_block(cfg, seed=3)
    x = np.array([[0.3, -1.2], [0.8, 0.5]])
    ref = reference_block({n: getattr(blk, n).data for n in PRUNABLE + GAINS}, x, n_heads=1)
    with T.no_grad():
        out = block_forward(blk, x).data
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_multi_head_block_matches_scalar_reference():
    cfg = BlockConfig(d_model=8, n_heads=2, d_ff=12, seq_len=5)
    blk = random_block(cfg, seed=4)
    x = np.random.default_rng(5).standard_normal((5, 8))
    ref = reference_block({n: getattr(blk, n).data for n in PRUNABLE + GAINS}, x, n_heads=2)
    with T.no_grad():
        assert np.allclose(block_forward(blk, x).data, ref, atol=1e-12)


def test_mask_identities():
    cfg = BlockConfig(d_model=8, n_heads=2, d_ff=12)
    blk = random_block(cfg)
    x = np.random.default_rng(1).standard_normal((2, 6, 8))
    ones = {n: np.ones(getattr(blk, n).shape) for n in PRUNABLE}
    zeros = {n: np.zeros(getattr(blk, n).shape) for n in PRUNABLE}
    with T.no_grad():
        dense = block_forward(blk, x).data
        assert np.array_equal(block_forward(blk, x, ones).data, dense)
        # both branches vanish: output is the residual input
        assert np.array_equal(block_forward(blk, x, zeros).data, x)


def test_mask_shape_error():
    cfg = BlockConfig(d_model=8, n_heads=2, d_ff=12)
    blk = random_block(cfg)
    masks = {n: np.ones(getattr(blk, n).shape) for n in PRUNABLE}
    masks["up_proj"] = np.ones((3, 3))
    with pytest.raises(MaskError, match="up_proj"):
        block_forward(blk, np.zeros((2, 8)), masks)
    with pytest.raises(MaskError):
        block_forward(blk, np.zeros((2, 8)), {"q_proj": np.ones((8, 8))})
    with pytest.raises(DimensionError):
        block_forward(blk, np.zeros((2, 7)))


def test_causality():
    cfg = BlockConfig(d_model=8, n_heads=2, d_ff=12)
    blk = random_block(cfg)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 8))
    y = x.copy()
    y[4:] = rng.standard_normal((2, 8))
    with T.no_grad():
        a, b = block_forward(blk, x).data, block_forward(blk, y).data
    assert np.array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_block_loss_gradient_wrt_weights_under_fixed_mask():
    cfg = BlockConfig(d_model=4, n_heads=2, d_ff=6)
    blk = random_block(cfg, seed=7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 4))
    masks = {n: (rng.random(getattr(blk, n).shape) > 0.4).astype(float) for n in PRUNABLE}
    with T.no_grad():
        dense = block_forward(blk, x).data

    for name in ("q_proj", "down_proj", "gate_proj"):
        def loss_at(w, name=name):
            b2 = blk.copy()
            getattr(b2, name).data = w
            with T.no_grad():
                out = block_forward(b2, x, masks).data
            return float(((out - dense) ** 2).sum())

        w0 = getattr(blk, name).data.copy()
        b2 = blk.copy()
        wt = DTensor(w0.copy(), requires_grad=True)
        setattr(b2, name, wt)
        with T.fresh_tape():
            out = block_forward(b2, x, masks)
            loss = T.frobenius_sq(T.sub(out, DTensor(dense)))
            T.backward(loss)
        assert rel_err(wt.grad, fd_grad(loss_at, w0)) <= 1e-6


def test_one_block_model_matches_manual_composition():
    m = synth_model(n_blocks=1, seed=3)
    toks = np.array([[1, 5, 9, 200]])
    x = embed_tokens(m, toks)
    with T.no_grad():
        h = block_forward(m.blocks[0], x)
        logits = linear(T.rms_norm(h, m.final_norm_gain), m.head).data
    assert np.array_equal(model_forward(m, toks), logits)


def test_token_range_checked():
    m = synth_model(n_blocks=1)
    with pytest.raises(DataError):
        model_forward(m, np.array([[0, 256]]))
    with pytest.raises(DataError):
        perplexity(m, np.array([[3]]))


def test_perplexity_reference_and_special_cases():
    m = synth_model(n_blocks=2, seed=1)
    toks = np.random.default_rng(0).integers(0, 256, (2, 12))
    ref = reference_log_softmax_ppl(model_forward(m, toks), toks)
    assert abs(perplexity(m, toks) - ref) <= 1e-9
    V = 17
    assert abs(perplexity_from_logits(np.zeros((5, V)), np.arange(5)) - V) < 1e-9
    perfect = np.full((4, 3), -1e9)
    tgt = np.array([0, 2, 1, 0])
    for t in range(3):
        perfect[t, tgt[t + 1]] = 0.0
    assert perplexity_from_logits(perfect, tgt) == pytest.approx(1.0)


def test_masks_on_disk_do_not_change_dense_eval(tmp_path):
    m = synth_model(n_blocks=1)
    toks = np.arange(16)[None]
    before = perplexity(m, toks)
    (tmp_path / "masks").mkdir()
    (tmp_path / "masks" / "junk.mask").write_bytes(b"x")
    assert perplexity(m, toks) == before
