import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockprune.errors import ConfigError, ReportError
from blockprune.hwsim import (
    SimConfig, _band_time, dense_baseline, denser_column_fraction, report_block, simulate_layer, simulate_spmm,
    spmm_cycles_exact,
)
from blockprune.model import PRUNABLE, BlockConfig

from _oracles import lp_tile_time

# per-projection sparsities of a learned 50% allocation on a 7B block
TABLE_SPARSITY = {"q_proj": 0.5387, "k_proj": 0.5454, "v_proj": 0.4896, "o_proj": 0.4715,
                  "gate_proj": 0.5020, "up_proj": 0.5036, "down_proj": 0.4652}
TABLE_SPEEDUP = {"q_proj": 1.83, "k_proj": 1.84, "v_proj": 1.51, "o_proj": 1.52,
                 "gate_proj": 1.94, "up_proj": 1.98, "down_proj": 1.48}


def test_dense_baseline_reference_shape():
    assert dense_baseline(4096, 4096) == 4096
    assert dense_baseline(4096, 4096, tokens=2) == 8192
    assert dense_baseline(1, 1, tokens=1) == 1
    with pytest.raises(ConfigError):
        dense_baseline(0, 4)


def test_full_mask_matches_dense_and_empty_is_free():
    m = np.ones((256, 320), dtype=bool)
    assert simulate_spmm(m) == dense_baseline(256, 320)
    assert simulate_spmm(np.zeros((64, 64), dtype=bool)) == 0
    assert simulate_spmm(np.ones((4096, 4096), dtype=bool)) == 4096


def test_ragged_tiles_full_mask():
    # partial tiles still split the dense work evenly between the engines
    m = np.ones((100, 70), dtype=bool)
    assert spmm_cycles_exact(m) == Fraction(100 * 70, 4096)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.integers(1, 12), st.sampled_from([(2048, 2048), (1000, 3000), (64, 7)]))
def test_band_time_is_lp_optimum(seed, rows, cols, pes):
    rng = np.random.default_rng(seed)
    nnz = rng.integers(0, rows + 1, (1, cols))
    cfg = SimConfig(pe_denser=pes[0], pe_sparser=pes[1], tile_cols=cols, tile_rows=rows)
    got = float(_band_time(nnz, rows, cfg))
    assert got == pytest.approx(lp_tile_time(nnz[0], rows, *pes), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.95))
def test_speedup_bounds(seed, s):
    rng = np.random.default_rng(seed)
    m = rng.random((128, 128)) >= s
    exact = spmm_cycles_exact(m)
    dense = Fraction(128 * 128, 4096)
    assert exact <= dense
    # no assignment can beat spreading the nonzeros over every PE
    assert exact >= Fraction(int(m.sum()), 4096)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_removing_nonzeros_never_slows_down(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((64, 96)) > 0.3
    finer = m & (rng.random(m.shape) > 0.2)
    assert spmm_cycles_exact(finer) <= spmm_cycles_exact(m)


def test_random_half_mask_reference_shape():
    m = np.random.default_rng(0).random((4096, 4096)) >= 0.5
    ls = simulate_layer("q_proj", m)
    assert 1.0 <= ls.speedup <= min(2.0, 1.0 / ls.sparsity)


def test_structured_mask_beats_unstructured():
    # whole zero columns leave the sparser engine nothing to do for them
    cols = np.ones((64, 64), dtype=bool)
    cols[:, ::2] = False
    assert spmm_cycles_exact(cols) == Fraction(1, 2)
    assert denser_column_fraction(cols) == 0.5


def test_tokens_scale_linearly():
    m = np.random.default_rng(1).random((64, 128)) > 0.5
    assert spmm_cycles_exact(m, tokens=3) == 3 * spmm_cycles_exact(m, tokens=1)


def test_sim_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        SimConfig(pe_denser=0)
    with pytest.raises(ConfigError):
        SimConfig(density_threshold=1.0)
    with pytest.raises(ConfigError, match="unknown"):
        SimConfig.from_dict({"pe_denser": 8, "clock_ghz": 1.0})
    p = tmp_path / "sim.json"
    p.write_text(json.dumps({"pe_denser": 8, "pe_sparser": 24}))
    assert SimConfig.from_file(p).total_pes == 32


def full_block_masks(cfg=BlockConfig(), fill=True):
    return {n: np.full(s, fill, dtype=bool) for n, s in cfg.layer_shapes().items()}


def test_report_all_ones_gives_unit_speedups():
    rep = report_block([full_block_masks(), full_block_masks()])
    assert rep.rows()["Speedup"] == [1.0] * 7
    text = rep.to_text()
    assert text.splitlines()[0].split("|")[0].strip() == "Layer name"
    assert all(n in text for n in PRUNABLE)
    recs = rep.to_records()
    assert sum(r["record"] == "layer" for r in recs) == 14
    assert recs[-1]["record"] == "sim_config"


def test_report_missing_layer():
    masks = full_block_masks()
    del masks["o_proj"]
    with pytest.raises(ReportError, match="o_proj"):
        report_block(masks)


def test_table_fixture_echo_and_bounds():
    rng = np.random.default_rng(0)
    shapes = BlockConfig(d_model=256, n_heads=4, d_ff=512).layer_shapes()
    masks = {n: rng.random(s) >= TABLE_SPARSITY[n] for n, s in shapes.items()}
    rep = report_block(masks, sparsities=TABLE_SPARSITY)
    assert rep.rows()["Sparsity"] == [TABLE_SPARSITY[n] for n in PRUNABLE]
    assert "53.87%" in rep.to_text()
    for n in PRUNABLE:
        bound = 1 / (1 - TABLE_SPARSITY[n])
        assert TABLE_SPEEDUP[n] <= bound
        assert 1.0 <= rep.blocks[0][n].speedup <= bound + 1e-9
    assert round(1 / (1 - TABLE_SPARSITY["q_proj"]), 2) == 2.17
