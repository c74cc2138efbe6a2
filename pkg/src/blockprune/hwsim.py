"""Compute-bound cycle model for sparse-weight x dense-activation matmul.

The weight is cut into ``tile_rows x tile_cols`` tiles (output-stationary:
partial sums stay put, and hand-off between engines is free). Inside a tile two
engines run concurrently:

* the Denser Engine streams whole columns and does not skip zeros, so a column
  costs ``rows * tokens`` MACs there;
* the Sparser Engine skips zeros, so a column costs ``nnz * tokens`` MACs.

Columns are dispatched in descending density: the densest go to the Denser
Engine until the two engines' finishing times meet (a column may be split at
the crossing). That balanced split minimises the tile makespan over every
possible assignment, which makes the model monotone in the mask and bounded by
the ideal ``1 / (1 - sparsity)`` speedup. ``density_threshold`` only labels
columns for reporting.

Cycle counts are kept as exact rationals and rounded up once per layer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ReportError
from .model import PRUNABLE


@dataclass(frozen=True)
class SimConfig:
    pe_denser: int = 2048
    pe_sparser: int = 2048
    macs_per_pe_cycle: int = 1
    density_threshold: float | None = None  # None: the layer's own density
    tile_rows: int = 64
    tile_cols: int = 64
    tokens: int = 1

    def __post_init__(self):
        for name in ("pe_denser", "pe_sparser", "macs_per_pe_cycle", "tile_rows", "tile_cols", "tokens"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        tau = self.density_threshold
        if tau is not None and not 0.0 < tau < 1.0:
            raise ConfigError("density_threshold must lie in (0, 1)")

    @property
    def total_pes(self) -> int:
        return self.pe_denser + self.pe_sparser

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def dense_baseline(out: int, inn: int, tokens: int | None = None, cfg: SimConfig = SimConfig()) -> int:
    t = cfg.tokens if tokens is None else tokens
    if min(out, inn, t) < 1:
        raise ConfigError("dimensions must be positive")
    return -(-out * inn * t // (cfg.total_pes * cfg.macs_per_pe_cycle))


def _band_time(col_nnz: np.ndarray, rows: int, cfg: SimConfig) -> Fraction:
    """Sum of balanced makespans (in MAC-slots, before token/mac scaling) over tiles.

    ``col_nnz`` is [n_tiles, tile_cols] with zero-padded columns.
    """
    pd, ps = cfg.pe_denser, cfg.pe_sparser
    c = -np.sort(-col_nnz, axis=1).astype(np.int64)
    n = c.shape[1]
    # suffix[j] = nnz in columns j.. (sorted); denser engine takes columns [0, x).
    suffix = np.zeros((c.shape[0], n + 1), dtype=np.int64)
    suffix[:, :n] = np.cumsum(c[:, ::-1], axis=1)[:, ::-1]
    j = np.arange(n + 1)
    # f(j) = j*rows/pd is increasing, g(j) = suffix[j]/ps is non-increasing.
    f_ge_g = j[None, :] * rows * ps >= suffix * pd
    first = np.argmax(f_ge_g, axis=1)  # always exists: suffix[n] = 0
    total = Fraction(0)
    at_zero = first == 0  # only when the tile is empty
    jj = np.where(at_zero, 0, first - 1)
    cj = c[np.arange(c.shape[0]), np.minimum(jj, n - 1)]
    hj = suffix[np.arange(c.shape[0]), jj]
    # crossing inside column jj: time = rows * (jj*c + H) / (rows*ps + c*pd)
    num = rows * (jj * cj + hj)
    den = rows * ps + cj * pd
    num = np.where(at_zero, 0, num)
    den = np.where(at_zero, 1, den)
    for d in np.unique(den):
        total += Fraction(int(num[den == d].sum()), int(d))
    return total


def spmm_cycles_exact(mask: np.ndarray, cfg: SimConfig = SimConfig(), tokens: int | None = None) -> Fraction:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ConfigError("mask must be 2-d")
    t = cfg.tokens if tokens is None else tokens
    out, inn = m.shape
    tr, tc = cfg.tile_rows, cfg.tile_cols
    pad_c = (-inn) % tc
    total = Fraction(0)
    for r0 in range(0, out, tr):
        band = m[r0:r0 + tr]
        rows = band.shape[0]
        nnz = band.sum(axis=0)
        if pad_c:
            nnz = np.concatenate([nnz, np.zeros(pad_c, dtype=nnz.dtype)])
        total += _band_time(nnz.reshape(-1, tc), rows, cfg)
    return total * t / cfg.macs_per_pe_cycle


def simulate_spmm(mask, tokens: int | None = None, cfg: SimConfig = SimConfig()) -> int:
    """Cycles to multiply a masked weight by ``tokens`` dense activation columns."""
    dense = mask.to_dense() if hasattr(mask, "to_dense") else mask
    return math.ceil(spmm_cycles_exact(dense, cfg, tokens))


def denser_column_fraction(mask: np.ndarray, cfg: SimConfig = SimConfig()) -> float:
    """Share of tile columns at or above the density threshold (reporting only)."""
    m = np.asarray(mask, dtype=bool)
    tau = cfg.density_threshold if cfg.density_threshold is not None else m.mean()
    tr = cfg.tile_rows
    dens = []
    for r0 in range(0, m.shape[0], tr):
        band = m[r0:r0 + tr]
        dens.append(band.mean(axis=0))
    d = np.concatenate(dens)
    return float((d >= tau).mean())


@dataclass
class LayerSim:
    layer: str
    shape: tuple[int, int]
    dense_cycles: int
    sparse_cycles: int
    sparsity: float

    @property
    def speedup(self) -> float:
        if self.sparse_cycles == 0:
            return math.inf
        return self.dense_cycles / self.sparse_cycles


@dataclass
class SimReport:
    blocks: list[dict[str, LayerSim]] = field(default_factory=list)
    config: SimConfig = field(default_factory=SimConfig)

    def average(self, layer: str, attr: str) -> float:
        vals = [getattr(b[layer], attr) for b in self.blocks]
        return float(np.mean(vals))

    def rows(self) -> dict[str, list[float]]:
        return {
            "Dense Runtime": [self.average(n, "dense_cycles") for n in PRUNABLE],
            "Average Runtime": [self.average(n, "sparse_cycles") for n in PRUNABLE],
            "Sparsity": [self.average(n, "sparsity") for n in PRUNABLE],
            "Speedup": [self.average(n, "speedup") for n in PRUNABLE],
        }

    def to_text(self) -> str:
        """Aligned table with one column per projection."""
        rows = self.rows()
        head = ["Layer name"] + list(PRUNABLE)
        lines = []
        fmt = {
            "Dense Runtime": lambda v: f"{v:.0f}",
            "Average Runtime": lambda v: f"{v:.2f}",
            "Sparsity": lambda v: f"{100 * v:.2f}%",
            "Speedup": lambda v: f"{v:.2f}x",
        }
        table = [head] + [[k] + [fmt[k](v) for v in vals] for k, vals in rows.items()]
        widths = [max(len(r[i]) for r in table) for i in range(len(head))]
        for r in table:
            lines.append(" | ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"

    def to_records(self) -> list[dict]:
        recs = []
        for bi, blk in enumerate(self.blocks):
            for name in PRUNABLE:
                ls = blk[name]
                recs.append({
                    "record": "layer", "block": bi, "layer": name, "shape": list(ls.shape),
                    "dense_cycles": ls.dense_cycles, "sparse_cycles": ls.sparse_cycles,
                    "sparsity": ls.sparsity, "speedup": ls.speedup,
                })
        for name, vals in zip(PRUNABLE, zip(*self.rows().values())):
            recs.append({"record": "average", "layer": name, "dense_cycles": vals[0],
                         "sparse_cycles": vals[1], "sparsity": vals[2], "speedup": vals[3]})
        recs.append({"record": "sim_config", **asdict(self.config)})
        return recs


def simulate_layer(name: str, mask, tokens: int | None = None, cfg: SimConfig = SimConfig(),
                   sparsity: float | None = None) -> LayerSim:
    dense = np.asarray(mask.to_dense() if hasattr(mask, "to_dense") else mask, dtype=bool)
    out, inn = dense.shape
    s = 1.0 - dense.mean() if sparsity is None else sparsity
    return LayerSim(name, (out, inn), dense_baseline(out, inn, tokens, cfg),
                    simulate_spmm(dense, tokens, cfg), float(s))


def report_block(block_masks, tokens: int | None = None, cfg: SimConfig = SimConfig(),
                 sparsities=None) -> SimReport:
    """Table-style report for one block's masks or a list of blocks' masks.

    ``sparsities`` optionally overrides the echoed sparsity row per layer.
    """
    if isinstance(block_masks, dict):
        block_masks = [block_masks]
    report = SimReport(config=cfg)
    for masks in block_masks:
        missing = [n for n in PRUNABLE if n not in masks]
        if missing:
            raise ReportError(f"missing layer(s) in block masks: {missing}")
        report.blocks.append({
            n: simulate_layer(n, masks[n], tokens, cfg, None if sparsities is None else sparsities[n])
            for n in PRUNABLE
        })
    return report
