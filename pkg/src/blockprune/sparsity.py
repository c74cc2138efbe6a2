"""Learnable sparsity allocation over a grid of candidate pruning rates.

Each allocation unit (one output row, or a whole layer) owns a probability
vector ``beta`` over candidate rates ``p_d = d / D`` (d = 1..D). The last entry
``beta_D`` is pinned to zero, so the most important bin is never pruned.

For a row of width ``n`` sorted by ascending importance, rank ``r`` falls in
bin ``k`` when ``floor(n * p_k) <= r < floor(n * p_{k+1})`` (with p_0 = 0). Its
pruning probability is the tail mass ``sum_{d > k} beta_d``; the rank is
pruned when that probability reaches ``alpha = sum_d beta_d p_d``.

The mask is a hard step, so its backward pass is a straight-through
estimator: dM/dP = -1 for every element, alpha held constant in the
comparison, and dP_r/dbeta_d = 1 when d > k(r).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, MaskError, UsageError
from .tensor import DTensor

GRANULARITIES = ("per_row", "per_layer")
_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class CandidateRates:
    """Rates ``d / D`` for d = 1..D, so the grid always ends at exactly 1.0."""

    D: int = 100

    def __post_init__(self):
        if self.D < 2:
            raise ConfigError(f"need at least 2 candidate rates, got D={self.D}")

    @classmethod
    def from_step(cls, step: float) -> "CandidateRates":
        inv = 1.0 / step
        D = int(round(inv))
        if D < 2 or abs(inv - D) > 1e-6 * D:
            raise ConfigError(f"sparsity step {step} must divide 1 into an integer number of rates")
        return cls(D)

    @property
    def step(self) -> float:
        return 1.0 / self.D

    @property
    def rates(self) -> np.ndarray:
        return np.arange(1, self.D + 1, dtype=np.float64) / self.D

    def boundaries(self, width: int) -> np.ndarray:
        """Integer bin edges ``floor(width * d / D)`` for d = 0..D."""
        return (width * np.arange(self.D + 1, dtype=np.int64)) // self.D

    def bin_of_rank(self, width: int) -> np.ndarray:
        """Bin index k(r) in 0..D-1 for every rank r (merged bins resolve to the larger k)."""
        edges = self.boundaries(width)
        return np.searchsorted(edges[1:], np.arange(width), side="right")

    def exact(self, d: int) -> Fraction:
        return Fraction(d, self.D)


def beta_from_logits(logits: np.ndarray) -> np.ndarray:
    """Softmax over the D-1 free logits, extended with the pinned beta_D = 0."""
    lg = np.atleast_2d(logits)
    e = np.exp(lg - lg.max(axis=1, keepdims=True))
    b = e / e.sum(axis=1, keepdims=True)
    return np.concatenate([b, np.zeros((b.shape[0], 1))], axis=1)


def _check_simplex(beta: np.ndarray) -> None:
    if np.any(beta < 0) or np.any(np.abs(beta.sum(axis=-1) - 1.0) > _SIMPLEX_TOL):
        raise UsageError("beta must be non-negative and sum to 1")
    if np.any(beta[..., -1] != 0):
        raise UsageError("beta_D must be pinned to 0")


def effective_sparsity(beta, rates: CandidateRates) -> float | np.ndarray:
    b = np.asarray(beta, dtype=np.float64)
    _check_simplex(b)
    return b @ rates.rates


def tail_mass(beta: np.ndarray) -> np.ndarray:
    """``tail[..., k] = sum_{d > k} beta_d`` for k = 0..D-1 (1-indexed beta)."""
    return np.cumsum(beta[..., ::-1], axis=-1)[..., ::-1]


def element_prune_prob(beta, rates: CandidateRates, rank: int, row_width: int) -> float:
    if not 0 <= rank < row_width:
        raise UsageError(f"rank {rank} outside [0, {row_width})")
    b = np.asarray(beta, dtype=np.float64)
    _check_simplex(b)
    k = rates.bin_of_rank(row_width)[rank]
    return float(tail_mass(b)[k])


def prune_probs(beta: np.ndarray, rates: CandidateRates, width: int) -> np.ndarray:
    """Pruning probability for every rank, shape ``[..., width]``."""
    return np.take(tail_mass(beta), rates.bin_of_rank(width), axis=-1)


def pruned_counts(beta: np.ndarray, rates: CandidateRates, width: int) -> np.ndarray:
    """Number of least-important ranks pruned per unit (always a bin edge)."""
    b = np.atleast_2d(beta)
    alpha = b @ rates.rates
    probs = prune_probs(b, rates, width)
    return (probs >= alpha[:, None]).sum(axis=1)


def generate_mask(beta, rates: CandidateRates, ranking_row, in_features: int) -> np.ndarray:
    """Boolean keep-mask for one row in original column order."""
    b = np.asarray(beta, dtype=np.float64)
    _check_simplex(b)
    perm = np.asarray(ranking_row)
    n_pruned = int(pruned_counts(b[None], rates, in_features)[0])
    keep = np.ones(in_features, dtype=bool)
    keep[perm[:n_pruned]] = False
    return keep


def masks_from_counts(perm: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Keep-mask [out, in] pruning the first ``counts[o]`` ranks of each row."""
    out, width = perm.shape
    counts = np.broadcast_to(np.asarray(counts), (out,))
    keep_rank = np.arange(width)[None, :] >= counts[:, None]
    mask = np.empty((out, width), dtype=bool)
    np.put_along_axis(mask, perm, keep_rank, axis=1)
    return mask


# ------------------------------------------------------------- parameters

@dataclass
class SparsityParams:
    """Free logits for one layer; ``units`` rows of ``D - 1`` logits each."""

    granularity: str
    logits: DTensor
    rates: CandidateRates

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}")
        if self.logits.ndim != 2 or self.logits.shape[1] != self.rates.D - 1:
            raise ConfigError(f"logits must be [units, {self.rates.D - 1}], got {self.logits.shape}")

    @classmethod
    def init(cls, out_features: int, rates: CandidateRates, granularity: str = "per_row",
             target: float | None = None, width: float = 0.05) -> "SparsityParams":
        """Logits peaked around ``target`` (Gaussian in rate space), or uniform when None."""
        units = out_features if granularity == "per_row" else 1
        p = rates.rates[:-1]
        if target is None:
            row = np.zeros_like(p)
        else:
            row = -0.5 * ((p - target) / width) ** 2
        logits = np.tile(row, (units, 1))
        return cls(granularity, DTensor(logits, requires_grad=True), rates)

    @property
    def units(self) -> int:
        return self.logits.shape[0]

    def beta(self) -> np.ndarray:
        return beta_from_logits(self.logits.data)

    def alpha(self) -> np.ndarray:
        return self.beta() @ self.rates.rates


def _softmax_vjp(beta_free: np.ndarray, g: np.ndarray) -> np.ndarray:
    return beta_free * (g - (g * beta_free).sum(axis=1, keepdims=True))


@dataclass
class MaskContext:
    """What the forward pass recorded for the straight-through backward."""

    perm: np.ndarray
    edges: np.ndarray
    beta: np.ndarray
    granularity: str


def mask_backward(upstream: np.ndarray, ctx: MaskContext | None) -> np.ndarray:
    """Gradient w.r.t. the free logits given dL/dM in original column order."""
    if ctx is None:
        raise UsageError("mask_backward called without a recorded forward pass")
    if upstream.shape != ctx.perm.shape:
        raise UsageError(f"upstream {upstream.shape} does not match recorded mask {ctx.perm.shape}")
    ranked = np.take_along_axis(upstream, ctx.perm, axis=1)
    prefix = np.zeros((ranked.shape[0], ranked.shape[1] + 1))
    np.cumsum(ranked, axis=1, out=prefix[:, 1:])
    # dL/dbeta_d = -sum_{r < edge_d} dL/dM_r, for d = 1..D
    g_beta = -prefix[:, ctx.edges[1:]]
    if ctx.granularity == "per_layer":
        g_beta = g_beta.sum(axis=0, keepdims=True)
    return _softmax_vjp(ctx.beta[:, :-1], g_beta[:, :-1])


def layer_mask(params: SparsityParams, perm: np.ndarray) -> DTensor:
    """Differentiable {0,1} keep-mask for one layer (float tensor, shape of ``perm``)."""
    out, width = perm.shape
    beta = params.beta()
    counts = pruned_counts(beta, params.rates, width)
    mask = masks_from_counts(perm, counts).astype(np.float64)
    ctx = MaskContext(perm, params.rates.boundaries(width), beta, params.granularity)

    def backward(g):
        return (mask_backward(g, ctx),)

    return DTensor.from_op(mask, (params.logits,), backward)


def layer_alpha(params: SparsityParams) -> DTensor:
    """Effective sparsity per unit, differentiable w.r.t. the logits."""
    beta = params.beta()
    rates = params.rates.rates
    alpha = beta @ rates

    def backward(g):
        gb = np.asarray(g).reshape(-1, 1) * rates[None, :-1]
        return (_softmax_vjp(beta[:, :-1], gb),)

    return DTensor.from_op(alpha, (params.logits,), backward)


# ----------------------------------------------------------- penalty

def block_zero_fraction(masks) -> DTensor:
    """Zero fraction over all given masks, differentiable through the mask bits."""
    masks = list(masks)
    total = sum(m.size for m in masks)
    kept = T.sum_all(masks[0])
    for m in masks[1:]:
        kept = T.add(kept, T.sum_all(m))
    return T.mul(T.sub(float(total), kept), 1.0 / total)


def sparsity_penalty(masks, target: float, total_params: int | None = None) -> DTensor:
    """``(zeros / T_b - target)**2``; gradient flows through each mask's STE path."""
    masks = list(masks)
    total = sum(m.size for m in masks)
    if total_params is not None and total_params != total:
        raise UsageError(f"total_params {total_params} != mask element count {total}")
    return T.square(T.sub(block_zero_fraction(masks), target))


def surrogate_zero_fraction(params: dict[str, SparsityParams], shapes: dict[str, tuple[int, int]]) -> DTensor:
    """Expected zero fraction computed from alpha instead of the hard mask."""
    total = sum(o * i for o, i in shapes.values())
    acc = None
    for name, p in params.items():
        out, width = shapes[name]
        a = layer_alpha(p)
        w = np.full(p.units, float(width if p.units == out else out * width)) / total
        term = T.sum_all(T.mul(a, DTensor._wrap(w)))
        acc = term if acc is None else T.add(acc, term)
    return acc


# -------------------------------------------------------- param counting

@dataclass(frozen=True)
class ParamCount:
    extra: int
    block_weights: int

    @property
    def ratio(self) -> float:
        return self.extra / self.block_weights

    @property
    def percent(self) -> float:
        return 100.0 * self.ratio


def count_learnable_params(layer_shapes: dict[str, tuple[int, int]], granularity: str, D: int = 100) -> ParamCount:
    """Extra learnable coefficients per block relative to the block's weight count."""
    if granularity not in GRANULARITIES:
        raise ConfigError(f"unknown granularity {granularity!r}")
    if granularity == "per_row":
        extra = sum(D * out for out, _ in layer_shapes.values())
    else:
        extra = D * len(layer_shapes)
    return ParamCount(extra, sum(o * i for o, i in layer_shapes.values()))


# ------------------------------------------------------------ mask files

MASK_MAGIC = b"BESAMASK"
_MASK_HEADER = struct.Struct("<8sII")
_MASK_FOOTER = struct.Struct("<d")


@dataclass
class PruneMask:
    """Bit-packed keep-mask (1 = keep) for one layer.

    Bits are packed row-major, least significant bit first within each byte.
    """

    bits: np.ndarray
    shape: tuple[int, int]
    layer: str = ""

    @classmethod
    def from_dense(cls, mask, layer: str = "") -> "PruneMask":
        m = np.asarray(mask.data if isinstance(mask, DTensor) else mask)
        if m.ndim != 2:
            raise MaskError(f"mask must be 2-d, got {m.shape}")
        if m.dtype != bool and not np.all((m == 0) | (m == 1)):
            raise MaskError("mask entries must be 0 or 1")
        b = m.astype(bool)
        return cls(np.packbits(b.ravel(), bitorder="little"), (int(m.shape[0]), int(m.shape[1])), layer)

    def to_dense(self) -> np.ndarray:
        n = self.shape[0] * self.shape[1]
        return np.unpackbits(self.bits, count=n, bitorder="little").astype(bool).reshape(self.shape)

    @property
    def zero_count(self) -> int:
        n = self.shape[0] * self.shape[1]
        return n - int(np.unpackbits(self.bits, count=n, bitorder="little").sum())

    @property
    def achieved_sparsity(self) -> float:
        return self.zero_count / (self.shape[0] * self.shape[1])

    def row_zero_counts(self) -> np.ndarray:
        return (~self.to_dense()).sum(axis=1)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MASK_HEADER.pack(MASK_MAGIC, *self.shape))
            fh.write(self.bits.tobytes())
            fh.write(_MASK_FOOTER.pack(self.achieved_sparsity))

    @classmethod
    def load(cls, path, layer: str = "") -> "PruneMask":
        raw = Path(path).read_bytes()
        if len(raw) < _MASK_HEADER.size + _MASK_FOOTER.size:
            raise DataError(f"{path}: truncated mask file")
        magic, out, width = _MASK_HEADER.unpack_from(raw)
        if magic != MASK_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        nbytes = (out * width + 7) // 8
        if len(raw) != _MASK_HEADER.size + nbytes + _MASK_FOOTER.size:
            raise DataError(f"{path}: expected {nbytes} mask bytes for {out}x{width}")
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=_MASK_HEADER.size).copy()
        (stored,) = _MASK_FOOTER.unpack_from(raw, _MASK_HEADER.size + nbytes)
        m = cls(bits, (out, width), layer)
        if stored != m.achieved_sparsity:
            raise DataError(f"{path}: footer sparsity {stored} != recomputed {m.achieved_sparsity}")
        return m
