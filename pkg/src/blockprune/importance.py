"""Activation-aware weight importance and the per-row ascending sort."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, UsageError
from .model import PRUNABLE, BlockWeights, ModelCheckpoint, block_forward

METRICS = ("wanda", "magnitude")


@dataclass
class ActivationNorms:
    """Running sum of squared activations per input feature, square-rooted on finalize."""

    per_layer: dict[str, np.ndarray] = field(default_factory=dict)
    token_count: int = 0
    _finalized: bool = False

    def accumulate(self, layer: str, acts: np.ndarray) -> None:
        if self._finalized:
            raise UsageError("ActivationNorms already finalized")
        flat = acts.reshape(-1, acts.shape[-1])
        sq = np.einsum("ti,ti->i", flat, flat)
        if layer in self.per_layer:
            self.per_layer[layer] = self.per_layer[layer] + sq
        else:
            self.per_layer[layer] = sq

    def finalize(self) -> "ActivationNorms":
        if not self._finalized:
            self.per_layer = {k: np.sqrt(v) for k, v in self.per_layer.items()}
            self._finalized = True
        return self


def block_activation_norms(block: BlockWeights, input_stream, batch_size: int = 8) -> ActivationNorms:
    """l2 norm over all tokens of every input feature seen by each projection."""
    x = np.asarray(input_stream.data if isinstance(input_stream, T.DTensor) else input_stream)
    if x.ndim == 2:
        x = x[None]
    norms = ActivationNorms()
    with T.no_grad():
        for start in range(0, x.shape[0], batch_size):
            trace: dict = {}
            block_forward(block, x[start:start + batch_size], trace=trace)
            for name in PRUNABLE:
                norms.accumulate(name, trace[f"{name}_in"].data)
    norms.token_count = x.shape[0] * x.shape[1]
    return norms.finalize()


def collect_activation_norms(model: ModelCheckpoint, block_index: int, input_stream, batch_size: int = 8) -> ActivationNorms:
    if not 0 <= block_index < model.n_blocks:
        raise UsageError(f"block_index {block_index} out of range [0, {model.n_blocks})")
    return block_activation_norms(model.blocks[block_index], input_stream, batch_size)


def compute_importance(w, norms, metric: str = "wanda") -> np.ndarray:
    wd = np.abs(T.as_tensor(w).data)
    if metric == "magnitude":
        return wd
    if metric != "wanda":
        raise UsageError(f"unknown importance metric {metric!r}; expected one of {METRICS}")
    n = np.asarray(norms.data if isinstance(norms, T.DTensor) else norms, dtype=np.float64)
    if wd.ndim != 2 or n.shape != (wd.shape[1],):
        raise DimensionError(f"importance: weight {wd.shape} vs norms {n.shape}")
    return wd * n[None, :]


def sort_rows(delta) -> np.ndarray:
    """Per-row ascending stable argsort; entry (o, r) is the column of rank r."""
    d = np.asarray(delta.data if isinstance(delta, T.DTensor) else delta)
    perm = np.argsort(d, axis=1, kind="stable").astype(np.int32)
    perm.setflags(write=False)
    return perm


@dataclass(frozen=True)
class ImportanceRanking:
    per_layer: MappingProxyType
    metric: str

    def __getitem__(self, layer: str) -> np.ndarray:
        return self.per_layer[layer]


def rank_block(block: BlockWeights, norms: ActivationNorms | None, metric: str = "wanda") -> ImportanceRanking:
    """Sort every prunable matrix of a block once."""
    perms = {}
    for name, w in block.matrices().items():
        layer_norms = None if norms is None else norms.per_layer[name]
        perms[name] = sort_rows(compute_importance(w, layer_norms, metric))
    return ImportanceRanking(MappingProxyType(perms), metric)


_RANK_HEADER = struct.Struct("<II")


def export_ranking(perm: np.ndarray, path) -> None:
    out, inn = perm.shape
    with open(path, "wb") as fh:
        fh.write(_RANK_HEADER.pack(out, inn))
        fh.write(np.ascontiguousarray(perm, dtype="<i4").tobytes())


def import_ranking(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _RANK_HEADER.size:
        raise DataError(f"{path}: truncated ranking header")
    out, inn = _RANK_HEADER.unpack_from(raw)
    body = raw[_RANK_HEADER.size:]
    if len(body) != 4 * out * inn:
        raise DataError(f"{path}: expected {out}x{inn} ranks, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<i4").reshape(out, inn).astype(np.int32)
