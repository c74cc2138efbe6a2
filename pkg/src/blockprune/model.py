"""A pre-norm, LLaMA-style decoder block and a small stack of them.

The block has seven prunable projections (q/k/v/o attention, gate/up/down
MLP) and two RMSNorm gains. Weights are stored ``[out_features, in_features]``
and applied as ``x @ W.T``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .errors import DataError, DimensionError, MaskError
from .quant import QuantParams, quantize
from .tensor import DTensor

PRUNABLE = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
ATTN_LAYERS = PRUNABLE[:4]
MLP_LAYERS = PRUNABLE[4:]
GAINS = ("attn_norm_gain", "mlp_norm_gain")


@dataclass(frozen=True)
class BlockConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 172
    seq_len: int = 128

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "seq_len"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise DimensionError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        d, f = self.d_model, self.d_ff
        return {
            "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
            "gate_proj": (f, d), "up_proj": (f, d), "down_proj": (d, f),
        }

    def block_params(self) -> int:
        return sum(o * i for o, i in self.layer_shapes().values())


@dataclass
class BlockWeights:
    config: BlockConfig
    q_proj: DTensor
    k_proj: DTensor
    v_proj: DTensor
    o_proj: DTensor
    gate_proj: DTensor
    up_proj: DTensor
    down_proj: DTensor
    attn_norm_gain: DTensor
    mlp_norm_gain: DTensor

    def __post_init__(self):
        shapes = self.config.layer_shapes()
        for name in PRUNABLE + GAINS:
            setattr(self, name, T.as_tensor(getattr(self, name)))
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        for name in GAINS:
            if getattr(self, name).shape != (self.config.d_model,):
                raise DimensionError(f"{name}: expected ({self.config.d_model},)")

    def matrices(self) -> dict[str, DTensor]:
        return {name: getattr(self, name) for name in PRUNABLE}

    def copy(self) -> "BlockWeights":
        return BlockWeights(self.config, *(DTensor(getattr(self, n).data) for n in PRUNABLE + GAINS))

    def masked(self, masks: Mapping[str, object]) -> "BlockWeights":
        """Return a copy whose prunable matrices are multiplied by ``masks``."""
        out = self.copy()
        for name in PRUNABLE:
            if name in masks:
                m = _mask_array(masks[name])
                getattr(out, name).data *= m
        return out


@dataclass
class ModelCheckpoint:
    config: BlockConfig
    blocks: list[BlockWeights]
    embed: DTensor
    head: DTensor
    final_norm_gain: DTensor
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise DataError("checkpoint must contain at least one block")
        self.embed = T.as_tensor(self.embed)
        self.head = T.as_tensor(self.head)
        self.final_norm_gain = T.as_tensor(self.final_norm_gain)
        d = self.config.d_model
        if self.embed.ndim != 2 or self.embed.shape[1] != d:
            raise DimensionError(f"embed must be [vocab, {d}], got {self.embed.shape}")
        if self.head.shape != self.embed.shape:
            raise DimensionError(f"head must match embed shape {self.embed.shape}")
        if self.final_norm_gain.shape != (d,):
            raise DimensionError("final_norm_gain must be [d_model]")
        for b in self.blocks:
            if b.config != self.config:
                raise DimensionError("all blocks must share one BlockConfig")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    def with_blocks(self, blocks: list[BlockWeights]) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, blocks, self.embed, self.head, self.final_norm_gain, dict(self.meta))


def _mask_array(m) -> np.ndarray:
    if hasattr(m, "to_dense"):
        return m.to_dense().astype(np.float64)
    if isinstance(m, DTensor):
        return m.data
    return np.asarray(m, dtype=np.float64)


def _mask_tensor(m) -> DTensor:
    if isinstance(m, DTensor):
        return m
    return DTensor._wrap(_mask_array(m))


def effective_weight(w: DTensor, mask=None, quant: QuantParams | None = None, name: str = "") -> DTensor:
    """``quantize(W) * mask``: quantize first, then prune."""
    out = quantize(w, quant) if quant is not None else w
    if mask is not None:
        mt = _mask_tensor(mask)
        if mt.shape != w.shape:
            raise MaskError(f"{name}: mask shape {mt.shape} != weight shape {w.shape}")
        out = T.mul(out, mt)
    return out


def _check_cover(what: str, mapping) -> None:
    if mapping is None:
        return
    keys = set(mapping)
    if keys != set(PRUNABLE):
        missing = sorted(set(PRUNABLE) - keys)
        extra = sorted(keys - set(PRUNABLE))
        raise MaskError(f"{what} must cover exactly the seven projections (missing={missing}, extra={extra})")


def linear(x: DTensor, w: DTensor) -> DTensor:
    return T.matmul(x, T.transpose(w))


def attention(w: dict[str, DTensor], z: DTensor, cfg: BlockConfig, trace: dict | None = None) -> DTensor:
    """Causal multi-head self-attention on ``z`` of shape [B, S, d]."""
    b, s, d = z.shape
    h, dh = cfg.n_heads, cfg.head_dim

    def heads(t):
        return T.transpose(T.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

    q = heads(linear(z, w["q_proj"]))
    k = heads(linear(z, w["k_proj"]))
    v = heads(linear(z, w["v_proj"]))
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    probs = T.softmax_rows(T.causal_fill(scores))
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    if trace is not None:
        trace["o_proj_in"] = ctx
    return linear(ctx, w["o_proj"])


def mlp(w: dict[str, DTensor], z: DTensor, trace: dict | None = None) -> DTensor:
    gated = T.mul(T.silu(linear(z, w["gate_proj"])), linear(z, w["up_proj"]))
    if trace is not None:
        trace["down_proj_in"] = gated
    return linear(gated, w["down_proj"])


def block_forward(
    w: BlockWeights,
    x,
    masks: Mapping[str, object] | None = None,
    quant: Mapping[str, QuantParams] | None = None,
    trace: dict | None = None,
) -> DTensor:
    """Apply one block to ``x`` ([S, d] or [B, S, d]).

    ``trace``, when a dict, receives the inputs seen by each projection
    (``<name>_in``) and the attention/MLP branch outputs.
    """
    x = T.as_tensor(x)
    cfg = w.config
    if x.shape[-1] != cfg.d_model or x.ndim not in (2, 3):
        raise DimensionError(f"block input must be [..., S, {cfg.d_model}], got {x.shape}")
    _check_cover("masks", masks)
    _check_cover("quant", quant)
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)

    mats = {
        name: effective_weight(
            getattr(w, name),
            None if masks is None else masks[name],
            None if quant is None else quant[name],
            name,
        )
        for name in PRUNABLE
    }

    z = T.rms_norm(x, w.attn_norm_gain)
    a = attention(mats, z, cfg, trace)
    hdn = T.add(x, a)
    z2 = T.rms_norm(hdn, w.mlp_norm_gain)
    m = mlp(mats, z2, trace)
    out = T.add(hdn, m)
    if trace is not None:
        trace["attn_in"] = z
        trace["mlp_in"] = z2
        trace["attn_out"] = a
        trace["mlp_out"] = m
        trace["hidden"] = hdn
        for name in ("q_proj", "k_proj", "v_proj"):
            trace[f"{name}_in"] = z
        for name in ("gate_proj", "up_proj"):
            trace[f"{name}_in"] = z2
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


def sinusoidal_positions(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def embed_tokens(m: ModelCheckpoint, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.ndim not in (1, 2):
        raise DataError(f"tokens must be 1-d or 2-d, got shape {tok.shape}")
    if tok.size and (tok.min() < 0 or tok.max() >= m.vocab):
        raise DataError(f"token id out of range [0, {m.vocab})")
    x = m.embed.data[tok]
    return x + sinusoidal_positions(tok.shape[-1], m.config.d_model)


def model_forward(m: ModelCheckpoint, tokens, masks=None) -> np.ndarray:
    """Logits ``[..., S, vocab]``; ``masks`` is an optional list of per-block mask dicts."""
    x = DTensor._wrap(embed_tokens(m, tokens))
    with T.no_grad():
        for i, blk in enumerate(m.blocks):
            x = block_forward(blk, x, masks[i] if masks is not None else None)
        h = T.rms_norm(x, m.final_norm_gain)
        return linear(h, m.head).data


def perplexity(m: ModelCheckpoint, tokens, masks=None) -> float:
    tok = np.asarray(tokens)
    if tok.shape[-1] < 2:
        raise DataError("perplexity needs at least 2 tokens per sequence")
    logits = model_forward(m, tok, masks)
    return perplexity_from_logits(logits, tok)


def perplexity_from_logits(logits: np.ndarray, tokens) -> float:
    tok = np.asarray(tokens)
    pred = logits[..., :-1, :]
    tgt = tok[..., 1:]
    logp = pred - logsumexp(pred, axis=-1, keepdims=True)
    nll = -np.take_along_axis(logp, tgt[..., None], axis=-1)
    return float(np.exp(nll.mean()))
