"""Per-channel Min-Max fake quantization with learnable clipping strengths.

Each output row gets its own scale ``h`` and zero point ``z``::

    h = (gamma1 * max(row) - gamma0 * min(row)) / (2**bits - 1)
    z = -round(gamma0 * min(row) / h)
    code = clamp(round(W / h) + z, 0, 2**bits - 1)
    W_hat = (code - z) * h

Rounding is half-to-even. The backward pass is a straight-through estimator:
rounding has unit derivative, the clamp passes gradient only inside its range,
and the clipping strengths receive analytic gradients through ``h`` and ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import DTensor, as_tensor

_H_FLOOR = 1e-12


@dataclass
class QuantParams:
    """Bit width plus per-output-channel clipping strengths for one matrix."""

    bits: int
    gamma0: DTensor
    gamma1: DTensor
    learnable: bool = True

    def __post_init__(self):
        if not 2 <= int(self.bits) <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        self.bits = int(self.bits)
        self.gamma0 = as_tensor(self.gamma0)
        self.gamma1 = as_tensor(self.gamma1)
        if self.gamma0.shape != self.gamma1.shape or self.gamma0.ndim != 1:
            raise DimensionError("gamma0/gamma1 must be matching 1-d tensors")

    @classmethod
    def init(cls, out_features: int, bits: int = 4, learnable: bool = True) -> "QuantParams":
        # gamma = 1 means no clipping: plain Min-Max.
        g0 = DTensor(np.ones(out_features), requires_grad=learnable)
        g1 = DTensor(np.ones(out_features), requires_grad=learnable)
        return cls(bits, g0, g1, learnable)

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def clamp_(self) -> None:
        np.clip(self.gamma0.data, 0.0, 1.0, out=self.gamma0.data)
        np.clip(self.gamma1.data, 0.0, 1.0, out=self.gamma1.data)

    def parameters(self) -> list[DTensor]:
        return [self.gamma0, self.gamma1] if self.learnable else []


@dataclass
class QuantState:
    """Scale, zero point and integer codes of one quantized matrix."""

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    codes: np.ndarray
    passthrough: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def dequantize(self) -> np.ndarray:
        out = (self.codes - self.zero_point[:, None]) * self.scale[:, None]
        return out


def channel_params(w: np.ndarray, gamma0: np.ndarray, gamma1: np.ndarray, bits: int):
    """Return ``(h, z, zero_clamped, passthrough, wmin, wmax)`` per row."""
    levels = (1 << bits) - 1
    wmax = w.max(axis=1)
    wmin = w.min(axis=1)
    h = (gamma1 * wmax - gamma0 * wmin) / levels
    passthrough = ~(h > _H_FLOOR)
    safe_h = np.where(passthrough, 1.0, h)
    z_raw = -np.rint(gamma0 * wmin / safe_h)
    z = np.clip(z_raw, 0, levels)
    zero_clamped = z != z_raw
    return safe_h, z, zero_clamped, passthrough, wmin, wmax


def quantize_state(w, q: QuantParams) -> QuantState:
    """Integer view of the fake-quantized matrix (for export)."""
    wd = as_tensor(w).data
    h, z, _, passthrough, _, _ = channel_params(wd, q.gamma0.data, q.gamma1.data, q.bits)
    codes = np.clip(np.rint(wd / h[:, None]) + z[:, None], 0, q.levels)
    return QuantState(q.bits, h, z, codes.astype(np.int64), passthrough)


def quantize(w, q: QuantParams) -> DTensor:
    """Fake-quantize ``w`` (out x in) row by row; differentiable w.r.t. ``w`` and the gammas."""
    w = as_tensor(w)
    if w.ndim != 2 or w.shape[0] != q.gamma0.shape[0]:
        raise DimensionError(f"quantize: weight {w.shape} vs {q.gamma0.shape[0]} channels")
    wd = w.data
    levels = q.levels
    g0, g1 = q.gamma0.data, q.gamma1.data
    h, z, z_clamped, passthrough, wmin, wmax = channel_params(wd, g0, g1, q.bits)

    hc = h[:, None]
    zc = z[:, None]
    v = np.rint(wd / hc) + zc
    code = np.clip(v, 0, levels)
    inside = (v >= 0) & (v <= levels)
    out = (code - zc) * hc
    out[passthrough] = wd[passthrough]

    def backward(g):
        gw = np.where(inside, g, 0.0)
        gw[passthrough] = g[passthrough]
        if not (q.gamma0.requires_grad or q.gamma1.requires_grad):
            return gw, None, None
        # d out / d h with z held fixed; inside the clamp z cancels exactly.
        dout_dh = np.where(inside, (code - zc) - wd / hc, code - zc)
        dout_dz = np.where(inside, 0.0, -hc)
        a = (g * dout_dh).sum(axis=1)
        b = (g * dout_dz).sum(axis=1)
        live = ~z_clamped
        dz_dh = np.where(live, g0 * wmin / (h * h), 0.0)
        dz_dg0 = np.where(live, -wmin / h, 0.0)
        dh = a + b * dz_dh
        dg1 = dh * wmax / levels
        dg0 = dh * (-wmin / levels) + b * dz_dg0
        dg0[passthrough] = 0.0
        dg1[passthrough] = 0.0
        return gw, dg0, dg1

    return DTensor.from_op(out, (w, q.gamma0, q.gamma1), backward)


def round_trip_error(w: np.ndarray, q: QuantParams) -> np.ndarray:
    return np.abs(quantize(DTensor(w), q).data - w)
