"""Uniform asymmetric fake quantization (quantize-dequantize simulation).

Values are clamped to [lb, ub], mapped to one of 2**bits uniformly spaced
levels, and mapped back:

    x_clip = min(max(x, lb), ub)
    x_int  = round((x_clip - lb) / delta),   delta = (ub - lb) / (2**bits - 1)
    x_hat  = x_int * delta + lb

Rounding is half away from zero (0.5 -> 1); the grid examples and the
search oracle depend on this exact rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, num_frames

__all__ = [
    "QuantParams",
    "FrameQuantScheme",
    "clamp",
    "fake_quantize",
    "quantize_per_frame",
    "quant_error",
]


@dataclass(frozen=True)
class QuantParams:
    """One clipping interval [lb, ub] at a given bit-width."""

    lb: float
    ub: float
    bits: int
    delta: float = field(init=False)

    def __post_init__(self):
        if not isinstance(self.bits, int) or self.bits < 1:
            raise ValueError(f"bits must be an integer >= 1, got {self.bits!r}")
        lb, ub = float(self.lb), float(self.ub)
        if not (np.isfinite(lb) and np.isfinite(ub)):
            raise ValueError("bounds must be finite")
        if not ub > lb:
            raise ValueError(f"ub must be strictly greater than lb, got [{lb}, {ub}]")
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        object.__setattr__(self, "delta", (ub - lb) / (2 ** self.bits - 1))


@dataclass(frozen=True)
class FrameQuantScheme:
    """Ordered per-frame QuantParams for one quantized tensor site.

    ``per_frame=False`` carries exactly one entry applied to the whole
    tensor; otherwise entry i applies to frame i.
    """

    site_name: str
    per_frame: bool
    params: tuple[QuantParams, ...]

    def __post_init__(self):
        params = tuple(self.params)
        object.__setattr__(self, "params", params)
        if not params:
            raise ValueError("scheme must contain at least one QuantParams entry")
        if not self.per_frame and len(params) != 1:
            raise ValueError(
                f"per-tensor scheme must have exactly 1 entry, got {len(params)}"
            )
        bits = {p.bits for p in params}
        if len(bits) != 1:
            raise ValueError(f"all entries must share one bit-width, got {sorted(bits)}")

    @property
    def bits(self) -> int:
        return self.params[0].bits

    @property
    def frame_count(self) -> int:
        return len(self.params)


def clamp(x, lb, ub):
    """min(max(x, lb), ub); elementwise on arrays."""
    if np.isscalar(x):
        return min(max(x, lb), ub)
    return np.minimum(np.maximum(x, lb), ub)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # Inputs are non-negative after clipping; np.round would round half to even.
    return np.floor(x + 0.5)


def _fq_values(x: np.ndarray, lb, ub, bits: int) -> np.ndarray:
    """Quantize-dequantize kernel; lb/ub may be scalars or broadcastable arrays."""
    delta = (ub - lb) / (2 ** bits - 1)
    x_clip = np.minimum(np.maximum(x, lb), ub)
    x_int = _round_half_away((x_clip - lb) / delta)
    return x_int * delta + lb


def fake_quantize(x, p: QuantParams):
    """Apply uniform fake quantization with params ``p``.

    Returns the same container kind as the input (Tensor in, Tensor out).
    """
    if isinstance(x, Tensor):
        return Tensor(_fq_values(x.data, p.lb, p.ub, p.bits), frame_axis=x.frame_axis)
    return _fq_values(np.asarray(x, dtype=np.float64), p.lb, p.ub, p.bits)


def quantize_per_frame(x: Tensor, scheme: FrameQuantScheme) -> Tensor:
    """Fake-quantize frame i with scheme.params[i] (or params[0] per-tensor)."""
    if not scheme.per_frame:
        return fake_quantize(x, scheme.params[0])
    if x.frame_axis is None:
        raise ValueError("per-frame scheme requires a tensor with frame_axis set")
    n = num_frames(x)
    if n != scheme.frame_count:
        raise ValueError(
            f"frame-count mismatch: tensor has {n} frames, "
            f"scheme has {scheme.frame_count} entries"
        )
    out = np.empty_like(x.data)
    moved = np.moveaxis(x.data, x.frame_axis, 0)
    out_moved = np.moveaxis(out, x.frame_axis, 0)
    for i in range(n):
        p = scheme.params[i]
        out_moved[i] = _fq_values(moved[i], p.lb, p.ub, p.bits)
    return Tensor(out, frame_axis=x.frame_axis)


def quant_error(x, p: QuantParams) -> float:
    """Mean squared quantization error of ``x`` under params ``p``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    d = arr - _fq_values(arr, p.lb, p.ub, p.bits)
    return float(np.mean(d * d))
