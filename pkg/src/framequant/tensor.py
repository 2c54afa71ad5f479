"""Dense float64 tensors with a designated frame axis, plus the order
statistics and error metrics the calibration pipeline is built on.

Arithmetic is done in float64 throughout; file IO converts to/from
float32 at the boundary (see :mod:`framequant.tensorio`).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "percentile",
    "frame_slice",
    "num_frames",
    "stack_frames",
    "mse",
    "psnr",
]


class Tensor:
    """Immutable dense array of float64 values in row-major order.

    ``frame_axis``, when set, designates the axis whose slices are the
    frames of a multi-frame activation tensor.
    """

    __slots__ = ("data", "frame_axis")

    def __init__(self, data, frame_axis: int | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("empty input")
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values (NaN/Inf) are not allowed")
        if frame_axis is not None:
            if not 0 <= frame_axis < arr.ndim:
                raise ValueError(
                    f"frame_axis {frame_axis} out of range for {arr.ndim}-d tensor"
                )
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "frame_axis", frame_axis)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def ravel(self) -> np.ndarray:
        return self.data.ravel()

    def with_frame_axis(self, frame_axis: int | None) -> "Tensor":
        return Tensor(self.data, frame_axis=frame_axis)

    def __repr__(self):
        fa = f", frame_axis={self.frame_axis}" if self.frame_axis is not None else ""
        return f"Tensor(shape={self.shape}{fa})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.frame_axis == other.frame_axis
            and bool(np.array_equal(self.data, other.data))
        )


def as_tensor(x, frame_axis: int | None = None) -> Tensor:
    """Coerce an array-like (or pass through a Tensor) to a Tensor."""
    if isinstance(x, Tensor):
        if frame_axis is not None and x.frame_axis != frame_axis:
            return x.with_frame_axis(frame_axis)
        return x
    return Tensor(x, frame_axis=frame_axis)


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def percentile(t, k) -> float:
    """k-th percentile by linear interpolation between closest ranks.

    For sorted values v[0..n-1] the rank position is p = k/100 * (n-1) and
    the result interpolates between v[floor(p)] and v[floor(p)+1].
    """
    vals = _values(t).ravel()
    if vals.size == 0:
        raise ValueError("empty input")
    if not 0.0 <= k <= 100.0:
        raise ValueError(f"percentile k={k} outside [0, 100]")
    v = np.sort(vals, kind="stable")
    p = (k / 100.0) * (v.size - 1)
    lo = int(math.floor(p))
    frac = p - lo
    if frac == 0.0 or lo + 1 >= v.size:
        return float(v[lo])
    return float(v[lo] + frac * (v[lo + 1] - v[lo]))


def num_frames(t: Tensor) -> int:
    if t.frame_axis is None:
        raise ValueError("tensor has no frame axis")
    return t.shape[t.frame_axis]


def frame_slice(t: Tensor, i: int) -> Tensor:
    """Frame i of a multi-frame tensor, with the frame axis removed."""
    if t.frame_axis is None:
        raise ValueError("tensor has no frame axis")
    n = t.shape[t.frame_axis]
    if not 0 <= i < n:
        raise IndexError(f"frame index {i} out of range [0, {n})")
    return Tensor(np.take(t.data, i, axis=t.frame_axis))


def stack_frames(frames, frame_axis: int) -> Tensor:
    """Re-stack frame tensors along ``frame_axis`` (inverse of frame_slice)."""
    arrs = [f.data if isinstance(f, Tensor) else np.asarray(f) for f in frames]
    return Tensor(np.stack(arrs, axis=frame_axis), frame_axis=frame_axis)


def mse(a, b) -> float:
    """Mean squared element-wise difference."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {av.shape} vs {bv.shape}")
    d = av - bv
    return float(np.mean(d * d))


def psnr(a, b, peak: float) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the inputs are identical."""
    if peak <= 0:
        raise ValueError("peak must be > 0")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)
