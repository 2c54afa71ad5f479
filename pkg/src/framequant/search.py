"""Coarse-stage clipping-bound search.

The search space for each frame is percentile-constrained: lower bounds
live on a uniform grid over [p0.1, p10], upper bounds over [p90, p99.9].
``btbi_search`` explores that grid depth-first from a percentile start,
skipping visited states and pruning branches whose error exceeds the
running minimum by more than a slack epsilon. ``exhaustive_search`` is
the grid-global oracle used to validate it.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .quantize import FrameQuantScheme, QuantParams, _fq_values
from .tensor import Tensor, frame_slice, num_frames, percentile

__all__ = [
    "DegenerateDistributionError",
    "SearchSpaceCollapseError",
    "SearchConfig",
    "SearchSpace",
    "SearchResult",
    "FrameCalibrationRecord",
    "build_search_space",
    "btbi_search",
    "exhaustive_search",
    "minmax_bounds",
    "percentile_bounds",
    "calibrate_site",
    "calibrate_site_detailed",
]


class DegenerateDistributionError(ValueError):
    """Raised when a frame is too concentrated to span a search space."""


class SearchSpaceCollapseError(ValueError):
    """Raised when the lower-bound grid would overlap the upper-bound grid."""


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for the bound search.

    ``epsilon_rel`` scales the pruning slack relative to the error at the
    starting bounds; ``max_states`` caps visited states (default: one full
    grid, grid_points**2). ``subsample`` evaluates the objective on a
    fixed-seed subset when a frame has more elements than the cap.
    """

    grid_points: int = 32
    epsilon_rel: float = 0.01
    max_states: int | None = None
    subsample: int | None = None
    subsample_seed: int = 0

    def __post_init__(self):
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")
        if self.epsilon_rel < 0:
            raise ValueError("epsilon_rel must be >= 0")
        if self.max_states is not None and self.max_states < 1:
            raise ValueError("max_states must be >= 1")
        if self.subsample is not None and self.subsample < 1:
            raise ValueError("subsample must be >= 1")

    @property
    def state_cap(self) -> int:
        return self.max_states if self.max_states is not None else self.grid_points ** 2


@dataclass(frozen=True)
class SearchSpace:
    """Candidate grids for (lb, ub), uniformly spaced per axis.

    An axis whose percentile range is flat (common for the lower bound of
    ReLU activations, where p0.1 == p10 == 0) degenerates to a single
    pinned point; the search then moves only along the other axis.
    """

    lb_grid: np.ndarray
    ub_grid: np.ndarray
    delta_l: float
    delta_u: float

    def __post_init__(self):
        lb = np.asarray(self.lb_grid, dtype=np.float64)
        ub = np.asarray(self.ub_grid, dtype=np.float64)
        object.__setattr__(self, "lb_grid", lb)
        object.__setattr__(self, "ub_grid", ub)
        if lb.size < 1 or ub.size < 1:
            raise ValueError("grids must not be empty")
        if np.any(np.diff(lb) <= 0) or np.any(np.diff(ub) <= 0):
            raise ValueError("grids must be strictly ascending")
        if lb[-1] >= ub[0]:
            raise SearchSpaceCollapseError(
                f"lb grid (max {lb[-1]}) overlaps ub grid (min {ub[0]})"
            )


@dataclass(frozen=True)
class SearchResult:
    lb_star: float
    ub_star: float
    error_min: float
    states_visited: int
    trace: tuple[tuple[float, float, float], ...] | None = None


def build_search_space(frame, cfg: SearchConfig) -> SearchSpace:
    """Percentile-constrained (lb, ub) grids for one frame."""
    p01 = percentile(frame, 0.1)
    p10 = percentile(frame, 10.0)
    p90 = percentile(frame, 90.0)
    p999 = percentile(frame, 99.9)
    if p01 == p999:
        raise DegenerateDistributionError("degenerate distribution")
    g = cfg.grid_points

    def axis(lo, hi):
        if lo == hi:
            return np.array([lo]), 0.0
        return np.linspace(lo, hi, g), (hi - lo) / (g - 1)

    lb_grid, delta_l = axis(p01, p10)
    ub_grid, delta_u = axis(p90, p999)
    if lb_grid[-1] >= ub_grid[0]:
        raise SearchSpaceCollapseError(
            f"search space collapsed: p10={p10} >= p90={p90}"
        )
    return SearchSpace(lb_grid=lb_grid, ub_grid=ub_grid, delta_l=delta_l, delta_u=delta_u)


def _objective_values(frame, cfg: SearchConfig | None) -> np.ndarray:
    vals = frame.ravel() if isinstance(frame, Tensor) else np.asarray(frame).ravel()
    if cfg is not None and cfg.subsample is not None and vals.size > cfg.subsample:
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(cfg.subsample_seed))
        )
        idx = rng.choice(vals.size, size=cfg.subsample, replace=False)
        vals = vals[np.sort(idx)]
    return np.ascontiguousarray(vals, dtype=np.float64)


def _grid_error(vals: np.ndarray, lb: float, ub: float, bits: int) -> float:
    d = vals - _fq_values(vals, lb, ub, bits)
    return float(np.mean(d * d))


def _nearest_index(grid: np.ndarray, x: float) -> int:
    return int(np.argmin(np.abs(grid - x)))


def btbi_search(
    frame,
    space: SearchSpace,
    cfg: SearchConfig,
    bits: int,
    keep_trace: bool = False,
) -> SearchResult:
    """Backtracking bound search over the grid.

    Depth-first from the (p1, p99) start snapped onto the grids; states are
    keyed by grid indices so the visited set is exact. Neighbors expand in
    the fixed order (+dL, -dL, +dU, -dU); a state whose error exceeds
    error_min + epsilon is not expanded.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    vals = _objective_values(frame, cfg)
    lb_grid, ub_grid = space.lb_grid, space.ub_grid
    nl, nu = lb_grid.size, ub_grid.size

    i0 = _nearest_index(lb_grid, percentile(vals, 1.0))
    j0 = _nearest_index(ub_grid, percentile(vals, 99.0))
    err0 = _grid_error(vals, float(lb_grid[i0]), float(ub_grid[j0]), bits)
    eps = cfg.epsilon_rel * err0

    visited: set[tuple[int, int]] = set()
    trace: list[tuple[float, float, float]] = []
    error_min = np.inf
    best = (i0, j0)
    # Pushed in reverse so (+dL, 0) pops first.
    moves = ((0, -1), (0, 1), (-1, 0), (1, 0))
    stack: list[tuple[int, int]] = [(i0, j0)]
    cap = cfg.state_cap

    while stack and len(visited) < cap:
        state = stack.pop()
        if state in visited:
            continue
        visited.add(state)
        i, j = state
        lb, ub = float(lb_grid[i]), float(ub_grid[j])
        err = _grid_error(vals, lb, ub, bits)
        if keep_trace:
            trace.append((lb, ub, err))
        if err > error_min + eps:
            continue
        if err < error_min:
            error_min = err
            best = state
        for di, dj in moves:
            ni, nj = i + di, j + dj
            if 0 <= ni < nl and 0 <= nj < nu and (ni, nj) not in visited:
                stack.append((ni, nj))

    return SearchResult(
        lb_star=float(lb_grid[best[0]]),
        ub_star=float(ub_grid[best[1]]),
        error_min=float(error_min),
        states_visited=len(visited),
        trace=tuple(trace) if keep_trace else None,
    )


def exhaustive_search(frame, space: SearchSpace, bits: int) -> SearchResult:
    """Grid-global minimum of the quantization error.

    Ties are broken toward the smallest ub, then the largest lb.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    vals = _objective_values(frame, None)
    lb_grid, ub_grid = space.lb_grid, space.ub_grid
    best_err = np.inf
    best = (0, 0)
    for j in range(ub_grid.size):
        ub = float(ub_grid[j])
        for i in range(lb_grid.size - 1, -1, -1):
            err = _grid_error(vals, float(lb_grid[i]), ub, bits)
            if err < best_err:
                best_err = err
                best = (i, j)
    return SearchResult(
        lb_star=float(lb_grid[best[0]]),
        ub_star=float(ub_grid[best[1]]),
        error_min=float(best_err),
        states_visited=lb_grid.size * ub_grid.size,
    )


def minmax_bounds(frame, bits: int) -> QuantParams:
    """Full-range (min, max) bounds."""
    vals = frame.ravel() if isinstance(frame, Tensor) else np.asarray(frame).ravel()
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        raise DegenerateDistributionError("degenerate constant frame")
    return QuantParams(lb=lo, ub=hi, bits=bits)


def percentile_bounds(frame, k_low: float, k_high: float, bits: int) -> QuantParams:
    """Percentile-clipped bounds (p_{k_low}, p_{k_high})."""
    lo = percentile(frame, k_low)
    hi = percentile(frame, k_high)
    if lo == hi:
        raise DegenerateDistributionError("degenerate constant frame")
    return QuantParams(lb=lo, ub=hi, bits=bits)


@dataclass(frozen=True)
class FrameCalibrationRecord:
    """Per-frame diagnostics from calibrate_site."""

    frame_index: int
    initial_error: float
    final_error: float
    states_visited: int
    fallback: bool = False


_EPS = np.finfo(np.float64).eps


def _widened_minmax(vals: np.ndarray, bits: int) -> QuantParams:
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi:
        pad = max(abs(lo), 1.0) * _EPS
        lo, hi = lo - pad, hi + pad
    return QuantParams(lb=lo, ub=hi, bits=bits)


def _calibrate_frame(
    frame_vals: np.ndarray, cfg: SearchConfig, bits: int, index: int
) -> tuple[QuantParams, FrameCalibrationRecord]:
    try:
        space = build_search_space(frame_vals, cfg)
    except (DegenerateDistributionError, SearchSpaceCollapseError) as exc:
        warnings.warn(
            f"frame {index}: {exc}; falling back to minmax bounds",
            RuntimeWarning,
            stacklevel=3,
        )
        params = _widened_minmax(frame_vals, bits)
        err = _grid_error(frame_vals.ravel(), params.lb, params.ub, bits)
        rec = FrameCalibrationRecord(index, err, err, 0, fallback=True)
        return params, rec
    vals = _objective_values(frame_vals, cfg)
    i0 = _nearest_index(space.lb_grid, percentile(vals, 1.0))
    j0 = _nearest_index(space.ub_grid, percentile(vals, 99.0))
    err0 = _grid_error(vals, float(space.lb_grid[i0]), float(space.ub_grid[j0]), bits)
    result = btbi_search(frame_vals, space, cfg, bits)
    params = QuantParams(lb=result.lb_star, ub=result.ub_star, bits=bits)
    rec = FrameCalibrationRecord(index, err0, result.error_min, result.states_visited)
    return params, rec


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get("PMQ_THREADS")
    if env is not None:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f"PMQ_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValueError("PMQ_THREADS must be >= 1")
    else:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_tasks))


def calibrate_site_detailed(
    x: Tensor,
    per_frame: bool,
    cfg: SearchConfig,
    bits: int,
    site_name: str = "tensor",
) -> tuple[FrameQuantScheme, list[FrameCalibrationRecord]]:
    """calibrate_site plus per-frame diagnostics for reporting."""
    if not per_frame:
        params, rec = _calibrate_frame(x.data, cfg, bits, 0)
        scheme = FrameQuantScheme(site_name=site_name, per_frame=False, params=(params,))
        return scheme, [rec]

    if x.frame_axis is None:
        raise ValueError("per-frame calibration requires a tensor with frame_axis set")
    n = num_frames(x)
    frames = [frame_slice(x, i).data for i in range(n)]

    def run(i: int):
        try:
            return _calibrate_frame(frames[i], cfg, bits, i)
        except Exception as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc

    workers = _worker_count(n)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(n)))
    else:
        results = [run(i) for i in range(n)]

    scheme = FrameQuantScheme(
        site_name=site_name,
        per_frame=True,
        params=tuple(p for p, _ in results),
    )
    return scheme, [r for _, r in results]


def calibrate_site(
    x: Tensor,
    per_frame: bool,
    cfg: SearchConfig,
    bits: int,
    site_name: str = "tensor",
) -> FrameQuantScheme:
    """Search bounds for one site, independently per frame when requested."""
    scheme, _ = calibrate_site_detailed(x, per_frame, cfg, bits, site_name)
    return scheme
