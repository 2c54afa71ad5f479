"""Synthetic multi-frame task and model at desk scale.

The generator manufactures frames with deliberately heterogeneous value
ranges (per-frame mean/scale offsets plus optional outliers) so that
per-frame calibration has something real to adapt to. The model is a
single cross-frame attention block between two linear maps, with every
matmul input exposed as a named quantization site.

All randomness flows through Philox counter-based streams with Box-Muller
normals, so identical configs reproduce identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd
from .autograd import Graph, Node, TrainableParam, softmax_values
from .quantize import FrameQuantScheme, _fq_values
from .tensor import Tensor, mse, psnr

__all__ = [
    "SyntheticDatasetConfig",
    "SyntheticDataset",
    "FrameMixerModel",
    "EvalReport",
    "gen_frames",
    "make_dataset",
    "forward_with_taps",
    "collect_site_activations",
    "build_model_graph",
    "train_model",
    "eval_model",
    "TAP_POINTS",
]

# Stream ids for independent Philox substreams of one seed.
_STREAM_DATA = 1
_STREAM_TARGET_MAP = 2
_STREAM_MODEL = 3
_STREAM_PRETRAIN = 4

TAP_POINTS = ("block0.hidden", "block0.attn_out")


def _philox(seed: int, stream: int, extra: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(int(seed), stream, extra)))
    )


def _box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    """n standard normals from uniform draws via Box-Muller."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps log() finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_frames: int = 3
    dim: int = 16
    samples: int = 2048
    mu: tuple[float, ...] = (0.0, 2.0, 4.0)
    sigma: tuple[float, ...] = (0.5, 1.0, 2.0)
    outlier_rate: float = 0.002
    outlier_mag: float = 20.0
    seed: int = 0
    split: int = 0  # distinct splits share the target map but not the draws

    def __post_init__(self):
        if len(self.mu) != self.num_frames or len(self.sigma) != self.num_frames:
            raise ValueError("mu and sigma must have one entry per frame")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("sigma entries must be > 0")
        if not 0.0 <= self.outlier_rate <= 0.01:
            raise ValueError("outlier_rate must be in [0, 0.01]")
        if self.samples < 1 or self.dim < 1 or self.num_frames < 1:
            raise ValueError("samples, dim and num_frames must be >= 1")


def gen_frames(cfg: SyntheticDatasetConfig) -> tuple[Tensor, Tensor]:
    """Inputs of shape (samples, frames, dim) and matching targets."""
    shape = (cfg.samples, cfg.num_frames, cfg.dim)
    rng = _philox(cfg.seed, _STREAM_DATA, cfg.split)
    z = _box_muller(rng, int(np.prod(shape))).reshape(shape)
    mu = np.asarray(cfg.mu)[None, :, None]
    sigma = np.asarray(cfg.sigma)[None, :, None]
    x = mu + sigma * z
    if cfg.outlier_rate > 0.0:
        flip = rng.random(shape) < cfg.outlier_rate
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        spikes = mu + sign * cfg.outlier_mag * sigma
        x = np.where(flip, spikes, x)

    map_rng = _philox(cfg.seed, _STREAM_TARGET_MAP)
    f, d = cfg.num_frames, cfg.dim
    frame_mix, _ = np.linalg.qr(_box_muller(map_rng, f * f).reshape(f, f))
    dim_rot, _ = np.linalg.qr(_box_muller(map_rng, d * d).reshape(d, d))
    y = np.maximum(np.einsum("fg,sgd->sfd", frame_mix, x), 0.0) @ dim_rot

    return Tensor(x, frame_axis=1), Tensor(y, frame_axis=1)


@dataclass(frozen=True)
class SyntheticDataset:
    inputs: Tensor
    targets: Tensor
    cfg: SyntheticDatasetConfig

    @property
    def samples(self) -> int:
        return self.inputs.shape[0]


def make_dataset(cfg: SyntheticDatasetConfig) -> SyntheticDataset:
    inputs, targets = gen_frames(cfg)
    return SyntheticDataset(inputs=inputs, targets=targets, cfg=cfg)


@dataclass
class FrameMixerModel:
    """Two linear maps around one cross-frame attention step."""

    w1: np.ndarray  # (dim, hidden)
    w2: np.ndarray  # (hidden, dim)

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def score_scale(self) -> float:
        return 1.0 / math.sqrt(self.hidden)

    @classmethod
    def seeded(cls, dim: int = 16, hidden: int = 32, seed: int = 0) -> "FrameMixerModel":
        rng = _philox(seed, _STREAM_MODEL)
        w1 = _box_muller(rng, dim * hidden).reshape(dim, hidden) / math.sqrt(dim)
        w2 = _box_muller(rng, hidden * dim).reshape(hidden, dim) / math.sqrt(hidden)
        return cls(w1=w1, w2=w2)

    @staticmethod
    def site_names() -> tuple[str, ...]:
        return (
            "block0.linear",
            "block0.qk_matmul",
            "block0.softmax_in",
            "block0.av_matmul",
            "block1.linear",
        )

    def weights_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.w1).tobytes())
        h.update(np.ascontiguousarray(self.w2).tobytes())
        return h.hexdigest()


def _scheme_bound_arrays(scheme: FrameQuantScheme) -> tuple[np.ndarray, np.ndarray]:
    lb = np.array([p.lb for p in scheme.params])
    ub = np.array([p.ub for p in scheme.params])
    return lb, ub


def _apply_scheme(arr: np.ndarray, scheme: FrameQuantScheme, frame_axis: int) -> np.ndarray:
    lb, ub = _scheme_bound_arrays(scheme)
    if scheme.per_frame:
        if arr.shape[frame_axis] != scheme.frame_count:
            raise ValueError(
                f"site {scheme.site_name!r}: tensor has {arr.shape[frame_axis]} "
                f"frames, scheme has {scheme.frame_count}"
            )
        bshape = tuple(
            arr.shape[ax] if ax == frame_axis else 1 for ax in range(arr.ndim)
        )
    else:
        bshape = (1,) * arr.ndim
    return _fq_values(arr, lb.reshape(bshape), ub.reshape(bshape), scheme.bits)


def _check_site_cover(model: FrameMixerModel, schemes: dict) -> None:
    expected = set(model.site_names())
    got = set(schemes)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ValueError(f"site-name mismatch: missing={missing} extra={extra}")


def forward_with_taps(
    model: FrameMixerModel,
    x: Tensor,
    schemes: dict[str, FrameQuantScheme] | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Run the model, fake-quantizing at covered sites; returns output + taps.

    ``schemes=None`` is the exact full-precision path.
    """
    if schemes is not None:
        _check_site_cover(model, schemes)
    arr = x.data

    def q(name: str, a: np.ndarray) -> np.ndarray:
        if schemes is None:
            return a
        return _apply_scheme(a, schemes[name], frame_axis=1)

    x0 = q("block0.linear", arr)
    h = np.maximum(x0 @ model.w1, 0.0)
    hq = q("block0.qk_matmul", h)
    scores = np.matmul(hq, np.swapaxes(hq, -1, -2)) * model.score_scale
    attn = softmax_values(scores)
    aq = q("block0.softmax_in", attn)
    vq = q("block0.av_matmul", h)
    mixed = np.matmul(aq, vq)
    mq = q("block1.linear", mixed)
    out = mq @ model.w2

    taps = {
        "block0.hidden": Tensor(h, frame_axis=1),
        "block0.attn_out": Tensor(mixed, frame_axis=1),
    }
    return Tensor(out, frame_axis=1), taps


def collect_site_activations(model: FrameMixerModel, x: Tensor) -> dict[str, Tensor]:
    """Full-precision values entering each quantization site."""
    arr = x.data
    h = np.maximum(arr @ model.w1, 0.0)
    scores = np.matmul(h, np.swapaxes(h, -1, -2)) * model.score_scale
    attn = softmax_values(scores)
    mixed = np.matmul(attn, h)
    return {
        "block0.linear": Tensor(arr, frame_axis=1),
        "block0.qk_matmul": Tensor(h, frame_axis=1),
        "block0.softmax_in": Tensor(attn, frame_axis=1),
        "block0.av_matmul": Tensor(h, frame_axis=1),
        "block1.linear": Tensor(mixed, frame_axis=1),
    }


def build_model_graph(
    g: Graph,
    model: FrameMixerModel,
    x_value: np.ndarray,
    weight_params: dict[str, TrainableParam] | None = None,
    bound_params: dict[str, tuple[TrainableParam, TrainableParam]] | None = None,
    bits: int | None = None,
) -> tuple[Node, dict[str, Node]]:
    """Differentiable mirror of forward_with_taps.

    ``bound_params`` maps site names to (lb, ub) TrainableParams; when given,
    ``bits`` selects the fake-quant grid at every site.
    """
    if bound_params is not None:
        if bits is None:
            raise ValueError("bits required when bound_params are given")
        _check_site_cover(model, bound_params)

    x = g.input("x", x_value)
    w1 = g.param(weight_params["w1"]) if weight_params else g.constant(model.w1)
    w2 = g.param(weight_params["w2"]) if weight_params else g.constant(model.w2)

    def q(name: str, node: Node) -> Node:
        if bound_params is None:
            return node
        lb, ub = bound_params[name]
        frame_axis = 1 if lb.value.size > 1 else None
        return g.ste_fakequant(node, g.param(lb), g.param(ub), bits, frame_axis)

    batch, frames = x_value.shape[0], x_value.shape[1]
    x0 = q("block0.linear", x)
    h = g.relu(g.matmul(x0, w1))
    hq = q("block0.qk_matmul", h)
    scale = g.constant(np.full((batch, frames, frames), model.score_scale))
    scores = g.mul(g.matmul(hq, hq, transpose_b=True), scale)
    attn = g.softmax(scores)
    aq = q("block0.softmax_in", attn)
    vq = q("block0.av_matmul", h)
    mixed = g.matmul(aq, vq)
    mq = q("block1.linear", mixed)
    out = g.matmul(mq, w2)

    taps = {"block0.hidden": h, "block0.attn_out": mixed}
    return out, taps


def train_model(
    model: FrameMixerModel,
    dataset: SyntheticDataset,
    steps: int = 300,
    lr: float = 0.05,
    batch_size: int = 128,
    seed: int = 0,
) -> tuple[FrameMixerModel, list[float]]:
    """Fit the full-precision weights to the synthetic task; returns a new model."""
    w1 = TrainableParam("w1", model.w1.copy(), role="weight")
    w2 = TrainableParam("w2", model.w2.copy(), role="weight")
    rng = _philox(seed, _STREAM_PRETRAIN)
    xs, ys = dataset.inputs.data, dataset.targets.data
    history: list[float] = []
    for _ in range(steps):
        idx = rng.integers(0, xs.shape[0], size=min(batch_size, xs.shape[0]))
        g = Graph()
        out, _ = build_model_graph(
            g, model, xs[idx], weight_params={"w1": w1, "w2": w2}
        )
        loss = g.mse_loss(out, g.constant(ys[idx]))
        g.forward()
        g.backward(loss)
        autograd.sgd_step([w1, w2], lr)
        history.append(float(loss.value))
    return FrameMixerModel(w1=w1.value, w2=w2.value), history


@dataclass(frozen=True)
class EvalReport:
    mse_vs_fp: float
    psnr_vs_fp: float
    mse_vs_target: float
    psnr_vs_target: float


def eval_model(
    model: FrameMixerModel,
    schemes: dict[str, FrameQuantScheme] | None,
    dataset: SyntheticDataset,
) -> EvalReport:
    """MSE/PSNR of the (optionally quantized) model vs the FP path and targets."""
    fp_out, _ = forward_with_taps(model, dataset.inputs, None)
    q_out, _ = forward_with_taps(model, dataset.inputs, schemes)
    fp_peak = float(fp_out.data.max() - fp_out.data.min())
    tgt = dataset.targets
    tgt_peak = float(tgt.data.max() - tgt.data.min())
    return EvalReport(
        mse_vs_fp=mse(q_out, fp_out),
        psnr_vs_fp=psnr(q_out, fp_out, fp_peak),
        mse_vs_target=mse(q_out, tgt),
        psnr_vs_target=psnr(q_out, tgt, tgt_peak),
    )


def eval_config(cfg: SyntheticDatasetConfig, split: int) -> SyntheticDatasetConfig:
    """Same distribution and target map, independent draws."""
    return replace(cfg, split=split)
