"""Fine-stage bound refinement by progressive multi-teacher distillation.

A low-bit student is supervised jointly by intermediate-bit teachers and
the full-precision teacher. The blend warms up linearly:

    loss = (L_INT + a(t) * L_FP) / (1 + a(t)),   a(t) = min(1, t / T_warmup)

where each teacher contributes an output-reconstruction term plus a
feature-matching term weighted by lambda. Teachers are frozen; by default
only the clipping bounds of the student train.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np

from . import autograd
from .autograd import Graph, Node, TrainableParam
from .quantize import FrameQuantScheme, QuantParams
from .search import SearchConfig, calibrate_site
from .synth import (
    TAP_POINTS,
    FrameMixerModel,
    SyntheticDataset,
    SyntheticDatasetConfig,
    build_model_graph,
    collect_site_activations,
    forward_with_taps,
    make_dataset,
    train_model,
)
from .tensor import Tensor

__all__ = [
    "DistillConfig",
    "LossReport",
    "TeacherBundle",
    "StageResult",
    "PipelineResult",
    "DistillationDiverged",
    "alpha",
    "pmtd_loss",
    "distill_stage",
    "progressive_pipeline",
]

_STREAM_DISTILL = 5
_STREAM_PROBE = 6

BIT_LADDER = (8, 4, 2)


class DistillationDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one distillation run.

    ``lam`` weights the feature-matching terms (the "lambda" of the loss);
    ``t_warmup`` defaults to steps/4 when unset. ``teacher_bits`` lists the
    intermediate teacher precisions, highest first; its length is K.
    ``batch_size=None`` trains full-batch (deterministic descent).
    """

    steps: int = 200
    lr: float = 0.002
    seed: int = 0
    lam: float = 5.0
    t_warmup: int | None = None
    teacher_bits: tuple[int, ...] = ()
    tap_points: tuple[str, ...] = TAP_POINTS
    batch_size: int | None = None
    train_weights: bool = False
    nearest_teacher_only: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.t_warmup is not None and self.t_warmup < 1:
            raise ValueError("t_warmup must be >= 1")
        bits = tuple(int(b) for b in self.teacher_bits)
        object.__setattr__(self, "teacher_bits", bits)
        if any(b2 >= b1 for b1, b2 in zip(bits, bits[1:])):
            raise ValueError("teacher_bits must be strictly decreasing")
        if any(b < 1 for b in bits):
            raise ValueError("teacher_bits entries must be >= 1")
        object.__setattr__(self, "tap_points", tuple(self.tap_points))

    @property
    def warmup_steps(self) -> int:
        if self.t_warmup is not None:
            return self.t_warmup
        return max(1, self.steps // 4)

    @property
    def num_teachers(self) -> int:
        return len(self.teacher_bits)


def alpha(t: float, t_warmup: int) -> float:
    """Warm-up coefficient min(1, t / t_warmup)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t_warmup < 1:
        raise ValueError("t_warmup must be >= 1")
    return min(1.0, t / t_warmup)


@dataclass(frozen=True)
class LossReport:
    """Decomposed loss values at one step."""

    step: int
    alpha: float
    l_int: float
    l_fp: float
    l_rec: dict[str, float]
    l_feat: dict[str, float]
    l_pmtd: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "alpha": self.alpha,
            "l_int": self.l_int,
            "l_fp": self.l_fp,
            "l_rec": dict(self.l_rec),
            "l_feat": dict(self.l_feat),
            "l_pmtd": self.l_pmtd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls(
            step=int(d["step"]),
            alpha=float(d["alpha"]),
            l_int=float(d["l_int"]),
            l_fp=float(d["l_fp"]),
            l_rec={k: float(v) for k, v in d["l_rec"].items()},
            l_feat={k: float(v) for k, v in d["l_feat"].items()},
            l_pmtd=float(d["l_pmtd"]),
        )


@dataclass(frozen=True)
class TeacherBundle:
    """A frozen model at some precision (bits=None is full precision)."""

    model: FrameMixerModel
    schemes: dict[str, FrameQuantScheme] | None
    bits: int | None
    frozen: bool = True

    @property
    def label(self) -> str:
        return "fp" if self.bits is None else f"int{self.bits}"

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.model.weights_checksum().encode())
        if self.schemes is not None:
            for name in sorted(self.schemes):
                s = self.schemes[name]
                h.update(name.encode())
                h.update(str(s.per_frame).encode())
                for p in s.params:
                    h.update(np.float64(p.lb).tobytes())
                    h.update(np.float64(p.ub).tobytes())
                    h.update(str(p.bits).encode())
        return h.hexdigest()


def _teacher_eval(bundle: TeacherBundle, x: Tensor, taps: tuple[str, ...]):
    out, feats = forward_with_taps(bundle.model, x, bundle.schemes)
    return out.data, {name: feats[name].data for name in taps}


def pmtd_loss(
    graph: Graph,
    student_out: Node,
    student_feats: dict[str, Node],
    teachers: list[tuple[np.ndarray, dict[str, np.ndarray]]],
    fp_teacher: tuple[np.ndarray, dict[str, np.ndarray]],
    cfg: DistillConfig,
    t: int,
    alpha_value: float | None = None,
) -> tuple[Node, LossReport]:
    """Assemble the blended distillation loss; returns (loss node, report).

    ``teachers`` pairs with cfg.teacher_bits positionally. ``alpha_value``
    overrides the schedule (used to pin a=1 for FP-only stages).
    """
    k = len(teachers)
    if k != cfg.num_teachers:
        raise ValueError(
            f"got {k} teachers but cfg.teacher_bits declares {cfg.num_teachers}"
        )
    a = alpha(t, cfg.warmup_steps) if alpha_value is None else float(alpha_value)
    if k == 0 and a == 0.0:
        raise ValueError("no supervision signal")

    for tap in cfg.tap_points:
        if tap not in student_feats:
            raise ValueError(f"student is missing tap point {tap!r}")

    def teacher_terms(label, t_out, t_feats):
        l_rec = graph.mse_loss(student_out, graph.constant(t_out))
        feat_nodes = []
        for tap in cfg.tap_points:
            if tap not in t_feats:
                raise ValueError(f"teacher {label!r} is missing tap point {tap!r}")
            feat_nodes.append(
                graph.mse_loss(student_feats[tap], graph.constant(t_feats[tap]))
            )
        if feat_nodes:
            w = 1.0 / len(feat_nodes)
            l_feat = graph.scalar_combine(feat_nodes, [w] * len(feat_nodes))
        else:
            l_feat = graph.constant(0.0)
        return l_rec, l_feat

    labels = [f"int{b}" for b in cfg.teacher_bits]
    int_terms = []
    rec_nodes: dict[str, Node] = {}
    feat_nodes_by_label: dict[str, Node] = {}
    for label, (t_out, t_feats) in zip(labels, teachers):
        l_rec, l_feat = teacher_terms(label, t_out, t_feats)
        rec_nodes[label] = l_rec
        feat_nodes_by_label[label] = l_feat
        int_terms.extend([(l_rec, 1.0), (l_feat, cfg.lam)])
    if int_terms:
        l_int = graph.scalar_combine(
            [n for n, _ in int_terms], [w for _, w in int_terms]
        )
    else:
        l_int = graph.constant(0.0)

    fp_rec, fp_feat = teacher_terms("fp", fp_teacher[0], fp_teacher[1])
    rec_nodes["fp"] = fp_rec
    feat_nodes_by_label["fp"] = fp_feat
    l_fp = graph.scalar_combine([fp_rec, fp_feat], [1.0, cfg.lam])

    l_pmtd = graph.scalar_combine([l_int, l_fp], [1.0 / (1.0 + a), a / (1.0 + a)])

    graph.forward()
    report = LossReport(
        step=t,
        alpha=a,
        l_int=float(l_int.value),
        l_fp=float(l_fp.value),
        l_rec={k2: float(v.value) for k2, v in rec_nodes.items()},
        l_feat={k2: float(v.value) for k2, v in feat_nodes_by_label.items()},
        l_pmtd=float(l_pmtd.value),
    )
    return l_pmtd, report


def _bound_params_from_schemes(
    schemes: dict[str, FrameQuantScheme],
) -> dict[str, tuple[TrainableParam, TrainableParam]]:
    out = {}
    for site, scheme in schemes.items():
        lb = TrainableParam(
            f"{site}:lb", np.array([p.lb for p in scheme.params]), role="bound_lb"
        )
        ub = TrainableParam(
            f"{site}:ub", np.array([p.ub for p in scheme.params]), role="bound_ub"
        )
        out[site] = (lb, ub)
    return out


def _schemes_from_bound_params(
    bound_params: dict[str, tuple[TrainableParam, TrainableParam]],
    template: dict[str, FrameQuantScheme],
    bits: int,
) -> dict[str, FrameQuantScheme]:
    out = {}
    for site, (lb, ub) in bound_params.items():
        params = tuple(
            QuantParams(lb=float(lo), ub=float(hi), bits=bits)
            for lo, hi in zip(lb.value, ub.value)
        )
        out[site] = FrameQuantScheme(
            site_name=site, per_frame=template[site].per_frame, params=params
        )
    return out


@dataclass(frozen=True)
class StageResult:
    student_bits: int
    teacher_labels: tuple[str, ...]
    schemes: dict[str, FrameQuantScheme]
    log: tuple[LossReport, ...]
    initial_loss: float
    final_loss: float
    teacher_checksums_before: dict[str, str]
    teacher_checksums_after: dict[str, str]
    model: FrameMixerModel
    reverted: bool = False


def _philox(seed: int, stream: int, extra: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=(int(seed), stream, extra)))
    )


def distill_stage(
    model: FrameMixerModel,
    dataset: SyntheticDataset,
    student_bits: int,
    teachers: list[TeacherBundle],
    fp_teacher: TeacherBundle,
    init_schemes: dict[str, FrameQuantScheme],
    cfg: DistillConfig,
) -> StageResult:
    """Refine the student's clipping bounds against the given teachers.

    The probe losses bracketing the run are evaluated at a=1 on a fixed
    batch, so final_loss <= initial_loss is comparable across the stage.
    """
    if fp_teacher.bits is not None:
        raise ValueError("fp_teacher must be a full-precision bundle (bits=None)")
    got_bits = tuple(b.bits for b in teachers)
    if got_bits != cfg.teacher_bits:
        raise ValueError(
            f"missing teacher: cfg.teacher_bits={cfg.teacher_bits} "
            f"but got bundles for {got_bits}"
        )
    if any(b.bits <= student_bits for b in teachers):
        raise ValueError("all intermediate teachers must have more bits than the student")

    k = len(teachers)
    before = {b.label: b.checksum() for b in [*teachers, fp_teacher]}

    bound_params = _bound_params_from_schemes(init_schemes)
    weight_params = None
    if cfg.train_weights:
        weight_params = {
            "w1": TrainableParam("w1", model.w1.copy(), role="weight"),
            "w2": TrainableParam("w2", model.w2.copy(), role="weight"),
        }

    xs = dataset.inputs.data
    n = xs.shape[0]
    full_batch = cfg.batch_size is None or cfg.batch_size >= n
    rng = _philox(cfg.seed, _STREAM_DISTILL, student_bits)
    probe_rng = _philox(cfg.seed, _STREAM_PROBE, student_bits)
    probe_idx = (
        np.arange(n) if full_batch else probe_rng.integers(0, n, size=cfg.batch_size)
    )

    def all_params():
        ps = []
        for lb, ub in bound_params.values():
            ps.extend([lb, ub])
        if weight_params is not None:
            ps.extend(weight_params.values())
        return ps

    def current_model() -> FrameMixerModel:
        if weight_params is None:
            return model
        return FrameMixerModel(
            w1=weight_params["w1"].value, w2=weight_params["w2"].value
        )

    def run_batch(idx, t, alpha_value, backprop):
        x = Tensor(xs[idx], frame_axis=1)
        teacher_vals = [_teacher_eval(b, x, cfg.tap_points) for b in teachers]
        fp_vals = _teacher_eval(fp_teacher, x, cfg.tap_points)
        g = Graph()
        out, taps = build_model_graph(
            g,
            current_model(),
            xs[idx],
            weight_params=weight_params,
            bound_params=bound_params,
            bits=student_bits,
        )
        loss_node, report = pmtd_loss(
            g, out, taps, teacher_vals, fp_vals, cfg, t, alpha_value=alpha_value
        )
        if not math.isfinite(report.l_pmtd):
            raise DistillationDiverged(
                f"non-finite loss at step {t} of int{student_bits} stage"
            )
        if backprop:
            g.backward(loss_node)
            autograd.sgd_step(all_params(), cfg.lr)
        return report

    initial_loss = run_batch(probe_idx, 0, 1.0, backprop=False).l_pmtd

    log = []
    pinned_alpha = 1.0 if k == 0 else None
    for t in range(cfg.steps):
        idx = np.arange(n) if full_batch else rng.integers(0, n, size=cfg.batch_size)
        log.append(run_batch(idx, t, pinned_alpha, backprop=True))

    final_loss = run_batch(probe_idx, cfg.steps, 1.0, backprop=False).l_pmtd

    # A refinement stage must not ship a worse calibration than its input;
    # near-flat landscapes (high bit-widths) can end marginally above start.
    reverted = final_loss > initial_loss
    if reverted:
        schemes = init_schemes
        out_model = model
        final_loss = initial_loss
    else:
        schemes = _schemes_from_bound_params(bound_params, init_schemes, student_bits)
        out_model = current_model()

    after = {b.label: b.checksum() for b in [*teachers, fp_teacher]}
    return StageResult(
        student_bits=student_bits,
        teacher_labels=tuple(before),
        schemes=schemes,
        log=tuple(log),
        initial_loss=initial_loss,
        final_loss=final_loss,
        teacher_checksums_before=before,
        teacher_checksums_after=after,
        model=out_model,
        reverted=reverted,
    )


@dataclass(frozen=True)
class PipelineResult:
    stages: tuple[StageResult, ...]
    model: FrameMixerModel
    dataset: SyntheticDataset
    fp_teacher: TeacherBundle
    teachers: tuple[TeacherBundle, ...]

    @property
    def final_schemes(self) -> dict[str, FrameQuantScheme]:
        return self.stages[-1].schemes


def progressive_pipeline(
    target_bits: int,
    cfg: DistillConfig,
    data_cfg: SyntheticDatasetConfig | None = None,
    search_cfg: SearchConfig | None = None,
    pretrain_steps: int = 300,
    pretrain_lr: float = 0.05,
    hidden: int = 32,
    ladder: tuple[int, ...] | None = None,
    model: FrameMixerModel | None = None,
    dataset: SyntheticDataset | None = None,
) -> PipelineResult:
    """Train the teacher ladder FP -> 8 -> 4 -> 2, stopping at target_bits.

    Every stage's coarse bound init comes from the percentile-space
    backtracking search on the full-precision activations. ``ladder``
    overrides the default progression (e.g. ``(2,)`` is the FP-teacher-only
    baseline at equal student step budget). A pre-trained ``model`` and its
    ``dataset`` may be passed in to skip the built-in task preparation.
    """
    if target_bits not in BIT_LADDER:
        raise ValueError(f"target_bits must be one of {BIT_LADDER}")
    if ladder is None:
        ladder = tuple(b for b in BIT_LADDER if b >= target_bits)
    if ladder[-1] != target_bits:
        raise ValueError("ladder must end at target_bits")

    data_cfg = data_cfg or SyntheticDatasetConfig(seed=cfg.seed)
    search_cfg = search_cfg or SearchConfig()
    if dataset is None:
        dataset = make_dataset(data_cfg)
    if model is None:
        base = FrameMixerModel.seeded(dim=data_cfg.dim, hidden=hidden, seed=cfg.seed)
        model, _ = train_model(
            base, dataset, steps=pretrain_steps, lr=pretrain_lr, seed=cfg.seed
        )
    fp_teacher = TeacherBundle(model=model, schemes=None, bits=None)
    activations = collect_site_activations(model, dataset.inputs)

    stages: list[StageResult] = []
    intermediates: list[TeacherBundle] = []
    for bits in ladder:
        init = {
            site: calibrate_site(act, True, search_cfg, bits, site_name=site)
            for site, act in activations.items()
        }
        teacher_list = list(intermediates)
        if cfg.nearest_teacher_only and teacher_list:
            teacher_list = [teacher_list[-1]]
        stage_cfg = replace(cfg, teacher_bits=tuple(b.bits for b in teacher_list))
        result = distill_stage(
            model, dataset, bits, teacher_list, fp_teacher, init, stage_cfg
        )
        stages.append(result)
        intermediates.append(
            TeacherBundle(model=result.model, schemes=result.schemes, bits=bits)
        )

    return PipelineResult(
        stages=tuple(stages),
        model=model,
        dataset=dataset,
        fp_teacher=fp_teacher,
        teachers=tuple(intermediates),
    )
