"""framequant: per-frame post-training quantization calibration.

Coarse stage: percentile-constrained backtracking search for per-frame
clipping bounds. Fine stage: progressive multi-teacher distillation that
refines the bounds of a low-bit student against intermediate-bit and
full-precision teachers.
"""

from .ablation import AblationResult, AblationRow, run_ablation
from .autograd import Graph, GradcheckReport, TrainableParam, gradcheck, sgd_step
from .distill import (
    DistillConfig,
    LossReport,
    PipelineResult,
    StageResult,
    TeacherBundle,
    alpha,
    distill_stage,
    pmtd_loss,
    progressive_pipeline,
)
from .quantize import (
    FrameQuantScheme,
    QuantParams,
    clamp,
    fake_quantize,
    quant_error,
    quantize_per_frame,
)
from .search import (
    SearchConfig,
    SearchResult,
    SearchSpace,
    btbi_search,
    build_search_space,
    calibrate_site,
    exhaustive_search,
    minmax_bounds,
    percentile_bounds,
)
from .synth import (
    EvalReport,
    FrameMixerModel,
    SyntheticDataset,
    SyntheticDatasetConfig,
    eval_model,
    forward_with_taps,
    gen_frames,
    make_dataset,
    train_model,
)
from .tensor import Tensor, frame_slice, mse, percentile, psnr, stack_frames
from .tensorio import read_bounds, read_tensor, write_bounds, write_tensor

__version__ = "0.1.0"

__all__ = [
    "AblationResult",
    "AblationRow",
    "DistillConfig",
    "EvalReport",
    "FrameMixerModel",
    "FrameQuantScheme",
    "GradcheckReport",
    "Graph",
    "LossReport",
    "PipelineResult",
    "QuantParams",
    "SearchConfig",
    "SearchResult",
    "SearchSpace",
    "StageResult",
    "SyntheticDataset",
    "SyntheticDatasetConfig",
    "TeacherBundle",
    "Tensor",
    "TrainableParam",
    "alpha",
    "btbi_search",
    "build_search_space",
    "calibrate_site",
    "clamp",
    "distill_stage",
    "eval_model",
    "exhaustive_search",
    "fake_quantize",
    "forward_with_taps",
    "frame_slice",
    "gen_frames",
    "gradcheck",
    "make_dataset",
    "minmax_bounds",
    "mse",
    "percentile",
    "percentile_bounds",
    "pmtd_loss",
    "progressive_pipeline",
    "psnr",
    "quant_error",
    "quantize_per_frame",
    "read_bounds",
    "read_tensor",
    "run_ablation",
    "sgd_step",
    "stack_frames",
    "train_model",
    "write_bounds",
    "write_tensor",
]
