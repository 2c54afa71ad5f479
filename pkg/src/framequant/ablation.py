"""Component ablation at 2-bit: none / +per-frame / +search / +distillation.

Each seed builds its own synthetic task and pretrained model; the four
configurations then share that model so the comparison isolates the
quantization components. Quality is PSNR of the quantized output against
the full-precision output on an independent eval split, i.e. how much
fidelity the quantization destroys.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, replace

from .distill import DistillConfig, progressive_pipeline
from .quantize import FrameQuantScheme
from .search import SearchConfig, _widened_minmax, calibrate_site
from .synth import (
    FrameMixerModel,
    SyntheticDatasetConfig,
    collect_site_activations,
    eval_model,
    make_dataset,
    train_model,
)
from .tensor import Tensor, frame_slice, num_frames

__all__ = ["AblationRow", "AblationResult", "ABLATION_CONFIGS", "run_ablation"]

ABLATION_CONFIGS = (
    "none",
    "+per_frame",
    "+per_frame+bmfq",
    "+per_frame+bmfq+pmtd",
)


@dataclass(frozen=True)
class AblationRow:
    label: str
    median_psnr: float
    median_mse: float
    psnr_per_seed: tuple[float, ...]
    mse_per_seed: tuple[float, ...]


@dataclass(frozen=True)
class AblationResult:
    rows: tuple[AblationRow, ...]
    seeds: tuple[int, ...]
    bits: int

    def ordering_holds(self) -> bool:
        medians = [r.median_psnr for r in self.rows]
        return all(a <= b for a, b in zip(medians, medians[1:]))


def _minmax_schemes(
    activations: dict[str, Tensor], bits: int, per_frame: bool
) -> dict[str, FrameQuantScheme]:
    out = {}
    for site, act in activations.items():
        if per_frame:
            params = tuple(
                _widened_minmax(frame_slice(act, i).data, bits)
                for i in range(num_frames(act))
            )
        else:
            params = (_widened_minmax(act.data, bits),)
        out[site] = FrameQuantScheme(site_name=site, per_frame=per_frame, params=params)
    return out


def run_ablation(
    seeds: list[int],
    bits: int = 2,
    cfg: DistillConfig | None = None,
    data_cfg: SyntheticDatasetConfig | None = None,
    search_cfg: SearchConfig | None = None,
    pretrain_steps: int = 300,
    pretrain_lr: float = 0.05,
    hidden: int = 32,
) -> AblationResult:
    """Evaluate the four component configurations across seeds."""
    if not seeds:
        raise ValueError("seed list must not be empty")
    cfg = cfg or DistillConfig()
    search_cfg = search_cfg or SearchConfig()

    psnr: dict[str, list[float]] = {name: [] for name in ABLATION_CONFIGS}
    mse: dict[str, list[float]] = {name: [] for name in ABLATION_CONFIGS}

    for seed in seeds:
        base_data = data_cfg or SyntheticDatasetConfig(seed=seed)
        base_data = replace(base_data, seed=seed)
        dataset = make_dataset(base_data)
        eval_set = make_dataset(replace(base_data, split=1))
        model0 = FrameMixerModel.seeded(dim=base_data.dim, hidden=hidden, seed=seed)
        model, _ = train_model(
            model0, dataset, steps=pretrain_steps, lr=pretrain_lr, seed=seed
        )
        activations = collect_site_activations(model, dataset.inputs)

        schemes_by_config = {
            "none": _minmax_schemes(activations, bits, per_frame=False),
            "+per_frame": _minmax_schemes(activations, bits, per_frame=True),
            "+per_frame+bmfq": {
                site: calibrate_site(act, True, search_cfg, bits, site_name=site)
                for site, act in activations.items()
            },
        }
        pipeline = progressive_pipeline(
            bits,
            replace(cfg, seed=seed),
            data_cfg=base_data,
            search_cfg=search_cfg,
            model=model,
            dataset=dataset,
        )
        schemes_by_config["+per_frame+bmfq+pmtd"] = pipeline.final_schemes

        for name in ABLATION_CONFIGS:
            rep = eval_model(model, schemes_by_config[name], eval_set)
            psnr[name].append(rep.psnr_vs_fp)
            mse[name].append(rep.mse_vs_fp)

    rows = tuple(
        AblationRow(
            label=name,
            median_psnr=float(statistics.median(psnr[name])),
            median_mse=float(statistics.median(mse[name])),
            psnr_per_seed=tuple(psnr[name]),
            mse_per_seed=tuple(mse[name]),
        )
        for name in ABLATION_CONFIGS
    )
    return AblationResult(rows=rows, seeds=tuple(seeds), bits=bits)
