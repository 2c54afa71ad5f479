"""Command-line surface: calibrate, quantize, distill, ablate, report.

Exit codes: 0 success, 1 input/config error, 2 internal assertion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .ablation import run_ablation
from .distill import DistillConfig, progressive_pipeline
from .quantize import quantize_per_frame
from .report import (
    save_ablation_chart,
    save_loss_curves,
    write_ablation_csv,
    write_loss_summary_csv,
)
from .search import SearchConfig, calibrate_site_detailed
from .synth import SyntheticDatasetConfig
from .tensor import mse, psnr
from .tensorio import (
    read_bounds,
    read_loss_log,
    read_tensor,
    write_bounds,
    write_loss_log,
    write_tensor,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_ASSERT = 2


class CliError(Exception):
    """Input or configuration problem; maps to exit code 1."""


class OrderingViolation(Exception):
    """A result-level assertion failed; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this CLI reserves 2 for
    # internal assertions.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="framequant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", parents=[], help="search clipping bounds for an activation dump")
    c.add_argument("input", help="PMQT tensor file")
    c.add_argument("--bits", type=int, required=True)
    c.add_argument("--per-frame", action="store_true")
    c.add_argument("--frame-axis", type=int, default=0)
    c.add_argument("--grid", type=int, default=32, help="grid points per bound axis")
    c.add_argument("--epsilon-rel", type=float, default=0.01)
    c.add_argument("--subsample", type=int, default=None)
    c.add_argument("--site", default="tensor", help="site name recorded in the bounds file")
    c.add_argument("--out", required=True, help="output bounds file (JSON)")

    q = sub.add_parser("quantize", help="fake-quantize a tensor with stored bounds")
    q.add_argument("input", help="PMQT tensor file")
    q.add_argument("bounds", help="bounds file (JSON)")
    q.add_argument("--site", default=None, help="site to apply (default: sole site)")
    q.add_argument("--frame-axis", type=int, default=0)
    q.add_argument("--out", required=True, help="output PMQT tensor file")

    d = sub.add_parser("distill", help="run the progressive teacher ladder on the toy task")
    d.add_argument("config", help="run configuration (JSON)")
    d.add_argument("--target-bits", type=int, required=True, choices=(8, 4, 2))
    d.add_argument("--out-dir", required=True)

    a = sub.add_parser("ablate", help="component ablation at low bit-width")
    a.add_argument("--seeds", type=int, nargs="+", required=True)
    a.add_argument("--bits", type=int, default=2)
    a.add_argument("--steps", type=int, default=200)
    a.add_argument("--samples", type=int, default=768)
    a.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("report", help="render figures and CSV from distill logs")
    r.add_argument("run_dir", help="distill output directory (or one loss log file)")
    r.add_argument("--out-dir", required=True)
    return p


# -- calibrate ---------------------------------------------------------------


def _cmd_calibrate(args) -> int:
    tensor = _read_tensor_checked(args.input)
    if args.per_frame:
        if not 0 <= args.frame_axis < tensor.ndim:
            raise CliError(f"--frame-axis {args.frame_axis} invalid for shape {tensor.shape}")
        tensor = tensor.with_frame_axis(args.frame_axis)
    try:
        cfg = SearchConfig(
            grid_points=args.grid,
            epsilon_rel=args.epsilon_rel,
            subsample=args.subsample,
        )
        scheme, records = calibrate_site_detailed(
            tensor, args.per_frame, cfg, args.bits, site_name=args.site
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_bounds(args.out, {scheme.site_name: scheme})
    print(f"site {scheme.site_name}: bits={args.bits} per_frame={scheme.per_frame}")
    for rec, params in zip(records, scheme.params):
        tag = " (minmax fallback)" if rec.fallback else ""
        print(
            f"  frame {rec.frame_index}: bounds [{params.lb:.6g}, {params.ub:.6g}]"
            f" error {rec.initial_error:.6g} -> {rec.final_error:.6g}"
            f" states {rec.states_visited}{tag}"
        )
    print(f"wrote {args.out}")
    return EXIT_OK


def _read_tensor_checked(path: str):
    if not os.path.exists(path):
        raise CliError(f"input file not found: {path}")
    try:
        return read_tensor(path)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


# -- quantize -----------------------------------------------------------------


def _cmd_quantize(args) -> int:
    tensor = _read_tensor_checked(args.input)
    if not os.path.exists(args.bounds):
        raise CliError(f"bounds file not found: {args.bounds}")
    try:
        schemes = read_bounds(args.bounds)
    except ValueError as exc:
        raise CliError(f"{args.bounds}: {exc}") from None
    if args.site is not None:
        if args.site not in schemes:
            raise CliError(f"site {args.site!r} not present in {args.bounds}")
        scheme = schemes[args.site]
    elif len(schemes) == 1:
        scheme = next(iter(schemes.values()))
    else:
        raise CliError(f"{args.bounds} has {len(schemes)} sites; pick one with --site")

    try:
        if scheme.per_frame:
            if not 0 <= args.frame_axis < tensor.ndim:
                raise CliError(
                    f"--frame-axis {args.frame_axis} invalid for shape {tensor.shape}"
                )
            tensor = tensor.with_frame_axis(args.frame_axis)
        quantized = quantize_per_frame(tensor, scheme)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_tensor(args.out, quantized)
    err = mse(tensor, quantized)
    peak = float(tensor.data.max() - tensor.data.min())
    line = f"site {scheme.site_name}: bits={scheme.bits} mse={err:.6g}"
    if peak > 0:
        line += f" psnr={psnr(tensor, quantized, peak):.3f} dB"
    print(line)
    print(f"wrote {args.out}")
    return EXIT_OK


# -- distill -------------------------------------------------------------------


_CONFIG_KEYS = {
    "steps", "lr", "seed", "lambda", "lam", "t_warmup", "tap_points",
    "batch_size", "train_weights", "nearest_teacher_only",
    "data", "search", "pretrain", "hidden",
}
_DATA_KEYS = {
    "num_frames", "dim", "samples", "mu", "sigma",
    "outlier_rate", "outlier_mag",
}
_SEARCH_KEYS = {"grid_points", "epsilon_rel", "max_states", "subsample"}
_PRETRAIN_KEYS = {"steps", "lr"}


def load_run_config(path: str):
    """Parse the distill run configuration JSON."""
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: top level must be an object")
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise CliError(f"{path}: unknown config fields: {sorted(unknown)}")

    def sub(doc_key, allowed):
        d = doc.get(doc_key, {})
        if not isinstance(d, dict):
            raise CliError(f"{path}: {doc_key!r} must be an object")
        bad = set(d) - allowed
        if bad:
            raise CliError(f"{path}: unknown {doc_key} fields: {sorted(bad)}")
        return d

    data = sub("data", _DATA_KEYS)
    search = sub("search", _SEARCH_KEYS)
    pretrain = sub("pretrain", _PRETRAIN_KEYS)

    kwargs = {}
    for key in ("steps", "lr", "seed", "t_warmup", "batch_size",
                "train_weights", "nearest_teacher_only"):
        if key in doc:
            kwargs[key] = doc[key]
    if "lambda" in doc and "lam" in doc:
        raise CliError(f"{path}: give either 'lambda' or 'lam', not both")
    if "lambda" in doc:
        kwargs["lam"] = doc["lambda"]
    if "lam" in doc:
        kwargs["lam"] = doc["lam"]
    if "tap_points" in doc:
        kwargs["tap_points"] = tuple(doc["tap_points"])

    try:
        cfg = DistillConfig(**kwargs)
        seed = cfg.seed
        data_kwargs = dict(data)
        for tup_key in ("mu", "sigma"):
            if tup_key in data_kwargs:
                data_kwargs[tup_key] = tuple(data_kwargs[tup_key])
        data_cfg = SyntheticDatasetConfig(seed=seed, **data_kwargs)
        search_cfg = SearchConfig(**search)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None

    opts = {
        "pretrain_steps": int(pretrain.get("steps", 300)),
        "pretrain_lr": float(pretrain.get("lr", 0.05)),
        "hidden": int(doc.get("hidden", 32)),
    }
    return cfg, data_cfg, search_cfg, opts


def _cmd_distill(args) -> int:
    cfg, data_cfg, search_cfg, opts = load_run_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    result = progressive_pipeline(
        args.target_bits, cfg, data_cfg=data_cfg, search_cfg=search_cfg, **opts
    )
    for stage in result.stages:
        stage_dir = os.path.join(args.out_dir, f"stage_int{stage.student_bits}")
        os.makedirs(stage_dir, exist_ok=True)
        write_bounds(os.path.join(stage_dir, "bounds.json"), stage.schemes)
        write_loss_log(os.path.join(stage_dir, "loss_log.jsonl"), stage.log)
        teachers = "+".join(stage.teacher_labels)
        print(
            f"stage int{stage.student_bits}: teachers [{teachers}]"
            f" probe loss {stage.initial_loss:.6g} -> {stage.final_loss:.6g}"
        )
    print(f"wrote {len(result.stages)} stage(s) under {args.out_dir}")
    return EXIT_OK


# -- ablate ---------------------------------------------------------------------


def _cmd_ablate(args) -> int:
    if args.bits not in (2, 4, 8):
        raise CliError("--bits must be one of 2, 4, 8")
    cfg = DistillConfig(steps=args.steps)
    data_cfg = SyntheticDatasetConfig(samples=args.samples)
    result = run_ablation(args.seeds, bits=args.bits, cfg=cfg, data_cfg=data_cfg)

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    png_path = os.path.join(args.out, "ablation.png")
    write_ablation_csv(result.rows, result.seeds, csv_path)
    save_ablation_chart(result.rows, png_path)

    width = max(len(r.label) for r in result.rows)
    print(f"{'config'.ljust(width)}  median PSNR (dB)  median MSE")
    for row in result.rows:
        print(f"{row.label.ljust(width)}  {row.median_psnr:16.3f}  {row.median_mse:.6g}")
    print(f"wrote {csv_path} and {png_path}")

    if len(args.seeds) > 1 and not result.ordering_holds():
        medians = [round(r.median_psnr, 3) for r in result.rows]
        raise OrderingViolation(
            f"ablation rows are not monotonically non-worsening: {medians}"
        )
    return EXIT_OK


# -- report ----------------------------------------------------------------------


def _find_logs(run_dir: str) -> list[tuple[str, str]]:
    if os.path.isfile(run_dir):
        name = os.path.basename(os.path.dirname(os.path.abspath(run_dir))) or "run"
        return [(name, run_dir)]
    logs = []
    for entry in sorted(os.listdir(run_dir)):
        candidate = os.path.join(run_dir, entry, "loss_log.jsonl")
        if os.path.isfile(candidate):
            logs.append((entry, candidate))
    return logs


def _cmd_report(args) -> int:
    if not os.path.exists(args.run_dir):
        raise CliError(f"run directory not found: {args.run_dir}")
    logs = _find_logs(args.run_dir)
    if not logs:
        raise CliError(f"no loss_log.jsonl files found under {args.run_dir}")
    os.makedirs(args.out_dir, exist_ok=True)
    stages = []
    for name, path in logs:
        try:
            reports = read_loss_log(path)
        except (ValueError, KeyError) as exc:
            raise CliError(f"{path}: malformed log: {exc}") from None
        fig_path = os.path.join(args.out_dir, f"loss_curves_{name}.png")
        if reports:
            save_loss_curves(reports, fig_path, title=name)
            print(f"wrote {fig_path}")
        stages.append((name, reports))
    csv_path = os.path.join(args.out_dir, "loss_summary.csv")
    write_loss_summary_csv(stages, csv_path)
    print(f"wrote {csv_path}")
    return EXIT_OK


_COMMANDS = {
    "calibrate": _cmd_calibrate,
    "quantize": _cmd_quantize,
    "distill": _cmd_distill,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OrderingViolation as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
