import json
import os

import numpy as np
import pytest

from framequant.cli import main
from framequant.search import SearchConfig, build_search_space, exhaustive_search
from framequant.tensor import Tensor
from framequant.tensorio import read_bounds, read_tensor, write_tensor


def f32(values):
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@pytest.fixture
def three_frame_dump(tmp_path):
    rng = np.random.Generator(np.random.Philox(1234))
    frames = np.stack([rng.normal(mu, 1.0, 2000) for mu in (0.0, 2.0, 4.0)])
    t = Tensor(f32(frames))
    path = str(tmp_path / "acts.pmqt")
    write_tensor(path, t)
    return path, t


class TestCalibrateCommand:
    def test_per_frame_bounds_cardinality(self, three_frame_dump, tmp_path, capsys):
        path, _ = three_frame_dump
        out = str(tmp_path / "bounds.json")
        code = main([
            "calibrate", path, "--bits", "4", "--per-frame",
            "--frame-axis", "0", "--out", out, "--site", "block0.linear",
        ])
        assert code == 0
        schemes = read_bounds(out)
        assert list(schemes) == ["block0.linear"]
        assert schemes["block0.linear"].frame_count == 3
        printed = capsys.readouterr().out
        assert "frame 0" in printed and "frame 2" in printed
        assert "states" in printed

    def test_grid2_huge_epsilon_matches_oracle(self, three_frame_dump, tmp_path):
        path, t = three_frame_dump
        out = str(tmp_path / "bounds.json")
        code = main([
            "calibrate", path, "--bits", "4", "--grid", "2",
            "--epsilon-rel", "1e9", "--out", out,
        ])
        assert code == 0
        scheme = read_bounds(out)["tensor"]
        space = build_search_space(t, SearchConfig(grid_points=2, epsilon_rel=1e9))
        oracle = exhaustive_search(t, space, bits=4)
        assert scheme.params[0].lb == oracle.lb_star
        assert scheme.params[0].ub == oracle.ub_star

    def test_missing_input_names_path(self, tmp_path, capsys):
        out = str(tmp_path / "b.json")
        code = main(["calibrate", "/nonexistent/x.pmqt", "--bits", "4", "--out", out])
        assert code == 1
        assert "/nonexistent/x.pmqt" in capsys.readouterr().err

    def test_bad_magic_is_input_error(self, tmp_path, capsys):
        path = str(tmp_path / "junk.pmqt")
        with open(path, "wb") as f:
            f.write(b"JUNKJUNKJUNKJUNKJUNKJUNK")
        code = main(["calibrate", path, "--bits", "4", "--out", str(tmp_path / "b.json")])
        assert code == 1
        assert "PMQT" in capsys.readouterr().err


class TestQuantizeCommand:
    def test_idempotent_file_bytes(self, three_frame_dump, tmp_path):
        path, _ = three_frame_dump
        bounds = str(tmp_path / "bounds.json")
        main(["calibrate", path, "--bits", "8", "--per-frame", "--out", bounds])
        q1 = str(tmp_path / "q1.pmqt")
        q2 = str(tmp_path / "q2.pmqt")
        assert main(["quantize", path, bounds, "--out", q1]) == 0
        assert main(["quantize", q1, bounds, "--out", q2]) == 0
        assert open(q1, "rb").read() == open(q2, "rb").read()

    def test_lower_bits_higher_mse(self, three_frame_dump, tmp_path, capsys):
        path, t = three_frame_dump

        def run(bits):
            bounds = str(tmp_path / f"b{bits}.json")
            main(["calibrate", path, "--bits", str(bits), "--per-frame", "--out", bounds])
            out = str(tmp_path / f"q{bits}.pmqt")
            main(["quantize", path, bounds, "--out", out])
            capsys.readouterr()
            from framequant.tensor import mse
            return mse(t, read_tensor(out))

        assert run(2) > run(8)

    def test_frame_count_mismatch_exit_1(self, three_frame_dump, tmp_path, capsys):
        path, _ = three_frame_dump
        bounds = str(tmp_path / "bounds.json")
        main(["calibrate", path, "--bits", "4", "--per-frame", "--out", bounds])
        two_frames = str(tmp_path / "two.pmqt")
        write_tensor(two_frames, Tensor(f32(np.random.default_rng(0).normal(0, 1, (2, 50)))))
        code = main(["quantize", two_frames, bounds, "--out", str(tmp_path / "o.pmqt")])
        assert code == 1
        assert "frame" in capsys.readouterr().err

    def test_unknown_site_exit_1(self, three_frame_dump, tmp_path, capsys):
        path, _ = three_frame_dump
        bounds = str(tmp_path / "bounds.json")
        main(["calibrate", path, "--bits", "4", "--out", bounds])
        code = main(["quantize", path, bounds, "--site", "nope",
                     "--out", str(tmp_path / "o.pmqt")])
        assert code == 1


def distill_config(tmp_path, **overrides):
    doc = {
        "steps": 4,
        "seed": 7,
        "lambda": 5.0,
        "data": {"samples": 160},
        "pretrain": {"steps": 30},
    }
    doc.update(overrides)
    path = str(tmp_path / "cfg.json")
    with open(path, "w") as f:
        json.dump(doc, f)
    return path


class TestDistillCommand:
    def test_target8_single_stage_dir(self, tmp_path, capsys):
        cfg = distill_config(tmp_path)
        out_dir = str(tmp_path / "run8")
        assert main(["distill", cfg, "--target-bits", "8", "--out-dir", out_dir]) == 0
        assert sorted(os.listdir(out_dir)) == ["stage_int8"]
        stage = os.path.join(out_dir, "stage_int8")
        assert sorted(os.listdir(stage)) == ["bounds.json", "loss_log.jsonl"]

    def test_target2_three_stage_dirs(self, tmp_path, capsys):
        cfg = distill_config(tmp_path)
        out_dir = str(tmp_path / "run2")
        assert main(["distill", cfg, "--target-bits", "2", "--out-dir", out_dir]) == 0
        assert sorted(os.listdir(out_dir)) == [
            "stage_int2", "stage_int4", "stage_int8",
        ]
        printed = capsys.readouterr().out
        assert "teachers [int8+int4+fp]" in printed

    def test_fixed_seed_rerun_identical_logs(self, tmp_path, capsys):
        cfg = distill_config(tmp_path)
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        assert main(["distill", cfg, "--target-bits", "4", "--out-dir", a]) == 0
        assert main(["distill", cfg, "--target-bits", "4", "--out-dir", b]) == 0
        for stage in ("stage_int8", "stage_int4"):
            la = open(os.path.join(a, stage, "loss_log.jsonl")).read()
            lb = open(os.path.join(b, stage, "loss_log.jsonl")).read()
            assert la == lb

    def test_unknown_config_field_names_it(self, tmp_path, capsys):
        cfg = distill_config(tmp_path, bogus_field=1)
        code = main(["distill", cfg, "--target-bits", "8", "--out-dir", str(tmp_path / "x")])
        assert code == 1
        assert "bogus_field" in capsys.readouterr().err

    def test_invalid_config_value_named(self, tmp_path, capsys):
        cfg = distill_config(tmp_path, lr=-1.0)
        code = main(["distill", cfg, "--target-bits", "8", "--out-dir", str(tmp_path / "x")])
        assert code == 1
        assert "lr" in capsys.readouterr().err


class TestAblateCommand:
    def test_single_seed_table_no_assertion(self, tmp_path, capsys):
        out = str(tmp_path / "abl")
        code = main([
            "ablate", "--seeds", "3", "--steps", "6", "--samples", "160",
            "--out", out,
        ])
        assert code == 0
        printed = capsys.readouterr().out
        assert "none" in printed and "+per_frame+bmfq+pmtd" in printed
        assert os.path.exists(os.path.join(out, "ablation.csv"))
        assert os.path.exists(os.path.join(out, "ablation.png"))

    def test_empty_seed_list_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--seeds", "--out", str(tmp_path / "x")])
        assert exc.value.code == 1

    def test_csv_has_four_rows(self, tmp_path, capsys):
        out = str(tmp_path / "abl2")
        main(["ablate", "--seeds", "3", "--steps", "6", "--samples", "160", "--out", out])
        rows = open(os.path.join(out, "ablation.csv")).read().strip().splitlines()
        assert len(rows) == 5  # header + 4 configs


class TestReportCommand:
    def test_renders_figures_and_csv(self, tmp_path, capsys):
        cfg = distill_config(tmp_path)
        run_dir = str(tmp_path / "run")
        main(["distill", cfg, "--target-bits", "4", "--out-dir", run_dir])
        out_dir = str(tmp_path / "report")
        assert main(["report", run_dir, "--out-dir", out_dir]) == 0
        files = sorted(os.listdir(out_dir))
        assert "loss_summary.csv" in files
        assert "loss_curves_stage_int4.png" in files
        assert "loss_curves_stage_int8.png" in files

    def test_missing_run_dir(self, tmp_path, capsys):
        code = main(["report", str(tmp_path / "nope"), "--out-dir", str(tmp_path / "o")])
        assert code == 1

    def test_dir_without_logs(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["report", str(empty), "--out-dir", str(tmp_path / "o")])
        assert code == 1


class TestExitCodes:
    def test_unknown_command_is_input_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_required_flag(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["calibrate", "x.pmqt", "--out", "b.json"])  # --bits missing
        assert exc.value.code == 1
