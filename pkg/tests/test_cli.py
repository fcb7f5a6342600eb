"""End-to-end tests of the command-line interface.

Each subcommand is driven through ``run(argv)`` in-process so exit codes and
file outputs can be asserted directly; one subprocess test checks the
installed console script. Exit codes: 0 success, 1 usage, 2 validation,
3 numeric invariant failure.
"""

import json
import subprocess
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

import orthoexperts
from orthoexperts import __version__, cli, load_bank, reconstruct
from orthoexperts.cli import run
from orthoexperts.matio import read_matrix, write_bmat, write_csv_matrix
from orthoexperts.tasks import build_layer, make_tasks
from orthoexperts.layer import save_layer

FIXTURES = Path(orthoexperts.__file__).parent / "fixtures"


@pytest.fixture
def weight_file(tmp_path):
    rng = np.random.default_rng(0)
    w = rng.standard_normal((12, 10))
    path = tmp_path / "w.bmat"
    write_bmat(path, w)
    return path, w


def small_run_config(**overrides):
    config = {
        "seed": 0,
        "tasks": {
            "t": 2,
            "n": 8,
            "m": 6,
            "rank": 2,
            "noise": 0.05,
            "train_count": 8,
            "eval_count": 8,
        },
        "model": {"k": 2, "r": 2},
        "train": {
            "regime": "sequential",
            "order": [0, 1],
            "epochs": 2,
            "lr": 0.01,
            "batch_size": 4,
            "include_baseline": True,
            "dog": {"enabled": True, "interval": 2, "mode": "exact"},
        },
    }
    for key, value in overrides.items():
        config[key] = value
    return config


class TestDecomposeReconstruct:
    def test_roundtrip(self, tmp_path, weight_file):
        win, w = weight_file
        bank_dir = tmp_path / "bank"
        assert run(["decompose", str(win), "--k", "3", "--r", "2", "--out", str(bank_dir)]) == 0
        info = json.loads((bank_dir / "ortho.json").read_text())
        assert info["format_version"] == 1
        assert info["k"] == 3
        assert info["r"] == 2
        assert info["max_offdiag"] <= 1e-10
        assert info["reconstruction_rel_error"] <= 1e-10
        assert info["zero_norm_experts"] == []

        out = tmp_path / "rebuilt.bmat"
        assert run(["reconstruct", str(bank_dir), "--out", str(out)]) == 0
        rebuilt = read_matrix(out)
        assert np.linalg.norm(rebuilt - w) / np.linalg.norm(w) <= 1e-10

    def test_r_full_divides_min_dim(self, tmp_path, weight_file):
        win, _ = weight_file  # 12 x 10, k=3 -> r = 10 // 3 = 3
        bank_dir = tmp_path / "bank"
        assert run(["decompose", str(win), "--k", "3", "--r", "full", "--out", str(bank_dir)]) == 0
        info = json.loads((bank_dir / "ortho.json").read_text())
        assert info["r"] == 3

    def test_csv_input(self, tmp_path):
        w = np.random.default_rng(1).standard_normal((6, 6))
        win = tmp_path / "w.csv"
        write_csv_matrix(win, w)
        bank_dir = tmp_path / "bank"
        assert run(["decompose", str(win), "--k", "2", "--r", "2", "--out", str(bank_dir)]) == 0
        bank = load_bank(bank_dir)
        assert np.linalg.norm(reconstruct(bank) - w) / np.linalg.norm(w) <= 1e-10

    def test_json_output_is_deterministic_text(self, tmp_path, weight_file):
        win, _ = weight_file
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        assert run(["decompose", str(win), "--k", "3", "--r", "2", "--out", str(a_dir)]) == 0
        assert run(["decompose", str(win), "--k", "3", "--r", "2", "--out", str(b_dir)]) == 0
        a_text = (a_dir / "ortho.json").read_text()
        assert a_text == (b_dir / "ortho.json").read_text()
        assert a_text.endswith("\n")

    def test_capacity_error_exits_2(self, tmp_path, weight_file):
        win, _ = weight_file
        assert run(["decompose", str(win), "--k", "4", "--r", "4", "--out", str(tmp_path / "x")]) == 2

    def test_r_full_too_many_experts_exits_2(self, tmp_path):
        w = np.random.default_rng(2).standard_normal((4, 4))
        win = tmp_path / "w.bmat"
        write_bmat(win, w)
        assert run(["decompose", str(win), "--k", "5", "--r", "full", "--out", str(tmp_path / "x")]) == 2

    def test_missing_input_exits_2(self, tmp_path):
        assert run(["decompose", str(tmp_path / "nope.bmat"), "--out", str(tmp_path / "x")]) == 2

    def test_numeric_invariant_failure_exits_3(self, tmp_path, weight_file, monkeypatch):
        win, _ = weight_file
        monkeypatch.setattr(
            cli,
            "pairwise_orthogonality",
            lambda bank: SimpleNamespace(
                max_abs_off_diagonal=1.0, zero_norm_experts=()
            ),
        )
        assert run(["decompose", str(win), "--k", "3", "--r", "2", "--out", str(tmp_path / "x")]) == 3


class TestDog:
    def grad_file(self, tmp_path, rows=6, cols=20, seed=0):
        g = np.random.default_rng(seed).standard_normal((rows, cols))
        path = tmp_path / "grads.bmat"
        write_bmat(path, g)
        return path

    def test_outputs(self, tmp_path):
        path = self.grad_file(tmp_path)
        out = tmp_path / "dog"
        assert run(["dog", str(path), "--k", "3", "--r", "2", "--out", str(out)]) == 0
        info = json.loads((out / "dog.json").read_text())
        assert info["format_version"] == 1
        assert info["iterations"] >= 1
        assert len(info["objective_trace"]) >= 1
        assert info["mode"] == "exact"
        assert info["dead_count"] == 0
        assert "warning" not in info
        assignment = info["assignment"]
        assert len(assignment) == 6
        assert sorted(assignment) == [0, 0, 1, 1, 2, 2]  # balanced: r per expert

        lines = (out / "assignment.csv").read_text().strip().splitlines()
        assert lines[0] == "component_index,old_expert,new_expert"
        for i, line in enumerate(lines[1:]):
            idx, old, new = (int(v) for v in line.split(","))
            assert idx == i
            assert old == i // 2
            assert new == assignment[i]

    def test_all_dead_input_warns_and_uses_identity(self, tmp_path):
        path = tmp_path / "zeros.bmat"
        write_bmat(path, np.zeros((6, 20)))
        out = tmp_path / "dog"
        assert run(["dog", str(path), "--k", "3", "--r", "2", "--out", str(out)]) == 0
        info = json.loads((out / "dog.json").read_text())
        assert "warning" in info
        assert info["dead_count"] == 6
        assert info["assignment"] == [0, 0, 1, 1, 2, 2]
        # angles over an empty aggregate serialize as null, not NaN
        assert info["intra_deg"] is None
        assert info["inter_deg"] is None

    def test_exact_objective_dominates_greedy(self, tmp_path):
        for seed in range(5):
            path = self.grad_file(tmp_path, seed=seed)
            exact_dir = tmp_path / f"exact{seed}"
            greedy_dir = tmp_path / f"greedy{seed}"
            base = ["dog", str(path), "--k", "3", "--r", "2", "--seed", "1"]
            assert run(base + ["--mode", "exact", "--out", str(exact_dir)]) == 0
            assert run(base + ["--mode", "greedy", "--out", str(greedy_dir)]) == 0
            exact = json.loads((exact_dir / "dog.json").read_text())
            greedy = json.loads((greedy_dir / "dog.json").read_text())
            assert exact["objective_trace"][-1] >= greedy["objective_trace"][-1] - 1e-12

    def test_wrong_row_count_exits_2(self, tmp_path):
        path = self.grad_file(tmp_path, rows=5)
        assert run(["dog", str(path), "--k", "3", "--r", "2", "--out", str(tmp_path / "x")]) == 2

    def test_n_init_flag(self, tmp_path):
        path = self.grad_file(tmp_path)
        out = tmp_path / "dog"
        assert run(["dog", str(path), "--k", "3", "--r", "2", "--n-init", "1", "--out", str(out)]) == 0


class TestTrain:
    def write_config(self, tmp_path, config):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        return path

    def test_sequential_run_outputs(self, tmp_path):
        config = self.write_config(tmp_path, small_run_config())
        out = tmp_path / "run"
        assert run(["train", str(config), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["format_version"] == 1
        assert metrics["seed"] == 0
        assert metrics["regime"] == "sequential"
        assert metrics["order"] == [0, 1]
        assert 0.0 <= metrics["avg_score"] <= 100.0
        assert metrics["forget_as_written"] is not None
        assert metrics["backward"] == pytest.approx(
            -metrics["forget_as_written"], abs=1e-12
        )
        assert len(metrics["baseline"]) == 2
        assert metrics["forward"] is not None

        scores = (out / "scores.csv").read_text().strip().splitlines()
        assert scores[0] == "stage,task,score"
        assert len(scores) == 1 + 2 * 2
        angles = (out / "angles.csv").read_text().strip().splitlines()
        assert angles[0] == "epoch,intra_deg,inter_deg"
        assert len(angles) > 1

    def test_rerun_is_byte_identical(self, tmp_path):
        config = self.write_config(tmp_path, small_run_config())
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert run(["train", str(config), "--out", str(out_a)]) == 0
        assert run(["train", str(config), "--out", str(out_b)]) == 0
        for name in ("scores.csv", "angles.csv", "metrics.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_mixed_regime(self, tmp_path):
        cfg = small_run_config()
        cfg["train"]["regime"] = "mixed"
        del cfg["train"]["order"]
        config = self.write_config(tmp_path, cfg)
        out = tmp_path / "run"
        assert run(["train", str(config), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["regime"] == "mixed"
        assert metrics["order"] is None
        assert metrics["forget_as_written"] is None
        assert metrics["backward"] is None
        assert metrics["forward"] is not None
        scores = (out / "scores.csv").read_text().strip().splitlines()
        assert len(scores) == 1 + 1 * 2  # single stage row

    def test_seed_order_derivation(self, tmp_path):
        cfg = small_run_config()
        cfg["train"]["order"] = "seed"
        cfg["seed"] = 3
        config = self.write_config(tmp_path, cfg)
        out = tmp_path / "run"
        assert run(["train", str(config), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        expected = [int(v) for v in np.random.default_rng([3, 20]).permutation(2)]
        assert metrics["order"] == expected

    def test_multi_seed_directories(self, tmp_path):
        cfg = small_run_config()
        cfg["seeds"] = [0, 1]
        cfg["train"]["include_baseline"] = False
        config = self.write_config(tmp_path, cfg)
        out = tmp_path / "runs"
        assert run(["train", str(config), "--out", str(out), "--jobs", "2"]) == 0
        for seed in (0, 1):
            metrics = json.loads((out / f"seed_{seed}" / "metrics.json").read_text())
            assert metrics["seed"] == seed
            assert metrics["baseline"] is None
            assert metrics["forward"] is None

    def test_shipped_smoke_config(self, tmp_path):
        out = tmp_path / "run"
        assert run(["train", str(FIXTURES / "smoke_train.json"), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["avg_score"] > 50.0

    def test_missing_config_exits_2(self, tmp_path):
        assert run(["train", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == 2

    def test_invalid_json_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run(["train", str(bad), "--out", str(tmp_path / "x")]) == 2

    def test_missing_sections_exit_2(self, tmp_path):
        config = self.write_config(tmp_path, {"seed": 0, "model": {"k": 2}})
        assert run(["train", str(config), "--out", str(tmp_path / "x")]) == 2

    def test_bad_regime_exits_2(self, tmp_path):
        cfg = small_run_config()
        cfg["train"]["regime"] = "bogus"
        config = self.write_config(tmp_path, cfg)
        assert run(["train", str(config), "--out", str(tmp_path / "x")]) == 2

    def test_bad_order_exits_2(self, tmp_path):
        cfg = small_run_config()
        cfg["train"]["order"] = [0, 0]
        config = self.write_config(tmp_path, cfg)
        assert run(["train", str(config), "--out", str(tmp_path / "x")]) == 2


class TestMetrics:
    def test_reference_grid_stdout(self, capsys):
        assert run(["metrics", str(FIXTURES / "table5_grid.csv")]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert abs(payload["avg_score"] - 48.43) <= 0.01 + 1e-9
        assert payload["backward"] == pytest.approx(
            -payload["forget_as_written"], abs=1e-12
        )
        comparison = payload["published_comparison"]
        assert comparison["published"]["forget"] == 8.37
        assert comparison["forget_as_written_matches_published"] is False
        assert "note" in comparison

    def test_out_file(self, tmp_path):
        out = tmp_path / "metrics.json"
        assert run(["metrics", str(FIXTURES / "table8_grid.csv"), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert abs(payload["avg_score"] - 50.23) <= 0.01 + 1e-9

    def test_published_forget_override(self, tmp_path, capsys):
        a = np.array([[10.0, 0.0], [4.0, 8.0]])
        grid = tmp_path / "grid.csv"
        write_csv_matrix(grid, a)
        assert run(["metrics", str(grid), "--published-forget", "6.0"]) == 0
        payload = json.loads(capsys.readouterr().out)
        comparison = payload["published_comparison"]
        assert comparison["forget_as_written_matches_published"] is True

    def test_baseline_and_mode(self, tmp_path, capsys):
        a = np.array([[10.0, 0.0], [4.0, 8.0]])
        grid = tmp_path / "grid.csv"
        write_csv_matrix(grid, a)
        baseline = tmp_path / "baseline.csv"
        write_csv_matrix(baseline, np.array([[9.0, 6.0]]))
        assert run(["metrics", str(grid), "--baseline", str(baseline), "--mode", "sequential"]) == 0
        payload = json.loads(capsys.readouterr().out)
        # diag (10, 8) minus baseline (9, 6) -> mean 1.5
        assert payload["forward"] == pytest.approx(1.5, abs=1e-12)

    def test_non_square_grid_skips_forgetting(self, tmp_path, capsys):
        grid = tmp_path / "grid.csv"
        write_csv_matrix(grid, np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        assert run(["metrics", str(grid)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["forget_as_written"] is None
        assert payload["backward"] is None
        assert payload["avg_score"] == 5.0

    def test_wrong_baseline_length_exits_2(self, tmp_path):
        grid = tmp_path / "grid.csv"
        write_csv_matrix(grid, np.array([[1.0, 2.0], [3.0, 4.0]]))
        baseline = tmp_path / "baseline.csv"
        write_csv_matrix(baseline, np.array([[1.0, 2.0, 3.0]]))
        assert run(["metrics", str(grid), "--baseline", str(baseline)]) == 2

    def test_missing_grid_exits_2(self, tmp_path):
        assert run(["metrics", str(tmp_path / "nope.csv")]) == 2


class TestAnalyze:
    def test_outputs(self, tmp_path):
        task_set = make_tasks(
            t=2, n=8, m=6, rank=2, noise=0.05, seed=0, train_count=8, eval_count=8
        )
        layer = build_layer(task_set, k=2, r=2)
        model_dir = tmp_path / "model"
        save_layer(layer, model_dir)
        tasks_cfg = tmp_path / "tasks.json"
        tasks_cfg.write_text(
            json.dumps(
                {
                    "seed": 0,
                    "tasks": {
                        "t": 2,
                        "n": 8,
                        "m": 6,
                        "rank": 2,
                        "noise": 0.05,
                        "train_count": 8,
                        "eval_count": 8,
                    },
                }
            )
        )
        out = tmp_path / "analysis"
        assert run(["analyze", str(model_dir), "--tasks", str(tasks_cfg), "--keep", "0.5", "--out", str(out)]) == 0
        info = json.loads((out / "analysis.json").read_text())
        assert info["format_version"] == 1
        assert info["tasks"] == 2
        assert info["keep_fraction"] == 0.5
        assert len(info["unit_task_counts"]) == 6
        assert sum(info["histogram"]) == 6
        lines = (out / "units.csv").read_text().strip().splitlines()
        assert lines[0] == "unit,selected_task_count,positive_tasks,negative_tasks,activated_tasks"
        assert len(lines) == 1 + 6
        for i, line in enumerate(lines[1:]):
            cells = [int(v) for v in line.split(",")]
            assert cells[0] == i
            assert cells[1] == info["unit_task_counts"][i]

    def test_missing_tasks_section_exits_2(self, tmp_path):
        task_set = make_tasks(
            t=2, n=8, m=6, rank=2, noise=0.05, seed=0, train_count=8, eval_count=8
        )
        save_layer(build_layer(task_set, k=2, r=2), tmp_path / "model")
        cfg = tmp_path / "tasks.json"
        cfg.write_text(json.dumps({"seed": 0}))
        assert run(["analyze", str(tmp_path / "model"), "--tasks", str(cfg), "--out", str(tmp_path / "x")]) == 2

    def test_missing_model_exits_2(self, tmp_path):
        cfg = tmp_path / "tasks.json"
        cfg.write_text(json.dumps({"tasks": {"t": 2, "n": 4, "m": 4}}))
        assert run(["analyze", str(tmp_path / "nope"), "--tasks", str(cfg), "--out", str(tmp_path / "x")]) == 2


class TestUsageAndVersion:
    def test_no_command_exits_1(self):
        assert run([]) == 1

    def test_unknown_command_exits_1(self):
        assert run(["frobnicate"]) == 1

    def test_missing_required_option_exits_1(self, tmp_path):
        assert run(["decompose", str(tmp_path / "w.bmat")]) == 1

    def test_bad_choice_exits_1(self, tmp_path):
        assert run(["dog", str(tmp_path / "g.bmat"), "--mode", "bogus", "--out", str(tmp_path / "x")]) == 1

    def test_version(self, capsys):
        assert run(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_console_script(self):
        proc = subprocess.run(
            ["orthoexperts", "--version"], capture_output=True, text=True
        )
        assert proc.returncode == 0
        assert __version__ in proc.stdout
