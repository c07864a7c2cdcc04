"""One test per acceptance criterion, each printing a PASS/FAIL line.

Criteria 1-4, 6 and 7 re-run the relevant unit selections in a fresh
interpreter so their wall-clock budgets are measured in isolation.
Criterion 5 trains the benchmark variants and takes tens of minutes.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

from mgalign.benchmark import DIRECTIONALITY_VARIANTS, benchmark_config, format_table, run_benchmark

ROOT = Path(__file__).resolve().parents[1]

FORMULA = [
    "tests/test_geometry.py",
    "tests/test_backbone.py",
    "tests/test_fusion.py",
    "tests/test_head.py",
    "tests/test_grl.py",
    "tests/test_discriminators.py",
    "tests/test_data.py",
    "tests/test_evaluation.py::TestAveragePrecision",
    "tests/test_evaluation.py::TestEvaluate",
    "tests/test_evaluation.py::TestOracle::test_worked_examples",
    "tests/test_training.py::TestTotalLoss",
    "tests/test_training.py::TestOptimizer",
]
GRADIENT_K = "finite_difference or gradient or adversarial or sign_contract or scaled_quadratic or double_reversal"
GRADIENT = [
    "tests/test_fusion.py",
    "tests/test_head.py",
    "tests/test_grl.py",
    "tests/test_discriminators.py",
    "tests/test_training.py::test_adversarial_step_ascends_pixel_loss",
]
INVARIANTS = [
    "tests/test_invariants.py",
    "tests/test_fusion.py::TestGateMask::test_shift_invariance_and_argmax",
    "tests/test_discriminators.py::TestCategoryLosses::test_shift_invariance",
]
ORACLE = ["tests/test_evaluation.py::TestOracle"]
SCHEDULE = [
    "tests/test_training.py::TestTotalLoss::test_stage1_category_is_zero",
    "tests/test_training.py::TestTotalLoss::test_stage2_category_active",
    "tests/test_training.py::TestSchedule::test_stage_boundary_and_log",
    "tests/test_training.py::TestSchedule::test_checkpoint_continuation_is_bit_identical",
]
DETERMINISM = ["tests/test_training.py::TestSchedule::test_same_seed_same_log"]


def run_selection(selection, keyword=None):
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *selection]
    if keyword:
        cmd += ["-k", keyword]
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-300:]
    return proc.returncode == 0, elapsed, summary, proc.stdout


def _check(acceptance_line, number, name, selection, budget, keyword=None):
    ok, elapsed, summary, output = run_selection(selection, keyword)
    passed = ok and elapsed < budget
    acceptance_line(number, passed, f"{name} [{summary}; {elapsed:.1f}s, budget {budget}s]")
    assert ok, output
    assert elapsed < budget, f"{name} took {elapsed:.1f}s (budget {budget}s)"


def test_criterion_1_formula_suite(acceptance_line):
    _check(acceptance_line, 1, "formula unit suite", FORMULA, 60, f"not ({GRADIENT_K})")


def test_criterion_2_gradient_suite(acceptance_line):
    _check(acceptance_line, 2, "gradient suite", GRADIENT, 120, GRADIENT_K)


def test_criterion_3_distribution_invariants(acceptance_line):
    _check(acceptance_line, 3, "distribution invariants", INVARIANTS, 60)


def test_criterion_4_oracle_equivalence(acceptance_line):
    _check(acceptance_line, 4, "fast AP equals oracle AP", ORACLE, 60)


def test_criterion_5_adaptation_directionality(acceptance_line, tmp_path):
    t0 = time.perf_counter()
    result = run_benchmark(benchmark_config(), [0, 1, 2], DIRECTIONALITY_VARIANTS, tmp_path / "benchmark.json")
    elapsed = time.perf_counter() - t0
    med = result["median"]
    checks = result["directionality"]
    print("\n" + format_table(med))
    print(json.dumps({k: v["map"] for k, v in med.items()}))
    gap = 100 * (med["full"]["map"] - med["source_only"]["map"])
    detail = (
        f"synthetic directionality [full-source_only {gap:+.1f} mAP pts (need >= 5); "
        f"full {100 * med['full']['map']:.1f} vs w/o category {100 * med['without_category']['map']:.1f}; "
        f"AP^L gated {_pct(med['full']['ap_large'])} vs average {_pct(med['average_fusion']['ap_large'])}; "
        f"{elapsed / 60:.1f} min, budget 60 min]"
    )
    passed = all(checks.values()) and elapsed < 3600
    acceptance_line(5, passed, detail)
    assert checks["full_beats_source_only"], detail
    assert checks["full_not_below_without_category"], detail
    assert checks["gated_not_below_average_on_large"], detail
    assert elapsed < 3600


def _pct(v):
    return "n/a" if v is None else f"{100 * v:.1f}"


def test_criterion_6_schedule_observability(acceptance_line):
    _check(acceptance_line, 6, "stage boundary and bit-identical resume", SCHEDULE, 300)


def test_criterion_7_determinism(acceptance_line):
    _check(acceptance_line, 7, "same seed, same metrics log", DETERMINISM, 300)
