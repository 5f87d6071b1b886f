"""Acceptance criteria, each at its stated tolerance.

Every test prints a single ``PASS``/``FAIL criterion N: ...`` line before
asserting, and the lines are repeated in the pytest terminal summary.
"""

from __future__ import annotations

import json
import math
import subprocess
import sys
import time
from pathlib import Path

from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_LINES, TABLE_COP, TABLE_MEANS, TIERS, TOKEN_ROWS
from strategies import PHASE1_ORDER, check_merge, merge_inputs
from tierbench import judge as jdg
from tierbench.config import dryrun_test_dir
from tierbench.domain import DEFAULT_PRICING, DEFAULT_RUBRIC, SONNET_4_5, Grade, TokenStats, agent_cost, grade_for_score
from tierbench.reporting import load_records, write_reports
from tierbench.runner import AUDIT_NAME, SimulatedCrash, build_runner, dryrun
from tierbench.tiers import Tier, TierConfig, TierScoreboard, merge_for_t5

PKG_ROOT = Path(__file__).resolve().parent.parent
BUNDLE_FILES = ("runs.csv", "judges.csv", "criteria.csv", "summary.json")


def verdict(n: int, title: str, checks: dict[str, bool]) -> None:
    failed = [name for name, ok in checks.items() if not ok]
    line = f"{'PASS' if not failed else 'FAIL'} criterion {n}: {title}"
    if failed:
        line += " (failed: " + "; ".join(failed) + ")"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert not failed, line


def bundle_bytes(root: Path) -> dict[str, bytes]:
    files = {name: (root / name).read_bytes() for name in BUNDLE_FILES}
    for path in sorted((root / "figures").iterdir()):
        files[f"figures/{path.name}"] = path.read_bytes()
    return files


def test_criterion_1_golden_replay(tmp_path):
    start = time.perf_counter()
    outcome = dryrun(tmp_path)
    elapsed = time.perf_counter() - start
    summary = json.loads((tmp_path / "test-001" / "summary.json").read_text())
    tiers = summary["tiers"]
    checks = {"exit status 0": outcome.exit_status == 0, f"runtime {elapsed:.2f}s < 10s": elapsed < 10}
    for tier, mean, cop in zip(TIERS, TABLE_MEANS, TABLE_COP):
        row = tiers[tier]
        checks[f"{tier} pass rate 1.000"] = row["pass_rate"] == 1.0
        checks[f"{tier} mean {row['mean_score']:.4f} ~ {mean}"] = abs(row["mean_score"] - mean) <= 0.001 + 1e-12
        checks[f"{tier} grade A"] = row["grade"] == "A"
        checks[f"{tier} CoP {row['cop']} == {cop}"] = row["cop"] == cop
    checks["frontier (T5, 0.065)"] = summary["totals"]["frontier_cop"] == {"tier": "T5", "value": 0.065}
    verdict(1, f"golden dryrun replay in {elapsed:.2f}s", checks)


def test_criterion_2_cost_cross_check():
    checks = {}
    fractions = []
    for tier, cop in zip(TIERS, TABLE_COP):
        i, o, cc, cr, total = TOKEN_ROWS[tier]
        stats = TokenStats(i, o, cc, cr)
        cost = agent_cost(stats, SONNET_4_5, DEFAULT_PRICING)
        rel = cost / cop - 1
        checks[f"{tier} cost {cost:.4f} vs {cop} ({rel:+.1%}) within 10%"] = abs(rel) <= 0.10
        frac = cr / total
        fractions.append(frac)
        # The band is quoted in whole percent, so compare at that precision.
        checks[f"{tier} cache-read share {frac:.1%} in 79-95%"] = 79 <= round(frac * 100) <= 95
    verdict(2, f"cost model vs CoP column, cache-read shares {min(fractions):.1%}-{max(fractions):.1%}", checks)


def test_criterion_3_scoring_oracle():
    names = ("functional", "code_quality", "proportionality", "build_pipeline", "overall_quality")
    means = (1.000, 1.000, 0.940, 1.000, 0.975)
    scores = {k: jdg.CategoryScore(v, 1.0) for k, v in zip(names, means)}
    final = jdg.final_score(scores, DEFAULT_RUBRIC)
    table = [
        (1.0, True, Grade.S), (1.0, False, Grade.A), (0.999, True, Grade.A),
        (0.80, False, Grade.A), (0.7999, False, Grade.B),
        (0.60, False, Grade.B), (0.5999, False, Grade.C),
        (0.40, False, Grade.C), (0.3999, False, Grade.D),
        (0.20, False, Grade.D), (0.1999, False, Grade.F), (0.0, False, Grade.F),
    ]
    checks = {f"final score {final:.6f} = 0.9860 +/- 0.0005": abs(final - 0.9860) <= 0.0005}
    for score, aab, grade in table:
        got = grade_for_score(score, aab)
        checks[f"grade({score}, aab={aab}) = {grade.value} (got {got.value})"] = got is grade
    verdict(3, f"final score {final:.4f} and grade table", checks)


def test_criterion_4_crash_resume(tmp_path):
    start = time.perf_counter()
    reference = tmp_path / "reference"
    build_runner(dryrun_test_dir(), ["all"], reference, concurrency=1, backend="scripted").run()
    expected = bundle_bytes(reference / "test-001")
    checks = {}
    for k in range(8):
        out = tmp_path / f"crash-{k}"

        def crash(n, k=k):
            if n == k:
                raise SimulatedCrash(f"after {k}")

        crashed = False
        try:
            build_runner(dryrun_test_dir(), ["all"], out, concurrency=1, backend="scripted", on_checkpoint=crash).run()
        except SimulatedCrash:
            crashed = True
        outcome = build_runner(dryrun_test_dir(), ["all"], out, concurrency=1, backend="scripted").run(resume=True)
        starts = [
            json.loads(line)["unit"]
            for line in (out / "test-001" / AUDIT_NAME).read_text().splitlines()
            if json.loads(line)["event"] == "agent_start"
        ]
        checks[f"k={k} crashed"] = crashed
        checks[f"k={k} resumed cleanly"] = outcome.exit_status == 0
        checks[f"k={k} {len(starts)} executions, all distinct"] = len(starts) == 7 == len(set(starts))
        checks[f"k={k} bundle byte-identical"] = bundle_bytes(out / "test-001") == expected
    elapsed = time.perf_counter() - start
    checks[f"runtime {elapsed:.1f}s < 30s"] = elapsed < 30
    verdict(4, f"crash after k=0..7 then resume, {elapsed:.1f}s", checks)


def test_criterion_5_merge_rules():
    cases = []
    failures = []

    @settings(max_examples=1000, database=None)
    @given(merge_inputs(), st.randoms(use_true_random=False))
    def prop(inputs, rnd):
        cases.append(1)
        try:
            check_merge(*inputs, rnd)
        except AssertionError:
            failures.append(inputs)
            raise

    try:
        prop()
        property_ok = True
    except AssertionError:
        property_ok = False

    configs = {
        Tier.T0: TierConfig(Tier.T0, "subtest-00", {"B01": "base\n", "B02": "terse style\n"}),
        Tier.T1: TierConfig(Tier.T1, "subtest-00", {"B01": "base\n"}, frozenset({"skill-a"})),
        Tier.T2: TierConfig(Tier.T2, "subtest-00", {"B02": "tool-first style\n"}, tools_enabled=True),
        Tier.T3: TierConfig(Tier.T3, "subtest-00", {}, frozenset({"skill-b"})),
        Tier.T4: TierConfig(Tier.T4, "subtest-00", {}),
    }
    board = TierScoreboard()
    for t, s in zip(PHASE1_ORDER, (0.973, 0.970, 0.983, 0.983, 0.960)):
        board.record(t, "subtest-00", s)
    merged = merge_for_t5(configs, board)
    checks = {
        f"{len(cases)} generated cases >= 1000": len(cases) >= 1000,
        "union/any/best-block properties hold": property_ok and not failures,
        "T1 skill-a + T3 skill-b -> both": merged.skills == {"skill-a", "skill-b"},
        "B02 goes to the 0.983 tier over 0.973": merged.blocks["B02"] == "tool-first style\n",
    }
    verdict(5, f"merge rules over {len(cases)} generated cases plus the worked example", checks)


def test_criterion_6_agreement(dryrun_results):
    _, root = dryrun_results
    agr = json.loads((root / "summary.json").read_text())["agreement"]
    pairs = {frozenset((p["judge_a"], p["judge_b"])): p for p in agr["pairwise"]}
    opus, sonnet, haiku = "claude-opus-4-5-20251101", "claude-sonnet-4-5-20250929", "claude-haiku-4-5-20251001"
    os_pair = pairs[frozenset((opus, sonnet))]
    sh_pair = pairs[frozenset((sonnet, haiku))]
    alpha = agr["krippendorff_alpha_interval"]
    targets = [
        ("Opus-Sonnet rho", os_pair["spearman_rho"], 0.333),
        ("Opus-Sonnet r", os_pair["pearson_r"], 0.706),
        ("Opus-Sonnet mean |delta|", os_pair["mean_abs_delta"], 0.033),
        ("Sonnet-Haiku rho", sh_pair["spearman_rho"], -0.522),
        ("alpha (interval)", alpha, -0.117),
    ]
    checks = {f"{name} {got:.4f} ~ {want}": abs(got - want) <= 0.005 for name, got, want in targets}
    checks[f"low-sample flag set at n={agr['n_runs']}"] = agr["low_sample"] is True and agr["n_runs"] == 7
    verdict(6, "judge agreement on the shipped fixture", checks)


def test_criterion_7_metric_properties(tmp_path):
    report = tmp_path / "cov.json"
    proc = subprocess.run(
        [
            sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
            str(PKG_ROOT / "tests" / "test_metrics.py"),
            "--cov=tierbench.metrics", "--cov-branch", f"--cov-report=json:{report}",
            f"--rootdir={PKG_ROOT}",
        ],
        cwd=tmp_path, capture_output=True, text=True,
    )
    pct = 0.0
    if report.exists():
        data = json.loads(report.read_text())
        pct = data["totals"]["percent_covered"]
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    checks = {
        f"metric property suite passed ({tail})": proc.returncode == 0,
        f"branch coverage {pct:.1f}% >= 95%": pct >= 95.0,
    }
    verdict(7, f"metric properties, metrics branch coverage {pct:.1f}%", checks)


def test_criterion_8_report_integrity(dryrun_results, tmp_path):
    _, root = dryrun_results
    counts = {name: len((root / name).read_text().splitlines()) - 1 for name in BUNDLE_FILES[:3]}
    total = json.loads((root / "summary.json").read_text())["totals"]["total_cost"]
    again = tmp_path / "again"
    write_reports(load_records(root), again)
    identical = bundle_bytes(again) == bundle_bytes(root)
    checks = {
        f"{counts['runs.csv']} run rows == 7": counts["runs.csv"] == 7,
        f"{counts['judges.csv']} judge rows == 21": counts["judges.csv"] == 21,
        f"{counts['criteria.csv']} criteria rows == 105": counts["criteria.csv"] == 105,
        f"total cost ${total:.4f} within 1% of $1.01": math.isclose(total, 1.01, rel_tol=0.01),
        "re-emission byte-identical": identical,
    }
    verdict(8, f"report rows 7/21/105, total cost ${total:.3f}", checks)
