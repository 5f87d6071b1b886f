"""CSV/JSON report tables, experiment summary and figure-data bundles."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from tierbench import metrics
from tierbench.domain import Grade, TokenStats, grade_for_score
from tierbench.errors import CorruptStateError, DomainError
from tierbench.judge import JudgeVerdict, verdict_from_dict, verdict_to_dict

logger = logging.getLogger(__name__)

RECORD_NAME = "record.json"
SCHEMA_VERSION = 1
NA = "NA"
SUMMARY_DECIMALS = 6

RUNS_COLUMNS = (
    "test_id",
    "tier",
    "subtest",
    "run_id",
    "exit_code",
    "timed_out",
    "duration_s",
    "input_tokens",
    "output_tokens",
    "cache_create_tokens",
    "cache_read_tokens",
    "total_tokens",
    "agent_cost_usd",
    "judge_cost_usd",
    "consensus_score",
    "grade",
    "passed",
)
JUDGES_COLUMNS = (
    "test_id",
    "tier",
    "subtest",
    "run_id",
    "judge",
    "final_score",
    "grade",
    "above_and_beyond",
    "duration_s",
    "cost_usd",
)
CRITERIA_COLUMNS = (
    "test_id",
    "tier",
    "subtest",
    "run_id",
    "judge",
    "category",
    "achieved",
    "max",
    "weight",
)


@dataclass(frozen=True)
class RunRecord:
    """Everything the reports need about one (tier, subtest, run) unit."""

    test_id: str
    tier: str
    subtest: str
    run_id: int
    exit_code: int | None
    timed_out: bool
    duration_s: float
    tokens: TokenStats
    agent_cost_usd: float
    judge_duration_s: float = 0.0
    verdicts: tuple[JudgeVerdict, ...] = ()
    judge_failures: tuple[str, ...] = ()
    consensus_score: float | None = None
    grade: Grade | None = None
    passed: bool = False
    category_weights: Mapping[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.tier, self.subtest, self.run_id)

    @property
    def judge_cost_usd(self) -> float:
        return math.fsum(v.cost_usd for v in self.verdicts)

    @property
    def evaluable(self) -> bool:
        return self.consensus_score is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "test_id": self.test_id,
            "tier": self.tier,
            "subtest": self.subtest,
            "run_id": self.run_id,
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "duration_s": self.duration_s,
            "tokens": self.tokens.to_dict(),
            "agent_cost_usd": self.agent_cost_usd,
            "judge_duration_s": self.judge_duration_s,
            "verdicts": [verdict_to_dict(v) for v in self.verdicts],
            "judge_failures": list(self.judge_failures),
            "consensus_score": self.consensus_score,
            "grade": self.grade.value if self.grade else None,
            "passed": self.passed,
            "category_weights": dict(self.category_weights),
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> RunRecord:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise CorruptStateError(f"unsupported record schema {data.get('schema_version')!r}")
        return cls(
            test_id=data["test_id"],
            tier=data["tier"],
            subtest=data["subtest"],
            run_id=int(data["run_id"]),
            exit_code=data["exit_code"],
            timed_out=bool(data["timed_out"]),
            duration_s=float(data["duration_s"]),
            tokens=TokenStats.from_dict(data["tokens"]),
            agent_cost_usd=float(data["agent_cost_usd"]),
            judge_duration_s=float(data.get("judge_duration_s", 0.0)),
            verdicts=tuple(verdict_from_dict(v, base_dir) for v in data.get("verdicts", ())),
            judge_failures=tuple(data.get("judge_failures", ())),
            consensus_score=data.get("consensus_score"),
            grade=Grade(data["grade"]) if data.get("grade") else None,
            passed=bool(data["passed"]),
            category_weights=dict(data.get("category_weights", {})),
            error=data.get("error"),
        )


def save_record(record: RunRecord, run_dir: str | Path) -> Path:
    path = Path(run_dir) / RECORD_NAME
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_record(path: str | Path) -> RunRecord:
    path = Path(path)
    try:
        return RunRecord.from_dict(json.loads(path.read_text(encoding="utf-8")), path.parent)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptStateError(f"cannot read run record {path}: {exc}") from exc


def load_records(results_dir: str | Path) -> list[RunRecord]:
    """All run records below ``results_dir``, in report order."""
    records = [load_record(p) for p in Path(results_dir).rglob(RECORD_NAME)]
    return sort_records(records)


def _tier_key(tier: str) -> tuple[int, str]:
    return metrics._tier_key(tier)


def sort_records(records: Iterable[RunRecord]) -> list[RunRecord]:
    return sorted(records, key=lambda r: (_tier_key(r.tier), r.subtest, r.run_id, r.test_id))


# -- formatting ------------------------------------------------------------------


def _fmt(value: Any) -> str:
    if value is None:
        return NA
    if value is metrics.UNATTAINABLE:
        return str(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Grade):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _round(value: Any) -> Any:
    if value is metrics.UNATTAINABLE:
        return str(value)
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            return None
        return round(value, SUMMARY_DECIMALS)
    if isinstance(value, Mapping):
        return {k: _round(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round(v) for v in value]
    return value


def judge_label(model_id: str) -> str:
    """Short family name for a model id (``claude-sonnet-4-5-...`` -> ``sonnet``)."""
    m = re.match(r"^claude-([a-z]+)", model_id)
    return m.group(1) if m else model_id


# -- tables ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportBundle:
    runs_csv: Path
    judges_csv: Path
    criteria_csv: Path
    summary_json: Path | None = None
    figure_data: Path | None = None


def runs_rows(records: Sequence[RunRecord]) -> list[list[Any]]:
    rows = []
    for r in sort_records(records):
        t = r.tokens
        rows.append(
            [
                r.test_id,
                r.tier,
                r.subtest,
                r.run_id,
                r.exit_code,
                r.timed_out,
                r.duration_s,
                t.input,
                t.output,
                t.cache_create,
                t.cache_read,
                t.total(),
                r.agent_cost_usd,
                r.judge_cost_usd,
                r.consensus_score,
                r.grade,
                r.passed,
            ]
        )
    return rows


def _sorted_verdicts(r: RunRecord) -> list[JudgeVerdict]:
    return sorted(r.verdicts, key=lambda v: v.judge_model)


def write_tables(records: Sequence[RunRecord], out_dir: str | Path) -> ReportBundle:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sort_records(records)
    if len({r.key + (r.test_id,) for r in ordered}) != len(ordered):
        raise DomainError("duplicate run records")
    judge_rows = []
    crit_rows = []
    for r in ordered:
        base = [r.test_id, r.tier, r.subtest, r.run_id]
        for v in _sorted_verdicts(r):
            judge_rows.append(base + [v.judge_model, v.final_score, v.grade, v.above_and_beyond, v.duration_s, v.cost_usd])
            for cat, cs in sorted(v.category_scores.items()):
                crit_rows.append(
                    base
                    + [
                        v.judge_model,
                        cat,
                        None if cs is None else cs.achieved,
                        None if cs is None else cs.max,
                        r.category_weights.get(cat),
                    ]
                )
    bundle = ReportBundle(out / "runs.csv", out / "judges.csv", out / "criteria.csv")
    _write(bundle.runs_csv, _csv_text(RUNS_COLUMNS, runs_rows(ordered)))
    _write(bundle.judges_csv, _csv_text(JUDGES_COLUMNS, judge_rows))
    _write(bundle.criteria_csv, _csv_text(CRITERIA_COLUMNS, crit_rows))
    return bundle


# -- summary ---------------------------------------------------------------------


@dataclass(frozen=True)
class TierSummary:
    tier: str
    runs: int
    pass_rate: metrics.MetricEstimate
    mean_score: float | None
    grade: Grade | None
    mean_cost: float
    cop: Any
    tokens: TokenStats
    agent_s: float
    judge_s: float
    consistency: float | None


def summarize_tier(tier: str, records: Sequence[RunRecord]) -> TierSummary:
    if not records:
        raise DomainError(f"no records for tier {tier}")
    pr = metrics.pass_rate(r.passed for r in records)
    scores = [r.consensus_score for r in records if r.consensus_score is not None]
    mean_score = math.fsum(scores) / len(scores) if scores else None
    grade = None
    if mean_score is not None:
        all_s = all(r.grade is Grade.S for r in records if r.evaluable)
        grade = grade_for_score(min(1.0, max(0.0, mean_score)), all_s)
    mean_cost = math.fsum(r.agent_cost_usd for r in records) / len(records)
    return TierSummary(
        tier=tier,
        runs=len(records),
        pass_rate=pr,
        mean_score=mean_score,
        grade=grade,
        mean_cost=mean_cost,
        cop=metrics.cost_of_pass(mean_cost, pr.value),
        tokens=TokenStats.sum(r.tokens for r in records),
        agent_s=math.fsum(r.duration_s for r in records),
        judge_s=math.fsum(r.judge_duration_s for r in records),
        consistency=metrics.consistency(scores) if len(scores) >= 2 else None,
    )


def _by_tier(records: Iterable[RunRecord]) -> dict[str, list[RunRecord]]:
    groups: dict[str, list[RunRecord]] = defaultdict(list)
    for r in sort_records(records):
        groups[r.tier].append(r)
    return dict(sorted(groups.items(), key=lambda kv: _tier_key(kv[0])))


def agreement(records: Sequence[RunRecord]) -> metrics.AgreementReport | None:
    """Judge agreement over runs that every judge scored."""
    judges = sorted({v.judge_model for r in records for v in r.verdicts})
    if len(judges) < 2:
        return None
    matrix: list[list[float]] = [[] for _ in judges]
    for r in sort_records(records):
        scores = {v.judge_model: v.final_score for v in r.verdicts}
        if all(j in scores for j in judges):
            for i, j in enumerate(judges):
                matrix[i].append(scores[j])
    if len(matrix[0]) < 2:
        return None
    return metrics.judge_agreement(matrix, judges)


def summary_dict(records: Sequence[RunRecord]) -> dict[str, Any]:
    if not records:
        raise DomainError("summary of zero records")
    tiers = {}
    cops = {}
    for tier, recs in _by_tier(records).items():
        ts = summarize_tier(tier, recs)
        cops[tier] = ts.cop
        lat = metrics.latency_breakdown(ts.agent_s, ts.judge_s)
        pr_entry: dict[str, Any] = {"value": ts.pass_rate.value, "n": ts.pass_rate.n}
        if ts.pass_rate.has_ci:
            pr_entry["ci95"] = [ts.pass_rate.ci_low, ts.pass_rate.ci_high]
        tiers[tier] = {
            "runs": ts.runs,
            "pass_rate": ts.pass_rate.value,
            "pass_rate_detail": pr_entry,
            "mean_score": ts.mean_score,
            "grade": ts.grade.value if ts.grade else None,
            "mean_cost_usd": ts.mean_cost,
            "cop": ts.cop,
            "tokens": {**ts.tokens.to_dict(), "total": ts.tokens.total()},
            "latency": lat,
            "consistency": ts.consistency,
            "subtests": sorted({r.subtest for r in recs}),
        }
    f_tier, f_val = metrics.frontier_cop(cops)
    agent_cost = math.fsum(r.agent_cost_usd for r in records)
    judge_cost = math.fsum(r.judge_cost_usd for r in records)
    agr = agreement(records)
    agr_dict = None
    if agr is not None:
        agr_dict = {
            "judges": list(agr.judges),
            "n_runs": agr.n_runs,
            "low_sample": agr.low_sample,
            "krippendorff_alpha_interval": agr.krippendorff_alpha_interval,
            "pairwise": [
                {
                    "judge_a": a,
                    "judge_b": b,
                    "spearman_rho": p.spearman_rho,
                    "pearson_r": p.pearson_r,
                    "mean_abs_delta": p.mean_abs_delta,
                }
                for (a, b), p in agr.pairwise.items()
            ],
        }
    data = {
        "schema_version": SCHEMA_VERSION,
        "test_ids": sorted({r.test_id for r in records}),
        "tiers": tiers,
        "totals": {
            "runs": len(records),
            "judge_evaluations": sum(len(r.verdicts) for r in records),
            "judge_failures": sum(len(r.judge_failures) for r in records),
            "errored_runs": sum(1 for r in records if r.error),
            "agent_cost_usd": agent_cost,
            "judge_cost_usd": judge_cost,
            "total_cost": agent_cost + judge_cost,
            "total_duration": math.fsum(r.duration_s + r.judge_duration_s for r in records),
            "frontier_cop": {"tier": f_tier, "value": f_val},
        },
        "agreement": agr_dict,
    }
    return _round(data)


def write_summary(records: Sequence[RunRecord], out_dir: str | Path) -> Path:
    data = summary_dict(records)
    path = Path(out_dir) / "summary.json"
    _write(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return path


# -- figures ---------------------------------------------------------------------

VEGA_SCHEMA = "https://vega.github.io/schema/vega-lite/v5.json"


def _spec(name: str, title: str, mark: str, encoding: Mapping[str, Any], **extra: Any) -> dict[str, Any]:
    spec = {
        "$schema": VEGA_SCHEMA,
        "title": title,
        "data": {"url": f"{name}.csv", "format": {"type": "csv"}},
        "mark": mark,
        "encoding": dict(encoding),
    }
    spec.update(extra)
    return spec


def _figure_tables(records: Sequence[RunRecord]) -> dict[str, tuple[Sequence[str], list[list[Any]], dict]]:
    groups = _by_tier(records)
    figs: dict[str, tuple[Sequence[str], list[list[Any]], dict]] = {}

    rows = []
    for tier, recs in groups.items():
        tot = TokenStats.sum(r.tokens for r in recs)
        fractions = metrics.token_distribution(tot) or {}
        for ttype, count in tot.to_dict().items():
            rows.append([tier, ttype, count, fractions.get(ttype)])
    figs["token_distribution"] = (
        ("tier", "token_type", "tokens", "fraction"),
        rows,
        _spec(
            "token_distribution",
            "Token distribution by tier and type",
            "bar",
            {
                "x": {"field": "tier", "type": "ordinal"},
                "y": {"field": "tokens", "type": "quantitative", "stack": "zero"},
                "color": {"field": "token_type", "type": "nominal"},
            },
        ),
    )

    cells: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    for tier, recs in groups.items():
        for r in recs:
            for v in r.verdicts:
                for cat, cs in v.category_scores.items():
                    if cs is not None:
                        cells[(tier, judge_label(v.judge_model), cat)].append(cs.ratio)
    rows = [
        [tier, judge, cat, math.fsum(vals) / len(vals)]
        for (tier, judge, cat), vals in sorted(cells.items(), key=lambda kv: (_tier_key(kv[0][0]), kv[0][1], kv[0][2]))
    ]
    figs["criteria_by_tier"] = (
        ("tier", "judge", "category", "score"),
        rows,
        _spec(
            "criteria_by_tier",
            "Per-criteria scores by tier",
            "bar",
            {
                "x": {"field": "tier", "type": "ordinal"},
                "xOffset": {"field": "category", "type": "nominal"},
                "y": {"field": "score", "type": "quantitative", "aggregate": "mean"},
                "color": {"field": "category", "type": "nominal"},
            },
        ),
    )

    per_judge: dict[tuple[str, str], list[float]] = defaultdict(list)
    weights: dict[str, float] = {}
    for r in sort_records(records):
        weights.update(r.category_weights)
        for v in r.verdicts:
            for cat, cs in v.category_scores.items():
                if cs is not None:
                    per_judge[(judge_label(v.judge_model), cat)].append(cs.ratio)
    rows = []
    for (judge, cat), vals in sorted(per_judge.items()):
        arr = np.asarray(vals, dtype=float)
        std = float(arr.std(ddof=1)) if arr.size > 1 else None
        rows.append([judge, cat, weights.get(cat), float(arr.mean()), std, arr.size])
    figs["criteria_summary"] = (
        ("judge", "category", "weight", "mean", "std", "n"),
        rows,
        _spec(
            "criteria_summary",
            "Per-criteria mean and spread by judge",
            "bar",
            {
                "x": {"field": "category", "type": "nominal"},
                "y": {"field": "mean", "type": "quantitative"},
                "color": {"field": "judge", "type": "nominal"},
            },
        ),
    )

    rows = []
    for tier, recs in groups.items():
        for r in recs:
            for v in _sorted_verdicts(r):
                rows.append([tier, r.subtest, r.run_id, judge_label(v.judge_model), v.final_score])
    figs["judge_variance"] = (
        ("tier", "subtest", "run_id", "judge", "final_score"),
        rows,
        _spec(
            "judge_variance",
            "Per-judge scoring variance across tiers",
            "boxplot",
            {
                "x": {"field": "judge", "type": "nominal"},
                "y": {"field": "final_score", "type": "quantitative"},
                "column": {"field": "tier", "type": "ordinal"},
            },
        ),
    )

    agr = agreement(records)
    rows = []
    if agr is not None:
        for (a, b), p in agr.pairwise.items():
            rows.append([judge_label(a), judge_label(b), p.spearman_rho, p.pearson_r, p.mean_abs_delta, agr.n_runs])
    figs["judge_agreement"] = (
        ("judge_a", "judge_b", "spearman_rho", "pearson_r", "mean_abs_delta", "n"),
        rows,
        _spec(
            "judge_agreement",
            "Pairwise judge agreement",
            "rect",
            {
                "x": {"field": "judge_a", "type": "nominal"},
                "y": {"field": "judge_b", "type": "nominal"},
                "color": {"field": "pearson_r", "type": "quantitative", "scale": {"domain": [-1, 1]}},
            },
        ),
    )
    return figs


def emit_figure_data(records: Sequence[RunRecord], out_dir: str | Path) -> Path:
    if not records:
        raise DomainError("figure data needs at least one record")
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    for name, (cols, rows, spec) in _figure_tables(records).items():
        _write(fig_dir / f"{name}.csv", _csv_text(cols, rows))
        _write(fig_dir / f"{name}.spec.json", json.dumps(spec, indent=2, sort_keys=True) + "\n")
    return fig_dir


def write_reports(records: Sequence[RunRecord], out_dir: str | Path) -> ReportBundle:
    """Tables always; summary and figures when there is at least one record."""
    bundle = write_tables(records, out_dir)
    if not records:
        return bundle
    return ReportBundle(
        bundle.runs_csv,
        bundle.judges_csv,
        bundle.criteria_csv,
        write_summary(records, out_dir),
        emit_figure_data(records, out_dir),
    )
