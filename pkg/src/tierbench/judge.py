"""Judge prompts, verdict parsing, rubric scoring and multi-judge consensus."""

from __future__ import annotations

import json
import logging
import math
import re
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from tierbench.adapter import parse_usage
from tierbench.domain import (
    DEFAULT_PRICING,
    SCORE_TOL,
    DeductionSeverity,
    Grade,
    ItemKind,
    PricingTable,
    RubricSpec,
    TestCase,
    agent_cost,
    grade_for_score,
)
from tierbench.errors import (
    ConfigError,
    DomainError,
    JudgeTransportError,
    UnscoreableError,
    VerdictParseError,
)
from tierbench.workspace import ArtifactBundle

logger = logging.getLogger(__name__)

NA = "NA"
SCORE_DECIMALS = 9
DEFAULT_STDOUT_CAP = 64 * 1024
DEDUCTION_CATEGORY = "overall_quality"
SCORE_DISCREPANCY_TOL = 1e-6

_FENCE_RE = re.compile(r"```(?:json)?[ \t]*\n(.*?)\n[ \t]*```", re.DOTALL)

RESPONSE_SCHEMA = """\
Respond with exactly one fenced ```json block of this shape, followed by
free-form rationale if you wish:

{
  "items": {"<item id>": <score 0..1> | "NA", ...},
  "category_notes": {"<category>": "<short note>", ...},
  "deductions": [{"severity": "<label>", "amount": <points>, "note": "<why>"}],
  "above_and_beyond": <true|false>,
  "final_score": <your computed total 0..1>,
  "rationale": "<prose>"
}

Binary items take 0 or 1. Graduated and subjective items take any value in
[0, 1]. Use "NA" only for items that cannot apply to this task. Deductions are
subtracted from the overall_quality category (in points). Set
above_and_beyond only when the solution exceeds what was asked."""


# -- scoring -------------------------------------------------------------------


@dataclass(frozen=True)
class CategoryScore:
    achieved: float
    max: float

    @property
    def ratio(self) -> float:
        return self.achieved / self.max


@dataclass(frozen=True)
class Deduction:
    severity: DeductionSeverity
    amount: float
    note: str = ""


def _deduction_category(rubric: RubricSpec) -> str | None:
    names = [c.name for c in rubric.categories]
    if DEDUCTION_CATEGORY in names:
        return DEDUCTION_CATEGORY
    for cat in rubric.categories:
        if cat.items and all(i.kind is ItemKind.SUBJECTIVE for i in cat.items):
            return cat.name
    return None


def category_scores(
    item_scores: Mapping[str, float | str],
    rubric: RubricSpec,
    deductions: Sequence[Deduction] = (),
) -> dict[str, CategoryScore | None]:
    """Per-category (achieved, max) points; ``None`` when every item is N/A."""
    out: dict[str, CategoryScore | None] = {}
    target = _deduction_category(rubric)
    penalty = math.fsum(d.amount for d in deductions)
    for cat in rubric.categories:
        achieved = maximum = 0.0
        for item in cat.items:
            score = item_scores.get(item.id, NA)
            if score == NA:
                continue
            achieved += float(score) * item.max_points
            maximum += item.max_points
        if maximum == 0:
            out[cat.name] = None
            continue
        if cat.name == target:
            achieved = max(0.0, achieved - penalty)
        out[cat.name] = CategoryScore(achieved, maximum)
    return out


def final_score(categories: Mapping[str, CategoryScore | None], rubric: RubricSpec) -> float:
    """Weighted sum of category ratios, renormalized over applicable categories."""
    num = 0.0
    wsum = 0.0
    for cat in rubric.categories:
        cs = categories.get(cat.name)
        if cs is None:
            continue
        if cs.max <= 0:
            raise DomainError(f"category {cat.name}: max points must be > 0")
        num += cat.weight * (cs.achieved / cs.max)
        wsum += cat.weight
    if wsum == 0:
        raise UnscoreableError("every rubric category is N/A")
    # Rounding drops float noise from the weighted sum so equal verdicts tie
    # exactly, which rank statistics depend on.
    return min(1.0, max(0.0, round(num / wsum, SCORE_DECIMALS)))


# -- verdicts ------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    judge_model: str
    item_scores: Mapping[str, float | str]
    category_scores: Mapping[str, CategoryScore | None]
    deductions: tuple[Deduction, ...]
    above_and_beyond: bool
    final_score: float
    grade: Grade
    raw_response_path: Path | None = None
    reported_score: float | None = None
    duration_s: float = 0.0
    cost_usd: float = 0.0
    warnings: tuple[str, ...] = ()

    def with_meta(self, **changes: Any) -> JudgeVerdict:
        from dataclasses import replace

        return replace(self, **changes)


def extract_block(raw: str) -> dict:
    """Pull the structured JSON object out of a judge response."""
    for match in _FENCE_RE.finditer(raw):
        try:
            data = json.loads(match.group(1))
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict):
            return data
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise VerdictParseError("no parseable JSON block in judge response") from exc
    if not isinstance(data, dict):
        raise VerdictParseError("judge response JSON is not an object")
    return data


def _parse_items(raw_items: Any, rubric: RubricSpec) -> dict[str, float | str]:
    if not isinstance(raw_items, Mapping):
        raise VerdictParseError("'items' must be an object")
    index = rubric.item_index()
    unknown = sorted(set(raw_items) - set(index))
    if unknown:
        raise VerdictParseError(f"unknown rubric item(s): {', '.join(unknown)}")
    missing = sorted(set(index) - set(raw_items))
    if missing:
        raise VerdictParseError(f"missing rubric item(s): {', '.join(missing)}")
    out: dict[str, float | str] = {}
    for item_id, value in raw_items.items():
        item = index[item_id][1]
        if isinstance(value, str) and value.strip().upper() in {"NA", "N/A"}:
            out[item_id] = NA
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise VerdictParseError(f"item {item_id}: score {value!r} is not a number or NA")
        score = float(value)
        if not 0.0 <= score <= 1.0:
            raise VerdictParseError(f"item {item_id}: score {score} outside [0, 1]")
        if item.kind is ItemKind.BINARY and score not in (0.0, 1.0):
            raise VerdictParseError(f"binary item {item_id} scored {score}")
        out[item_id] = score
    return out


def _parse_deductions(raw: Any, warnings: list[str]) -> tuple[Deduction, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise VerdictParseError("'deductions' must be a list")
    out = []
    for entry in raw:
        if not isinstance(entry, Mapping):
            raise VerdictParseError("deduction entries must be objects")
        try:
            amount = float(entry["amount"])
            severity = (
                DeductionSeverity.parse(str(entry["severity"]))
                if "severity" in entry
                else DeductionSeverity.for_amount(amount)
            )
        except (KeyError, TypeError, ValueError, DomainError) as exc:
            raise VerdictParseError(f"bad deduction {entry!r}: {exc}") from exc
        if amount < 0:
            raise VerdictParseError(f"deduction amount {amount} must be >= 0")
        if not severity.contains(amount):
            warnings.append(
                f"deduction {amount} outside the {severity.label} band [{severity.low}, {severity.high})"
            )
        out.append(Deduction(severity, amount, str(entry.get("note", ""))))
    return tuple(out)


def parse_verdict(
    raw: str,
    rubric: RubricSpec,
    judge_model: str,
    raw_response_path: Path | None = None,
) -> JudgeVerdict:
    """Validate a judge response and recompute its score from the items."""
    data = extract_block(raw)
    if "items" not in data:
        raise VerdictParseError("judge response has no 'items'")
    warnings: list[str] = []
    items = _parse_items(data["items"], rubric)
    deductions = _parse_deductions(data.get("deductions"), warnings)
    aab = data.get("above_and_beyond", False)
    if not isinstance(aab, bool):
        raise VerdictParseError("'above_and_beyond' must be a boolean")
    cats = category_scores(items, rubric, deductions)
    score = final_score(cats, rubric)
    reported = data.get("final_score")
    if reported is not None:
        try:
            reported = float(reported)
        except (TypeError, ValueError):
            warnings.append(f"ignoring non-numeric final_score {reported!r}")
            reported = None
    if reported is not None and abs(reported - score) > SCORE_DISCREPANCY_TOL:
        warnings.append(f"self-reported final_score {reported} overridden by recomputed {score:.6f}")
    for w in warnings:
        logger.warning("%s: %s", judge_model, w)
    return JudgeVerdict(
        judge_model=judge_model,
        item_scores=items,
        category_scores=cats,
        deductions=deductions,
        above_and_beyond=aab,
        final_score=score,
        grade=grade_for_score(score, aab),
        raw_response_path=raw_response_path,
        reported_score=reported,
        warnings=tuple(warnings),
    )


def render_verdict(
    items: Mapping[str, float | str],
    deductions: Sequence[Mapping[str, Any]] = (),
    above_and_beyond: bool = False,
    final: float | None = None,
    rationale: str = "",
) -> str:
    """Format a verdict the way a well-behaved judge would answer."""
    block = {
        "items": dict(items),
        "deductions": list(deductions),
        "above_and_beyond": above_and_beyond,
        "final_score": final,
        "rationale": rationale,
    }
    return "```json\n" + json.dumps(block, indent=2, sort_keys=True) + "\n```\n"


# -- consensus -------------------------------------------------------------------


@dataclass(frozen=True)
class ConsensusResult:
    mean_score: float
    per_judge: tuple[JudgeVerdict, ...]
    passed: bool
    grade: Grade


def consensus(verdicts: Sequence[JudgeVerdict], pass_threshold: float) -> ConsensusResult:
    if not verdicts:
        raise UnscoreableError("no successful judge verdicts")
    mean = math.fsum(v.final_score for v in verdicts) / len(verdicts)
    mean = min(1.0, max(0.0, mean))
    aab = all(v.above_and_beyond for v in verdicts)
    return ConsensusResult(
        mean_score=mean,
        per_judge=tuple(verdicts),
        passed=mean >= pass_threshold - SCORE_TOL,
        grade=grade_for_score(mean, aab),
    )


# -- prompt ----------------------------------------------------------------------


def _read_capped(path: Path, cap: int) -> str:
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        return "(no output captured)"
    if len(data) <= cap:
        return data.decode("utf-8", errors="replace")
    head = data[:cap].decode("utf-8", errors="ignore")
    return head + f"\n[... output truncated: {len(data) - cap} of {len(data)} bytes omitted ...]"


def _rubric_text(rubric: RubricSpec) -> str:
    lines = []
    for cat in rubric.categories:
        lines.append(f"### {cat.name} (weight {cat.weight:.2f})")
        if cat.description:
            lines.append(cat.description)
        for item in cat.items:
            lines.append(f"- {item.id} [{item.kind.value}, {item.max_points:g} pt]: {item.description}")
        lines.append("")
    return "\n".join(lines).rstrip()


def _calibration_text() -> str:
    rows = ["| severity | points |", "|---|---|"]
    for sev in DeductionSeverity:
        hi = "+" if math.isinf(sev.high) else f"-{sev.high:.2f}"
        rows.append(f"| {sev.label} | {sev.low:.2f}{hi} |")
    return "\n".join(rows)


def build_judge_prompt(test: TestCase, artifacts: ArtifactBundle, stdout_cap: int = DEFAULT_STDOUT_CAP) -> str:
    """Deterministic judge prompt; identical for every judge model."""
    expected = test.expected_stdout if test.expected_stdout is not None else "(not specified)"
    listing = "\n".join(artifacts.file_listing) or "(empty)"
    diff = artifacts.git_diff or "(no changes)"
    sections = [
        ("Task", test.prompt.rstrip()),
        ("Expected output", expected),
        ("Rubric", _rubric_text(test.rubric)),
        ("Deduction calibration", _calibration_text()),
        ("Git diff", diff.rstrip("\n")),
        ("Workspace files", listing),
        ("Agent stdout", _read_capped(artifacts.stdout_path, stdout_cap).rstrip("\n")),
        ("Response format", RESPONSE_SCHEMA),
    ]
    parts = [f"# Evaluation of {test.id}: {test.name}"]
    for title, body in sections:
        parts.append(f"## {title}\n\n{body}")
    return "\n\n".join(parts) + "\n"


# -- backends ------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeContext:
    test_id: str
    tier: str
    subtest: str
    run_id: int

    @property
    def fixture_key(self) -> str:
        return f"{self.tier.lower()}-run{self.run_id}"


@dataclass(frozen=True)
class JudgeResponse:
    text: str
    duration_s: float | None = None
    cost_usd: float | None = None


class JudgeBackend(Protocol):
    model_id: str

    def evaluate(self, system_prompt: str, prompt: str, context: JudgeContext) -> JudgeResponse: ...


class ScriptedJudge:
    """Replays recorded verdicts keyed by run (``t0-run1`` style keys)."""

    def __init__(
        self,
        model_id: str,
        verdicts: Mapping[str, Mapping[str, Any]],
        key: Callable[[JudgeContext], str] = lambda ctx: ctx.fixture_key,
    ) -> None:
        self.model_id = model_id
        self._verdicts = dict(verdicts)
        self._key = key

    def evaluate(self, system_prompt: str, prompt: str, context: JudgeContext) -> JudgeResponse:
        key = self._key(context)
        try:
            v = self._verdicts[key]
        except KeyError:
            raise JudgeTransportError(f"{self.model_id}: no scripted verdict for {key}") from None
        if "raw" in v:
            text = str(v["raw"])
        else:
            text = render_verdict(
                v["items"],
                v.get("deductions", ()),
                bool(v.get("above_and_beyond", False)),
                v.get("final_score"),
                v.get("rationale", ""),
            )
        return JudgeResponse(text, v.get("duration_s"), v.get("cost_usd"))


class CommandJudge:
    """Judge backed by a CLI; the prompt goes to stdin, the verdict comes on stdout.

    ``command`` may reference ``{model}`` and ``{system_prompt_file}``.
    """

    def __init__(
        self,
        model_id: str,
        command: Sequence[str],
        system_prompt_file: str | Path,
        timeout_s: float = 600.0,
        pricing: PricingTable = DEFAULT_PRICING,
        env: Mapping[str, str] | None = None,
    ) -> None:
        self.model_id = model_id
        self.command = list(command)
        self.system_prompt_file = Path(system_prompt_file)
        self.timeout_s = timeout_s
        self.pricing = pricing
        self.env = dict(env) if env is not None else None

    def argv(self) -> list[str]:
        # Plain replacement: other braces (e.g. an inlined system prompt) stay literal.
        out = []
        for part in self.command:
            part = part.replace("{model}", self.model_id)
            out.append(part.replace("{system_prompt_file}", str(self.system_prompt_file)))
        return out

    def evaluate(self, system_prompt: str, prompt: str, context: JudgeContext) -> JudgeResponse:
        start = time.monotonic()
        try:
            proc = subprocess.run(
                self.argv(),
                input=prompt,
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
                env=self.env,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise JudgeTransportError(f"{self.model_id}: {exc}") from exc
        if proc.returncode != 0:
            raise JudgeTransportError(f"{self.model_id}: exit {proc.returncode}: {proc.stderr.strip()[:500]}")
        text = proc.stdout
        usage = parse_usage(text, proc.stderr)
        cost = None
        if usage.api_calls:
            try:
                cost = agent_cost(usage.tokens, self.model_id, self.pricing)
            except ConfigError:  # unknown model in pricing table
                cost = None
            try:
                result = json.loads(text)
                if isinstance(result, Mapping) and isinstance(result.get("result"), str):
                    text = result["result"]
            except json.JSONDecodeError:
                pass
        return JudgeResponse(text, time.monotonic() - start, cost)


# -- orchestration -------------------------------------------------------------


@dataclass(frozen=True)
class JudgeFailure:
    judge_model: str
    error: str
    attempts: int


@dataclass(frozen=True)
class JudgeOutcome:
    verdicts: tuple[JudgeVerdict, ...]
    failures: tuple[JudgeFailure, ...] = ()

    @property
    def judge_time_s(self) -> float:
        return math.fsum(v.duration_s for v in self.verdicts)

    @property
    def judge_cost_usd(self) -> float:
        return math.fsum(v.cost_usd for v in self.verdicts)


def response_filename(model_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", model_id)
    return f"judge-{safe}.txt"


def _run_one(
    backend: JudgeBackend,
    system_prompt: str,
    prompt: str,
    rubric: RubricSpec,
    out_dir: Path,
    context: JudgeContext,
    before_call: Callable[[], Any] | None,
    attempts: int,
) -> JudgeVerdict | JudgeFailure:
    path = out_dir / response_filename(backend.model_id)
    last = ""
    for attempt in range(1, attempts + 1):
        if before_call is not None:
            before_call()
        start = time.monotonic()
        try:
            resp = backend.evaluate(system_prompt, prompt, context)
        except JudgeTransportError as exc:
            last = str(exc)
            logger.warning("judge %s attempt %d failed: %s", backend.model_id, attempt, exc)
            continue
        elapsed = time.monotonic() - start
        path.write_text(resp.text, encoding="utf-8")
        try:
            verdict = parse_verdict(resp.text, rubric, backend.model_id, path)
        except (VerdictParseError, UnscoreableError) as exc:
            last = str(exc)
            logger.warning("judge %s attempt %d unparseable: %s", backend.model_id, attempt, exc)
            continue
        return verdict.with_meta(
            duration_s=resp.duration_s if resp.duration_s is not None else elapsed,
            cost_usd=resp.cost_usd or 0.0,
        )
    return JudgeFailure(backend.model_id, last, attempts)


def run_judges(
    backends: Sequence[JudgeBackend],
    prompt: str,
    rubric: RubricSpec,
    out_dir: str | Path,
    context: JudgeContext,
    system_prompt: str = "",
    parallel: bool = False,
    before_call: Callable[[], Any] | None = None,
    attempts: int = 2,
) -> JudgeOutcome:
    """Invoke each judge (one retry on failure) and collect verdicts in config order.

    ``before_call`` runs before every backend call; the runner passes the
    judge rate limiter's ``acquire`` here.
    """
    if not backends:
        raise DomainError("at least one judge backend is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = (system_prompt, prompt, rubric, out, context, before_call, attempts)
    if parallel and len(backends) > 1:
        with ThreadPoolExecutor(max_workers=len(backends)) as pool:
            results = list(pool.map(lambda b: _run_one(b, *args), backends))
    else:
        results = [_run_one(b, *args) for b in backends]
    verdicts = tuple(r for r in results if isinstance(r, JudgeVerdict))
    failures = tuple(r for r in results if isinstance(r, JudgeFailure))
    return JudgeOutcome(verdicts, failures)


# -- persistence ---------------------------------------------------------------


def verdict_to_dict(v: JudgeVerdict) -> dict[str, Any]:
    return {
        "judge_model": v.judge_model,
        "item_scores": dict(v.item_scores),
        "category_scores": {
            k: (None if cs is None else {"achieved": cs.achieved, "max": cs.max})
            for k, cs in v.category_scores.items()
        },
        "deductions": [
            {"severity": d.severity.label, "amount": d.amount, "note": d.note} for d in v.deductions
        ],
        "above_and_beyond": v.above_and_beyond,
        "final_score": v.final_score,
        "grade": v.grade.value,
        "raw_response_path": v.raw_response_path.name if v.raw_response_path else None,
        "reported_score": v.reported_score,
        "duration_s": v.duration_s,
        "cost_usd": v.cost_usd,
        "warnings": list(v.warnings),
    }


def verdict_from_dict(data: Mapping[str, Any], base_dir: Path | None = None) -> JudgeVerdict:
    raw_path = data.get("raw_response_path")
    return JudgeVerdict(
        judge_model=str(data["judge_model"]),
        item_scores=dict(data["item_scores"]),
        category_scores={
            k: (None if cs is None else CategoryScore(float(cs["achieved"]), float(cs["max"])))
            for k, cs in data["category_scores"].items()
        },
        deductions=tuple(
            Deduction(DeductionSeverity.parse(d["severity"]), float(d["amount"]), d.get("note", ""))
            for d in data.get("deductions", ())
        ),
        above_and_beyond=bool(data["above_and_beyond"]),
        final_score=float(data["final_score"]),
        grade=Grade(data["grade"]),
        raw_response_path=(base_dir / raw_path) if (raw_path and base_dir) else None,
        reported_score=data.get("reported_score"),
        duration_s=float(data.get("duration_s", 0.0)),
        cost_usd=float(data.get("cost_usd", 0.0)),
        warnings=tuple(data.get("warnings", ())),
    )


def load_system_prompt(path: str | Path | None = None) -> str:
    if path is None:
        from importlib import resources

        return resources.files("tierbench").joinpath("data/judge_system_prompt.md").read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")
