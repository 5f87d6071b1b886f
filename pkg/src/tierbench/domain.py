"""Shared value types: test cases, rubrics, grades, token counts and pricing."""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from tierbench.errors import ConfigError, DomainError

SCORE_TOL = 1e-9
WEIGHT_TOL = 1e-9
DEFAULT_TIMEOUT_S = 3600.0
DEFAULT_PASS_THRESHOLD = 0.60

_TEST_ID_RE = re.compile(r"^test-\d{3}$")
_HEX_RE = re.compile(r"^[0-9a-fA-F]{7,40}$")


class Grade(enum.Enum):
    S = "S"
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    F = "F"

    @property
    def rank(self) -> int:
        return _GRADE_RANK[self]

    @property
    def label(self) -> str:
        return _GRADE_LABEL[self]

    def __lt__(self, other: Grade) -> bool:
        if not isinstance(other, Grade):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: Grade) -> bool:
        if not isinstance(other, Grade):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other: Grade) -> bool:
        if not isinstance(other, Grade):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: Grade) -> bool:
        if not isinstance(other, Grade):
            return NotImplemented
        return self.rank >= other.rank


_GRADE_RANK = {Grade.F: 0, Grade.D: 1, Grade.C: 2, Grade.B: 3, Grade.A: 4, Grade.S: 5}
_GRADE_LABEL = {
    Grade.S: "Amazing",
    Grade.A: "Excellent",
    Grade.B: "Good",
    Grade.C: "Acceptable",
    Grade.D: "Marginal",
    Grade.F: "Failing",
}

# Lower bounds, checked top-down. S is handled separately.
GRADE_THRESHOLDS: tuple[tuple[Grade, float], ...] = (
    (Grade.A, 0.80),
    (Grade.B, 0.60),
    (Grade.C, 0.40),
    (Grade.D, 0.20),
)


def grade_for_score(score: float, above_and_beyond: bool = False) -> Grade:
    """Map a score in [0, 1] onto the letter scale.

    S needs both a perfect score and an explicit ``above_and_beyond`` flag
    from the judge; a perfect score without it is an A.
    """
    if math.isnan(score) or score < -SCORE_TOL or score > 1.0 + SCORE_TOL:
        raise DomainError(f"score {score!r} outside [0, 1]")
    if above_and_beyond and abs(score - 1.0) <= SCORE_TOL:
        return Grade.S
    for grade, floor in GRADE_THRESHOLDS:
        if score >= floor - SCORE_TOL:
            return grade
    return Grade.F


class ItemKind(enum.Enum):
    BINARY = "binary"
    GRADUATED = "graduated"
    SUBJECTIVE = "subjective"


@dataclass(frozen=True)
class RubricItem:
    id: str
    kind: ItemKind
    max_points: float = 1.0
    description: str = ""

    def __post_init__(self) -> None:
        if not self.max_points > 0:
            raise ConfigError(f"rubric item {self.id!r}: max_points must be > 0")


@dataclass(frozen=True)
class RubricCategory:
    name: str
    weight: float
    items: tuple[RubricItem, ...]
    description: str = ""


@dataclass(frozen=True)
class RubricSpec:
    categories: tuple[RubricCategory, ...]

    def category(self, name: str) -> RubricCategory:
        for cat in self.categories:
            if cat.name == name:
                return cat
        raise KeyError(name)

    def item_index(self) -> dict[str, tuple[RubricCategory, RubricItem]]:
        return {item.id: (cat, item) for cat in self.categories for item in cat.items}

    @property
    def total_weight(self) -> float:
        return math.fsum(c.weight for c in self.categories)

    def to_dict(self) -> dict:
        return {
            "categories": [
                {
                    "name": c.name,
                    "weight": c.weight,
                    "description": c.description,
                    "items": [
                        {
                            "id": i.id,
                            "kind": i.kind.value,
                            "max_points": i.max_points,
                            "description": i.description,
                        }
                        for i in c.items
                    ],
                }
                for c in self.categories
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> RubricSpec:
        try:
            cats = tuple(
                RubricCategory(
                    name=str(c["name"]),
                    weight=float(c["weight"]),
                    description=str(c.get("description", "")),
                    items=tuple(
                        RubricItem(
                            id=str(i["id"]),
                            kind=ItemKind(i.get("kind", "binary")),
                            max_points=float(i.get("max_points", 1.0)),
                            description=str(i.get("description", "")),
                        )
                        for i in c.get("items", ())
                    ),
                )
                for c in data["categories"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed rubric: {exc}") from exc
        return cls(cats)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_rubric(rubric: RubricSpec) -> ValidationReport:
    violations: list[str] = []
    if not rubric.categories:
        violations.append("rubric has no categories")
    seen: set[str] = set()
    for cat in rubric.categories:
        if not cat.weight > 0:
            violations.append(f"category {cat.name!r}: weight {cat.weight} must be > 0")
        elif cat.weight > 1.0 + WEIGHT_TOL:
            violations.append(f"category {cat.name!r}: weight {cat.weight} exceeds 1.0")
        if not cat.items:
            violations.append(f"category {cat.name!r}: has no items")
        for item in cat.items:
            if item.id in seen:
                violations.append(f"item {item.id!r}: duplicate id")
            seen.add(item.id)
    total = rubric.total_weight
    if rubric.categories and abs(total - 1.0) > WEIGHT_TOL:
        violations.append(f"weights sum {total:.6g} ≠ 1.0")
    return ValidationReport(tuple(violations))


class DeductionSeverity(enum.Enum):
    """Calibration scale judges use for subjective penalties."""

    NEGLIGIBLE = ("negligible", 0.00, 0.05)
    TRIVIAL = ("trivial", 0.05, 0.15)
    MINOR = ("minor", 0.15, 0.30)
    MODERATE = ("moderate", 0.30, 0.50)
    MAJOR = ("major", 0.50, 0.80)
    SEVERE = ("severe", 0.80, 1.50)
    CRITICAL = ("critical", 1.50, math.inf)

    def __init__(self, label: str, low: float, high: float) -> None:
        self.label = label
        self.low = low
        self.high = high

    def contains(self, amount: float) -> bool:
        return self.low <= amount < self.high

    @classmethod
    def parse(cls, label: str) -> DeductionSeverity:
        for sev in cls:
            if sev.label == label.strip().lower():
                return sev
        raise DomainError(f"unknown deduction severity {label!r}")

    @classmethod
    def for_amount(cls, amount: float) -> DeductionSeverity:
        if amount < 0 or math.isnan(amount):
            raise DomainError(f"deduction amount {amount!r} must be >= 0")
        for sev in cls:
            if sev.contains(amount):
                return sev
        raise AssertionError("unreachable: scale covers [0, inf)")


@dataclass(frozen=True)
class TestCase:
    id: str
    name: str
    repo_url: str
    pinned_commit: str
    prompt: str
    rubric: RubricSpec
    timeout_s: float = DEFAULT_TIMEOUT_S
    pass_threshold: float = DEFAULT_PASS_THRESHOLD
    expected_stdout: str | None = None

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self) -> None:
        if not _TEST_ID_RE.match(self.id):
            raise ConfigError(f"test id {self.id!r} does not match test-NNN")
        if not _HEX_RE.match(self.pinned_commit):
            raise ConfigError(f"pinned commit {self.pinned_commit!r} is not a 7-40 char hex hash")
        if not 0 < self.pass_threshold <= 1:
            raise ConfigError(f"pass threshold {self.pass_threshold} outside (0, 1]")
        if not self.timeout_s > 0:
            raise ConfigError(f"timeout {self.timeout_s} must be > 0")


@dataclass(frozen=True)
class TokenStats:
    input: int = 0
    output: int = 0
    cache_create: int = 0
    cache_read: int = 0

    def __post_init__(self) -> None:
        for name in ("input", "output", "cache_create", "cache_read"):
            if getattr(self, name) < 0:
                raise DomainError(f"token counter {name} must be >= 0")

    def total(self) -> int:
        return self.input + self.output + self.cache_create + self.cache_read

    def __add__(self, other: TokenStats) -> TokenStats:
        if not isinstance(other, TokenStats):
            return NotImplemented
        return TokenStats(
            self.input + other.input,
            self.output + other.output,
            self.cache_create + other.cache_create,
            self.cache_read + other.cache_read,
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.input, self.output, self.cache_create, self.cache_read)

    def to_dict(self) -> dict[str, int]:
        return {
            "input": self.input,
            "output": self.output,
            "cache_create": self.cache_create,
            "cache_read": self.cache_read,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> TokenStats:
        return cls(
            int(data.get("input", 0)),
            int(data.get("output", 0)),
            int(data.get("cache_create", 0)),
            int(data.get("cache_read", 0)),
        )

    @classmethod
    def sum(cls, stats: Iterable[TokenStats]) -> TokenStats:
        out = cls()
        for s in stats:
            out = out + s
        return out


@dataclass(frozen=True)
class ModelRate:
    input_per_mtok: float
    output_per_mtok: float


@dataclass(frozen=True)
class PricingTable:
    models: Mapping[str, ModelRate]
    cache_write_multiplier: float = 1.25
    cache_read_multiplier: float = 0.10
    version: str = ""
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for model_id, rate in self.models.items():
            if not (rate.input_per_mtok > 0 and rate.output_per_mtok > 0):
                raise ConfigError(f"pricing for {model_id!r}: rates must be > 0")
        if not (self.cache_write_multiplier > 0 and self.cache_read_multiplier > 0):
            raise ConfigError("cache multipliers must be > 0")

    def rate(self, model_id: str) -> ModelRate:
        key = self.aliases.get(model_id, model_id)
        try:
            return self.models[key]
        except KeyError:
            raise ConfigError(f"no pricing entry for model {model_id!r}") from None

    @classmethod
    def from_dict(cls, data: Mapping) -> PricingTable:
        try:
            models = {
                str(k): ModelRate(float(v["input"]), float(v["output"]))
                for k, v in data["models"].items()
            }
            aliases = {}
            for k, v in data["models"].items():
                for alias in v.get("aliases", ()):
                    aliases[str(alias)] = str(k)
            return cls(
                models=models,
                cache_write_multiplier=float(data.get("cache_write_multiplier", 1.25)),
                cache_read_multiplier=float(data.get("cache_read_multiplier", 0.10)),
                version=str(data.get("version", "")),
                aliases=aliases,
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"malformed pricing table: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> PricingTable:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))


SONNET_4_5 = "claude-sonnet-4-5-20250929"
OPUS_4_5 = "claude-opus-4-5-20251101"
HAIKU_4_5 = "claude-haiku-4-5-20251001"

# January 2026 list prices, USD per million tokens.
DEFAULT_PRICING = PricingTable(
    models={
        OPUS_4_5: ModelRate(15.0, 75.0),
        SONNET_4_5: ModelRate(3.0, 15.0),
        HAIKU_4_5: ModelRate(1.0, 5.0),
    },
    version="2026-01",
    aliases={"opus": OPUS_4_5, "sonnet": SONNET_4_5, "haiku": HAIKU_4_5},
)


def agent_cost(stats: TokenStats, model_id: str, pricing: PricingTable = DEFAULT_PRICING) -> float:
    """Dollar cost of one execution's token usage."""
    rate = pricing.rate(model_id)
    r_in = rate.input_per_mtok / 1e6
    r_out = rate.output_per_mtok / 1e6
    return (
        stats.input * r_in
        + stats.output * r_out
        + stats.cache_create * r_in * pricing.cache_write_multiplier
        + stats.cache_read * r_in * pricing.cache_read_multiplier
    )


def _item(id_: str, kind: str, description: str, max_points: float = 1.0) -> RubricItem:
    return RubricItem(id_, ItemKind(kind), max_points, description)


# Category order and weights used by test-001 and as the default rubric.
DEFAULT_RUBRIC = RubricSpec(
    (
        RubricCategory(
            "functional",
            0.35,
            (
                _item("F1", "binary", "hello.py exists in the working directory"),
                _item("F2", "binary", "python hello.py prints exactly 'Hello, World!'"),
                _item("F3", "binary", "script exits with code 0"),
                _item("F4", "binary", "uses relative paths only"),
            ),
            "File existence, output correctness, exit codes, exact output matching",
        ),
        RubricCategory(
            "code_quality",
            0.20,
            (
                _item("Q1", "binary", "valid Python syntax"),
                _item("Q2", "graduated", "idiomatic, appropriately structured code"),
                _item("Q3", "binary", "no unused imports"),
            ),
            "Syntax validity, idiomatic code, unused imports, PEP8 compliance",
        ),
        RubricCategory(
            "proportionality",
            0.15,
            (
                _item("P1", "binary", "total files created <= 3"),
                _item("P2", "binary", "lines of code <= 3"),
                _item("P3", "graduated", "no unnecessary tests, caches or other artifacts"),
            ),
            "Appropriate scope, minimal files, no unnecessary artifacts or tests",
        ),
        RubricCategory(
            "build_pipeline",
            0.10,
            (
                _item("B1", "binary", "syntax check passes"),
                _item("B2", "binary", "format check passes (if ruff present)"),
                _item("B3", "binary", "no linter errors"),
            ),
            "Build passes, format checks, tests (when applicable), pre-commit hooks",
        ),
        RubricCategory(
            "overall_quality",
            0.20,
            (
                _item("O1", "subjective", "senior engineer would approve"),
                _item("O2", "subjective", "appropriately scoped for task complexity"),
            ),
            "Engineering judgment on appropriateness, maintainability, and approval",
        ),
    )
)
