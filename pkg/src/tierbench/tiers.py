"""Tier definitions, execution phases and the T5/T6 configuration rules."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from tierbench.errors import ConfigError, DependencyError

logger = logging.getLogger(__name__)

BLOCK_IDS = tuple(f"B{i:02d}" for i in range(1, 19))
INSTRUCTION_FILE = "CLAUDE.md"
_BLOCK_RE = re.compile(r"^B(0[1-9]|1[0-8])$")


class Tier(str, enum.Enum):
    T0 = "T0"
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"
    T6 = "T6"

    @property
    def index(self) -> int:
        return int(self.value[1])

    @classmethod
    def parse(cls, value: str | Tier) -> Tier:
        try:
            return cls(str(value.value if isinstance(value, Tier) else value).upper())
        except ValueError:
            raise ConfigError(f"unknown tier {value!r}") from None

    def __str__(self) -> str:
        return self.value


PHASE1 = frozenset({Tier.T0, Tier.T1, Tier.T2, Tier.T3, Tier.T4})

TIER_NAMES = {
    Tier.T0: "Prompts",
    Tier.T1: "Skills",
    Tier.T2: "Tooling",
    Tier.T3: "Delegation",
    Tier.T4: "Hierarchy",
    Tier.T5: "Hybrid",
    Tier.T6: "Super",
}


@dataclass(frozen=True)
class TierConfig:
    tier: Tier
    subtest: str
    blocks: Mapping[str, str] = field(default_factory=dict)
    skills: frozenset[str] = frozenset()
    agents: frozenset[str] = frozenset()
    tools_enabled: bool = False
    source_dir: Path | None = None

    def __post_init__(self) -> None:
        bad = [b for b in self.blocks if not _BLOCK_RE.match(b)]
        if bad:
            raise ConfigError(f"{self.tier}/{self.subtest}: block ids outside B01..B18: {bad}")
        if self.tier is Tier.T0 and (self.skills or self.agents or self.tools_enabled):
            raise ConfigError(f"T0/{self.subtest}: prompt-only tier cannot enable skills, agents or tools")

    @property
    def key(self) -> tuple[Tier, str]:
        return (self.tier, self.subtest)

    def instruction_text(self) -> str | None:
        """The instruction file body assembled from blocks, or None when empty."""
        if not self.blocks:
            return None
        return "\n\n".join(self.blocks[b].rstrip("\n") for b in sorted(self.blocks)) + "\n"


@dataclass(frozen=True)
class Catalog:
    skills: frozenset[str]
    agents: frozenset[str]
    blocks: Mapping[str, str]
    skills_dir: Path | None = None
    agents_dir: Path | None = None

    @classmethod
    def load(cls, root: str | Path) -> Catalog:
        """Read ``skills/``, ``agents/`` and ``blocks/`` under a config root."""
        root = Path(root)
        skills_dir = root / "skills"
        agents_dir = root / "agents"
        blocks_dir = root / "blocks"
        skills = frozenset(p.name for p in skills_dir.iterdir()) if skills_dir.is_dir() else frozenset()
        agents = frozenset(p.stem for p in agents_dir.iterdir()) if agents_dir.is_dir() else frozenset()
        blocks = {}
        if blocks_dir.is_dir():
            for p in sorted(blocks_dir.glob("B*.md")):
                if _BLOCK_RE.match(p.stem):
                    blocks[p.stem] = p.read_text(encoding="utf-8")
        return cls(
            skills,
            agents,
            blocks,
            skills_dir if skills_dir.is_dir() else None,
            agents_dir if agents_dir.is_dir() else None,
        )


@dataclass(frozen=True)
class ScoreEntry:
    mean_score: float
    cop: float | None = None  # None when unattainable

    def __post_init__(self) -> None:
        if not 0.0 <= self.mean_score <= 1.0:
            raise ValueError(f"mean score {self.mean_score} outside [0, 1]")


@dataclass
class TierScoreboard:
    entries: dict[tuple[Tier, str], ScoreEntry] = field(default_factory=dict)

    def record(self, tier: Tier, subtest: str, mean_score: float, cop: float | None = None) -> None:
        self.entries[(Tier.parse(tier), subtest)] = ScoreEntry(mean_score, cop)

    def best_subtest(self, tier: Tier) -> str | None:
        """Highest mean score; lower CoP breaks ties, then subtest name."""
        cells = [(s, e) for (t, s), e in self.entries.items() if t is tier]
        if not cells:
            return None

        def key(item):
            sub, e = item
            cop = e.cop if e.cop is not None else float("inf")
            return (-e.mean_score, cop, sub)

        return min(cells, key=key)[0]

    def tier_score(self, tier: Tier) -> float | None:
        best = self.best_subtest(tier)
        return None if best is None else self.entries[(tier, best)].mean_score


def dependency_phases(
    tiers: Iterable[str | Tier], completed: Iterable[str | Tier] = ()
) -> list[frozenset[Tier]]:
    """Split requested tiers into sequential phases.

    T0-T4 have no prerequisites; T5 needs all of T0-T4 and T6 needs T5,
    either requested in this plan or already ``completed`` (e.g. from a
    checkpoint).
    """
    requested = frozenset(Tier.parse(t) for t in tiers)
    if not requested:
        raise ConfigError("no tiers requested")
    done = frozenset(Tier.parse(t) for t in completed)
    available = requested | done
    if Tier.T5 in requested:
        missing = PHASE1 - available
        if missing:
            raise DependencyError(f"T5 needs results for {sorted(m.value for m in missing)}")
    if Tier.T6 in requested and Tier.T5 not in available:
        raise DependencyError("T6 needs T5 results")
    phases = [requested & PHASE1, requested & {Tier.T5}, requested & {Tier.T6}]
    return [frozenset(p) for p in phases if p]


def merge_for_t5(
    configs: Mapping[Tier, TierConfig],
    scoreboard: TierScoreboard,
    subtest: str = "merged",
) -> TierConfig:
    """Combine each Phase-1 tier's best configuration into one T5 config.

    Skills and agents are unioned, tools are on if any tier enables them, and
    a block defined by several tiers comes from the best-scoring one (lower
    tier index on ties).
    """
    configs = {Tier.parse(t): c for t, c in configs.items()}
    missing = PHASE1 - configs.keys()
    if missing:
        raise DependencyError(f"merge needs configs for {sorted(m.value for m in missing)}")
    contributors = sorted(PHASE1, key=lambda t: t.index)
    scores = {}
    for t in contributors:
        s = scoreboard.entries.get(configs[t].key)
        if s is None:
            s_val = scoreboard.tier_score(t)
            if s_val is None:
                raise DependencyError(f"no score recorded for {t.value}/{configs[t].subtest}")
        else:
            s_val = s.mean_score
        scores[t] = s_val

    skills: set[str] = set()
    agents: set[str] = set()
    tools = False
    blocks: dict[str, str] = {}
    block_owner: dict[str, Tier] = {}
    for t in contributors:
        cfg = configs[t]
        skills |= cfg.skills
        agents |= cfg.agents
        tools = tools or cfg.tools_enabled
        for bid, text in cfg.blocks.items():
            owner = block_owner.get(bid)
            if owner is None or scores[t] > scores[owner]:
                blocks[bid] = text
                block_owner[bid] = t
    return TierConfig(
        tier=Tier.T5,
        subtest=subtest,
        blocks=dict(sorted(blocks.items())),
        skills=frozenset(skills),
        agents=frozenset(agents),
        tools_enabled=tools,
    )


def best_configs(
    configs: Iterable[TierConfig], scoreboard: TierScoreboard
) -> dict[Tier, TierConfig]:
    """Per Phase-1 tier, the subtest config with the best scoreboard entry."""
    by_key = {c.key: c for c in configs}
    out = {}
    for tier in sorted(PHASE1, key=lambda t: t.index):
        sub = scoreboard.best_subtest(tier)
        if sub is not None and (tier, sub) in by_key:
            out[tier] = by_key[(tier, sub)]
    return out


def max_config_t6(catalog: Catalog, subtest: str = "subtest-00") -> TierConfig:
    if not (catalog.skills or catalog.agents or catalog.blocks):
        raise ConfigError("T6 needs a nonempty skill/agent/block catalog")
    return TierConfig(
        tier=Tier.T6,
        subtest=subtest,
        blocks=dict(sorted(catalog.blocks.items())),
        skills=catalog.skills,
        agents=catalog.agents,
        tools_enabled=True,
    )


# -- on-disk registry -------------------------------------------------------------


@dataclass(frozen=True)
class TierSpec:
    tier: Tier
    name: str
    expected_subtests: int | None
    synthesize: bool = False


class TierRegistry:
    """Tier configs loaded from ``<config>/tiers/``.

    Layout::

        tiers/tiers.yaml               manifest (names, expected subtest counts)
        tiers/T0/subtest-00/config.yaml  blocks, skills, agents, tools
        tiers/T0/subtest-00/CLAUDE.md    optional verbatim instruction file
        tiers/T0/subtest-00/skills/      optional subtest-local skills
        tiers/T0/subtest-00/agents/      optional subtest-local agents
    """

    def __init__(self, root: str | Path, catalog: Catalog | None = None) -> None:
        self.root = Path(root)
        self.tiers_dir = self.root / "tiers"
        self.catalog = catalog if catalog is not None else Catalog.load(self.root)
        self.specs = self._load_manifest()
        self.configs: dict[tuple[Tier, str], TierConfig] = {}
        for spec in self.specs.values():
            for cfg in self._load_tier(spec.tier):
                self.configs[cfg.key] = cfg
        self._check_counts()

    def _load_manifest(self) -> dict[Tier, TierSpec]:
        path = self.tiers_dir / "tiers.yaml"
        if not path.is_file():
            raise ConfigError(f"missing tier manifest {path}")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            out = {}
            for key, entry in (data.get("tiers") or {}).items():
                tier = Tier.parse(key)
                entry = entry or {}
                out[tier] = TierSpec(
                    tier,
                    str(entry.get("name", TIER_NAMES[tier])),
                    entry.get("subtests"),
                    bool(entry.get("synthesize", False)),
                )
            return out
        except (yaml.YAMLError, AttributeError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def _load_tier(self, tier: Tier) -> list[TierConfig]:
        tier_dir = self.tiers_dir / tier.value
        if not tier_dir.is_dir():
            return []
        return [self._load_subtest(tier, d) for d in sorted(tier_dir.iterdir()) if d.is_dir()]

    def _load_subtest(self, tier: Tier, sub_dir: Path) -> TierConfig:
        cfg_path = sub_dir / "config.yaml"
        try:
            data = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) if cfg_path.is_file() else {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{cfg_path}: {exc}") from exc
        data = data or {}
        blocks = {}
        for bid in data.get("blocks", ()) or ():
            bid = str(bid)
            local = sub_dir / "blocks" / f"{bid}.md"
            if local.is_file():
                blocks[bid] = local.read_text(encoding="utf-8")
            elif bid in self.catalog.blocks:
                blocks[bid] = self.catalog.blocks[bid]
            else:
                raise ConfigError(f"{cfg_path}: block {bid} not found")
        local_skills = sub_dir / "skills"
        local_agents = sub_dir / "agents"
        skills = set(map(str, data.get("skills", ()) or ()))
        agents = set(map(str, data.get("agents", ()) or ()))
        if local_skills.is_dir():
            skills |= {p.name for p in local_skills.iterdir()}
        if local_agents.is_dir():
            agents |= {p.stem for p in local_agents.iterdir()}
        try:
            return TierConfig(
                tier=tier,
                subtest=sub_dir.name,
                blocks=blocks,
                skills=frozenset(skills),
                agents=frozenset(agents),
                tools_enabled=bool(data.get("tools", False)),
                source_dir=sub_dir,
            )
        except ConfigError as exc:
            raise ConfigError(f"{sub_dir}: {exc}") from exc

    def _check_counts(self) -> None:
        for tier, spec in self.specs.items():
            if spec.expected_subtests is None:
                continue
            found = len(self.subtests(tier))
            if found != spec.expected_subtests:
                logger.warning(
                    "tier %s: manifest expects %d subtests, found %d", tier.value, spec.expected_subtests, found
                )

    def subtests(self, tier: Tier | str) -> list[TierConfig]:
        tier = Tier.parse(tier)
        return [c for k, c in sorted(self.configs.items(), key=lambda kv: kv[0][1]) if k[0] is tier]

    def get(self, tier: Tier | str, subtest: str) -> TierConfig:
        try:
            return self.configs[(Tier.parse(tier), subtest)]
        except KeyError:
            raise ConfigError(f"no config for {tier}/{subtest}") from None

    def is_synthesized(self, tier: Tier | str) -> bool:
        tier = Tier.parse(tier)
        spec = self.specs.get(tier)
        if spec is not None and spec.synthesize:
            return True
        return tier in (Tier.T5, Tier.T6) and not self.subtests(tier)

    def tiers(self) -> list[Tier]:
        return sorted(self.specs, key=lambda t: t.index)
