"""Experiment orchestration: phases, bounded fan-out, checkpointing, resume."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from tierbench import checkpoint as ckpt
from tierbench import judge as jdg
from tierbench.adapter import AdapterConfig, BaseAdapter
from tierbench.config import TestDefinition
from tierbench.domain import TestCase, TokenStats
from tierbench.errors import ConfigError, HarnessError, UnscoreableError
from tierbench.reporting import (
    RECORD_NAME,
    ReportBundle,
    RunRecord,
    load_record,
    save_record,
    write_reports,
)
from tierbench.tiers import (
    PHASE1,
    Tier,
    TierConfig,
    TierRegistry,
    TierScoreboard,
    best_configs,
    dependency_phases,
    max_config_t6,
    merge_for_t5,
)
from tierbench.workspace import (
    WorkspaceManager,
    capture_artifacts,
    run_dir_for,
    write_replay_script,
)

logger = logging.getLogger(__name__)

DEFAULT_CONCURRENCY = 4
DEFAULT_RUNS = 1
MERGED_SUBTEST = "merged"
MAX_SUBTEST = "max"
AUDIT_NAME = "audit.jsonl"
PROMPT_NAME = "prompt.md"
JUDGE_PROMPT_NAME = "judge_prompt.md"
CRASH_ENV = "TIERBENCH_CRASH_AFTER"


class SimulatedCrash(HarnessError):
    """Raised by crash-injection hooks in tests."""


@dataclass(frozen=True)
class Unit:
    tier: Tier
    subtest: str
    run_id: int

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.tier.value, self.subtest, self.run_id)

    def __str__(self) -> str:
        return f"{self.tier.value}/{self.subtest}/run-{self.run_id:05d}"


@dataclass(frozen=True)
class ExperimentPlan:
    definition: TestDefinition
    tiers: tuple[Tier, ...]
    runs_per_subtest: int = DEFAULT_RUNS
    concurrency_limit: int = DEFAULT_CONCURRENCY
    judges: tuple[jdg.JudgeBackend, ...] = ()
    registry: TierRegistry | None = None

    def __post_init__(self) -> None:
        if self.runs_per_subtest < 1:
            raise ConfigError("runs per subtest must be >= 1")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency limit must be >= 1")
        if not self.tiers:
            raise ConfigError("no tiers requested")

    @property
    def test(self) -> TestCase:
        return self.definition.case

    def get_registry(self) -> TierRegistry:
        return self.registry if self.registry is not None else TierRegistry(self.definition.test_dir)

    def phases(self, completed: Iterable[Tier] = ()) -> list[frozenset[Tier]]:
        return dependency_phases(self.tiers, completed)

    def subtest_names(self, tier: Tier) -> list[str]:
        reg = self.get_registry()
        if reg.is_synthesized(tier):
            return [MERGED_SUBTEST if tier is Tier.T5 else MAX_SUBTEST]
        return [c.subtest for c in reg.subtests(tier)]

    def units(self, tier: Tier) -> list[Unit]:
        return [
            Unit(tier, sub, r)
            for sub in self.subtest_names(tier)
            for r in range(1, self.runs_per_subtest + 1)
        ]

    def hash_inputs(self) -> dict[str, Any]:
        return {
            "tiers": sorted(t.value for t in self.tiers),
            "runs_per_subtest": self.runs_per_subtest,
            "judges": [b.model_id for b in self.judges],
            "agent_model": self.definition.agent_model,
        }


def _tier_span(tiers: Iterable[Tier]) -> str:
    idx = sorted(t.index for t in tiers)
    parts = []
    start = prev = idx[0]
    for i in idx[1:] + [None]:
        if i is not None and i == prev + 1:
            prev = i
            continue
        parts.append(f"T{start}" if start == prev else f"T{start}–T{prev}")
        if i is not None:
            start = prev = i
    return ", ".join(parts)


def describe_phases(phases: Sequence[Iterable[Tier]]) -> str:
    return "; ".join(f"Phase {i}: {_tier_span(p)}" for i, p in enumerate(phases, 1))


def count_summary(n_subtests: int, runs: int, n_judges: int) -> str:
    n_runs = n_subtests * runs
    return f"{n_runs} runs, {n_runs * n_judges} judge evaluations"


def describe_plan(plan: ExperimentPlan, completed: Iterable[Tier] = ()) -> str:
    """Human-readable plan; raises DependencyError for unmet prerequisites."""
    phases = plan.phases(completed)
    lines = [f"Test {plan.test.id}: {plan.test.name}", describe_phases(phases)]
    total_subtests = 0
    for i, phase in enumerate(phases, 1):
        for tier in sorted(phase, key=lambda t: t.index):
            subs = plan.subtest_names(tier)
            total_subtests += len(subs)
            lines.append(
                f"  phase {i} {tier.value}: {len(subs)} subtest(s) x {plan.runs_per_subtest} run(s)"
            )
    lines.append(count_summary(total_subtests, plan.runs_per_subtest, len(plan.judges)))
    lines.append(f"concurrency limit: {plan.concurrency_limit}")
    return "\n".join(lines)


# -- audit -----------------------------------------------------------------------


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    event: str
    unit: str
    tier: str
    in_flight: int


class AuditLog:
    """Ordered record of agent start/end and unit start/end events."""

    def __init__(self, path: Path | None = None) -> None:
        self._lock = threading.Lock()
        self._events: list[AuditEvent] = []
        self._in_flight = 0
        self._path = path

    def _add(self, event: str, unit: Unit, delta: int = 0) -> None:
        with self._lock:
            self._in_flight += delta
            ev = AuditEvent(len(self._events), event, str(unit), unit.tier.value, self._in_flight)
            self._events.append(ev)
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(ev.__dict__, sort_keys=True) + "\n")

    def agent_start(self, unit: Unit) -> None:
        self._add("agent_start", unit, +1)

    def agent_end(self, unit: Unit) -> None:
        self._add("agent_end", unit, -1)

    def unit_start(self, unit: Unit) -> None:
        self._add("unit_start", unit)

    def unit_end(self, unit: Unit) -> None:
        self._add("unit_end", unit)

    @property
    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def max_in_flight(self) -> int:
        return max((e.in_flight for e in self.events), default=0)


# -- runner ------------------------------------------------------------------------


@dataclass
class RunOutcome:
    exit_status: int
    bundle: ReportBundle | None
    records: list[RunRecord]
    executed: list[Unit] = field(default_factory=list)
    errored: list[Unit] = field(default_factory=list)


class ExperimentRunner:
    """Runs an :class:`ExperimentPlan` phase by phase.

    Worker threads execute units and hand results back; only the calling
    thread touches the checkpoint and the scoreboard.
    """

    def __init__(
        self,
        plan: ExperimentPlan,
        adapter: BaseAdapter,
        results_root: str | Path,
        work_root: str | Path | None = None,
        judge_system_prompt: str = "",
        judge_parallel: bool = False,
        agent_min_delay_s: float = 0.0,
        judge_min_delay_s: float = 0.0,
        env_for_unit: Callable[[Unit], Mapping[str, str]] | None = None,
        on_checkpoint: Callable[[int], None] | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        if not plan.judges:
            raise ConfigError("plan has no judge backends")
        self.plan = plan
        self.adapter = adapter
        self.results_root = Path(results_root).absolute()
        self.test_root = self.results_root / plan.test.id
        test_dir = Path(plan.definition.test_dir).resolve()
        if self.test_root.resolve().is_relative_to(test_dir):
            # Results inside the hashed config tree would trip tamper detection on resume.
            raise ConfigError(f"results directory {self.test_root} lies inside the test directory {test_dir}")
        self.work_root = Path(work_root).absolute() if work_root is not None else self.results_root / ".work"
        self.judge_system_prompt = judge_system_prompt
        self.judge_parallel = judge_parallel
        self.env_for_unit = env_for_unit or (lambda unit: {})
        self.on_checkpoint = on_checkpoint
        self.clock = clock
        self.registry = plan.get_registry()
        self.workspaces = WorkspaceManager(self.work_root, self.registry.catalog)
        self.agent_rate = ckpt.RateLimiter(ckpt.RateState(min_delay_s=agent_min_delay_s))
        self.judge_rate = ckpt.RateLimiter(ckpt.RateState(min_delay_s=judge_min_delay_s))
        self._agent_slots = threading.BoundedSemaphore(plan.concurrency_limit)
        self.audit = AuditLog()
        self.scoreboard = TierScoreboard()
        self._configs: dict[tuple[Tier, str], TierConfig] = dict(self.registry.configs)
        crash = os.environ.get(CRASH_ENV)
        self._crash_after = int(crash) if crash else None

    @property
    def checkpoint_path(self) -> Path:
        return self.test_root / ckpt.CHECKPOINT_NAME

    def config_hash(self) -> str:
        return ckpt.config_hash(self.plan.definition.test_dir, self.plan.hash_inputs())

    def run_dir(self, unit: Unit) -> Path:
        return run_dir_for(self.results_root, self.plan.test.id, unit.tier.value, unit.subtest, unit.run_id)

    # -- checkpoint ----------------------------------------------------------

    def _open_checkpoint(self, resume: bool) -> ckpt.Checkpoint:
        current = self.config_hash()
        if self.checkpoint_path.exists():
            if not resume:
                raise ConfigError(
                    f"{self.checkpoint_path} exists; pass --resume to continue or choose another --out"
                )
            cp = ckpt.load_and_validate(self.checkpoint_path, current)
            logger.info("resuming: %d unit(s) already complete", len(cp.completed))
            return cp
        if resume:
            logger.warning("no checkpoint at %s; starting fresh", self.checkpoint_path)
        self.test_root.mkdir(parents=True, exist_ok=True)
        total = 0
        try:
            for phase in self.plan.phases():
                for tier in phase:
                    total += len(self.plan.units(tier))
        except HarnessError:
            pass
        cp = ckpt.Checkpoint(current, self.plan.test.id, total, self.clock())
        ckpt.save(cp, self.checkpoint_path)
        return cp

    # -- config resolution ---------------------------------------------------

    def _record_score(self, record: RunRecord) -> None:
        tier = Tier.parse(record.tier)
        same = [
            load_record(self.run_dir(u) / RECORD_NAME)
            for u in self.plan.units(tier)
            if u.subtest == record.subtest and (self.run_dir(u) / RECORD_NAME).exists()
        ]
        scores = [r.consensus_score for r in same if r.consensus_score is not None]
        mean = math.fsum(scores) / len(scores) if scores else 0.0
        passed = sum(r.passed for r in same)
        cost = math.fsum(r.agent_cost_usd for r in same) / len(same) if same else 0.0
        cop = cost / (passed / len(same)) if passed else None
        self.scoreboard.record(tier, record.subtest, mean, cop)

    def _phase1_configs_for_merge(self) -> dict[Tier, TierConfig]:
        phase1 = [c for (t, _), c in self._configs.items() if t in PHASE1]
        chosen = best_configs(phase1, self.scoreboard)
        missing = PHASE1 - chosen.keys()
        if missing:
            raise ConfigError(f"cannot build T5: no scored configs for {sorted(m.value for m in missing)}")
        return chosen

    def _ensure_synthesized(self, tier: Tier) -> None:
        if not self.registry.is_synthesized(tier):
            return
        if tier is Tier.T5:
            cfg = merge_for_t5(self._phase1_configs_for_merge(), self.scoreboard, MERGED_SUBTEST)
        else:
            cfg = max_config_t6(self.registry.catalog, MAX_SUBTEST)
        self._configs[cfg.key] = cfg
        logger.info(
            "%s config: blocks=%s skills=%s agents=%s tools=%s",
            tier.value,
            sorted(cfg.blocks),
            sorted(cfg.skills),
            sorted(cfg.agents),
            cfg.tools_enabled,
        )

    # -- one unit --------------------------------------------------------------

    def execute_unit(self, unit: Unit) -> RunRecord:
        test = self.plan.test
        run_dir = self.run_dir(unit)
        if run_dir.exists():
            shutil.rmtree(run_dir)  # a unit that was in flight at crash time restarts clean
        run_dir.mkdir(parents=True)
        cfg = self._configs[(unit.tier, unit.subtest)]
        self.audit.unit_start(unit)
        ws = None
        try:
            ws = self.workspaces.create_workspace(test, cfg, unit.run_id)
            prompt_path = run_dir / PROMPT_NAME
            prompt_path.write_text(test.prompt, encoding="utf-8")
            acfg = AdapterConfig(
                model_id=self.plan.definition.agent_model,
                prompt_path=prompt_path,
                workspace_path=ws.root,
                output_dir=run_dir,
                timeout_s=test.timeout_s,
                env=dict(self.env_for_unit(unit)),
            )
            write_replay_script(ws, acfg, self.adapter.build_command(acfg), run_dir)
            with self._agent_slots:
                self.agent_rate.acquire()
                self.audit.agent_start(unit)
                try:
                    result = self.adapter.execute(acfg)
                finally:
                    self.audit.agent_end(unit)
            (run_dir / "adapter_result.json").write_text(
                json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            bundle = capture_artifacts(ws, run_dir)
            jprompt = jdg.build_judge_prompt(test, bundle)
            (run_dir / JUDGE_PROMPT_NAME).write_text(jprompt, encoding="utf-8")
            outcome = jdg.run_judges(
                self.plan.judges,
                jprompt,
                test.rubric,
                run_dir,
                jdg.JudgeContext(test.id, unit.tier.value, unit.subtest, unit.run_id),
                system_prompt=self.judge_system_prompt,
                parallel=self.judge_parallel,
                before_call=self.judge_rate.acquire,
            )
            try:
                cons = jdg.consensus(outcome.verdicts, test.pass_threshold)
                score, grade, passed = cons.mean_score, cons.grade, cons.passed
            except UnscoreableError:
                logger.warning("%s: no judge verdicts; counted as a failed attempt", unit)
                score, grade, passed = None, None, False
            record = RunRecord(
                test_id=test.id,
                tier=unit.tier.value,
                subtest=unit.subtest,
                run_id=unit.run_id,
                exit_code=result.exit_code,
                timed_out=result.timed_out,
                duration_s=result.duration_s,
                tokens=result.tokens,
                agent_cost_usd=result.cost_usd,
                judge_duration_s=outcome.judge_time_s,
                verdicts=outcome.verdicts,
                judge_failures=tuple(f"{f.judge_model}: {f.error}" for f in outcome.failures),
                consensus_score=score,
                grade=grade,
                passed=passed,
                category_weights={c.name: c.weight for c in test.rubric.categories},
            )
        except HarnessError as exc:
            logger.error("%s failed: %s", unit, exc)
            record = RunRecord(
                test_id=test.id,
                tier=unit.tier.value,
                subtest=unit.subtest,
                run_id=unit.run_id,
                exit_code=None,
                timed_out=False,
                duration_s=0.0,
                tokens=TokenStats(),
                agent_cost_usd=0.0,
                category_weights={c.name: c.weight for c in test.rubric.categories},
                error=f"{type(exc).__name__}: {exc}",
            )
        finally:
            if ws is not None:
                self.workspaces.destroy_workspace(ws)
            self.audit.unit_end(unit)
        save_record(record, run_dir)
        return record

    # -- experiment --------------------------------------------------------------

    def _completed_tiers(self, cp: ckpt.Checkpoint) -> set[Tier]:
        done = {c.key for c in cp.completed}
        out = set()
        for tier in Tier:
            units = self.plan.units(tier)
            if units and all(u.key in done for u in units):
                out.add(tier)
        return out

    def _checkpointed(self, n: int) -> None:
        """Called after every checkpoint save with the number of completed units."""
        if self._crash_after is not None and n == self._crash_after:
            logger.error("crash injection after %d completed unit(s)", n)
            os._exit(137)
        if self.on_checkpoint is not None:
            self.on_checkpoint(n)

    def run(self, resume: bool = False) -> RunOutcome:
        cp = self._open_checkpoint(resume)
        self.audit = AuditLog(self.test_root / AUDIT_NAME)
        self.workspaces.prune_stale(self.plan.test.id)
        self._checkpointed(len(cp.completed))
        phases = self.plan.phases(self._completed_tiers(cp))
        executed: list[Unit] = []
        errored: list[Unit] = []
        all_units: list[Unit] = []

        # Rebuild the scoreboard from records of units finished before a crash.
        for c in cp.completed:
            rec_path = self.run_dir(Unit(Tier.parse(c.tier), c.subtest, c.run_id)) / RECORD_NAME
            if rec_path.exists():
                self._record_score(load_record(rec_path))

        for phase in phases:
            tiers = sorted(phase, key=lambda t: t.index)
            for tier in tiers:
                self._ensure_synthesized(tier)
            units = [u for t in tiers for u in self.plan.units(t)]
            all_units.extend(units)
            pending = [u for u in units if not cp.is_completed(*u.key)]
            logger.info(
                "phase %s: %d unit(s), %d pending", _tier_span(tiers), len(units), len(pending)
            )
            cp = self._run_phase(pending, cp, executed, errored)

        records = [
            load_record(self.run_dir(u) / RECORD_NAME)
            for u in all_units
            if (self.run_dir(u) / RECORD_NAME).exists()
        ]
        bundle = write_reports(records, self.test_root)
        status = 1 if errored or any(r.error for r in records) else 0
        return RunOutcome(status, bundle, records, executed, errored)

    def _run_phase(
        self,
        pending: list[Unit],
        cp: ckpt.Checkpoint,
        executed: list[Unit],
        errored: list[Unit],
    ) -> ckpt.Checkpoint:
        if not pending:
            return cp
        queue = deque(pending)
        futures: dict[Future, Unit] = {}
        remaining: set[Future] = set()

        def refill() -> None:
            # A unit is dispatched only once a finished one has been checkpointed,
            # so a crash never loses more than the units actually in flight.
            while queue and len(remaining) < self.plan.concurrency_limit:
                unit = queue.popleft()
                fut = pool.submit(self.execute_unit, unit)
                futures[fut] = unit
                remaining.add(fut)

        with ThreadPoolExecutor(max_workers=self.plan.concurrency_limit) as pool:
            try:
                refill()
                while remaining:
                    done, still = wait(remaining, return_when=FIRST_COMPLETED)
                    remaining.intersection_update(still)
                    for fut in sorted(done, key=lambda f: futures[f].key):
                        unit = futures[fut]
                        executed.append(unit)
                        try:
                            record = fut.result()
                        except Exception as exc:  # fail-soft: one unit never sinks the rest
                            logger.exception("%s crashed: %s", unit, exc)
                            errored.append(unit)
                            continue
                        if record.error:
                            errored.append(unit)
                            continue
                        cp = cp.with_completed(
                            ckpt.CompletedRun(unit.tier.value, unit.subtest, unit.run_id, self.clock(), record.passed)
                        )
                        cp = ckpt.Checkpoint(
                            cp.config_hash,
                            cp.test_id,
                            cp.total_planned,
                            cp.started_at,
                            cp.completed,
                            self.agent_rate.state,
                        )
                        ckpt.save(cp, self.checkpoint_path)
                        self._record_score(record)
                        self._checkpointed(len(cp.completed))
                    refill()
            except BaseException:
                for fut in remaining:
                    fut.cancel()
                raise
        return cp


def report(results_dir: str | Path, out_dir: str | Path | None = None) -> ReportBundle:
    """Regenerate tables and figure data from the run records under ``results_dir``."""
    from tierbench.reporting import load_records

    results_dir = Path(results_dir)
    records = load_records(results_dir)
    return write_reports(records, out_dir if out_dir is not None else results_dir)


# -- wiring ----------------------------------------------------------------------


def fixture_key(unit: Unit) -> str:
    return f"{unit.tier.value.lower()}-run{unit.run_id}"


def scripted_judges(judge_models: Sequence[str], path: str | Path | None = None) -> tuple[jdg.ScriptedJudge, ...]:
    from tierbench.config import data_path

    src = Path(path) if path is not None else data_path("judge_fixtures.json")
    data = json.loads(src.read_text(encoding="utf-8"))["judges"]
    missing = [m for m in judge_models if m not in data]
    if missing:
        raise ConfigError(f"no scripted verdicts for judge(s) {missing}")
    return tuple(jdg.ScriptedJudge(m, data[m]) for m in judge_models)


def command_judges(cfg, system_prompt: str) -> tuple[jdg.CommandJudge, ...]:
    """CLI-backed judges from a :class:`tierbench.config.JudgeConfig`."""
    out = []
    for spec in cfg.judges:
        command = spec.command or cfg.command
        if not command:
            raise ConfigError(f"judge {spec.model}: no command configured")
        command = [part.replace("{system_prompt}", system_prompt) for part in command]
        out.append(
            jdg.CommandJudge(
                spec.model,
                command,
                cfg.system_prompt or "",
                timeout_s=cfg.timeout_s,
            )
        )
    return tuple(out)


def build_runner(
    test_dir: str | Path,
    tiers: Sequence[str | Tier],
    out_dir: str | Path,
    runs: int = DEFAULT_RUNS,
    concurrency: int = DEFAULT_CONCURRENCY,
    backend: str = "claude",
    work_root: str | Path | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
) -> ExperimentRunner:
    """Assemble a runner from a test directory and the shipped defaults.

    ``backend="scripted"`` replays recorded agent runs and judge verdicts;
    ``backend="claude"`` drives the ``claude`` CLI for both.
    """
    from tierbench.adapter import ClaudeCodeAdapter, ScriptedAdapter
    from tierbench.config import load_judge_config, load_pricing, load_test, passthrough_env

    out_dir = Path(out_dir).absolute()
    work = Path(work_root).absolute() if work_root is not None else out_dir / ".work"
    definition = load_test(test_dir, repo_root=work / "sources")
    jcfg = load_judge_config(test_dir)
    pricing = load_pricing(test_dir)
    system_prompt = jdg.load_system_prompt(jcfg.system_prompt)
    tier_list = list(Tier) if [str(t).lower() for t in tiers] == ["all"] else [Tier.parse(t) for t in tiers]
    models = [s.model for s in jcfg.judges]
    if backend == "scripted":
        adapter: BaseAdapter = ScriptedAdapter(pricing)
        judges: tuple = scripted_judges(models)

        def env_for_unit(unit: Unit) -> dict[str, str]:
            return {"TIERBENCH_FIXTURE": fixture_key(unit)}

    elif backend == "claude":
        adapter = ClaudeCodeAdapter(pricing)
        judges = command_judges(jcfg, system_prompt)

        def env_for_unit(unit: Unit) -> dict[str, str]:
            return passthrough_env()

    else:
        raise ConfigError(f"unknown backend {backend!r}")
    plan = ExperimentPlan(
        definition=definition,
        tiers=tuple(tier_list),
        runs_per_subtest=runs,
        concurrency_limit=concurrency,
        judges=judges,
        registry=TierRegistry(test_dir),
    )
    return ExperimentRunner(
        plan,
        adapter,
        out_dir,
        work_root=work,
        judge_system_prompt=system_prompt,
        judge_parallel=jcfg.parallel,
        judge_min_delay_s=jcfg.min_delay_s,
        env_for_unit=env_for_unit,
        on_checkpoint=on_checkpoint,
    )


def dryrun(out_dir: str | Path, concurrency: int = DEFAULT_CONCURRENCY, resume: bool = False) -> RunOutcome:
    """The shipped seven-tier hello-world experiment with recorded agents and judges."""
    from tierbench.config import dryrun_test_dir

    runner = build_runner(dryrun_test_dir(), ["all"], out_dir, runs=1, concurrency=concurrency, backend="scripted")
    return runner.run(resume=resume)
