"""Execution boundary for CLI coding agents.

Every adapter takes an :class:`AdapterConfig`, runs the agent against a
prepared workspace and returns an :class:`AdapterResult`.  The harness only
ever sees normalized :class:`~tierbench.domain.TokenStats`; how usage is
reported on the agent's output streams is the adapter's business.
"""

from __future__ import annotations

import abc
import json
import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

from tierbench.domain import DEFAULT_PRICING, PricingTable, TokenStats, agent_cost
from tierbench.errors import ConfigError, ExecutionError

logger = logging.getLogger(__name__)

TERMINATION_GRACE_S = 2.0
# Inherited from the parent environment; everything else must come from config.env.
_BASE_ENV_KEYS = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "TERM", "USER", "SHELL", "PYTHONPATH")

_USAGE_KEYS = {
    "input": ("input_tokens",),
    "output": ("output_tokens",),
    "cache_create": ("cache_creation_input_tokens", "cache_create_tokens", "cache_creation_tokens"),
    "cache_read": ("cache_read_input_tokens", "cache_read_tokens"),
}


@dataclass(frozen=True)
class AdapterConfig:
    model_id: str
    prompt_path: Path
    workspace_path: Path
    output_dir: Path
    timeout_s: float = 3600.0
    env: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.timeout_s > 0:
            raise ConfigError(f"timeout_s must be > 0, got {self.timeout_s}")


@dataclass(frozen=True)
class AdapterResult:
    exit_code: int
    stdout_path: Path | None
    stderr_path: Path | None
    duration_s: float
    tokens: TokenStats
    cost_usd: float
    api_calls: int = 0
    timed_out: bool = False
    model_id: str = ""
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_code": self.exit_code,
            "stdout_path": str(self.stdout_path) if self.stdout_path else None,
            "stderr_path": str(self.stderr_path) if self.stderr_path else None,
            "duration_s": self.duration_s,
            "tokens": self.tokens.to_dict(),
            "cost_usd": self.cost_usd,
            "api_calls": self.api_calls,
            "timed_out": self.timed_out,
            "model_id": self.model_id,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AdapterResult:
        return cls(
            exit_code=int(data["exit_code"]),
            stdout_path=Path(data["stdout_path"]) if data.get("stdout_path") else None,
            stderr_path=Path(data["stderr_path"]) if data.get("stderr_path") else None,
            duration_s=float(data["duration_s"]),
            tokens=TokenStats.from_dict(data["tokens"]),
            cost_usd=float(data["cost_usd"]),
            api_calls=int(data.get("api_calls", 0)),
            timed_out=bool(data.get("timed_out", False)),
            model_id=str(data.get("model_id", "")),
            warnings=tuple(data.get("warnings", ())),
        )


@dataclass(frozen=True)
class UsageReport:
    tokens: TokenStats
    api_calls: int
    warnings: tuple[str, ...] = ()


def _json_objects(text: str) -> Iterator[Any]:
    text = text.strip()
    if not text:
        return
    try:
        yield json.loads(text)
        return
    except json.JSONDecodeError:
        pass
    for line in text.splitlines():
        line = line.strip()
        if not line.startswith("{"):
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            continue


def _usage_blocks(obj: Any) -> Iterator[Mapping[str, Any]]:
    if isinstance(obj, list):
        for entry in obj:
            yield from _usage_blocks(entry)
    elif isinstance(obj, dict) and isinstance(obj.get("usage"), dict):
        yield obj["usage"]


def _counter(block: Mapping[str, Any], name: str) -> int:
    for key in _USAGE_KEYS[name]:
        if key in block:
            return int(block[key] or 0)
    return 0


def parse_usage(stdout: str, stderr: str = "") -> UsageReport:
    """Sum every JSON usage block found on the two streams.

    A block is any JSON object (whole stream, or one per line) carrying a
    ``usage`` mapping with Anthropic-style counter names.  Streams with no
    parseable block give zero counts and a warning rather than an error.
    """
    total = TokenStats()
    calls = 0
    warnings: list[str] = []
    for stream in (stdout, stderr):
        for obj in _json_objects(stream):
            for block in _usage_blocks(obj):
                try:
                    total = total + TokenStats(
                        _counter(block, "input"),
                        _counter(block, "output"),
                        _counter(block, "cache_create"),
                        _counter(block, "cache_read"),
                    )
                except (TypeError, ValueError) as exc:
                    warnings.append(f"skipped malformed usage block: {exc}")
                    continue
                calls += 1
    if calls == 0:
        warnings.append("no token usage block found in agent output")
    return UsageReport(total, calls, tuple(warnings))


def extract_tokens(stdout: str, stderr: str = "") -> TokenStats:
    report = parse_usage(stdout, stderr)
    for msg in report.warnings:
        logger.warning(msg)
    return report.tokens


class BaseAdapter(abc.ABC):
    """An agent that can be run against a workspace."""

    name = "base"

    def __init__(self, pricing: PricingTable = DEFAULT_PRICING) -> None:
        self.pricing = pricing

    @abc.abstractmethod
    def execute(self, config: AdapterConfig) -> AdapterResult: ...

    @abc.abstractmethod
    def build_command(self, config: AdapterConfig) -> list[str]:
        """The exact argv used for the agent; also written into replay scripts."""

    def parse_usage(self, stdout: str, stderr: str) -> UsageReport:
        return parse_usage(stdout, stderr)

    def extract_tokens(self, stdout: str, stderr: str) -> TokenStats:
        return extract_tokens(stdout, stderr)


def _child_env(extra: Mapping[str, str]) -> dict[str, str]:
    env = {k: os.environ[k] for k in _BASE_ENV_KEYS if k in os.environ}
    env.update({str(k): str(v) for k, v in extra.items()})
    return env


def _kill_group(proc: subprocess.Popen, grace_s: float) -> None:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        return
    try:
        proc.wait(timeout=grace_s)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()


class CommandAdapter(BaseAdapter):
    """Run an arbitrary CLI agent as a child process.

    ``command`` is an argv template; ``{model}``, ``{prompt}`` and
    ``{workspace}`` placeholders are substituted per run.  The prompt file is
    also fed on stdin.
    """

    name = "command"

    def __init__(
        self,
        command: Sequence[str],
        pricing: PricingTable = DEFAULT_PRICING,
        grace_s: float = TERMINATION_GRACE_S,
    ) -> None:
        super().__init__(pricing)
        if not command:
            raise ConfigError("adapter command is empty")
        self.command = list(command)
        self.grace_s = grace_s

    def build_command(self, config: AdapterConfig) -> list[str]:
        subs = {
            "{model}": config.model_id,
            "{prompt}": str(config.prompt_path),
            "{workspace}": str(config.workspace_path),
        }
        out = []
        for part in self.command:
            for key, value in subs.items():
                part = part.replace(key, value)
            out.append(part)
        return out

    def execute(self, config: AdapterConfig) -> AdapterResult:
        if not Path(config.workspace_path).is_dir():
            raise ExecutionError(f"workspace {config.workspace_path} does not exist")
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stdout_path = out_dir / "stdout.txt"
        stderr_path = out_dir / "stderr.txt"
        argv = self.build_command(config)

        timed_out = False
        with open(config.prompt_path, "rb") as stdin, open(stdout_path, "wb") as out, open(
            stderr_path, "wb"
        ) as err:
            start = time.monotonic()
            try:
                proc = subprocess.Popen(
                    argv,
                    cwd=config.workspace_path,
                    stdin=stdin,
                    stdout=out,
                    stderr=err,
                    env=_child_env(config.env),
                    start_new_session=True,
                )
            except OSError as exc:
                raise ExecutionError(f"could not start {argv[0]!r}: {exc}") from exc
            try:
                exit_code = proc.wait(timeout=config.timeout_s)
            except subprocess.TimeoutExpired:
                timed_out = True
                _kill_group(proc, self.grace_s)
                exit_code = proc.returncode
            duration = time.monotonic() - start

        usage = self.parse_usage(
            stdout_path.read_text(encoding="utf-8", errors="replace"),
            stderr_path.read_text(encoding="utf-8", errors="replace"),
        )
        for msg in usage.warnings:
            logger.warning("%s: %s", out_dir, msg)
        return AdapterResult(
            exit_code=exit_code,
            stdout_path=stdout_path,
            stderr_path=stderr_path,
            duration_s=duration,
            tokens=usage.tokens,
            cost_usd=agent_cost(usage.tokens, config.model_id, self.pricing),
            api_calls=usage.api_calls,
            timed_out=timed_out,
            model_id=config.model_id,
            warnings=usage.warnings,
        )


class ClaudeCodeAdapter(CommandAdapter):
    """Claude Code in non-interactive mode with a JSON result on stdout."""

    name = "claude-code"
    # The workspace is a throwaway worktree, so tool permission prompts are skipped.
    DEFAULT_COMMAND = (
        "claude", "--print", "--output-format", "json", "--dangerously-skip-permissions", "--model", "{model}",
    )

    def __init__(self, pricing: PricingTable = DEFAULT_PRICING, command: Sequence[str] | None = None) -> None:
        super().__init__(command or self.DEFAULT_COMMAND, pricing)


# -- scripted replay ---------------------------------------------------------


@dataclass(frozen=True)
class AgentFixture:
    id: str
    model_id: str
    exit_code: int
    duration_s: float
    stdout: str
    stderr: str = ""
    files: Mapping[str, str] = field(default_factory=dict)
    cost_usd: float | None = None
    timed_out: bool = False


def _load_fixture_file(path: Path | None) -> dict[str, AgentFixture]:
    if path is None:
        raw = resources.files("tierbench.data").joinpath("agent_fixtures.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    data = json.loads(raw)
    return {
        fid: AgentFixture(
            id=fid,
            model_id=entry["model_id"],
            exit_code=int(entry["exit_code"]),
            duration_s=float(entry["duration_s"]),
            stdout=entry.get("stdout", ""),
            stderr=entry.get("stderr", ""),
            files=dict(entry.get("files", {})),
            cost_usd=entry.get("cost_usd"),
            timed_out=bool(entry.get("timed_out", False)),
        )
        for fid, entry in data["fixtures"].items()
    }


_FIXTURE_CACHE: dict[str, dict[str, AgentFixture]] = {}


def load_agent_fixtures(path: Path | None = None) -> dict[str, AgentFixture]:
    key = str(path)
    if key not in _FIXTURE_CACHE:
        _FIXTURE_CACHE[key] = _load_fixture_file(path)
    return _FIXTURE_CACHE[key]


def _fixture_result(fx: AgentFixture, pricing: PricingTable, stdout_path=None, stderr_path=None) -> AdapterResult:
    usage = parse_usage(fx.stdout, fx.stderr)
    # Recorded runs carry their billed cost; otherwise price the tokens.
    cost = fx.cost_usd if fx.cost_usd is not None else agent_cost(usage.tokens, fx.model_id, pricing)
    return AdapterResult(
        exit_code=fx.exit_code,
        stdout_path=stdout_path,
        stderr_path=stderr_path,
        duration_s=fx.duration_s,
        tokens=usage.tokens,
        cost_usd=cost,
        api_calls=usage.api_calls,
        timed_out=fx.timed_out,
        model_id=fx.model_id,
        warnings=usage.warnings,
    )


def scripted_execute(
    fixture_id: str,
    pricing: PricingTable = DEFAULT_PRICING,
    fixtures: Mapping[str, AgentFixture] | None = None,
) -> AdapterResult:
    store = load_agent_fixtures() if fixtures is None else fixtures
    try:
        fx = store[fixture_id]
    except KeyError:
        raise ConfigError(f"unknown agent fixture {fixture_id!r}") from None
    return _fixture_result(fx, pricing)


def write_fixture_files(fx: AgentFixture, root: Path) -> None:
    for rel, content in sorted(fx.files.items()):
        target = Path(root) / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content.encode("utf-8"))


class ScriptedAdapter(BaseAdapter):
    """Replays canned agent runs; never starts a model or touches the network.

    ``select`` maps an :class:`AdapterConfig` to a fixture id; by default the
    fixture id is read from ``config.env["TIERBENCH_FIXTURE"]``.
    """

    name = "scripted"

    def __init__(
        self,
        pricing: PricingTable = DEFAULT_PRICING,
        fixtures: Mapping[str, AgentFixture] | None = None,
        select: Callable[[AdapterConfig], str] | None = None,
    ) -> None:
        super().__init__(pricing)
        self.fixtures = load_agent_fixtures() if fixtures is None else dict(fixtures)
        self.select = select or (lambda cfg: cfg.env["TIERBENCH_FIXTURE"])

    def fixture_for(self, config: AdapterConfig) -> AgentFixture:
        fid = self.select(config)
        try:
            return self.fixtures[fid]
        except KeyError:
            raise ConfigError(f"unknown agent fixture {fid!r}") from None

    def build_command(self, config: AdapterConfig) -> list[str]:
        return [sys.executable, "-m", "tierbench", "fixture-agent", self.fixture_for(config).id]

    def execute(self, config: AdapterConfig) -> AdapterResult:
        fx = self.fixture_for(config)
        if not Path(config.workspace_path).is_dir():
            raise ExecutionError(f"workspace {config.workspace_path} does not exist")
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stdout_path = out_dir / "stdout.txt"
        stderr_path = out_dir / "stderr.txt"
        stdout_path.write_bytes(fx.stdout.encode("utf-8"))
        stderr_path.write_bytes(fx.stderr.encode("utf-8"))
        write_fixture_files(fx, Path(config.workspace_path))
        return replace(
            _fixture_result(fx, self.pricing, stdout_path, stderr_path),
            model_id=fx.model_id,
        )
