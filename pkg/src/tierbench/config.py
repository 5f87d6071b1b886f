"""Loading test definitions, judge lists and pricing from a test directory."""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml
from filelock import FileLock

from tierbench.domain import (
    DEFAULT_PASS_THRESHOLD,
    DEFAULT_RUBRIC,
    DEFAULT_TIMEOUT_S,
    SONNET_4_5,
    PricingTable,
    RubricSpec,
    TestCase,
    validate_rubric,
)
from tierbench.errors import ConfigError, SetupError
from tierbench.workspace import git

logger = logging.getLogger(__name__)

LOCAL_SCHEME = "local:"
CREDENTIAL_ENV = "ANTHROPIC_API_KEY"

# Fixed identity and clock so a local fixture repo always has the same commit id.
_REPO_ENV = {
    "GIT_AUTHOR_NAME": "tierbench",
    "GIT_AUTHOR_EMAIL": "tierbench@localhost",
    "GIT_AUTHOR_DATE": "2025-01-01T00:00:00+0000",
    "GIT_COMMITTER_NAME": "tierbench",
    "GIT_COMMITTER_EMAIL": "tierbench@localhost",
    "GIT_COMMITTER_DATE": "2025-01-01T00:00:00+0000",
}


def data_path(*parts: str) -> Path:
    """Filesystem path of a file shipped in ``tierbench/data``."""
    return Path(str(resources.files("tierbench").joinpath("data", *parts)))


def dryrun_test_dir() -> Path:
    return data_path("dryrun", "test-001")


def _read_yaml(path: Path) -> Any:
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"missing config file {path}") from None
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class TestDefinition:
    """A parsed ``test.yaml`` plus the settings that are not part of TestCase."""

    case: TestCase
    test_dir: Path
    agent_model: str = SONNET_4_5
    repo_spec: str = ""
    extra: Mapping[str, Any] = field(default_factory=dict)

    __test__ = False


def load_rubric(path: Path) -> RubricSpec:
    data = _read_yaml(path)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: rubric must be a mapping")
    rubric = RubricSpec.from_dict(data)
    report = validate_rubric(rubric)
    if not report.ok:
        raise ConfigError(f"{path}: " + "; ".join(report.violations))
    return rubric


def load_test(test_dir: str | Path, repo_root: str | Path | None = None) -> TestDefinition:
    """Parse ``<test_dir>/test.yaml``.

    ``repo: local:<name>`` points at ``<test_dir>/repos/<name>``, which is
    committed into a deterministic git repository under ``repo_root``.
    """
    test_dir = Path(test_dir)
    path = test_dir / "test.yaml"
    data = _read_yaml(path)
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected a mapping")
    for key in ("id", "name", "repo", "commit", "prompt"):
        if key not in data:
            raise ConfigError(f"{path}: missing required key {key!r}")
    prompt = str(data["prompt"])
    prompt_file = test_dir / prompt
    if len(prompt) < 256 and "\n" not in prompt and prompt_file.is_file():
        prompt = prompt_file.read_text(encoding="utf-8")
    rubric = load_rubric(test_dir / data["rubric"]) if data.get("rubric") else DEFAULT_RUBRIC
    repo_spec = str(data["repo"])
    repo_url = repo_spec
    if repo_spec.startswith(LOCAL_SCHEME):
        root = Path(repo_root) if repo_root is not None else Path(tempfile.gettempdir()) / "tierbench-repos"
        repo_url = str(materialize_local_repo(test_dir / "repos" / repo_spec[len(LOCAL_SCHEME):], root))
    elif not ("://" in repo_spec or repo_spec.startswith("git@")):
        candidate = (test_dir / repo_spec).resolve()
        if candidate.exists():
            repo_url = str(candidate)
    case = TestCase(
        id=str(data["id"]),
        name=str(data["name"]),
        repo_url=repo_url,
        pinned_commit=str(data["commit"]),
        prompt=prompt,
        rubric=rubric,
        timeout_s=float(data.get("timeout", DEFAULT_TIMEOUT_S)),
        pass_threshold=float(data.get("threshold", DEFAULT_PASS_THRESHOLD)),
        expected_stdout=data.get("expected_output"),
    )
    known = {"id", "name", "repo", "commit", "prompt", "rubric", "timeout", "threshold", "expected_output", "model"}
    return TestDefinition(
        case=case,
        test_dir=test_dir,
        agent_model=str(data.get("model", SONNET_4_5)),
        repo_spec=repo_spec,
        extra={k: v for k, v in data.items() if k not in known},
    )


def materialize_local_repo(source: Path, root: Path) -> Path:
    """Commit ``source`` into ``root/<name>`` with a fixed identity and date.

    The resulting commit id depends only on the file contents, so a test
    definition can pin it.
    """
    if not source.is_dir():
        raise SetupError(f"local repo source {source} does not exist")
    root = root.absolute()
    dest = root / source.name
    root.mkdir(parents=True, exist_ok=True)
    with FileLock(str(dest) + ".lock"):
        if (dest / ".git").is_dir():
            return dest
        tmp = root / f".{source.name}.tmp"
        shutil.rmtree(tmp, ignore_errors=True)
        shutil.copytree(source, tmp)
        env = {**os.environ, **_REPO_ENV}
        for args in (
            ["-c", "init.defaultBranch=main", "init", "-q"],
            ["add", "-A"],
            ["-c", "commit.gpgsign=false", "commit", "-q", "-m", f"{source.name} fixture"],
        ):
            proc = subprocess.run(["git", *args], cwd=tmp, env=env, capture_output=True, text=True)
            if proc.returncode != 0:
                raise SetupError(f"git {' '.join(args)} in {tmp}: {proc.stderr.strip()}")
        os.replace(tmp, dest)
    return dest


def head_commit(repo: str | Path) -> str:
    return git("rev-parse", "HEAD", cwd=repo).stdout.strip()


# -- judges and pricing --------------------------------------------------------


@dataclass(frozen=True)
class JudgeSpec:
    model: str
    command: tuple[str, ...] | None = None


@dataclass(frozen=True)
class JudgeConfig:
    judges: tuple[JudgeSpec, ...]
    command: tuple[str, ...]
    parallel: bool = False
    min_delay_s: float = 0.0
    system_prompt: Path | None = None
    timeout_s: float = 600.0


def load_judge_config(test_dir: str | Path | None = None) -> JudgeConfig:
    """``<test_dir>/judges.yaml`` if present, else the shipped default."""
    path = Path(test_dir) / "judges.yaml" if test_dir is not None else None
    if path is None or not path.is_file():
        path = data_path("judges.yaml")
    data = _read_yaml(path) or {}
    entries = data.get("judges") or []
    if not entries:
        raise ConfigError(f"{path}: no judges configured")
    specs = []
    for e in entries:
        if isinstance(e, str):
            specs.append(JudgeSpec(e))
        else:
            cmd = e.get("command")
            specs.append(JudgeSpec(str(e["model"]), tuple(cmd) if cmd else None))
    sp = data.get("system_prompt")
    sp_path = None
    if sp:
        sp_path = Path(sp) if Path(sp).is_absolute() else path.parent / sp
    return JudgeConfig(
        judges=tuple(specs),
        command=tuple(data.get("command") or ()),
        parallel=bool(data.get("parallel", False)),
        min_delay_s=float(data.get("min_delay_s", 0.0)),
        system_prompt=sp_path,
        timeout_s=float(data.get("timeout", 600.0)),
    )


def load_pricing(test_dir: str | Path | None = None) -> PricingTable:
    path = Path(test_dir) / "pricing.yaml" if test_dir is not None else None
    if path is None or not path.is_file():
        path = data_path("pricing.yaml")
    return PricingTable.load(path)


def passthrough_env() -> dict[str, str]:
    """Credentials handed to adapters untouched."""
    value = os.environ.get(CREDENTIAL_ENV)
    return {CREDENTIAL_ENV: value} if value else {}
