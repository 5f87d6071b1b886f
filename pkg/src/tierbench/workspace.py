"""Isolated per-run git worktrees, config injection and artifact capture."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import shutil
import subprocess
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from filelock import FileLock

from tierbench.adapter import AdapterConfig
from tierbench.domain import TestCase
from tierbench.errors import HarnessError, SetupError
from tierbench.tiers import INSTRUCTION_FILE, Catalog, TierConfig

logger = logging.getLogger(__name__)

REPLAY_NAME = "replay.sh"
DIFF_NAME = "git.diff"
LISTING_NAME = "files.txt"
ARTIFACTS_NAME = "artifacts.json"


@dataclass(frozen=True)
class InjectionTargets:
    """Where an agent expects its instruction file, skills and agents."""

    instruction: str = INSTRUCTION_FILE
    skills: str = ".claude-plugin/skills"
    agents: str = ".claude/agents"


CLAUDE_TARGETS = InjectionTargets()


@dataclass(frozen=True)
class WorkspaceHandle:
    root: Path
    repo_url: str
    commit: str
    tier: str
    subtest: str
    run_id: int
    base_clone: Path
    injected: tuple[str, ...] = ()
    injection_sources: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ArtifactBundle:
    run_dir: Path
    stdout_path: Path
    stderr_path: Path
    git_diff: str
    file_listing: tuple[str, ...]
    cli_log_paths: tuple[Path, ...]
    replay_path: Path | None


def run_dir_for(results_root: str | Path, test_id: str, tier: str, subtest: str, run_id: int) -> Path:
    if run_id < 1:
        raise ValueError(f"run_id must be >= 1, got {run_id}")
    return Path(results_root) / test_id / str(tier) / subtest / f"run-{run_id:05d}"


def git(*args: str, cwd: str | Path | None = None, check: bool = True) -> subprocess.CompletedProcess:
    env = dict(os.environ)
    env.setdefault("GIT_TERMINAL_PROMPT", "0")
    proc = subprocess.run(
        ["git", *args], cwd=cwd, capture_output=True, text=True, env=env
    )
    if check and proc.returncode != 0:
        raise SetupError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
    return proc


def tree_digest(root: str | Path, exclude: Sequence[str] = (".git",)) -> str:
    """Content hash of a directory tree (paths + bytes), ignoring ``exclude`` names."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root, followlinks=True):
        dirnames[:] = sorted(d for d in dirnames if d not in exclude)
        for name in sorted(filenames):
            if name in exclude:
                continue
            p = Path(dirpath) / name
            h.update(p.relative_to(root).as_posix().encode() + b"\0")
            h.update(p.read_bytes() + b"\0")
    return h.hexdigest()


def _link_or_copy(src: Path, dst: Path, use_symlinks: bool) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    if use_symlinks:
        try:
            dst.symlink_to(src.resolve(), target_is_directory=src.is_dir())
            return
        except (OSError, NotImplementedError):
            logger.debug("symlink %s -> %s failed, copying", dst, src)
    if src.is_dir():
        shutil.copytree(src, dst, symlinks=False)
    else:
        shutil.copy2(src, dst)


class WorkspaceManager:
    """Creates worktrees from one shared base clone per repository.

    ``work_root`` holds ``repos/`` (base clones) and ``worktrees/``.  All
    worktree registration and removal against a base clone happens under a
    per-repo file lock.
    """

    def __init__(
        self,
        work_root: str | Path,
        catalog: Catalog | None = None,
        targets: InjectionTargets = CLAUDE_TARGETS,
        use_symlinks: bool = True,
    ) -> None:
        self.work_root = Path(work_root)
        self.catalog = catalog
        self.targets = targets
        self.use_symlinks = use_symlinks
        (self.work_root / "repos").mkdir(parents=True, exist_ok=True)
        (self.work_root / "worktrees").mkdir(parents=True, exist_ok=True)

    def _lock(self, base: Path) -> FileLock:
        return FileLock(str(base) + ".lock")

    def base_clone(self, repo_url: str) -> Path:
        name = hashlib.sha1(repo_url.encode()).hexdigest()[:16]
        base = self.work_root / "repos" / name
        with self._lock(base):
            if not (base / ".git").exists() and not (base / "HEAD").exists():
                git("clone", "--quiet", "--no-checkout", repo_url, str(base))
        return base

    def _ensure_commit(self, base: Path, commit: str) -> str:
        proc = git("rev-parse", "--verify", "--quiet", f"{commit}^{{commit}}", cwd=base, check=False)
        if proc.returncode != 0:
            git("fetch", "--quiet", "origin", cwd=base, check=False)
            proc = git("rev-parse", "--verify", "--quiet", f"{commit}^{{commit}}", cwd=base, check=False)
            if proc.returncode != 0:
                raise SetupError(f"commit {commit} not found in {base}")
        return proc.stdout.strip()

    def create_workspace(self, test: TestCase, tier_config: TierConfig, run_id: int) -> WorkspaceHandle:
        base = self.base_clone(test.repo_url)
        name = f"run-{run_id:05d}-{uuid.uuid4().hex[:10]}"
        root = self.work_root / "worktrees" / test.id / tier_config.tier.value / tier_config.subtest / name
        if root.exists():
            raise SetupError(f"workspace path {root} already exists; refusing to reuse")
        root.parent.mkdir(parents=True, exist_ok=True)
        with self._lock(base):
            full = self._ensure_commit(base, test.pinned_commit)
            git("worktree", "add", "--quiet", "--detach", str(root), full, cwd=base)
        injected, sources = self._inject(root, tier_config)
        return WorkspaceHandle(
            root=root,
            repo_url=test.repo_url,
            commit=full,
            tier=tier_config.tier.value,
            subtest=tier_config.subtest,
            run_id=run_id,
            base_clone=base,
            injected=tuple(injected),
            injection_sources=sources,
        )

    def _resolve(self, kind: str, item: str, cfg: TierConfig) -> Path:
        candidates = []
        if cfg.source_dir is not None:
            candidates.append(Path(cfg.source_dir) / kind)
        cat_dir = None
        if self.catalog is not None:
            cat_dir = self.catalog.skills_dir if kind == "skills" else self.catalog.agents_dir
        if cat_dir is not None:
            candidates.append(cat_dir)
        for d in candidates:
            exact = d / item
            if exact.exists():
                return exact
            matches = sorted(d.glob(f"{item}.*"))
            if matches:
                return matches[0]
        raise SetupError(f"{cfg.tier.value}/{cfg.subtest}: {kind[:-1]} {item!r} not found")

    def _inject(self, root: Path, cfg: TierConfig) -> tuple[list[str], dict[str, str]]:
        injected: list[str] = []
        sources: dict[str, str] = {}
        explicit = Path(cfg.source_dir) / INSTRUCTION_FILE if cfg.source_dir is not None else None
        dst = root / self.targets.instruction
        if explicit is not None and explicit.is_file():
            _link_or_copy(explicit, dst, self.use_symlinks)
            sources[self.targets.instruction] = str(explicit.resolve())
            injected.append(self.targets.instruction)
        else:
            text = cfg.instruction_text()
            if text is not None:
                dst.parent.mkdir(parents=True, exist_ok=True)
                dst.write_text(text, encoding="utf-8")
                injected.append(self.targets.instruction)
        for kind, target, names in (
            ("skills", self.targets.skills, cfg.skills),
            ("agents", self.targets.agents, cfg.agents),
        ):
            for item in sorted(names):
                src = self._resolve(kind, item, cfg)
                rel = f"{target}/{src.name}"
                _link_or_copy(src, root / rel, self.use_symlinks)
                sources[rel] = str(src.resolve())
            if names:
                injected.append(target)
        return injected, sources

    def destroy_workspace(self, ws: WorkspaceHandle) -> None:
        """Remove and deregister the worktree; safe to call repeatedly."""
        try:
            with self._lock(ws.base_clone):
                if ws.root.exists():
                    proc = git("worktree", "remove", "--force", str(ws.root), cwd=ws.base_clone, check=False)
                    if proc.returncode != 0:
                        logger.warning("worktree remove %s: %s", ws.root, proc.stderr.strip())
                        shutil.rmtree(ws.root, ignore_errors=True)
                git("worktree", "prune", cwd=ws.base_clone, check=False)
        except (OSError, HarnessError) as exc:
            logger.warning("could not destroy workspace %s: %s", ws.root, exc)

    def prune_stale(self, test_id: str) -> int:
        """Remove worktrees left behind by a crashed process for ``test_id``.

        Only safe while no other process is running the same test.
        """
        stale = self.work_root / "worktrees" / test_id
        count = sum(1 for _ in stale.glob("*/*/run-*")) if stale.is_dir() else 0
        shutil.rmtree(stale, ignore_errors=True)
        for base in sorted((self.work_root / "repos").iterdir()):
            if base.is_dir():
                with self._lock(base):
                    git("worktree", "prune", cwd=base, check=False)
        if count:
            logger.info("removed %d stale worktree(s) for %s", count, test_id)
        return count

    def registered_worktrees(self, repo_url: str) -> list[str]:
        base = self.base_clone(repo_url)
        out = git("worktree", "list", "--porcelain", cwd=base).stdout
        paths = [line.split(" ", 1)[1] for line in out.splitlines() if line.startswith("worktree ")]
        return [p for p in paths if Path(p).resolve() != base.resolve()]


def _excluded(rel: str, injected: Sequence[str]) -> bool:
    parts = rel.split("/")
    if ".git" in parts:
        return True
    return any(rel == inj or rel.startswith(inj.rstrip("/") + "/") for inj in injected)


def file_listing(ws: WorkspaceHandle) -> list[str]:
    out = set()
    for dirpath, dirnames, filenames in os.walk(ws.root):
        rel_dir = Path(dirpath).relative_to(ws.root).as_posix()
        rel_dir = "" if rel_dir == "." else rel_dir + "/"
        keep = []
        for d in sorted(dirnames):
            rel = rel_dir + d
            if d == ".git" or _excluded(rel, ws.injected):
                continue
            if os.path.islink(os.path.join(dirpath, d)):
                out.add(rel)
                continue
            keep.append(d)
        dirnames[:] = keep
        for f in filenames:
            rel = rel_dir + f
            if f == ".git" or _excluded(rel, ws.injected):
                continue
            out.add(rel)
    return sorted(out)


def git_diff(ws: WorkspaceHandle) -> str:
    excludes = [f":(exclude){p}" for p in ws.injected]
    git("add", "--intent-to-add", "--all", "--", ".", *excludes, cwd=ws.root, check=False)
    proc = git("-c", "core.quotepath=off", "diff", "--no-color", "--binary", ws.commit, "--", ".", *excludes, cwd=ws.root)
    return proc.stdout


def capture_artifacts(ws: WorkspaceHandle, output_dir: str | Path) -> ArtifactBundle:
    """Persist diff and file listing next to the adapter's stdout/stderr."""
    if not ws.root.is_dir():
        raise HarnessError(f"workspace {ws.root} is missing")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    diff = git_diff(ws)
    listing = file_listing(ws)
    (out / DIFF_NAME).write_text(diff, encoding="utf-8")
    (out / LISTING_NAME).write_text("".join(f"{p}\n" for p in listing), encoding="utf-8")
    logs_dir = out / "logs"
    logs = tuple(sorted(logs_dir.rglob("*"))) if logs_dir.is_dir() else ()
    replay = out / REPLAY_NAME
    bundle = ArtifactBundle(
        run_dir=out,
        stdout_path=out / "stdout.txt",
        stderr_path=out / "stderr.txt",
        git_diff=diff,
        file_listing=tuple(listing),
        cli_log_paths=tuple(p for p in logs if p.is_file()),
        replay_path=replay if replay.exists() else None,
    )
    (out / ARTIFACTS_NAME).write_text(
        json.dumps(
            {
                "diff": DIFF_NAME,
                "listing": LISTING_NAME,
                "stdout": "stdout.txt",
                "stderr": "stderr.txt",
                "cli_logs": [p.relative_to(out).as_posix() for p in bundle.cli_log_paths],
                "replay": REPLAY_NAME if bundle.replay_path else None,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    return bundle


def load_artifacts(run_dir: str | Path) -> ArtifactBundle:
    out = Path(run_dir)
    listing_path = out / LISTING_NAME
    listing = tuple(listing_path.read_text(encoding="utf-8").splitlines()) if listing_path.exists() else ()
    diff_path = out / DIFF_NAME
    replay = out / REPLAY_NAME
    return ArtifactBundle(
        run_dir=out,
        stdout_path=out / "stdout.txt",
        stderr_path=out / "stderr.txt",
        git_diff=diff_path.read_text(encoding="utf-8") if diff_path.exists() else "",
        file_listing=listing,
        cli_log_paths=(),
        replay_path=replay if replay.exists() else None,
    )


_SECRET_MARKERS = ("KEY", "TOKEN", "SECRET", "PASSWORD", "CREDENTIAL")


def _is_secret(name: str) -> bool:
    upper = name.upper()
    return any(m in upper for m in _SECRET_MARKERS)


def write_replay_script(
    ws: WorkspaceHandle,
    cfg: AdapterConfig,
    command: Sequence[str],
    dest_dir: str | Path | None = None,
) -> Path:
    """Write an executable shell script that recreates the run by hand.

    Usage: ``replay.sh [WORKDIR]``; the repository is cloned into
    ``WORKDIR/repo`` (a fresh temp dir by default), checked out at the pinned
    commit, tier config is copied in and the agent command is run with the
    prompt on stdin.
    """
    dest = Path(dest_dir) if dest_dir is not None else Path(cfg.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    q = shlex.quote
    lines = [
        "#!/usr/bin/env bash",
        f"# Replay of {ws.tier}/{ws.subtest} run {ws.run_id:05d}",
        "set -euo pipefail",
        f"REPO_URL={q(ws.repo_url)}",
        f"COMMIT={q(ws.commit)}",
        f"PROMPT={q(str(Path(cfg.prompt_path).resolve()))}",
        'WORKDIR="${1:-$(mktemp -d)}"',
        'mkdir -p "$WORKDIR"',
        'git clone --quiet --no-checkout "$REPO_URL" "$WORKDIR/repo"',
        'cd "$WORKDIR/repo"',
        'git -c advice.detachedHead=false checkout --quiet --detach "$COMMIT"',
    ]
    for rel, src in sorted(ws.injection_sources.items()):
        parent = str(Path(rel).parent)
        if parent != ".":
            lines.append(f"mkdir -p {q(parent)}")
        lines.append(f"cp -R {q(src)} {q(rel)}")
    instr = ws.root / INSTRUCTION_FILE
    if INSTRUCTION_FILE in ws.injected and INSTRUCTION_FILE not in ws.injection_sources and instr.is_file():
        lines.append(f"cat > {q(INSTRUCTION_FILE)} <<'TIERBENCH_EOF'")
        lines.append(instr.read_text(encoding="utf-8").rstrip("\n"))
        lines.append("TIERBENCH_EOF")
    for key in sorted(cfg.env):
        if _is_secret(key):
            lines.append(f"# {key} must be set in the calling environment")
        else:
            lines.append(f"export {key}={q(str(cfg.env[key]))}")
    lines.append(" ".join(q(part) for part in command) + ' < "$PROMPT"')
    path = dest / REPLAY_NAME
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    path.chmod(0o755)
    return path
