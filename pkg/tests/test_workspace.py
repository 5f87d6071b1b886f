from __future__ import annotations

import os
import re
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import pytest

from tierbench.adapter import AdapterConfig, ScriptedAdapter
from tierbench.config import load_test
from tierbench.errors import SetupError
from tierbench.tiers import Tier, TierConfig, TierRegistry
from tierbench.workspace import (
    WorkspaceManager,
    capture_artifacts,
    file_listing,
    load_artifacts,
    run_dir_for,
    tree_digest,
    write_replay_script,
)

LAYOUT = re.compile(r"results/test-\d{3}/T[0-6]/[\w-]+/run-\d{5}$")


@pytest.fixture
def setup(tmp_path, test_dir):
    definition = load_test(test_dir, repo_root=tmp_path / "sources")
    registry = TierRegistry(test_dir)
    manager = WorkspaceManager(tmp_path / "work", registry.catalog)
    return definition.case, registry, manager


def test_run_dir_layout(tmp_path):
    p = run_dir_for(tmp_path / "results", "test-001", "T3", "subtest-07", 12)
    assert LAYOUT.search(p.as_posix())
    assert p.name == "run-00012"
    with pytest.raises(ValueError):
        run_dir_for(tmp_path, "test-001", "T0", "s", 0)


def test_workspaces_are_disjoint_and_reproducible(setup):
    case, registry, manager = setup
    cfg = registry.get("T4", "subtest-00")
    with ThreadPoolExecutor(4) as pool:
        handles = list(pool.map(lambda i: manager.create_workspace(case, cfg, i % 2 + 1), range(6)))
    roots = [h.root for h in handles]
    assert len(set(roots)) == 6
    for a in roots:
        for b in roots:
            assert a == b or not (a.is_relative_to(b) or b.is_relative_to(a))
    digests = {tree_digest(r) for r in roots}
    assert len(digests) == 1
    assert len(manager.registered_worktrees(case.repo_url)) == 6
    for h in handles:
        manager.destroy_workspace(h)
        manager.destroy_workspace(h)
        assert not h.root.exists()
    assert manager.registered_worktrees(case.repo_url) == []


def test_copy_fallback_has_identical_content(tmp_path, setup):
    case, registry, manager = setup
    copier = WorkspaceManager(tmp_path / "work2", registry.catalog, use_symlinks=False)
    cfg = registry.get("T4", "subtest-00")
    a = manager.create_workspace(case, cfg, 1)
    b = copier.create_workspace(case, cfg, 1)
    assert (a.root / ".claude/agents/reviewer.md").is_symlink()
    assert not (b.root / ".claude/agents/reviewer.md").is_symlink()
    assert tree_digest(a.root) == tree_digest(b.root)


def test_injection_per_tier(setup):
    case, registry, manager = setup
    t0 = manager.create_workspace(case, registry.get("T0", "subtest-00"), 1)
    assert (t0.root / "CLAUDE.md").is_file()
    assert not (t0.root / ".claude").exists() and not (t0.root / ".claude-plugin").exists()
    t1 = manager.create_workspace(case, registry.get("T1", "subtest-00"), 1)
    assert (t1.root / ".claude-plugin/skills/python-style/SKILL.md").is_file()
    bare = manager.create_workspace(case, TierConfig(Tier.T0, "empty"), 1)
    assert sorted(os.listdir(bare.root)) == [".git", "README.md"]


def test_missing_skill_is_setup_error(setup):
    case, registry, manager = setup
    cfg = TierConfig(Tier.T1, "bad", skills=frozenset({"no-such-skill"}))
    with pytest.raises(SetupError):
        manager.create_workspace(case, cfg, 1)


def test_capture_excludes_git_and_injected_but_keeps_caches(tmp_path, setup):
    case, registry, manager = setup
    ws = manager.create_workspace(case, registry.get("T4", "subtest-00"), 1)
    out = tmp_path / "run"
    cfg = AdapterConfig(case.id, tmp_path / "p.md", ws.root, out, env={"TIERBENCH_FIXTURE": "t6-run1"})
    (tmp_path / "p.md").write_text(case.prompt)
    result = ScriptedAdapter().execute(cfg)
    bundle = capture_artifacts(ws, out)
    listing = bundle.file_listing
    assert "hello.py" in listing and "README.md" in listing
    assert any(p.startswith(".ruff_cache/") for p in listing)
    assert not any(p.startswith((".git/", ".claude/", "CLAUDE.md")) for p in listing)
    assert "hello.py" in bundle.git_diff and "CLAUDE.md" not in bundle.git_diff
    stdout = result.stdout_path.read_bytes()
    again = load_artifacts(out)
    assert again.stdout_path.read_bytes() == stdout
    assert again.file_listing == tuple(listing) and again.git_diff == bundle.git_diff
    assert file_listing(ws) == list(listing)


def test_replay_script_reproduces_run(tmp_path, setup):
    case, registry, manager = setup
    cfg_tier = registry.get("T3", "subtest-00")
    ws = manager.create_workspace(case, cfg_tier, 1)
    prompt = tmp_path / "prompt.md"
    prompt.write_text(case.prompt)
    adapter = ScriptedAdapter()
    cfg = AdapterConfig(
        "claude-sonnet-4-5-20250929", prompt, ws.root, tmp_path / "run",
        env={"TIERBENCH_FIXTURE": "t3-run1", "ANTHROPIC_API_KEY": "sk-do-not-leak"},
    )
    script = write_replay_script(ws, cfg, adapter.build_command(cfg))
    text = script.read_text()
    assert "sk-do-not-leak" not in text
    assert os.access(script, os.X_OK)
    dest = tmp_path / "replay"
    proc = subprocess.run(["bash", str(script), str(dest)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    repo = dest / "repo"
    assert (repo / "hello.py").read_text().strip() == 'print("Hello, World!")'
    assert (repo / ".claude/agents/reviewer.md").is_file()
    assert (repo / "CLAUDE.md").read_text() == (ws.root / "CLAUDE.md").read_text()
    assert '"usage"' in proc.stdout
    assert sys.executable in text


def test_prune_stale(tmp_path, setup):
    case, registry, manager = setup
    ws = manager.create_workspace(case, registry.get("T0", "subtest-00"), 1)
    assert manager.prune_stale(case.id) == 1
    assert not ws.root.exists()
    assert manager.registered_worktrees(case.repo_url) == []
