from __future__ import annotations

import json
import os
import sys
import time

import pytest

from conftest import TIERS, TOKEN_ROWS
from tierbench.adapter import (
    AdapterConfig,
    AdapterResult,
    ClaudeCodeAdapter,
    CommandAdapter,
    ScriptedAdapter,
    load_agent_fixtures,
    parse_usage,
    scripted_execute,
)
from tierbench.domain import DEFAULT_PRICING, TokenStats, agent_cost
from tierbench.errors import ConfigError, ExecutionError

SONNET = "claude-sonnet-4-5-20250929"


def _config(tmp_path, **kw):
    ws = tmp_path / "ws"
    ws.mkdir(exist_ok=True)
    prompt = tmp_path / "prompt.md"
    prompt.write_text("say hi\n")
    base = dict(model_id=SONNET, prompt_path=prompt, workspace_path=ws, output_dir=tmp_path / "out")
    base.update(kw)
    return AdapterConfig(**base)


@pytest.mark.parametrize("tier", TIERS)
def test_fixture_token_totals(tier):
    result = scripted_execute(f"{tier.lower()}-run1")
    i, o, cc, cr, total = TOKEN_ROWS[tier]
    assert result.tokens == TokenStats(i, o, cc, cr)
    assert result.tokens.total() == total
    assert result.api_calls >= 1


def test_scripted_is_deterministic(tmp_path):
    a = scripted_execute("t3-run1")
    b = scripted_execute("t3-run1")
    assert a == b
    adapter = ScriptedAdapter(select=lambda cfg: "t0-run1")
    r1 = adapter.execute(_config(tmp_path))
    r2 = adapter.execute(_config(tmp_path))
    assert r1 == r2
    assert (tmp_path / "ws" / "hello.py").read_text().strip() == 'print("Hello, World!")'
    assert adapter.build_command(_config(tmp_path))[-2:] == ["fixture-agent", "t0-run1"]


def test_scripted_unknown_fixture(tmp_path):
    with pytest.raises(ConfigError):
        scripted_execute("nope")
    with pytest.raises(ConfigError):
        ScriptedAdapter(select=lambda cfg: "nope").execute(_config(tmp_path))


def test_recorded_fixture_cost_is_billed_value():
    fx = load_agent_fixtures()["t6-run1"]
    result = scripted_execute("t6-run1")
    assert result.cost_usd == fx.cost_usd == 0.247
    assert agent_cost(result.tokens, SONNET) == pytest.approx(0.247, rel=0.03)


def test_parse_usage_sums_blocks_across_streams():
    lines = "\n".join(
        json.dumps({"type": "assistant", "usage": {"input_tokens": n, "output_tokens": 2 * n,
                                                   "cache_creation_input_tokens": 3, "cache_read_input_tokens": 4}})
        for n in (1, 10)
    )
    stderr = json.dumps({"usage": {"input_tokens": 100, "cache_read_tokens": 1}})
    rep = parse_usage("noise\n" + lines + "\nmore noise {\n", stderr)
    assert rep.tokens == TokenStats(111, 22, 6, 9)
    assert rep.api_calls == 3 and not rep.warnings


def test_parse_usage_degrades_to_zero_with_warning():
    rep = parse_usage("plain text, no json", "")
    assert rep.tokens == TokenStats() and rep.api_calls == 0
    assert rep.warnings
    bad = parse_usage(json.dumps({"usage": {"input_tokens": -5}}))
    assert bad.tokens == TokenStats() and any("malformed" in w for w in bad.warnings)
    listed = parse_usage(json.dumps([{"usage": {"output_tokens": 7}}, {"usage": {"output_tokens": 1}}]))
    assert listed.tokens.output == 8 and listed.api_calls == 2


def test_command_adapter_runs_and_prices(tmp_path):
    script = (
        "import json, sys, os\n"
        "prompt = sys.stdin.read()\n"
        "open('out.txt', 'w').write(prompt)\n"
        "print(json.dumps({'result': 'ok', 'usage': {'input_tokens': 1000, 'output_tokens': 500}}))\n"
        "print(os.environ.get('SECRET_FOR_TEST', ''), file=sys.stderr)\n"
    )
    adapter = CommandAdapter([sys.executable, "-c", script, "{model}", "{workspace}"])
    cfg = _config(tmp_path, env={"SECRET_FOR_TEST": "s3"})
    assert adapter.build_command(cfg)[-2:] == [SONNET, str(cfg.workspace_path)]
    result = adapter.execute(cfg)
    assert result.exit_code == 0 and not result.timed_out
    assert (cfg.workspace_path / "out.txt").read_text() == "say hi\n"
    assert result.stderr_path.read_text().strip() == "s3"
    assert result.tokens == TokenStats(1000, 500, 0, 0)
    assert result.cost_usd == agent_cost(result.tokens, result.model_id, DEFAULT_PRICING)
    assert AdapterResult.from_dict(json.loads(json.dumps(result.to_dict()))) == result


def test_command_adapter_timeout_kills_process_group(tmp_path):
    marker = tmp_path / "grandchild.pid"
    script = (
        "import subprocess, sys, time\n"
        f"p = subprocess.Popen([sys.executable, '-c', 'import time; time.sleep(60)'])\n"
        f"open({str(marker)!r}, 'w').write(str(p.pid))\n"
        "time.sleep(60)\n"
    )
    adapter = CommandAdapter([sys.executable, "-c", script], grace_s=0.5)
    start = time.monotonic()
    result = adapter.execute(_config(tmp_path, timeout_s=1.0))
    elapsed = time.monotonic() - start
    assert result.timed_out
    assert elapsed < 1.0 + 5.0
    pid = int(marker.read_text())
    deadline = time.monotonic() + 3
    while time.monotonic() < deadline:
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            break
        time.sleep(0.05)
    else:
        pytest.fail("grandchild survived the timeout kill")


def test_command_adapter_errors(tmp_path):
    with pytest.raises(ConfigError):
        CommandAdapter([])
    with pytest.raises(ExecutionError):
        CommandAdapter([str(tmp_path / "missing-binary")]).execute(_config(tmp_path))
    cfg = _config(tmp_path)
    with pytest.raises(ExecutionError):
        CommandAdapter(["true"]).execute(AdapterConfig(SONNET, cfg.prompt_path, tmp_path / "nope", tmp_path))
    with pytest.raises(ConfigError):
        _config(tmp_path, timeout_s=0)


def test_claude_adapter_command(tmp_path):
    cmd = ClaudeCodeAdapter().build_command(_config(tmp_path))
    assert cmd[0] == "claude" and "--print" in cmd and cmd[-1] == SONNET
