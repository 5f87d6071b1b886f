"""Crash-safe experiment state and shared rate-limit bookkeeping."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import yaml

from tierbench.errors import CorruptStateError, HarnessError, TamperError

SCHEMA_VERSION = 1
CHECKPOINT_NAME = "checkpoint.json"
_STRUCTURED_SUFFIXES = {".json", ".yaml", ".yml"}


@dataclass(frozen=True)
class CompletedRun:
    tier: str
    subtest: str
    run_id: int
    finished_at: float
    passed: bool

    def __post_init__(self) -> None:
        if self.run_id < 1:
            raise ValueError(f"run_id must be >= 1, got {self.run_id}")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.tier, self.subtest, self.run_id)


@dataclass(frozen=True)
class RateState:
    last_call_at: float = 0.0
    tokens_consumed: int = 0
    min_delay_s: float = 0.0

    def __post_init__(self) -> None:
        if self.min_delay_s < 0:
            raise ValueError("min_delay_s must be >= 0")


@dataclass(frozen=True)
class Checkpoint:
    config_hash: str
    test_id: str
    total_planned: int
    started_at: float
    completed: tuple[CompletedRun, ...] = ()
    rate_state: RateState = field(default_factory=RateState)

    def __post_init__(self) -> None:
        if not self.config_hash:
            raise ValueError("config_hash must be nonempty")
        keys = [c.key for c in self.completed]
        if len(keys) != len(set(keys)):
            raise ValueError("duplicate completed run in checkpoint")

    def completed_keys(self) -> frozenset[tuple[str, str, int]]:
        return frozenset(c.key for c in self.completed)

    def is_completed(self, tier: str, subtest: str, run_id: int) -> bool:
        return (tier, subtest, run_id) in self.completed_keys()

    def with_completed(self, run: CompletedRun) -> Checkpoint:
        if run.key in self.completed_keys():
            return self
        return replace(self, completed=self.completed + (run,))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "meta": {
                "test_id": self.test_id,
                "total_planned": self.total_planned,
                "started_at": self.started_at,
            },
            "rate_state": {
                "last_call_at": self.rate_state.last_call_at,
                "tokens_consumed": self.rate_state.tokens_consumed,
                "min_delay_s": self.rate_state.min_delay_s,
            },
            "completed": [
                {
                    "tier": c.tier,
                    "subtest": c.subtest,
                    "run_id": c.run_id,
                    "finished_at": c.finished_at,
                    "passed": c.passed,
                }
                for c in self.completed
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Checkpoint:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise CorruptStateError(f"unsupported checkpoint schema {data.get('schema_version')!r}")
        meta = data["meta"]
        rs = data.get("rate_state", {})
        return cls(
            config_hash=str(data["config_hash"]),
            test_id=str(meta["test_id"]),
            total_planned=int(meta["total_planned"]),
            started_at=float(meta["started_at"]),
            rate_state=RateState(
                float(rs.get("last_call_at", 0.0)),
                int(rs.get("tokens_consumed", 0)),
                float(rs.get("min_delay_s", 0.0)),
            ),
            completed=tuple(
                CompletedRun(
                    str(c["tier"]),
                    str(c["subtest"]),
                    int(c["run_id"]),
                    float(c["finished_at"]),
                    bool(c["passed"]),
                )
                for c in data.get("completed", ())
            ),
        )


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def save(cp: Checkpoint, path: str | Path, _before_rename: Callable[[], None] | None = None) -> None:
    """Write ``cp`` to ``path`` via ``<path>.tmp`` and an atomic rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    payload = json.dumps(cp.to_dict(), indent=2, sort_keys=True) + "\n"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    if _before_rename is not None:
        _before_rename()
    os.replace(tmp, path)
    _fsync_dir(path.parent)


def load(path: str | Path) -> Checkpoint:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return Checkpoint.from_dict(data)
    except CorruptStateError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptStateError(f"cannot parse checkpoint {path}: {exc}") from exc


def load_and_validate(path: str | Path, current_hash: str) -> Checkpoint:
    cp = load(path)
    if cp.config_hash != current_hash:
        raise TamperError(
            f"experiment configuration changed since the checkpoint was written "
            f"(stored {cp.config_hash[:12]}, current {current_hash[:12]}); refusing to resume"
        )
    return cp


# -- config hashing ------------------------------------------------------------


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str).encode("utf-8")


def _file_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if path.suffix.lower() in _STRUCTURED_SUFFIXES:
        try:
            text = raw.decode("utf-8")
            data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
            return _canonical(data)
        except (UnicodeDecodeError, ValueError, yaml.YAMLError):
            pass
    return raw.replace(b"\r\n", b"\n")


def _iter_files(root: Path) -> Iterable[Path]:
    for dirpath, dirnames, filenames in os.walk(root, followlinks=True):
        dirnames[:] = sorted(d for d in dirnames if d != ".git")
        for name in sorted(filenames):
            yield Path(dirpath) / name


def config_hash(*sources: str | Path | Mapping[str, Any]) -> str:
    """SHA-256 over a canonical form of config trees, files and mappings.

    Directories are walked in sorted order with paths taken relative to the
    directory; JSON/YAML files and mappings are hashed by content with sorted
    keys, so key order and line endings do not matter.
    """
    h = hashlib.sha256()
    for source in sources:
        if isinstance(source, Mapping):
            h.update(b"M\0" + _canonical(source) + b"\0")
            continue
        path = Path(source)
        try:
            if path.is_dir():
                h.update(b"D\0")
                for f in _iter_files(path):
                    rel = f.relative_to(path).as_posix()
                    h.update(rel.encode("utf-8") + b"\0" + _file_bytes(f) + b"\0")
            else:
                h.update(b"F\0" + path.name.encode("utf-8") + b"\0" + _file_bytes(path) + b"\0")
        except OSError as exc:
            raise HarnessError(f"cannot hash config {path}: {exc}") from exc
    return h.hexdigest()


# -- rate limiting ---------------------------------------------------------------


def acquire_rate_slot(state: RateState, now: float) -> float:
    """Seconds to wait before the next call may start."""
    return max(0.0, state.last_call_at + state.min_delay_s - now)


class RateLimiter:
    """Serializes call starts so that no two are closer than ``min_delay_s``.

    Slots are reserved under a lock, so contending workers receive strictly
    ordered start times; sleeping happens outside the lock.
    """

    def __init__(
        self,
        state: RateState | None = None,
        clock: Callable[[], float] = time.time,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._state = state or RateState()
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()

    @property
    def state(self) -> RateState:
        with self._lock:
            return self._state

    def acquire(self, tokens: int = 0) -> float:
        with self._lock:
            now = self._clock()
            wait = acquire_rate_slot(self._state, now)
            self._state = replace(
                self._state,
                last_call_at=now + wait,
                tokens_consumed=self._state.tokens_consumed + tokens,
            )
        if wait > 0:
            self._sleep(wait)
        return wait

    def record_tokens(self, tokens: int) -> None:
        with self._lock:
            self._state = replace(self._state, tokens_consumed=self._state.tokens_consumed + tokens)
