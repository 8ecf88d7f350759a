"""Append-only record database: publishing gate, per-token indexes, pruning.

The storage file is the database: newline-delimited canonical record lines,
appended in acceptance order and fsynced before an append returns. Loading
replays every line through the same gate, so the on-disk file is
self-verifying. Pruning trims the in-memory window eagerly (per token, the
head always survives); compact() rewrites the file to match.
"""
from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from .chain import (
    Record,
    RecordFormatError,
    TokenChain,
    parse_record,
    serialize_record,
    verify_chain,
    verify_link,
    ChainReport,
)
from .hashing import ALGORITHMS, HashConfig

logger = logging.getLogger(__name__)

# Gate rejection reasons (wire-visible, bit-exact).
SEQ_GAP = "seq-gap"
SEQ_OCCUPIED = "seq-occupied"
GENESIS_EXISTS = "genesis-exists"
WRONG_GENERATOR_COUNT = "wrong-generator-count"
BAD_O = "bad-O"


def bad_g(slot: int) -> str:
    return f"bad-G({slot})"


CONFLICT_REASONS = (SEQ_OCCUPIED, GENESIS_EXISTS)

# get_record result for a seq that existed but was discarded by retention.
PRUNED = object()


@dataclass(frozen=True)
class AppendResult:
    status: str  # "added" | "duplicate" | "rejected"
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.status in ("added", "duplicate")


ADDED = AppendResult("added")
DUPLICATE = AppendResult("duplicate")


def rejected(reason: str) -> AppendResult:
    return AppendResult("rejected", reason)


class LoadError(Exception):
    """The storage file failed replay; carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class StoreConfig:
    """Flat server configuration, loadable from a key=value text file."""

    algorithm: str = "sha256"
    domain_tag: str | None = None
    generators: int = 1
    history_depth: int | None = None  # None = unlimited
    listen: str = "127.0.0.1:9440"
    peers: tuple[str, ...] = ()

    def hash_config(self) -> HashConfig:
        return HashConfig(
            algorithm=self.algorithm,
            domain_tag=self.domain_tag,
            generator_count=self.generators,
        )

    def merged(self, **overrides) -> "StoreConfig":
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "StoreConfig":
        values: dict[str, object] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad config line (expected key=value): {raw!r}")
            key = key.strip()
            value = value.strip()
            if key == "algorithm":
                if value not in ALGORITHMS:
                    raise ValueError(f"unsupported algorithm: {value!r}")
                values["algorithm"] = value
            elif key == "domain_tag":
                values["domain_tag"] = value or None
            elif key == "generators":
                values["generators"] = int(value)
            elif key == "history_depth":
                values["history_depth"] = None if value == "unlimited" else int(value)
            elif key == "listen":
                values["listen"] = value
            elif key == "peers":
                values["peers"] = tuple(p.strip() for p in value.split(",") if p.strip())
            else:
                raise ValueError(f"unknown config key: {key!r}")
        cfg = cls(**values)  # type: ignore[arg-type]
        if cfg.history_depth is not None and cfg.history_depth < 1:
            raise ValueError("history_depth must be >= 1 (the head must survive)")
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "StoreConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


class Ledger:
    """Token chains behind a single validation gate, mirrored to a text file.

    Appends for one token are serialized; different tokens proceed in
    parallel. File writes are ordered by a separate lock and fsynced, so an
    accepted record is durable before append() returns.
    """

    def __init__(self, cfg: HashConfig, path: str | Path | None, history_depth: int | None = None):
        if history_depth is not None and history_depth < 1:
            raise ValueError("history_depth must be >= 1")
        self.cfg = cfg
        self.path = Path(path) if path is not None else None
        self.history_depth = history_depth
        self._chains: dict[str, list[Record]] = {}
        self._window_start: dict[str, int] = {}
        self._file_floor: dict[str, int] = {}
        self._registry_lock = threading.Lock()
        self._token_locks: dict[str, threading.Lock] = {}
        self._file_lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self._replay_file()
            self._fh = open(self.path, "a", encoding="utf-8")

    # -- loading ---------------------------------------------------------

    def _replay_file(self) -> None:
        assert self.path is not None
        if not self.path.exists():
            return
        raw = self.path.read_bytes()
        if not raw:
            return
        torn = not raw.endswith(b"\n")
        text = raw.decode("utf-8", errors="surrogateescape")
        lines = text.split("\n")
        tail = lines.pop()  # "" for a clean file, the torn fragment otherwise
        if torn:
            logger.warning(
                "%s: truncating torn final line (%d bytes), earlier content kept",
                self.path, len(tail.encode("utf-8", errors="surrogateescape")),
            )
            keep = len(raw) - len(tail.encode("utf-8", errors="surrogateescape"))
            with open(self.path, "r+b") as fh:
                fh.truncate(keep)
                fh.flush()
                os.fsync(fh.fileno())
        for line_no, line in enumerate(lines, start=1):
            try:
                record = parse_record(self.cfg, line)
            except (RecordFormatError, ValueError) as exc:
                raise LoadError(line_no, str(exc)) from exc
            result = self._gate(record, trusted_replay=True)
            if result.status == "rejected":
                raise LoadError(
                    line_no,
                    f"record (token {record.token[:12]}..., seq {record.seq}) "
                    f"failed the gate: {result.reason}",
                )

    # -- gate ------------------------------------------------------------

    def _lock_for(self, token: str) -> threading.Lock:
        with self._registry_lock:
            lock = self._token_locks.get(token)
            if lock is None:
                lock = threading.Lock()
                self._token_locks[token] = lock
            return lock

    def _gate(self, record: Record, trusted_replay: bool = False) -> AppendResult:
        if len(record.generators) != self.cfg.generator_count:
            return rejected(WRONG_GENERATOR_COUNT)
        record.validate(self.cfg)
        token = record.token
        with self._lock_for(token):
            chain = self._chains.get(token)
            if chain is None:
                if record.seq == 0 or trusted_replay:
                    # durable before visible: a failed write must not leave
                    # phantom in-memory state
                    self._persist(record, trusted_replay)
                    self._chains[token] = [record]
                    self._window_start[token] = record.seq
                    self._file_floor.setdefault(token, record.seq)
                    return ADDED
                return rejected(SEQ_GAP)
            head = chain[-1]
            if record.seq <= head.seq:
                window_start = self._window_start[token]
                if record.seq >= window_start:
                    existing = chain[record.seq - window_start]
                    if serialize_record(existing) == serialize_record(record):
                        return DUPLICATE
                if record.seq == 0:
                    return rejected(GENESIS_EXISTS)
                return rejected(SEQ_OCCUPIED)
            if record.seq > head.seq + 1:
                return rejected(SEQ_GAP)
            verdict = verify_link(self.cfg, head, record)
            if not verdict.ok:
                if verdict.field == "O":
                    return rejected(BAD_O)
                assert verdict.field is not None and verdict.field.startswith("G[")
                return rejected(bad_g(int(verdict.field[2:-1])))
            self._persist(record, trusted_replay)
            chain.append(record)
            if self.history_depth is not None:
                while len(chain) > self.history_depth:
                    chain.pop(0)
                    self._window_start[token] += 1
            return ADDED

    def _persist(self, record: Record, trusted_replay: bool) -> None:
        if trusted_replay or self.path is None:
            return
        with self._file_lock:
            if self._fh is None:
                raise RuntimeError("ledger is closed")
            self._fh.write(serialize_record(record) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def append(self, record: Record) -> AppendResult:
        """Run the publishing gate; durable before returning on acceptance."""
        return self._gate(record, trusted_replay=False)

    # -- reads -----------------------------------------------------------

    def get_head(self, token: str) -> Record | None:
        with self._lock_for(token):
            chain = self._chains.get(token)
            return chain[-1] if chain else None

    def get_record(self, token: str, seq: int):
        """Record, None (never existed yet), or PRUNED (discarded by retention)."""
        with self._lock_for(token):
            chain = self._chains.get(token)
            if chain is None or seq < 0:
                return None
            window_start = self._window_start[token]
            if seq < window_start:
                return PRUNED
            if seq > chain[-1].seq:
                return None
            return chain[seq - window_start]

    def get_chain(self, token: str) -> list[Record]:
        with self._lock_for(token):
            return list(self._chains.get(token, ()))

    def token_chain(self, token: str) -> TokenChain:
        return TokenChain(token=token, records=tuple(self.get_chain(token)))

    def tokens(self) -> list[str]:
        with self._registry_lock:
            return list(self._chains.keys())

    def verify_all(self) -> dict[str, ChainReport]:
        return {token: verify_chain(self.cfg, self.token_chain(token)) for token in self.tokens()}

    # -- size control ----------------------------------------------------

    def compact(self) -> list[tuple[str, int]]:
        """Drop file history outside each token's retained window.

        Returns the discarded (token, seq) pairs. The head is always
        retained (history_depth >= 1 is enforced at construction).

        Lock order: every token lock in sorted-token order, then the file
        lock — the same partial order appenders follow (one token lock,
        then the file lock), so the two cannot deadlock.
        """
        with self._registry_lock:
            tokens = sorted(self._chains.keys())
            locks = []
            for token in tokens:
                lock = self._token_locks.get(token)
                if lock is None:
                    lock = threading.Lock()
                    self._token_locks[token] = lock
                locks.append(lock)
        for lock in locks:
            lock.acquire()
        try:
            discarded = [
                (token, seq)
                for token in tokens
                for seq in range(
                    self._file_floor.get(token, self._window_start[token]),
                    self._window_start[token],
                )
            ]
            if not discarded:
                return []
            if self.path is not None:
                with self._file_lock:
                    tmp = self.path.with_suffix(self.path.suffix + ".compact")
                    with open(tmp, "w", encoding="utf-8") as fh:
                        for token in tokens:
                            for record in self._chains[token]:
                                fh.write(serialize_record(record) + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                    if self._fh is not None:
                        self._fh.close()
                    os.replace(tmp, self.path)
                    self._fh = open(self.path, "a", encoding="utf-8")
            for token in tokens:
                self._file_floor[token] = self._window_start[token]
            return discarded
        finally:
            for lock in reversed(locks):
                lock.release()

    # -- lifecycle -------------------------------------------------------

    def file_bytes(self) -> bytes:
        if self.path is None:
            return b""
        with self._file_lock:
            return self.path.read_bytes() if self.path.exists() else b""

    def close(self) -> None:
        with self._file_lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "Ledger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load(path: str | Path, cfg: HashConfig, history_depth: int | None = None) -> Ledger:
    """Open (or create) a ledger at path, replaying the file through the gate."""
    return Ledger(cfg, path, history_depth)
