"""Line-oriented TCP protocol, peer notifications, and anti-entropy sync.

One request line, one response block. Servers never trust each other: every
record arriving over the wire passes the local store gate, whether pushed
by a notification or pulled by sync. Conflicting records are counted as
divergence and surfaced, never resolved.

Wire protocol (UTF-8 lines, <= 64 KiB):

    PING                -> OK pong
    GETHEAD <S>         -> REC <record-line> | ERR not-found
    GET <S> <N>         -> REC <record-line> | ERR not-found | ERR pruned
    GETCHAIN <S>        -> zero or more REC <record-line> lines, then END
    ADD <record-line>   -> OK added | OK duplicate | ERR <gate reason>
    PEERS               -> zero or more PEER <address> lines, then END
"""
from __future__ import annotations

import logging
import queue
import random
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from .chain import RecordFormatError, parse_record, serialize_record
from .hashing import HashConfig, is_digest
from .store import CONFLICT_REASONS, Ledger, PRUNED

logger = logging.getLogger(__name__)

MAX_LINE_BYTES = 64 * 1024

ALIVE = "alive"
SUSPECT = "suspect"
DEAD = "dead"

SUSPECT_AFTER = 1  # consecutive failed probes
DEAD_AFTER = 3


class WireError(Exception):
    """Protocol-level failure talking to a peer."""


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address (want host:port): {address!r}")
    return host, int(port)


@dataclass
class Peer:
    address: str
    state: str = SUSPECT
    last_seen: float = 0.0
    learned_from: str = "static"
    failures: int = 0
    static: bool = False
    last_probe: float = 0.0


class PeerTable:
    """Known servers with liveness state. Static entries are never evicted."""

    def __init__(self, own_address: str, max_size: int = 64):
        self.own_address = own_address
        self.max_size = max_size
        self._peers: dict[str, Peer] = {}
        self._lock = threading.Lock()

    def add_static(self, address: str) -> None:
        if address == self.own_address:
            return
        with self._lock:
            # operator-configured peers start alive so a fresh server
            # notifies them before the first probe round completes
            self._peers[address] = Peer(address=address, state=ALIVE, static=True)

    def learn(self, address: str, source: str) -> bool:
        """Merge a gossiped address; new entries start suspect until pinged."""
        if address == self.own_address:
            return False
        with self._lock:
            if address in self._peers:
                return False
            if len(self._peers) >= self.max_size and not self._evict_one():
                return False
            self._peers[address] = Peer(address=address, state=SUSPECT, learned_from=source)
            return True

    def _evict_one(self) -> bool:
        candidates = [p for p in self._peers.values() if not p.static]
        if not candidates:
            return False
        candidates.sort(key=lambda p: ({DEAD: 0, SUSPECT: 1, ALIVE: 2}[p.state], p.last_seen))
        del self._peers[candidates[0].address]
        return True

    def mark_success(self, address: str) -> None:
        with self._lock:
            peer = self._peers.get(address)
            if peer is None:
                return
            peer.state = ALIVE
            peer.failures = 0
            peer.last_seen = time.monotonic()

    def mark_failure(self, address: str) -> None:
        with self._lock:
            peer = self._peers.get(address)
            if peer is None:
                return
            peer.failures += 1
            if peer.failures >= DEAD_AFTER:
                peer.state = DEAD
            elif peer.failures >= SUSPECT_AFTER:
                peer.state = SUSPECT

    def alive(self) -> list[str]:
        with self._lock:
            return [p.address for p in self._peers.values() if p.state == ALIVE]

    def shareable(self) -> list[str]:
        with self._lock:
            return [p.address for p in self._peers.values() if p.state != DEAD]

    def snapshot(self) -> list[Peer]:
        with self._lock:
            return [Peer(**vars(p)) for p in self._peers.values()]

    def get_state(self, address: str) -> str | None:
        with self._lock:
            peer = self._peers.get(address)
            return peer.state if peer else None

    def note_probe(self, address: str) -> None:
        with self._lock:
            peer = self._peers.get(address)
            if peer is not None:
                peer.last_probe = time.monotonic()


class WireClient:
    """Blocking client for one server connection."""

    def __init__(self, address: str, timeout: float = 5.0):
        host, port = split_address(address)
        self.address = address
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._rfile = self._sock.makefile("rb")

    def close(self) -> None:
        try:
            self._rfile.close()
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "WireClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _read_line(self) -> str:
        raw = self._rfile.readline(MAX_LINE_BYTES + 2)
        if not raw:
            raise WireError(f"{self.address}: connection closed mid-response")
        return raw.decode("utf-8").rstrip("\n")

    def request(self, line: str) -> str:
        self._sock.sendall(line.encode("utf-8") + b"\n")
        return self._read_line()

    def request_block(self, line: str, item_prefix: str) -> list[str]:
        self._sock.sendall(line.encode("utf-8") + b"\n")
        items: list[str] = []
        while True:
            response = self._read_line()
            if response == "END":
                return items
            if response.startswith(item_prefix + " "):
                items.append(response[len(item_prefix) + 1 :])
            elif response.startswith("ERR "):
                raise WireError(f"{self.address}: {response}")
            else:
                raise WireError(f"{self.address}: unexpected line {response!r}")

    def ping(self) -> bool:
        return self.request("PING") == "OK pong"

    def gethead(self, token: str) -> str | None:
        response = self.request(f"GETHEAD {token}")
        if response.startswith("REC "):
            return response[4:]
        if response == "ERR not-found":
            return None
        raise WireError(f"{self.address}: {response}")

    def get(self, token: str, seq: int) -> str | None:
        response = self.request(f"GET {token} {seq}")
        if response.startswith("REC "):
            return response[4:]
        if response in ("ERR not-found", "ERR pruned"):
            return None
        raise WireError(f"{self.address}: {response}")

    def getchain(self, token: str) -> list[str]:
        return self.request_block(f"GETCHAIN {token}", "REC")

    def add(self, record_line: str) -> str:
        return self.request(f"ADD {record_line}")

    def peers(self) -> list[str]:
        return self.request_block("PEERS", "PEER")


class _Notifier:
    """Per-peer bounded fan-out queue; oldest entries dropped when full."""

    def __init__(self, server: "LedgerServer", address: str, buffer_size: int):
        self.server = server
        self.address = address
        self.queue: queue.Queue[str | None] = queue.Queue(maxsize=buffer_size)
        self.dropped = 0
        self.thread = threading.Thread(
            target=self._run, name=f"notify-{address}", daemon=True
        )
        self.thread.start()

    def enqueue(self, line: str) -> None:
        while True:
            try:
                self.queue.put_nowait(line)
                return
            except queue.Full:
                try:
                    self.queue.get_nowait()
                    self.dropped += 1
                except queue.Empty:
                    pass

    def stop(self) -> None:
        self.enqueue_sentinel()

    def enqueue_sentinel(self) -> None:
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            try:
                self.queue.get_nowait()
            except queue.Empty:
                pass
            self.queue.put_nowait(None)

    def _run(self) -> None:
        while True:
            line = self.queue.get()
            if line is None:
                return
            try:
                with WireClient(self.address, timeout=self.server.peer_timeout) as client:
                    client.add(line)
                self.server.peers.mark_success(self.address)
            except (OSError, WireError):
                self.server.peers.mark_failure(self.address)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        server: LedgerServer = self.server.ledger_server  # type: ignore[attr-defined]
        while True:
            try:
                raw = self.rfile.readline(MAX_LINE_BYTES + 1)
            except OSError:
                return
            if not raw:
                return
            if len(raw) > MAX_LINE_BYTES and not raw.endswith(b"\n"):
                # framing lost: answer and drop the connection
                self._send("ERR bad-request")
                return
            try:
                line = raw.decode("utf-8").rstrip("\r\n")
            except UnicodeDecodeError:
                self._send("ERR bad-request")
                continue
            for response in server.handle_line(line):
                if not self._send(response):
                    return

    def _send(self, line: str) -> bool:
        try:
            self.wfile.write(line.encode("utf-8") + b"\n")
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class LedgerServer:
    """Record service around one Ledger; never trusts a peer's claim.

    All mutation funnels through the store gate; notifications run detached
    from the request path with bounded per-peer buffers; peer maintenance is
    an independent periodic activity.
    """

    def __init__(
        self,
        ledger: Ledger,
        listen: str = "127.0.0.1:0",
        peers: tuple[str, ...] | list[str] = (),
        advertise: str | None = None,
        probe_interval: float = 2.0,
        dead_probe_interval: float = 10.0,
        peer_timeout: float = 2.0,
        notify_buffer: int = 128,
        max_peers: int = 64,
    ):
        self.ledger = ledger
        self.cfg: HashConfig = ledger.cfg
        host, port = split_address(listen)
        try:
            self._tcp = _TCPServer((host, port), _Handler)
        except OSError as exc:
            raise WireError(f"cannot bind {listen}: {exc}") from exc
        self._tcp.ledger_server = self  # type: ignore[attr-defined]
        self.address = f"{self._tcp.server_address[0]}:{self._tcp.server_address[1]}"
        self.advertise = advertise or self.address
        self.peers = PeerTable(self.advertise, max_size=max_peers)
        for peer in peers:
            self.peers.add_static(peer)
        self.probe_interval = probe_interval
        self.dead_probe_interval = dead_probe_interval
        self.peer_timeout = peer_timeout
        self.notify_buffer = notify_buffer
        self.divergence = 0
        self._counter_lock = threading.Lock()
        self._notifiers: dict[str, _Notifier] = {}
        self._notifier_lock = threading.Lock()
        self._stop = threading.Event()
        self._serve_thread: threading.Thread | None = None
        self._maintenance_thread: threading.Thread | None = None

    # -- lifecycle --------------------------------------------------------

    def start(self) -> "LedgerServer":
        self._serve_thread = threading.Thread(
            target=self._tcp.serve_forever, name=f"serve-{self.address}", daemon=True
        )
        self._serve_thread.start()
        self._maintenance_thread = threading.Thread(
            target=self._maintain_peers, name=f"peers-{self.address}", daemon=True
        )
        self._maintenance_thread.start()
        logger.info("serving on %s", self.address)
        return self

    def shutdown(self) -> None:
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        with self._notifier_lock:
            notifiers = list(self._notifiers.values())
        for notifier in notifiers:
            notifier.stop()
        if self._maintenance_thread is not None:
            self._maintenance_thread.join(timeout=5)
        if self._serve_thread is not None:
            self._serve_thread.join(timeout=5)

    def __enter__(self) -> "LedgerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown()

    # -- request dispatch ---------------------------------------------------

    def handle_line(self, line: str) -> list[str]:
        """One request line to one response block. Testable without sockets."""
        if not line:
            return ["ERR bad-request"]
        verb, _, rest = line.partition(" ")
        if verb == "PING" and not rest:
            return ["OK pong"]
        if verb == "GETHEAD":
            if not is_digest(self.cfg, rest):
                return ["ERR bad-request"]
            head = self.ledger.get_head(rest)
            return [f"REC {serialize_record(head)}"] if head else ["ERR not-found"]
        if verb == "GET":
            token, _, seq_text = rest.partition(" ")
            canonical = (
                seq_text.isascii()
                and seq_text.isdigit()
                and (len(seq_text) == 1 or seq_text[0] != "0")
            )
            if not is_digest(self.cfg, token) or not canonical:
                return ["ERR bad-request"]
            found = self.ledger.get_record(token, int(seq_text))
            if found is PRUNED:
                return ["ERR pruned"]
            if found is None:
                return ["ERR not-found"]
            return [f"REC {serialize_record(found)}"]
        if verb == "GETCHAIN":
            if not is_digest(self.cfg, rest):
                return ["ERR bad-request"]
            records = self.ledger.get_chain(rest)
            return [f"REC {serialize_record(r)}" for r in records] + ["END"]
        if verb == "ADD":
            return [self._handle_add(rest)]
        if verb == "PEERS" and not rest:
            listing = [self.advertise] + self.peers.shareable()
            return [f"PEER {address}" for address in listing] + ["END"]
        return ["ERR bad-request"]

    def _handle_add(self, record_line: str) -> str:
        try:
            record = parse_record(self.cfg, record_line)
        except (RecordFormatError, ValueError):
            return "ERR bad-request"
        result = self.ledger.append(record)
        if result.status == "added":
            self.notify_peers(serialize_record(record))
            return "OK added"
        if result.status == "duplicate":
            return "OK duplicate"
        assert result.reason is not None
        if result.reason in CONFLICT_REASONS:
            self._count_divergence()
        return f"ERR {result.reason}"

    def _count_divergence(self) -> None:
        with self._counter_lock:
            self.divergence += 1

    # -- propagation --------------------------------------------------------

    def notify_peers(self, record_line: str) -> list[str]:
        """Fan a just-accepted record out to every alive peer, best-effort."""
        targets = self.peers.alive()
        for address in targets:
            self._notifier_for(address).enqueue(record_line)
        return targets

    def _notifier_for(self, address: str) -> _Notifier:
        with self._notifier_lock:
            notifier = self._notifiers.get(address)
            if notifier is None:
                notifier = _Notifier(self, address, self.notify_buffer)
                self._notifiers[address] = notifier
            return notifier

    def notify_backlog(self) -> int:
        with self._notifier_lock:
            return sum(n.queue.qsize() for n in self._notifiers.values())

    def notify_dropped(self) -> int:
        """Notifications discarded because a peer's bounded buffer was full."""
        with self._notifier_lock:
            return sum(n.dropped for n in self._notifiers.values())

    def sync_token(self, token: str, peer: str) -> int:
        """Pull a peer's retained chain through the local gate, in seq order.

        Returns how many records were newly accepted. Local records are
        never overwritten; conflicting peer records count as divergence.
        """
        try:
            with WireClient(peer, timeout=self.peer_timeout) as client:
                lines = client.getchain(token)
            self.peers.mark_success(peer)
        except (OSError, WireError):
            self.peers.mark_failure(peer)
            return 0
        accepted = 0
        for line in lines:
            try:
                record = parse_record(self.cfg, line)
            except (RecordFormatError, ValueError):
                continue
            result = self.ledger.append(record)
            if result.status == "added":
                accepted += 1
                self.notify_peers(line)
            elif result.status == "rejected" and result.reason in CONFLICT_REASONS:
                self._count_divergence()
        return accepted

    # -- peer maintenance ---------------------------------------------------

    def _probe(self, address: str) -> None:
        self.peers.note_probe(address)
        try:
            with WireClient(address, timeout=self.peer_timeout) as client:
                ok = client.ping()
        except (OSError, WireError):
            ok = False
        if ok:
            self.peers.mark_success(address)
        else:
            self.peers.mark_failure(address)

    def _gossip(self) -> None:
        alive = self.peers.alive()
        if not alive:
            return
        address = random.choice(alive)
        try:
            with WireClient(address, timeout=self.peer_timeout) as client:
                learned = client.peers()
        except (OSError, WireError):
            self.peers.mark_failure(address)
            return
        for peer in learned:
            try:
                split_address(peer)
            except ValueError:
                continue
            self.peers.learn(peer, source=address)

    def _maintain_peers(self) -> None:
        while not self._stop.wait(self.probe_interval):
            now = time.monotonic()
            for peer in self.peers.snapshot():
                if self._stop.is_set():
                    return
                if peer.state == DEAD:
                    if now - peer.last_probe >= self.dead_probe_interval:
                        self._probe(peer.address)
                else:
                    self._probe(peer.address)
            self._gossip()
