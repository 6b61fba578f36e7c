"""Three-party runtime: message passing, traffic accounting and cost estimates.

Every party runs the same protocol code (SPMD) and branches on its id.
Protocol code brackets each sub-protocol in ``net.phase(name)``.  A phase's
round count is the longest chain of causally dependent messages inside it,
measured with per-message depth stamps; phases are assumed to be separated by
barriers, so the rounds of a composite phase are its own message depth plus
the sum of its child phases.  The resulting numbers are identical whether
frames travel over in-process queues or TCP.
"""
from __future__ import annotations

import logging
import multiprocessing as mp
import queue
import socket
import struct
import threading
import time
import traceback
import zlib
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .randomness import KEY_BYTES, RandomnessCtx
from .ring import FixedPoint, Ring

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 120.0
FRAME_HEADER = struct.Struct("<IHI")  # payload length, tag id, depth stamp

EXIT_OK, EXIT_CONFIG, EXIT_DESYNC, EXIT_TRANSPORT = 0, 2, 3, 4


class TransportError(RuntimeError):
    """Timeout, connection loss, or an aborted run."""


class DesyncError(RuntimeError):
    """A party received a message tagged for a different protocol step."""


class PartyFailure(RuntimeError):
    def __init__(self, party: int, cause: BaseException, tb: str = ""):
        super().__init__(f"P{party} failed: {type(cause).__name__}: {cause}\n{tb}")
        self.party = party
        self.cause = cause


def next_party(i: int) -> int:
    return (i + 1) % 3


def prev_party(i: int) -> int:
    return (i - 1) % 3


def tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode()) & 0xFFFF


# --------------------------------------------------------------------------
# traffic accounting


@dataclass
class PartyCounts:
    messages: int = 0
    bytes: int = 0
    rounds: int = 0


@dataclass
class PhaseCost:
    rounds: int
    messages: list[int]
    bytes: list[int]

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes)


@dataclass
class TrafficStats:
    """Merged traffic of one three-party run.

    ``rounds`` is the barrier-model round count of the whole run; ``phases``
    maps each phase path (``"layer0#0/msb#1"``) to its own cost including its
    children.
    """

    rounds: int = 0
    parties: list[PartyCounts] = field(default_factory=lambda: [PartyCounts() for _ in range(3)])
    phases: dict[str, PhaseCost] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(p.bytes for p in self.parties)

    @property
    def max_party_bytes(self) -> int:
        return max(p.bytes for p in self.parties)

    @property
    def total_messages(self) -> int:
        return sum(p.messages for p in self.parties)

    def top_level(self) -> dict[str, PhaseCost]:
        return {k: v for k, v in self.phases.items() if "/" not in k}

    def children(self, path: str) -> dict[str, PhaseCost]:
        depth = path.count("/") + 1
        return {k: v for k, v in self.phases.items()
                if k.startswith(path + "/") and k.count("/") == depth}

    def find(self, name: str) -> list[tuple[str, PhaseCost]]:
        """All phases whose last path component is ``name`` (any call index)."""
        out = []
        for k, v in self.phases.items():
            leaf = k.rsplit("/", 1)[-1]
            if leaf.rsplit("#", 1)[0] == name:
                out.append((k, v))
        return out

    def without(self, *names: str) -> "TrafficStats":
        """Drop top-level phases by name (e.g. the key-exchange ``setup``)."""
        drop = [k for k in self.top_level() if k.rsplit("#", 1)[0] in names]
        parties = [PartyCounts(p.messages, p.bytes, p.rounds) for p in self.parties]
        phases = {}
        rounds = self.rounds
        for k in drop:
            c = self.phases[k]
            rounds -= c.rounds
            for i in range(3):
                parties[i].messages -= c.messages[i]
                parties[i].bytes -= c.bytes[i]
                parties[i].rounds -= c.rounds
        for k, v in self.phases.items():
            if not any(k == d or k.startswith(d + "/") for d in drop):
                phases[k] = v
        return TrafficStats(rounds, parties, phases)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "messages": [p.messages for p in self.parties],
            "bytes": [p.bytes for p in self.parties],
            "total_bytes": self.total_bytes,
            "max_party_bytes": self.max_party_bytes,
            "phases": {k: {"rounds": v.rounds, "messages": list(v.messages), "bytes": list(v.bytes)}
                       for k, v in sorted(self.phases.items())},
        }


class _PhaseNode:
    __slots__ = ("depth", "messages", "bytes", "children")

    def __init__(self):
        self.depth = 0
        self.messages = 0
        self.bytes = 0
        self.children: list[str] = []


class PartyRecorder:
    """One party's view: the phase tree with local message depths."""

    def __init__(self):
        self.nodes: dict[str, _PhaseNode] = {"": _PhaseNode()}
        self.stack = [""]
        self.call_index: dict[tuple[str, str], int] = defaultdict(int)

    @property
    def current(self) -> str:
        return self.stack[-1]

    def enter(self, name: str) -> str:
        parent = self.current
        k = self.call_index[(parent, name)]
        self.call_index[(parent, name)] = k + 1
        path = f"{parent}/{name}#{k}" if parent else f"{name}#{k}"
        self.nodes[path] = _PhaseNode()
        self.nodes[parent].children.append(path)
        self.stack.append(path)
        return path

    def leave(self):
        self.stack.pop()

    def export(self) -> dict:
        return {k: (n.depth, n.messages, n.bytes, list(n.children)) for k, n in self.nodes.items()}


def merge_traffic(exports: list[dict]) -> TrafficStats:
    """Combine the three parties' phase trees into one TrafficStats."""
    paths = set().union(*[e.keys() for e in exports])
    children: dict[str, list[str]] = {}
    for e in exports:
        for k, (_, _, _, ch) in e.items():
            if len(ch) > len(children.get(k, [])):
                children[k] = ch

    memo: dict[str, tuple] = {}

    def cost(path):
        if path in memo:
            return memo[path]
        own = [e.get(path, (0, 0, 0, []))[0] for e in exports]
        msgs = [e.get(path, (0, 0, 0, []))[1] for e in exports]
        byts = [e.get(path, (0, 0, 0, []))[2] for e in exports]
        rounds = max(own)
        prounds = list(own)
        for c in children.get(path, []):
            cr, cm, cb, cp = cost(c)
            rounds += cr
            for i in range(3):
                msgs[i] += cm[i]
                byts[i] += cb[i]
                prounds[i] += cp[i]
        memo[path] = (rounds, msgs, byts, prounds)
        return memo[path]

    total, msgs, byts, prounds = cost("")
    phases = {}
    for p in paths:
        if p:
            r, m, b, _ = cost(p)
            phases[p] = PhaseCost(r, list(m), list(b))
    parties = [PartyCounts(msgs[i], byts[i], prounds[i]) for i in range(3)]
    return TrafficStats(total, parties, phases)


@dataclass(frozen=True)
class NetProfile:
    latency_ms: float
    bandwidth_MBps: float

    def __post_init__(self):
        if self.latency_ms <= 0 or self.bandwidth_MBps <= 0:
            raise ValueError("latency and bandwidth must be positive")


LAN = NetProfile(latency_ms=0.2, bandwidth_MBps=625.0)
WAN = NetProfile(latency_ms=80.0, bandwidth_MBps=40.0)
PROFILES = {"lan": LAN, "wan": WAN}


@dataclass(frozen=True)
class TimeEstimate:
    per_party: tuple[float, float, float]

    @property
    def max(self) -> float:
        return max(self.per_party)


def estimate_time(stats: TrafficStats, profile: NetProfile) -> TimeEstimate:
    """rounds * one-way latency + bytes / bandwidth, per party.

    Every party waits at every barrier, so all parties pay the run's round
    count; bandwidth cost is each party's own outgoing bytes.
    """
    lat = stats.rounds * profile.latency_ms / 1000.0
    bw = profile.bandwidth_MBps * 1e6
    return TimeEstimate(tuple(lat + p.bytes / bw for p in stats.parties))


# --------------------------------------------------------------------------
# channels


class InProcessHub:
    """Queues connecting three in-process parties."""

    def __init__(self):
        self.queues = {(a, b): queue.Queue() for a in range(3) for b in range(3) if a != b}
        self.abort = threading.Event()

    def channel(self, party: int) -> "InProcessChannel":
        return InProcessChannel(self, party)


class InProcessChannel:
    def __init__(self, hub: InProcessHub, party: int):
        self.hub = hub
        self.party = party

    def send_frame(self, to: int, tag: str, stamp: int, payload: bytes):
        self.hub.queues[(self.party, to)].put((tag, stamp, payload))

    def recv_frame(self, frm: int, timeout: float):
        q = self.hub.queues[(frm, self.party)]
        deadline = time.monotonic() + timeout
        while True:
            if self.hub.abort.is_set():
                raise TransportError(f"P{self.party}: run aborted by another party")
            try:
                return q.get(timeout=0.05)
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise TransportError(f"P{self.party}: timeout waiting for P{frm}") from None

    def close(self):
        pass


class TcpChannel:
    """Length-prefixed frames over one TCP connection per party pair."""

    def __init__(self, party: int, peers: list[tuple[str, int]], connect_timeout: float = 30.0):
        self.party = party
        self.socks: dict[int, socket.socket] = {}
        self.inbox = {j: queue.Queue() for j in range(3) if j != party}
        self.lock = {j: threading.Lock() for j in range(3) if j != party}
        host, port = peers[party]
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(3)
        srv.settimeout(connect_timeout)
        try:
            # lower ids accept, higher ids dial
            for j in range(party):
                self.socks[j] = self._dial(peers[j], connect_timeout)
            for _ in range(party + 1, 3):
                conn, _ = srv.accept()
                conn.settimeout(None)
                (j,) = struct.unpack("<B", _read_exact(conn, 1))
                self.socks[j] = conn
        except OSError as e:
            raise TransportError(f"P{party}: connection setup failed: {e}") from e
        finally:
            srv.close()
        for j, s in self.socks.items():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._reader, args=(j, s), daemon=True).start()

    def _dial(self, addr, timeout):
        deadline = time.monotonic() + timeout
        while True:
            try:
                s = socket.create_connection(addr, timeout=timeout)
                s.settimeout(None)
                s.sendall(struct.pack("<B", self.party))
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def _reader(self, j, s):
        try:
            while True:
                n, tid, stamp = FRAME_HEADER.unpack(_read_exact(s, FRAME_HEADER.size))
                self.inbox[j].put((tid, stamp, _read_exact(s, n)))
        except (OSError, EOFError) as e:
            self.inbox[j].put(e)

    def send_frame(self, to: int, tag: str, stamp: int, payload: bytes):
        frame = FRAME_HEADER.pack(len(payload), tag_id(tag), stamp) + payload
        try:
            with self.lock[to]:
                self.socks[to].sendall(frame)
        except OSError as e:
            raise TransportError(f"P{self.party}: send to P{to} failed: {e}") from e

    def recv_frame(self, frm: int, timeout: float):
        try:
            item = self.inbox[frm].get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"P{self.party}: timeout waiting for P{frm}") from None
        if isinstance(item, BaseException):
            raise TransportError(f"P{self.party}: connection to P{frm} lost: {item}")
        return item

    def close(self):
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


def _read_exact(s: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = s.recv(n - len(buf))
        if not chunk:
            raise EOFError("peer closed connection")
        buf += chunk
    return bytes(buf)


# --------------------------------------------------------------------------
# per-party network endpoint


def encode_words(arr: np.ndarray, ring: Ring) -> bytes:
    w = ring.word_bytes
    b = np.ascontiguousarray(np.asarray(arr, dtype=np.uint64).ravel().astype("<u8")).view(np.uint8)
    return b.reshape(-1, 8)[:, :w].tobytes()


def decode_words(payload: bytes, ring: Ring, shape) -> np.ndarray:
    w = ring.word_bytes
    n = int(np.prod(shape, dtype=np.int64))
    if len(payload) != n * w:
        raise DesyncError(f"expected {n * w} payload bytes, got {len(payload)}")
    b = np.zeros((n, 8), dtype=np.uint8)
    b[:, :w] = np.frombuffer(payload, dtype=np.uint8).reshape(n, w)
    return b.view("<u8").astype(np.uint64).reshape(shape)


class Net:
    """A party's endpoint: tagged send/recv with phase-aware accounting."""

    def __init__(self, party: int, channel, ring: Ring, timeout: float = DEFAULT_TIMEOUT,
                 inject_latency_ms: float = 0.0):
        self.party = party
        self.channel = channel
        self.ring = ring
        self.timeout = timeout
        self.inject_latency_ms = inject_latency_ms
        self.recorder = PartyRecorder()
        self.tap: list | None = None  # when a list, every received (from, tag, payload) is appended

    @contextmanager
    def phase(self, name: str):
        self.recorder.enter(name)
        try:
            yield
        finally:
            self.recorder.leave()

    def _full_tag(self, tag: str) -> str:
        return f"{self.recorder.current}:{tag}"

    def send(self, to: int, tag: str, payload: bytes):
        if to == self.party or to not in (0, 1, 2):
            raise ValueError(f"P{self.party} cannot send to P{to}")
        node = self.recorder.nodes[self.recorder.current]
        node.messages += 1
        node.bytes += len(payload)
        if self.inject_latency_ms:
            time.sleep(self.inject_latency_ms / 1000.0)
        self.channel.send_frame(to, self._full_tag(tag), node.depth, payload)

    def recv(self, frm: int, tag: str) -> bytes:
        got_tag, stamp, payload = self.channel.recv_frame(frm, self.timeout)
        want = self._full_tag(tag)
        expect = want if isinstance(got_tag, str) else tag_id(want)
        if got_tag != expect:
            raise DesyncError(f"P{self.party} expected {want!r} from P{frm}, got {got_tag!r}")
        node = self.recorder.nodes[self.recorder.current]
        node.depth = max(node.depth, stamp + 1)
        if self.tap is not None:
            self.tap.append((frm, want, payload))
        return payload

    def send_ring(self, to: int, tag: str, arr: np.ndarray):
        self.send(to, tag, encode_words(arr, self.ring))

    def recv_ring(self, frm: int, tag: str, shape) -> np.ndarray:
        return decode_words(self.recv(frm, tag), self.ring, shape)

    def send_bits(self, to: int, tag: str, bits: np.ndarray):
        self.send(to, tag, np.packbits(np.asarray(bits, dtype=np.uint8).ravel()).tobytes())

    def recv_bits(self, frm: int, tag: str, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        raw = np.frombuffer(self.recv(frm, tag), dtype=np.uint8)
        if raw.size != (n + 7) // 8:
            raise DesyncError(f"expected {(n + 7) // 8} packed bytes, got {raw.size}")
        return np.unpackbits(raw, count=n).reshape(shape)


# --------------------------------------------------------------------------
# party runtime


@dataclass
class Party:
    """Everything one party needs to run protocols."""

    pid: int
    net: Net
    rand: RandomnessCtx
    codec: FixedPoint
    inspector: object = None

    @property
    def ring(self) -> Ring:
        return self.codec.ring

    @property
    def next(self) -> int:
        return next_party(self.pid)

    @property
    def prev(self) -> int:
        return prev_party(self.pid)


def setup_party(pid: int, channel, seed: int, codec: FixedPoint, timeout: float = DEFAULT_TIMEOUT,
                inject_latency_ms: float = 0.0, inspector=None) -> Party:
    """Connect a party and run the key exchange.

    P_i samples k_{i+1} locally and sends it to P_{i+1}; it receives k_i from
    P_{i-1}.  All local sampling is seeded from ``(seed, pid)``.
    """
    net = Net(pid, channel, codec.ring, timeout, inject_latency_ms)
    local = np.random.default_rng(np.random.SeedSequence([seed, pid]))
    k_next = local.bytes(KEY_BYTES)
    private = local.bytes(KEY_BYTES)
    with net.phase("setup"):
        net.send(next_party(pid), "key", k_next)
        k_self = net.recv(prev_party(pid), "key")
    rand = RandomnessCtx(pid, {pid: k_self, next_party(pid): k_next}, private, codec.ring)
    return Party(pid, net, rand, codec, inspector)


@dataclass
class RunResult:
    outputs: list
    stats: TrafficStats


def _party_main(pid, channel, program, seed, codec, timeout, inject_latency_ms, inspector):
    party = setup_party(pid, channel, seed, codec, timeout, inject_latency_ms, inspector)
    out = program(party)
    return out, party.net.recorder.export()


def run_three_parties(program, mode: str = "inprocess", seed: int = 0,
                      codec: FixedPoint = FixedPoint(), timeout: float = DEFAULT_TIMEOUT,
                      inject_latency_ms: float = 0.0, inspector=None,
                      peers: list[tuple[str, int]] | None = None) -> RunResult:
    """Run ``program(party)`` at all three parties and merge their traffic.

    ``mode="inprocess"`` uses one thread per party; ``mode="tcp"`` forks
    three OS processes talking over localhost sockets.
    """
    if mode == "inprocess":
        return _run_inprocess(program, seed, codec, timeout, inject_latency_ms, inspector)
    if mode == "tcp":
        if inspector is not None:
            raise ValueError("the debug inspector needs in-process mode")
        return _run_tcp(program, seed, codec, timeout, peers)
    raise ValueError(f"unknown mode {mode!r}")


def _run_inprocess(program, seed, codec, timeout, inject_latency_ms, inspector) -> RunResult:
    hub = InProcessHub()
    results: list = [None] * 3
    errors: list = [None] * 3

    def target(pid):
        try:
            results[pid] = _party_main(pid, hub.channel(pid), program, seed, codec, timeout,
                                       inject_latency_ms, inspector)
        except BaseException as e:  # noqa: BLE001 - reported to caller
            errors[pid] = (e, traceback.format_exc())
            hub.abort.set()

    threads = [threading.Thread(target=target, args=(i,), name=f"P{i}") for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    _raise_first(errors)
    return RunResult([r[0] for r in results], merge_traffic([r[1] for r in results]))


def _raise_first(errors):
    # the root cause is the first non-abort failure
    real = [(i, e) for i, e in enumerate(errors) if e is not None
            and not (isinstance(e[0], TransportError) and "aborted" in str(e[0]))]
    picked = real or [(i, e) for i, e in enumerate(errors) if e is not None]
    if picked:
        i, (e, tb) = picked[0]
        raise PartyFailure(i, e, tb) from e


def free_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    for _ in range(n):
        s = socket.socket()
        s.bind((host, 0))
        socks.append(s)
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def _tcp_worker(pid, peers, program, seed, codec, timeout, out_q):
    channel = None
    try:
        channel = TcpChannel(pid, peers)
        out = _party_main(pid, channel, program, seed, codec, timeout, 0.0, None)
        out_q.put((pid, out, None))
    except BaseException as e:  # noqa: BLE001
        out_q.put((pid, None, (e, traceback.format_exc())))
    finally:
        if channel is not None:
            time.sleep(0.05)
            channel.close()


def _run_tcp(program, seed, codec, timeout, peers) -> RunResult:
    if peers is None:
        peers = [("127.0.0.1", p) for p in free_ports(3)]
    ctx = mp.get_context("fork")
    out_q = ctx.Queue()
    procs = [ctx.Process(target=_tcp_worker, args=(i, peers, program, seed, codec, timeout, out_q))
             for i in range(3)]
    for p in procs:
        p.start()
    results: list = [None] * 3
    errors: list = [None] * 3
    try:
        for _ in range(3):
            pid, out, err = out_q.get(timeout=timeout + 30)
            results[pid], errors[pid] = out, err
    except queue.Empty:
        raise TransportError("tcp run timed out") from None
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    _raise_first(errors)
    return RunResult([r[0] for r in results], merge_traffic([r[1] for r in results]))


def run_party(pid: int, program, peers: list[tuple[str, int]], seed: int,
              codec: FixedPoint = FixedPoint(), timeout: float = DEFAULT_TIMEOUT):
    """Participate in a real TCP run as party ``pid`` (one OS process)."""
    channel = TcpChannel(pid, peers, connect_timeout=timeout)
    try:
        out, export = _party_main(pid, channel, program, seed, codec, timeout, 0.0, None)
    finally:
        time.sleep(0.05)
        channel.close()
    return out, export
