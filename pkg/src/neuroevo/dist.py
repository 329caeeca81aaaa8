"""Asynchronous master-worker distribution of mesh evaluation.

One master owns all evolution state (pheromones, population, job ledger);
stateless workers pull mesh assignments, train networks locally, and report
fitness. The master never waits on outstanding jobs: every request is
answered immediately from current pheromone state, so fast workers are
never blocked by slow ones.

Wire format, per frame (big-endian):

    u32 payload_length | u8 kind | u32 job_id | payload | u32 crc32

The CRC covers kind, job_id, and payload. Mesh payloads use the model
format's bitmap encoding prefixed with a u16 node count. Fitness travels
as a big-endian IEEE-754 double. Workers present a 32-byte digest of their
resolved run configuration with every request; a mismatch is answered with
a ConfigRejected frame instead of work.
"""

from __future__ import annotations

import logging
import selectors
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .aco import (
    AcoConfig,
    EvolutionResult,
    IterationLog,
    Pheromones,
    Population,
    generate_paths,
    insert_population,
    update_pheromones,
)
from .errors import (
    ChecksumMismatch,
    ConfigError,
    ProtocolError,
    TruncatedFrame,
    UnknownKind,
)
from .lstm import DEFAULT_N_INPUTS, Mesh, mesh_bytes_len, mesh_from_bytes, mesh_to_bytes

log = logging.getLogger("neuroevo.dist")

REQUEST_PATHS = 1
PATHS_ASSIGNMENT = 2
REPORT_FITNESS = 3
SHUTDOWN = 4
CONFIG_REJECTED = 5

KINDS = (REQUEST_PATHS, PATHS_ASSIGNMENT, REPORT_FITNESS, SHUTDOWN,
         CONFIG_REJECTED)

STATUS_OK = 0
STATUS_FAILED = 1

DIGEST_LEN = 32
MAX_PAYLOAD = 1 << 24  # sanity cap; a real mesh payload is well under 1 KiB

_HEAD = struct.Struct(">IBI")  # payload length, kind, job_id
_CRC = struct.Struct(">I")
_F64 = struct.Struct(">d")
_U16 = struct.Struct(">H")


@dataclass
class Message:
    kind: int
    job_id: int = 0
    mesh: Mesh | None = None
    fitness: float = float("nan")
    status: int = STATUS_OK
    reason: str = ""
    wall_time_s: float = 0.0
    digest: bytes = b""


def _encode_mesh(mesh: Mesh) -> bytes:
    return _U16.pack(mesh.n) + mesh_to_bytes(mesh)


def _decode_mesh(payload: bytes, offset: int):
    if len(payload) < offset + 2:
        raise TruncatedFrame("mesh field missing its node count")
    (n,) = _U16.unpack_from(payload, offset)
    offset += 2
    need = mesh_bytes_len(n)
    if len(payload) < offset + need:
        raise TruncatedFrame("mesh bitmap shorter than its node count implies")
    mesh = mesh_from_bytes(payload[offset:offset + need], n)
    return mesh, offset + need


def _encode_payload(msg: Message) -> bytes:
    if msg.kind == REQUEST_PATHS:
        if len(msg.digest) != DIGEST_LEN:
            raise ValueError(f"config digest must be {DIGEST_LEN} bytes")
        return msg.digest
    if msg.kind == PATHS_ASSIGNMENT:
        return _encode_mesh(msg.mesh)
    if msg.kind == REPORT_FITNESS:
        reason = msg.reason.encode("utf-8")
        return (bytes([msg.status]) + _F64.pack(msg.fitness)
                + _F64.pack(msg.wall_time_s)
                + _U16.pack(len(reason)) + reason
                + _encode_mesh(msg.mesh))
    if msg.kind == SHUTDOWN:
        return b""
    if msg.kind == CONFIG_REJECTED:
        return msg.reason.encode("utf-8")
    raise UnknownKind(f"cannot encode kind {msg.kind}")


def _decode_payload(kind: int, job_id: int, payload: bytes) -> Message:
    if kind == REQUEST_PATHS:
        if len(payload) != DIGEST_LEN:
            raise TruncatedFrame(
                f"request carries {len(payload)} digest bytes, not {DIGEST_LEN}")
        return Message(kind, job_id, digest=payload)
    if kind == PATHS_ASSIGNMENT:
        mesh, end = _decode_mesh(payload, 0)
        if end != len(payload):
            raise TruncatedFrame("assignment payload has trailing bytes")
        return Message(kind, job_id, mesh=mesh)
    if kind == REPORT_FITNESS:
        if len(payload) < 1 + 8 + 8 + 2:
            raise TruncatedFrame("fitness report payload too short")
        status = payload[0]
        if status not in (STATUS_OK, STATUS_FAILED):
            raise ProtocolError(f"unknown report status {status}")
        (fitness,) = _F64.unpack_from(payload, 1)
        (wall,) = _F64.unpack_from(payload, 9)
        (rlen,) = _U16.unpack_from(payload, 17)
        if len(payload) < 19 + rlen:
            raise TruncatedFrame("failure reason shorter than its length field")
        reason = payload[19:19 + rlen].decode("utf-8")
        mesh, end = _decode_mesh(payload, 19 + rlen)
        if end != len(payload):
            raise TruncatedFrame("fitness report has trailing bytes")
        return Message(kind, job_id, mesh=mesh, fitness=fitness,
                       status=status, reason=reason, wall_time_s=wall)
    if kind == SHUTDOWN:
        if payload:
            raise TruncatedFrame("shutdown carries no payload")
        return Message(kind, job_id)
    if kind == CONFIG_REJECTED:
        return Message(kind, job_id, reason=payload.decode("utf-8"))
    raise UnknownKind(f"unknown message kind {kind}")


def encode_frame(msg: Message) -> bytes:
    payload = _encode_payload(msg)
    head = _HEAD.pack(len(payload), msg.kind, msg.job_id)
    return head + payload + _CRC.pack(zlib.crc32(head[4:] + payload))


def frame_size(data) -> int | None:
    """Total frame length implied by a buffer's length field, if readable."""
    if len(data) < 4:
        return None
    (length,) = struct.unpack_from(">I", data, 0)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds the payload cap")
    return 4 + 1 + 4 + length + 4


def decode_frame(data: bytes) -> Message:
    """Parse exactly one frame; the buffer must contain the whole frame."""
    total = frame_size(data)
    if total is None or len(data) < total:
        raise TruncatedFrame(
            f"frame needs {total or '>=4'} bytes, buffer has {len(data)}")
    if len(data) > total:
        raise ProtocolError(f"{len(data) - total} trailing bytes after frame")
    length, kind, job_id = _HEAD.unpack_from(data, 0)
    payload = data[9:9 + length]
    (stored,) = _CRC.unpack_from(data, 9 + length)
    actual = zlib.crc32(data[4:9 + length])
    if stored != actual:
        raise ChecksumMismatch(f"frame crc {stored:08x} != {actual:08x}")
    if kind not in KINDS:
        raise UnknownKind(f"unknown message kind {kind}")
    return _decode_payload(kind, job_id, payload)


class FrameBuffer:
    """Reassembles messages from a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> None:
        self._buf.extend(data)

    def next_message(self) -> Message | None:
        total = frame_size(self._buf)
        if total is None or len(self._buf) < total:
            return None
        frame = bytes(self._buf[:total])
        del self._buf[:total]
        return decode_frame(frame)

    def drain(self):
        out = []
        while True:
            msg = self.next_message()
            if msg is None:
                return out
            out.append(msg)


# ------------------------------------------------------------------ master

@dataclass
class _Job:
    mesh: Mesh
    dispatched_at: float


class Master:
    """Transport-agnostic evolution coordinator.

    ``handle`` consumes one decoded message and returns the reply to send
    (or None for fire-and-forget reports). All state mutation happens here,
    in arrival order; transports only move frames.
    """

    def __init__(self, cfg: AcoConfig, digest: bytes,
                 n_inputs: int = DEFAULT_N_INPUTS,
                 job_timeout_s: float | None = None,
                 time_fn=time.monotonic):
        if len(digest) != DIGEST_LEN:
            raise ValueError(f"config digest must be {DIGEST_LEN} bytes")
        self.cfg = cfg
        self.digest = digest
        self.pheromones = Pheromones.init(n_inputs)
        self.population = Population(capacity=cfg.capacity)
        self.rng = np.random.default_rng(cfg.seed)
        self.job_timeout_s = job_timeout_s
        self.time_fn = time_fn
        self.outstanding: dict[int, _Job] = {}
        self.consumed: set[int] = set()
        self.requeue: deque[int] = deque()
        self.durations: list[float] = []
        self.logs: list[IterationLog] = []
        self.failures = 0
        self.completed = 0
        self._next_job = 1
        self._best_fitness = float("inf")
        self._best_mesh: Mesh | None = None

    # -- accounting ---------------------------------------------------

    @property
    def done(self) -> bool:
        return self.completed >= self.cfg.n_iterations

    @property
    def dispatched(self) -> int:
        return self._next_job - 1

    def timeout_s(self) -> float:
        if self.job_timeout_s is not None:
            return self.job_timeout_s
        if not self.durations:
            return 60.0
        return max(60.0, 10.0 * float(np.median(self.durations)))

    # -- state machine ------------------------------------------------

    def handle(self, msg: Message) -> Message | None:
        if msg.kind == REQUEST_PATHS:
            return self._handle_request(msg)
        if msg.kind == REPORT_FITNESS:
            self._handle_report(msg)
            return None
        raise ProtocolError(f"kind {msg.kind} is not valid master input")

    def _handle_request(self, msg: Message) -> Message:
        if msg.digest != self.digest:
            return Message(CONFIG_REJECTED,
                           reason="configuration digest mismatch")
        if self.done:
            return Message(SHUTDOWN)
        now = self.time_fn()
        # jobs freed by a dropped connection are eligible immediately
        while self.requeue:
            job_id = self.requeue.popleft()
            rec = self.outstanding.get(job_id)
            if rec is not None:
                rec.dispatched_at = now
                return Message(PATHS_ASSIGNMENT, job_id=job_id, mesh=rec.mesh)
        # silently lost jobs become eligible after the timeout
        limit = self.timeout_s()
        stale = [(rec.dispatched_at, job_id)
                 for job_id, rec in self.outstanding.items()
                 if now - rec.dispatched_at > limit]
        if stale:
            _, job_id = min(stale)
            rec = self.outstanding[job_id]
            rec.dispatched_at = now
            log.info("reassigning stale job %d", job_id)
            return Message(PATHS_ASSIGNMENT, job_id=job_id, mesh=rec.mesh)
        mesh = generate_paths(self.pheromones, self.cfg.n_ants, self.rng)
        job_id = self._next_job
        self._next_job += 1
        self.outstanding[job_id] = _Job(mesh, now)
        return Message(PATHS_ASSIGNMENT, job_id=job_id, mesh=mesh)

    def _handle_report(self, msg: Message) -> None:
        rec = self.outstanding.get(msg.job_id)
        if rec is None:
            # duplicate of a consumed job, or an id never issued: idempotent
            log.debug("ignoring report for job %d", msg.job_id)
            return
        if msg.mesh is not None and msg.mesh != rec.mesh:
            raise ProtocolError(
                f"job {msg.job_id} report echoes a different mesh")
        del self.outstanding[msg.job_id]
        self.consumed.add(msg.job_id)
        self.durations.append(max(0.0, self.time_fn() - rec.dispatched_at))
        if self.done:
            log.debug("job %d reported after the run completed", msg.job_id)
            return
        if msg.status != STATUS_OK or not np.isfinite(msg.fitness):
            self.failures += 1
            log.warning("job %d failed: %s", msg.job_id, msg.reason or "n/a")
            return
        self.completed += 1
        rank = insert_population(self.population, msg.fitness, rec.mesh)
        if rank == 0:
            self.pheromones = update_pheromones(self.pheromones, rec.mesh,
                                                self.cfg)
        self.logs.append(IterationLog(
            iteration=self.completed, fitness=float(msg.fitness),
            m1_count=rec.mesh.m1_count, m2_count=rec.mesh.m2_count,
            total_connections=rec.mesh.m1_count + rec.mesh.m2_count,
            wall_time_s=float(msg.wall_time_s), rank=rank,
        ))
        if msg.fitness < self._best_fitness:
            self._best_fitness = float(msg.fitness)
            self._best_mesh = rec.mesh

    def release_jobs(self, job_ids) -> None:
        """Make a dropped connection's jobs immediately reassignable."""
        for job_id in job_ids:
            if job_id in self.outstanding and job_id not in self.requeue:
                self.requeue.append(job_id)

    def result(self) -> EvolutionResult:
        return EvolutionResult(
            population=self.population, best_mesh=self._best_mesh,
            best_fitness=self._best_fitness, pheromones=self.pheromones,
            logs=self.logs, failures=self.failures,
        )


# ------------------------------------------------------------------ worker

def evaluate_assignment(job_id: int, mesh: Mesh, evaluator) -> Message:
    """Run one evaluation and build the report frame body."""
    t0 = time.perf_counter()
    try:
        fitness = float(evaluator(mesh))
        if not np.isfinite(fitness):
            raise ValueError(f"non-finite fitness {fitness!r}")
        status, reason = STATUS_OK, ""
    except Exception as exc:
        fitness = float("nan")
        status, reason = STATUS_FAILED, f"{type(exc).__name__}: {exc}"
    return Message(REPORT_FITNESS, job_id=job_id, mesh=mesh, fitness=fitness,
                   status=status, reason=reason,
                   wall_time_s=time.perf_counter() - t0)


def worker_session(channel, evaluator, digest: bytes) -> int:
    """Request/evaluate/report until Shutdown; returns jobs reported."""
    reported = 0
    while True:
        channel.send(Message(REQUEST_PATHS, digest=digest))
        reply = channel.recv()
        if reply.kind == SHUTDOWN:
            return reported
        if reply.kind == CONFIG_REJECTED:
            raise ConfigError(f"master rejected configuration: {reply.reason}")
        if reply.kind != PATHS_ASSIGNMENT:
            raise ProtocolError(f"unexpected worker reply kind {reply.kind}")
        channel.send(evaluate_assignment(reply.job_id, reply.mesh, evaluator))
        reported += 1


# ------------------------------------------------------------------ channels

class SocketChannel:
    """Blocking framed messaging over a connected stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.frames = FrameBuffer()

    def send(self, msg: Message) -> None:
        self.sock.sendall(encode_frame(msg))

    def recv(self) -> Message:
        while True:
            msg = self.frames.next_message()
            if msg is not None:
                return msg
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("peer closed the connection")
            self.frames.feed(data)


class LocalChannel:
    """In-process channel that still round-trips every frame through the
    codec, so local mode exercises the same wire path as TCP."""

    def __init__(self, master: Master, lock: threading.Lock):
        self.master = master
        self.lock = lock
        self._pending: bytes | None = None

    def send(self, msg: Message) -> None:
        frame = encode_frame(msg)
        with self.lock:
            reply = self.master.handle(decode_frame(frame))
        self._pending = None if reply is None else encode_frame(reply)

    def recv(self) -> Message:
        if self._pending is None:
            raise ProtocolError("no reply pending on the local channel")
        frame, self._pending = self._pending, None
        return decode_frame(frame)


def run_local(cfg: AcoConfig, evaluator, n_workers: int, digest: bytes,
              n_inputs: int = DEFAULT_N_INPUTS,
              job_timeout_s: float | None = None) -> EvolutionResult:
    """Master plus ``n_workers`` threads in one process, framed end to end."""
    master = Master(cfg, digest, n_inputs=n_inputs, job_timeout_s=job_timeout_s)
    lock = threading.Lock()
    errors: list[Exception] = []

    def run_one():
        try:
            worker_session(LocalChannel(master, lock), evaluator, digest)
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=run_one, name=f"worker-{i}")
               for i in range(n_workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return master.result()


# ------------------------------------------------------------------ tcp

def serve_master(master: Master, bind=("127.0.0.1", 0), poll_s: float = 0.05,
                 grace_s: float = 5.0, on_bound=None) -> EvolutionResult:
    """Accept workers and pump frames until the run completes.

    A malformed frame drops its connection and releases that connection's
    outstanding jobs for immediate reassignment; a silent disconnect leaves
    them to the timeout policy. ``on_bound`` receives the listening address
    once the socket is ready.
    """
    sel = selectors.DefaultSelector()
    lsock = socket.create_server(bind)
    lsock.listen(64)
    if on_bound is not None:
        on_bound(lsock.getsockname())
    sel.register(lsock, selectors.EVENT_READ, None)
    conns: dict[socket.socket, dict] = {}
    done_at: float | None = None

    def drop(sock, release: bool):
        state = conns.pop(sock, None)
        if state and release:
            master.release_jobs(state["jobs"])
        try:
            sel.unregister(sock)
        except (KeyError, ValueError):
            pass
        sock.close()

    try:
        while True:
            if master.done:
                if not conns:
                    break
                if done_at is None:
                    done_at = time.monotonic()
                elif time.monotonic() - done_at > grace_s:
                    log.warning("closing %d lingering connections", len(conns))
                    for sock in list(conns):
                        drop(sock, release=False)
                    break
            for key, _ in sel.select(timeout=poll_s):
                sock = key.fileobj
                if sock is lsock:
                    conn, addr = lsock.accept()
                    log.info("worker connected from %s", addr)
                    conns[conn] = {"frames": FrameBuffer(), "jobs": set()}
                    sel.register(conn, selectors.EVENT_READ, None)
                    continue
                state = conns.get(sock)
                if state is None:
                    continue
                try:
                    data = sock.recv(65536)
                except OSError:
                    data = b""
                if not data:
                    # silent disconnect: jobs stay outstanding until timeout
                    log.info("worker disconnected with %d jobs outstanding",
                             len(state["jobs"]))
                    drop(sock, release=False)
                    continue
                state["frames"].feed(data)
                try:
                    while True:
                        msg = state["frames"].next_message()
                        if msg is None:
                            break
                        reply = master.handle(msg)
                        if msg.kind == REPORT_FITNESS:
                            state["jobs"].discard(msg.job_id)
                        if reply is not None:
                            sock.sendall(encode_frame(reply))
                            if reply.kind == PATHS_ASSIGNMENT:
                                state["jobs"].add(reply.job_id)
                except (ChecksumMismatch, TruncatedFrame, UnknownKind,
                        ProtocolError) as exc:
                    log.warning("dropping connection after bad frame: %s", exc)
                    drop(sock, release=True)
                except OSError:
                    drop(sock, release=False)
    finally:
        for sock in list(conns):
            drop(sock, release=False)
        sel.unregister(lsock)
        lsock.close()
        sel.close()
    return master.result()


def tcp_worker(addr, evaluator, digest: bytes, connect_attempts: int = 6,
               base_backoff_s: float = 0.1) -> int:
    """Connect with bounded exponential backoff, then run a session."""
    delay = base_backoff_s
    last: OSError | None = None
    for _ in range(connect_attempts):
        try:
            sock = socket.create_connection(addr, timeout=30.0)
            break
        except OSError as exc:
            last = exc
            time.sleep(delay)
            delay = min(delay * 2.0, 5.0)
    else:
        raise ConnectionError(f"master unreachable at {addr}: {last}")
    with sock:
        return worker_session(SocketChannel(sock), evaluator, digest)
