"""Datagram relay transport: every client sends its stream to the server,
which immediately fans each packet out to all other registered clients.

Design notes, all serving the lag-first goal:

* Unreliable datagrams with stale-drop and no retransmission. A pose that
  had to be resent would arrive after its successor and be discarded anyway.
* The server never parses payloads. Per packet it reads the 18-byte header,
  checks staleness, and forwards the original bytes, so relay cost is
  O(clients) socket writes and payloads arrive byte-identical.
* Sends go to the socket the moment they are produced, and the same payload
  is simultaneously published to the local in-process router, so local
  consumers never wait on the network (the dual path).

Control protocol (signal type = CONTROL):

* JOIN: empty payload, header user id 0xFFFF (unassigned).
* JOIN-ACK: payload is the assigned u16 id, and the header user id carries
  the same value; only the joining endpoint receives it.
* LEAVE: payload is the departed u16 id, header user id 0 (the reserved
  server id). The header/payload id mismatch is what distinguishes a LEAVE
  from an ACK without widening the payloads.

Timestamps are sender-local monotonic microseconds; no cross-host clock
sync is attempted, so absolute one-way latency is only meaningful when all
parties share one host.
"""
from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from ._mmsg import FanoutSender
from .packet import (
    HEADER_SIZE,
    MAGIC,
    WIRE_VERSION,
    CorruptPacketError,
    SignalPacket,
    SignalType,
    frame_packet,
    parse_packet,
)
from .router import Origin, SignalDescriptor, SignalRouter

__all__ = [
    "ServerConfig",
    "ServerStats",
    "RelayServer",
    "serve",
    "SessionState",
    "SessionStats",
    "Client",
    "client_connect",
    "ConnectTimeoutError",
    "UNASSIGNED_ID",
    "SERVER_ID",
    "mono_us",
]

UNASSIGNED_ID = 0xFFFF
SERVER_ID = 0

_HEADER = struct.Struct("<2sBBHIQ")
_U16 = struct.Struct("<H")

_RECV_BUFSIZE = HEADER_SIZE + 1472  # one full datagram with headroom


def mono_us() -> int:
    """Monotonic microsecond clock; comparable across processes on one host."""
    return time.monotonic_ns() // 1000


class ConnectTimeoutError(TimeoutError):
    """Server did not acknowledge the join within the retry budget."""


@dataclass
class ServerConfig:
    host: str = "0.0.0.0"
    port: int = 0
    max_clients: int = 64
    client_timeout_us: int = 5_000_000

    def __post_init__(self) -> None:
        if self.max_clients < 2:
            raise ValueError("max_clients must be >= 2")


@dataclass
class ServerStats:
    received: int = 0
    relayed: int = 0
    dropped_stale: int = 0
    dropped_corrupt: int = 0
    joins: int = 0
    evictions: int = 0
    unknown_sender: int = 0
    spoofed: int = 0
    rejected_full: int = 0


class _ClientRecord:
    __slots__ = ("user_id", "addr", "last_heard_us", "highest_seq")

    def __init__(self, user_id: int, addr, now_us: int):
        self.user_id = user_id
        self.addr = addr
        self.last_heard_us = now_us
        self.highest_seq = 0


class RelayServer:
    """Single-threaded receive loop; fan-out happens inline on that path."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.stats = ServerStats()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 4 << 20)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        self._sock.bind((config.host, config.port))
        self._sock.settimeout(0.05)
        self._by_addr: dict[tuple, _ClientRecord] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._leave_seq = 0
        self._ack_seq = 0
        self._last_scan_us = 0
        # Per-sender fanout senders (everyone but the sender); rebuilt lazily
        # whenever membership changes.
        self._fanout: dict[int, FanoutSender] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def client_count(self) -> int:
        return len(self._by_addr)

    def start(self) -> "RelayServer":
        self._thread = threading.Thread(target=self.run, name="relay-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None
        try:
            self._sock.close()
        except OSError:
            pass

    def run(self) -> None:
        """Serve until stop() is called. Per-packet errors are counted, never fatal."""
        sock = self._sock
        while not self._stop.is_set():
            try:
                data, addr = sock.recvfrom(_RECV_BUFSIZE)
            except socket.timeout:
                self._evict_scan(mono_us())
                continue
            except OSError:
                if self._stop.is_set():
                    break
                continue
            now = mono_us()
            self._handle(data, addr, now)
            if now - self._last_scan_us > 100_000:
                self._evict_scan(now)

    def _handle(self, data: bytes, addr, now: int) -> None:
        self.stats.received += 1
        if len(data) < HEADER_SIZE or data[:2] != MAGIC or data[2] != WIRE_VERSION:
            self.stats.dropped_corrupt += 1
            return
        sig_type = data[3]
        user_id, seq = struct.unpack_from("<HI", data, 4)

        if sig_type == SignalType.CONTROL and len(data) == HEADER_SIZE:
            self._handle_join(addr, now)
            return

        record = self._by_addr.get(addr)
        if record is None:
            self.stats.unknown_sender += 1
            return
        if user_id != record.user_id:
            self.stats.spoofed += 1
            return
        record.last_heard_us = now
        if seq <= record.highest_seq:
            self.stats.dropped_stale += 1
            return
        record.highest_seq = seq
        fanout = self._fanout.get(record.user_id)
        if fanout is None:
            others = [o.addr for o in self._by_addr.values() if o is not record]
            fanout = FanoutSender(self._sock, others)
            self._fanout[record.user_id] = fanout
        self.stats.relayed += fanout.send(data)

    def _handle_join(self, addr, now: int) -> None:
        record = self._by_addr.get(addr)
        if record is None:
            if len(self._by_addr) >= self.config.max_clients:
                self.stats.rejected_full += 1
                return
            record = _ClientRecord(self._next_id(), addr, now)
            self._by_addr[addr] = record
            self._fanout.clear()
            self.stats.joins += 1
        else:
            record.last_heard_us = now  # duplicate join, re-ack
        self._ack_seq += 1
        ack = frame_packet(
            SignalType.CONTROL, record.user_id, self._ack_seq, mono_us(),
            _U16.pack(record.user_id),
        )
        try:
            self._sock.sendto(ack, addr)
        except OSError:
            pass

    def _next_id(self) -> int:
        used = {rec.user_id for rec in self._by_addr.values()}
        uid = 1
        while uid in used:
            uid += 1
        return uid

    def _evict_scan(self, now: int) -> None:
        self._last_scan_us = now
        timeout = self.config.client_timeout_us
        expired = [
            addr for addr, rec in self._by_addr.items()
            if now - rec.last_heard_us > timeout
        ]
        for addr in expired:
            record = self._by_addr.pop(addr)
            self._fanout.clear()
            self.stats.evictions += 1
            self._leave_seq += 1
            leave = frame_packet(
                SignalType.CONTROL, SERVER_ID, self._leave_seq, mono_us(),
                _U16.pack(record.user_id),
            )
            for other in self._by_addr.values():
                try:
                    self._sock.sendto(leave, other.addr)
                except OSError:
                    pass


def serve(config: ServerConfig) -> None:
    """Run a relay server in the calling thread until interrupted."""
    server = RelayServer(config)
    try:
        server.run()
    finally:
        server.stop()


@dataclass
class SessionStats:
    sent: int = 0
    received: int = 0
    dropped_stale: int = 0
    dropped_corrupt: int = 0
    send_errors: int = 0


@dataclass
class SessionState:
    """Receiver-side view of one client's connection."""

    user_id: int
    peer_seq: dict[tuple[int, SignalType], int] = field(default_factory=dict)
    last_heard_us: dict[int, int] = field(default_factory=dict)
    stats: SessionStats = field(default_factory=SessionStats)


class Client:
    """Connected endpoint: sends the local stream, publishes inbound peers.

    Every relayed packet from peer P appears on the local router as stream
    (signal type, P, NETWORK); everything this client sends is echoed to
    (signal type, own id, LOCAL) at the same time it hits the socket.
    """

    def __init__(
        self,
        sock: socket.socket,
        server_addr: tuple[str, int],
        user_id: int,
        router: SignalRouter,
        peer_ring_capacity: int = 64,
        start_receiver: bool = True,
        keepalive_interval_s: float | None = 2.0,
    ):
        self._sock = sock
        self._server_addr = server_addr
        self.router = router
        self.session = SessionState(user_id=user_id)
        self._peer_ring_capacity = peer_ring_capacity
        self._seq = 0
        self._echo_producers = {}
        self._peer_producers = {}
        self._stop = threading.Event()
        self._keepalive_us = (
            None if keepalive_interval_s is None else int(keepalive_interval_s * 1e6)
        )
        self._last_tx_us = mono_us()
        self._join_seq = 1000  # handshake used low numbers
        self._thread: threading.Thread | None = None
        if start_receiver:
            self._thread = threading.Thread(
                target=self._recv_loop, name=f"client-{user_id}-recv", daemon=True
            )
            self._thread.start()
        else:
            # Externally driven: the owner pumps ingest() from its own loop
            # (the swarm pool services many clients from one selector).
            self._sock.setblocking(False)

    @property
    def user_id(self) -> int:
        return self.session.user_id

    def send(self, payload: bytes, signal_type: SignalType = SignalType.POSE) -> int:
        """Frame and hand the datagram to the socket immediately; echo the
        same payload to the local router. Returns the sequence number used."""
        self._seq += 1
        seq = self._seq
        now = mono_us()
        data = frame_packet(signal_type, self.session.user_id, seq, now, payload)
        try:
            self._sock.sendto(data, self._server_addr)
        except BlockingIOError:
            # Kernel send buffer full: drop rather than stall, lag comes first.
            self.session.stats.send_errors += 1
            return seq
        except OSError:
            self.session.stats.send_errors += 1
            raise
        self.session.stats.sent += 1
        self._last_tx_us = now
        echo = self._echo_producers.get(signal_type)
        if echo is None:
            desc = SignalDescriptor(signal_type, self.session.user_id, Origin.LOCAL)
            echo = self.router.register_producer(desc, self._peer_ring_capacity)
            self._echo_producers[signal_type] = echo
        echo.publish(SignalPacket(
            signal_type=signal_type,
            user_id=self.session.user_id,
            seq=seq,
            send_timestamp_us=now,
            payload=payload,
            recv_timestamp_us=now,
            origin=Origin.LOCAL,
        ))
        return seq

    @property
    def sock(self) -> socket.socket:
        return self._sock

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Client":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- receive path -------------------------------------------------------

    def _recv_loop(self) -> None:
        sock = self._sock
        ingest = self.ingest
        while not self._stop.is_set():
            if self._keepalive_us is not None:
                now = mono_us()
                if now - self._last_tx_us > self._keepalive_us:
                    self._send_keepalive(now)
            try:
                data, _ = sock.recvfrom(_RECV_BUFSIZE)
            except socket.timeout:
                continue
            except OSError:
                break
            ingest(data, mono_us())

    def _send_keepalive(self, now: int) -> None:
        # A repeat JOIN doubles as the keepalive: the server refreshes the
        # sender's eviction deadline and re-acks. Keeps silent consumers
        # (recorders, watchers) registered without a second packet kind.
        self._join_seq += 1
        try:
            self._sock.sendto(
                frame_packet(SignalType.CONTROL, self.session.user_id, self._join_seq, now),
                self._server_addr,
            )
            self._last_tx_us = now
        except OSError:
            pass

    def ingest(self, data: bytes, now: int) -> None:
        """Process one inbound datagram: stale-filter it and publish it as
        the sending peer's stream. Hot path; per-packet errors only count."""
        session = self.session
        try:
            packet = parse_packet(data)
        except CorruptPacketError:
            session.stats.dropped_corrupt += 1
            return
        if packet.signal_type is SignalType.CONTROL:
            self._handle_control(packet)
            return
        flow = (packet.user_id, packet.signal_type)
        if packet.seq <= session.peer_seq.get(flow, 0):
            session.stats.dropped_stale += 1
            return
        session.peer_seq[flow] = packet.seq
        session.last_heard_us[packet.user_id] = now
        packet.recv_timestamp_us = now
        packet.origin = Origin.NETWORK
        producer = self._peer_producers.get(flow)
        if producer is None:
            desc = SignalDescriptor(packet.signal_type, packet.user_id, Origin.NETWORK)
            producer = self.router.register_producer(desc, self._peer_ring_capacity)
            self._peer_producers[flow] = producer
        producer.publish(packet)
        session.stats.received += 1

    def _handle_control(self, packet: SignalPacket) -> None:
        if len(packet.payload) != 2:
            return
        (subject,) = _U16.unpack(packet.payload)
        if packet.user_id == subject:
            return  # duplicate join-ack for ourselves or another joiner
        if packet.user_id == SERVER_ID:
            self._drop_peer(subject)

    def _drop_peer(self, peer_id: int) -> None:
        """Peer left: close its streams so a rejoining peer starts fresh."""
        for flow in [f for f in self._peer_producers if f[0] == peer_id]:
            self._peer_producers.pop(flow).close()
            self.session.peer_seq.pop(flow, None)
        self.session.last_heard_us.pop(peer_id, None)


def client_connect(
    server_addr: tuple[str, int],
    *,
    router: SignalRouter | None = None,
    retries: int = 3,
    retry_interval_s: float = 0.2,
    peer_ring_capacity: int = 64,
    recv_buffer: int = 1 << 20,
    start_receiver: bool = True,
    keepalive_interval_s: float | None = 2.0,
) -> Client:
    """Join a relay server: send JOIN, await the assigned id, start receiving.

    Retries the JOIN `retries` times, `retry_interval_s` apart, then raises
    ConnectTimeoutError. The receive thread keeps the session registered by
    re-joining every `keepalive_interval_s` of send silence, so consume-only
    clients are not evicted.
    """
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, recv_buffer)
    sock.settimeout(retry_interval_s)
    join_seq = 0
    try:
        for _ in range(retries):
            join_seq += 1
            sock.sendto(
                frame_packet(SignalType.CONTROL, UNASSIGNED_ID, join_seq, mono_us()),
                server_addr,
            )
            deadline = time.monotonic() + retry_interval_s
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data, _ = sock.recvfrom(_RECV_BUFSIZE)
                except socket.timeout:
                    break
                except OSError:
                    break
                try:
                    packet = parse_packet(data)
                except CorruptPacketError:
                    continue
                if (
                    packet.signal_type is SignalType.CONTROL
                    and packet.payload_len == 2
                    and packet.user_id == _U16.unpack(packet.payload)[0]
                ):
                    sock.settimeout(0.05)
                    return Client(
                        sock,
                        server_addr,
                        packet.user_id,
                        router if router is not None else SignalRouter(),
                        peer_ring_capacity=peer_ring_capacity,
                        start_receiver=start_receiver,
                        keepalive_interval_s=keepalive_interval_s,
                    )
    except Exception:
        sock.close()
        raise
    sock.close()
    raise ConnectTimeoutError(
        f"no join acknowledgement from {server_addr} after {retries} attempts"
    )
