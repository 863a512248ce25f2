"""Replay producers, recording sinks, latency experiments, and the
dancer-swarm simulator.

All latency runs keep every party on one host so a single monotonic clock
covers every probe stage; the interesting cross-machine numbers from real
deployments depend on camera SDKs and engines that are out of scope here.
The swarm runs its clients as threads of one process by default (the
resource-friendly option) with a flag to fork real processes instead.
"""
from __future__ import annotations

import math
import multiprocessing as mp
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codec import BoundsTable, EncodedFrame, EncoderStats, analyze_bounds, decode_frame, encode_frame
from .core import PoseFrame, Skeleton, UnitQuaternion, default_skeleton, from_axis_angle
from .packet import SignalPacket, SignalType
from .recording import Recording, RecordingWriter
from .rhythm import (
    BeatGrid,
    CorrectiveParams,
    PipelineResult,
    amplify_zones,
    run_corrective_pipeline,
)
from .router import Mode, Origin, SignalDescriptor, SignalRouter, SignalSelector
from .transport import Client, RelayServer, ServerConfig, client_connect, mono_us

__all__ = [
    "synthesize_sway_recording",
    "synthesize_noise_recording",
    "replay_stream",
    "ReplayStats",
    "record_sink",
    "LatencyProbe",
    "StageStats",
    "FlowStats",
    "LatencyReport",
    "BenchParams",
    "run_latency_experiment",
    "AlignmentReport",
    "corrective_experiment",
]

_TS_PATCH = struct.Struct("<Q")


# ---------------------------------------------------------------------------
# Synthetic motion
# ---------------------------------------------------------------------------

def synthesize_sway_recording(
    skeleton: Skeleton | None = None,
    duration_s: float = 30.0,
    fps: float = 30.0,
    frequency_hz: float = 1.0,
    amplitude_rad: float = 0.35,
    phase_rad: float = 0.0,
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0),
    sway_joints: Sequence[int] | None = None,
    root_amplitude_m: float = 0.05,
    start_us: int = 0,
) -> Recording:
    """Build a hip-sway test recording: selected joints rotate about `axis`
    by amplitude * sin(2*pi*f*t + phase); the root sways laterally in step.
    All other joints hold the identity pose."""
    skeleton = skeleton or default_skeleton()
    if sway_joints is None:
        from .core import BodyZone

        sway_joints = skeleton.joints_in_zone(BodyZone.HIPS) or [0]
    frame_count = int(round(duration_s * fps))
    dt_us = 1e6 / fps
    frames: list[PoseFrame] = []
    identity = UnitQuaternion(0.0, 0.0, 0.0, 1.0)
    sway_set = set(sway_joints)
    for i in range(frame_count):
        t_s = i / fps
        angle = amplitude_rad * math.sin(2.0 * math.pi * frequency_hz * t_s + phase_rad)
        q = from_axis_angle(axis, angle)
        rotations = tuple(
            q if j in sway_set else identity for j in range(skeleton.joint_count)
        )
        root = (
            root_amplitude_m * math.sin(2.0 * math.pi * frequency_hz * t_s + phase_rad),
            1.0,
            0.0,
        )
        frames.append(PoseFrame(start_us + int(round(i * dt_us)), root, rotations))
    return Recording(skeleton.joint_count, fps, frames)


def synthesize_noise_recording(
    skeleton: Skeleton | None = None,
    duration_s: float = 15.0,
    fps: float = 30.0,
    amplitude_rad: float = 0.2,
    seed: int = 0,
    start_us: int = 0,
) -> Recording:
    """Aperiodic jitter recording: every joint gets an independent white
    random rotation each frame. Nothing here should ever read as rhythm."""
    skeleton = skeleton or default_skeleton()
    rng = np.random.default_rng(seed)
    frame_count = int(round(duration_s * fps))
    dt_us = 1e6 / fps
    frames: list[PoseFrame] = []
    for i in range(frame_count):
        angles = rng.uniform(-amplitude_rad, amplitude_rad, size=skeleton.joint_count)
        axes = rng.normal(size=(skeleton.joint_count, 3))
        rotations = tuple(
            from_axis_angle(axes[j], angles[j]) for j in range(skeleton.joint_count)
        )
        frames.append(PoseFrame(start_us + int(round(i * dt_us)), (0.0, 1.0, 0.0), rotations))
    return Recording(skeleton.joint_count, fps, frames)


# ---------------------------------------------------------------------------
# Replay and record
# ---------------------------------------------------------------------------

@dataclass
class ReplayStats:
    emitted: int = 0
    late_us: list[int] = field(default_factory=list)

    def jitter_percentile_us(self, pct: float) -> int:
        if not self.late_us:
            return 0
        return int(np.percentile(np.asarray(self.late_us), pct, method="nearest"))


def encode_recording_payloads(recording: Recording, table: BoundsTable) -> list[bytes]:
    """Pre-encode every frame once; replay patches timestamps in place."""
    stats = EncoderStats()
    return [encode_frame(f, table, stats).to_bytes() for f in recording.frames]


def replay_stream(
    client: Client,
    recording: Recording,
    table: BoundsTable,
    *,
    fps: float | None = None,
    loop: bool = False,
    stop: threading.Event | None = None,
    stamp_produce: bool = False,
    max_packets: int | None = None,
    stats: ReplayStats | None = None,
) -> ReplayStats:
    """Emit a recording as pose packets on a steady timer.

    Frames are encoded up front; emission only stamps the produce time (when
    asked) and hands the datagram to the client. fps overrides the
    recording's nominal rate without resampling: every frame is still sent,
    just faster or slower. Blocks until done; run it in a thread to drive a
    live session.
    """
    stats = stats if stats is not None else ReplayStats()
    payloads = [bytearray(p) for p in encode_recording_payloads(recording, table)]
    if not payloads:
        return stats
    rate = fps if fps is not None else recording.nominal_fps
    interval = 1.0 / rate
    start = time.monotonic()
    k = 0
    while not (stop is not None and stop.is_set()):
        if max_packets is not None and stats.emitted >= max_packets:
            break
        idx = k % len(payloads)
        if idx == 0 and k > 0 and not loop:
            break
        target = start + k * interval
        delay = target - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        payload = payloads[idx]
        if stamp_produce:
            _TS_PATCH.pack_into(payload, 0, mono_us())
        client.send(bytes(payload), SignalType.POSE)
        stats.emitted += 1
        stats.late_us.append(max(0, int((time.monotonic() - target) * 1e6)))
        k += 1
    return stats


def record_sink(
    router: SignalRouter,
    selector: SignalSelector,
    path: str | Path,
    table: BoundsTable,
    skeleton: Skeleton,
    *,
    nominal_fps: float = 30.0,
    stop: threading.Event | None = None,
    duration_s: float | None = None,
    poll_interval_s: float = 0.005,
) -> int:
    """Subscribe in Every mode and write decoded frames in arrival order.

    Runs until `stop` is set or `duration_s` elapses; the file is truncated
    to the last complete frame on close. Frames whose timestamp does not
    advance (a looping replay wraps around) are skipped. Returns the number
    of frames written.
    """
    consumer = router.subscribe(selector, Mode.EVERY)
    deadline = None if duration_s is None else time.monotonic() + duration_s
    last_ts = None
    skipped = 0
    with RecordingWriter(path, skeleton.joint_count, nominal_fps) as writer:
        while True:
            if stop is not None and stop.is_set():
                break
            if deadline is not None and time.monotonic() > deadline:
                break
            polled = consumer.poll(max_packets=256)
            if not polled.packets:
                time.sleep(poll_interval_s)
                continue
            for packet in polled.packets:
                enc = EncodedFrame.from_bytes(packet.payload, table)
                frame = decode_frame(enc, table, skeleton)
                if last_ts is not None and frame.timestamp_us <= last_ts:
                    skipped += 1
                    continue
                writer.write_frame(frame)
                last_ts = frame.timestamp_us
        # final drain so nothing in the ring is lost at shutdown
        while True:
            polled = consumer.poll(max_packets=256)
            if not polled.packets:
                break
            for packet in polled.packets:
                enc = EncodedFrame.from_bytes(packet.payload, table)
                frame = decode_frame(enc, table, skeleton)
                if last_ts is not None and frame.timestamp_us <= last_ts:
                    skipped += 1
                    continue
                writer.write_frame(frame)
                last_ts = frame.timestamp_us
        written = writer.frames_written
    router.unsubscribe(consumer)
    return written


# ---------------------------------------------------------------------------
# Latency probes and reports
# ---------------------------------------------------------------------------

@dataclass
class LatencyProbe:
    """Per-packet stage marks, microseconds on one host's monotonic clock.

    Marks are None where a stage does not apply (the relay never touches
    packet contents, so server-side marks only exist when the server is
    instrumented in-process). Present marks must not decrease in pipeline
    order when every mark comes from one host clock.
    """

    t_produce: int | None = None
    t_enqueue_net: int | None = None
    t_server_in: int | None = None
    t_server_out: int | None = None
    t_client_in: int | None = None
    t_consume: int | None = None

    _ORDER = ("t_produce", "t_enqueue_net", "t_server_in", "t_server_out",
              "t_client_in", "t_consume")

    def marks(self) -> list[tuple[str, int]]:
        return [(n, v) for n in self._ORDER if (v := getattr(self, n)) is not None]

    def is_monotonic(self) -> bool:
        marks = [v for _, v in self.marks()]
        return all(b >= a for a, b in zip(marks, marks[1:]))

    def delta(self, start: str, end: str) -> int | None:
        a, b = getattr(self, start), getattr(self, end)
        if a is None or b is None:
            return None
        return b - a


@dataclass
class StageStats:
    count: int
    p50_us: int
    p95_us: int
    p99_us: int
    max_us: int

    @classmethod
    def from_samples(cls, samples: Sequence[int]) -> "StageStats":
        arr = np.asarray(samples, dtype=np.int64)
        if arr.size == 0:
            return cls(0, 0, 0, 0, 0)
        p50, p95, p99 = (
            int(np.percentile(arr, p, method="nearest")) for p in (50, 95, 99)
        )
        return cls(int(arr.size), p50, p95, p99, int(arr.max()))


@dataclass
class FlowStats:
    user_id: int
    sent: int
    received: int
    dropped: int


@dataclass
class LatencyReport:
    scenario: str
    stages: dict[str, StageStats]
    flows: list[FlowStats]
    extras: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "stages": {
                name: {
                    "count": s.count,
                    "p50_us": s.p50_us,
                    "p95_us": s.p95_us,
                    "p99_us": s.p99_us,
                    "max_us": s.max_us,
                }
                for name, s in self.stages.items()
            },
            "flows": [
                {
                    "user_id": f.user_id,
                    "sent": f.sent,
                    "received": f.received,
                    "dropped": f.dropped,
                }
                for f in self.flows
            ],
            **({"extras": self.extras} if self.extras else {}),
        }

    def to_text(self) -> str:
        lines = [f"scenario: {self.scenario}"]
        for name, s in self.stages.items():
            lines.append(
                f"  {name}: n={s.count} p50={s.p50_us}us p95={s.p95_us}us "
                f"p99={s.p99_us}us max={s.max_us}us"
            )
        for f in self.flows:
            lines.append(
                f"  flow user={f.user_id}: sent={f.sent} received={f.received} "
                f"dropped={f.dropped}"
            )
        for key, value in self.extras.items():
            lines.append(f"  {key}: {value}")
        return "\n".join(lines)


@dataclass
class BenchParams:
    duration_s: float = 60.0
    fps: float = 30.0
    clients: int = 30
    ring_capacity: int = 64
    bits: int = 16
    host: str = "127.0.0.1"
    processes: bool = False
    payload_joints: int = 34


def _bench_payload(params: BenchParams) -> tuple[Recording, BoundsTable]:
    skeleton = default_skeleton() if params.payload_joints == 34 else None
    recording = synthesize_sway_recording(
        skeleton=skeleton, duration_s=4.0, fps=params.fps
    )
    table = analyze_bounds([recording.frames], margin=0.1, bits=params.bits)
    return recording, table


def _proc_cpu_seconds(pid: int) -> float | None:
    try:
        stat = Path(f"/proc/{pid}/stat").read_text()
        fields = stat.rsplit(")", 1)[1].split()
        utime, stime = int(fields[11]), int(fields[12])
        return (utime + stime) / os.sysconf("SC_CLK_TCK")
    except (OSError, IndexError, ValueError):
        return None


def _server_process(conn, host: str, max_clients: int, timeout_us: int) -> None:
    server = RelayServer(
        ServerConfig(host=host, port=0, max_clients=max_clients, client_timeout_us=timeout_us)
    ).start()
    conn.send(server.port)
    conn.recv()  # stop request
    stats = vars(server.stats).copy()
    server.stop()
    conn.send(stats)
    conn.close()


def _start_server(params: BenchParams, max_clients: int):
    parent, child = mp.Pipe()
    proc = mp.Process(
        target=_server_process,
        args=(child, params.host, max_clients, 30_000_000),
        daemon=True,
    )
    proc.start()
    port = parent.recv()
    return proc, parent, (params.host, port)


def _stop_server(proc, conn) -> tuple[dict, float | None]:
    cpu = _proc_cpu_seconds(proc.pid)
    conn.send("stop")
    stats = conn.recv()
    proc.join(timeout=2.0)
    if proc.is_alive():
        proc.terminate()
    return stats, cpu


def _sender_process(conn, addr, duration_s: float, fps: float) -> None:
    params = BenchParams(duration_s=duration_s, fps=fps)
    recording, table = _bench_payload(params)
    client = client_connect(addr)
    conn.send(client.user_id)
    conn.recv()  # go
    stop = threading.Event()
    stats = replay_stream(
        client,
        recording,
        table,
        fps=fps,
        loop=True,
        stop=stop,
        stamp_produce=True,
        max_packets=int(duration_s * fps),
    )
    conn.send({"sent": stats.emitted, "user_id": client.user_id})
    client.close()
    conn.close()


def _run_local_direct(params: BenchParams) -> LatencyReport:
    router = SignalRouter()
    desc = SignalDescriptor(SignalType.POSE, 1, Origin.LOCAL)
    producer = router.register_producer(desc, params.ring_capacity)
    consumer = router.subscribe(
        SignalSelector(SignalType.POSE, 1, Origin.LOCAL), Mode.EVERY
    )
    recording, table = _bench_payload(params)
    payloads = [bytearray(p) for p in encode_recording_payloads(recording, table)]
    total = int(params.duration_s * params.fps)
    stop = threading.Event()

    def produce() -> None:
        interval = 1.0 / params.fps
        start = time.monotonic()
        for k in range(total):
            if stop.is_set():
                break
            delay = start + k * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            payload = payloads[k % len(payloads)]
            now = mono_us()
            _TS_PATCH.pack_into(payload, 0, now)
            producer.publish(SignalPacket(
                signal_type=SignalType.POSE,
                user_id=1,
                seq=k + 1,
                send_timestamp_us=now,
                payload=bytes(payload),
            ))

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    deltas: list[int] = []
    while True:
        polled = consumer.poll(max_packets=64)
        now = mono_us()
        for packet in polled.packets:
            (t_produce,) = _TS_PATCH.unpack_from(packet.payload, 0)
            deltas.append(now - t_produce)
        if not polled.packets:
            if not thread.is_alive():
                break
            time.sleep(0)  # yield; this path is the latency being measured
    thread.join()
    return LatencyReport(
        scenario="local_direct",
        stages={"produce_to_consume": StageStats.from_samples(deltas)},
        flows=[FlowStats(1, total, len(deltas), 0)],
        extras={"router_lost": consumer.lost_total},
    )


def _run_loopback_relay(params: BenchParams) -> LatencyReport:
    server_proc, server_conn, addr = _start_server(params, max_clients=4)
    receiver = client_connect(addr)
    consumer = receiver.router.subscribe(
        SignalSelector(SignalType.POSE, None, Origin.NETWORK), Mode.EVERY
    )
    parent, child = mp.Pipe()
    sender = mp.Process(
        target=_sender_process,
        args=(child, addr, params.duration_s, params.fps),
        daemon=True,
    )
    sender.start()
    sender_id = parent.recv()
    parent.send("go")

    probes: list[LatencyProbe] = []
    sender_stats: dict | None = None
    deadline = time.monotonic() + params.duration_s + 3.0
    while time.monotonic() < deadline:
        polled = consumer.poll(max_packets=64)
        now = mono_us()
        for packet in polled.packets:
            (t_produce,) = _TS_PATCH.unpack_from(packet.payload, 0)
            probes.append(LatencyProbe(
                t_produce=t_produce,
                t_enqueue_net=packet.send_timestamp_us,
                t_client_in=packet.recv_timestamp_us,
                t_consume=now,
            ))
        if sender_stats is None and parent.poll():
            sender_stats = parent.recv()
            deadline = time.monotonic() + 0.5  # drain grace once the sender is done
        if not polled.packets:
            time.sleep(0.0002)
    sender.join(timeout=2.0)
    server_stats, server_cpu = _stop_server(server_proc, server_conn)
    receiver.close()

    sent = sender_stats["sent"] if sender_stats else 0
    stages = {}
    for name, start, end in (
        ("produce_to_consume", "t_produce", "t_consume"),
        ("enqueue_to_client_in", "t_enqueue_net", "t_client_in"),
        ("client_in_to_consume", "t_client_in", "t_consume"),
    ):
        samples = [d for p in probes if (d := p.delta(start, end)) is not None]
        stages[name] = StageStats.from_samples(samples)
    report = LatencyReport(
        scenario="loopback_relay",
        stages=stages,
        flows=[FlowStats(sender_id, sent, len(probes), sent - len(probes))],
        extras={
            "server": server_stats,
            "server_cpu_s": server_cpu,
            "router_lost": consumer.lost_total,
            "non_monotonic_probes": sum(not p.is_monotonic() for p in probes),
        },
    )
    return report


class _SwarmPool:
    """Thirty dancers in one process without thirty receive threads.

    Python threads contend on one interpreter lock, so per-client receive
    threads fall behind at relay rates (clients * (clients-1) * fps inbound
    packets per second). The pool instead services every client socket from
    a single selector loop, paces every sender from one scheduler thread,
    and drains every consumer from one poller, which keeps the per-packet
    cost low enough for the full swarm on a small host.
    """

    def __init__(self, addr, params: BenchParams, recording: Recording, table: BoundsTable):
        import selectors

        from ._mmsg import BatchReceiver

        self.params = params
        self.payloads = [bytearray(p) for p in encode_recording_payloads(recording, table)]
        self.clients: list[Client] = []
        self.consumers = []
        self.selector = selectors.DefaultSelector()
        for _ in range(params.clients):
            client = client_connect(
                addr, peer_ring_capacity=params.ring_capacity, start_receiver=False
            )
            consumer = client.router.subscribe(
                SignalSelector(SignalType.POSE, None, Origin.NETWORK), Mode.EVERY
            )
            receiver = BatchReceiver(client.sock, max_batch=64)
            self.selector.register(client.sock, selectors.EVENT_READ, (client, receiver))
            self.clients.append(client)
            self.consumers.append(consumer)
        self.received = [0] * params.clients
        self.wire_samples: list[int] = []
        self.send_done = threading.Event()
        self.io_stop = threading.Event()
        self.drain_stop = threading.Event()
        self.io_thread = threading.Thread(target=self._io_loop, daemon=True)
        self.send_thread = threading.Thread(target=self._send_loop, daemon=True)
        self.drain_thread = threading.Thread(target=self._drain_loop, daemon=True)

    def _io_loop(self) -> None:
        while not self.io_stop.is_set():
            events = self.selector.select(timeout=0.05)
            for key, _ in events:
                client, receiver = key.data
                now = mono_us()
                ingest = client.ingest
                while True:
                    batch = receiver.recv_batch()
                    if not batch:
                        break
                    for data in batch:
                        ingest(data, now)
                    if len(batch) < receiver.max_batch:
                        break

    def _send_loop(self) -> None:
        params = self.params
        interval = 1.0 / params.fps
        total_ticks = int(params.duration_s * params.fps)
        start = time.monotonic()
        payload_count = len(self.payloads)
        for k in range(total_ticks):
            delay = start + k * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            payload = self.payloads[k % payload_count]
            _TS_PATCH.pack_into(payload, 0, mono_us())
            blob = bytes(payload)
            for client in self.clients:
                try:
                    client.send(blob, SignalType.POSE)
                except OSError:
                    pass
        self.send_done.set()

    def _drain_loop(self) -> None:
        sample = self.wire_samples.append
        while not self.drain_stop.is_set():
            moved = 0
            for i, consumer in enumerate(self.consumers):
                polled = consumer.poll(max_packets=256)
                if polled.packets:
                    moved += len(polled.packets)
                    self.received[i] += len(polled.packets)
                    for packet in polled.packets:
                        if packet.recv_timestamp_us is not None:
                            sample(packet.recv_timestamp_us - packet.send_timestamp_us)
            if not moved:
                time.sleep(0.002)

    def run(self) -> None:
        self.io_thread.start()
        self.drain_thread.start()
        self.send_thread.start()
        self.send_done.wait()
        time.sleep(1.0)  # let the relay and socket queues flush
        self.io_stop.set()
        self.io_thread.join(timeout=5.0)
        self.drain_stop.set()
        self.drain_thread.join(timeout=5.0)
        for i, consumer in enumerate(self.consumers):  # final sweep
            while True:
                polled = consumer.poll(max_packets=256)
                if not polled.packets:
                    break
                self.received[i] += len(polled.packets)

    def close(self) -> None:
        for client in self.clients:
            self.selector.unregister(client.sock)
            client.close()
        self.selector.close()


_RECV_CHUNK = 2048


def _run_swarm(params: BenchParams) -> LatencyReport:
    if params.processes:
        raise NotImplementedError(
            "process-per-dancer swarm is exposed for fidelity experiments; "
            "use threads (the default) for the standard run"
        )
    server_proc, server_conn, addr = _start_server(params, max_clients=params.clients + 2)
    recording, table = _bench_payload(params)
    pool = _SwarmPool(addr, params, recording, table)
    pool.run()
    server_stats, server_cpu = _stop_server(server_proc, server_conn)

    total_sent = sum(c.session.stats.sent for c in pool.clients)
    total_received = sum(pool.received)
    expected = total_sent * (params.clients - 1)
    gaps = sum(c.lost_total for c in pool.consumers)
    flows = [
        FlowStats(
            client.user_id,
            client.session.stats.sent,
            pool.received[i],
            client.session.stats.dropped_stale + client.session.stats.dropped_corrupt,
        )
        for i, client in enumerate(pool.clients)
    ]
    wire = pool.wire_samples
    pool.close()
    delivery = total_received / expected if expected else 1.0
    return LatencyReport(
        scenario="swarm",
        stages={"enqueue_to_client_in": StageStats.from_samples(wire)},
        flows=flows,
        extras={
            "clients": params.clients,
            "total_sent": total_sent,
            "expected_deliveries": expected,
            "total_received": total_received,
            "delivery_ratio": delivery,
            "router_gaps": gaps,
            "server": server_stats,
            "server_cpu_s": server_cpu,
        },
    )


def run_latency_experiment(scenario: str, params: BenchParams | None = None) -> LatencyReport:
    """Run one of the built-in latency scenarios.

    local_direct: producer to consumer through the in-process router only.
    loopback_relay: client to server to client across localhost UDP.
    swarm: N simulated dancers all relayed through one server.
    """
    params = params or BenchParams()
    if scenario == "local_direct":
        return _run_local_direct(params)
    if scenario == "loopback_relay":
        return _run_loopback_relay(params)
    if scenario == "swarm":
        return _run_swarm(params)
    raise ValueError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# Corrective experiment
# ---------------------------------------------------------------------------

def _pick_measurement_component(recording: Recording, joint: int) -> str:
    best, best_span = "x", -1.0
    for component in ("x", "y", "z"):
        values = np.array([f.rotations[joint][_COMPONENT_IDX[component]] for f in recording.frames])
        span = float(values.max() - values.min())
        if span > best_span:
            best, best_span = component, span
    return best


_COMPONENT_IDX = {"x": 0, "y": 1, "z": 2}


def find_extremum_times_us(
    frames: Sequence[PoseFrame],
    joint: int,
    component: str,
    *,
    min_prominence_ratio: float = 0.25,
) -> list[float]:
    """Times of local extrema of one joint component, parabola-refined.

    Small wiggles below `min_prominence_ratio` of the peak deviation are
    ignored so measurement noise does not read as extra extrema.
    """
    idx = _COMPONENT_IDX[component]
    ts = np.array([f.timestamp_us for f in frames], dtype=np.float64)
    x = np.array([f.rotations[joint][idx] for f in frames], dtype=np.float64)
    x = x - x.mean()
    scale = np.abs(x).max()
    if scale <= 0:
        return []
    out: list[float] = []
    for i in range(1, len(x) - 1):
        d1 = x[i] - x[i - 1]
        d2 = x[i + 1] - x[i]
        if d1 == 0.0 and d2 == 0.0:
            continue
        if (d1 >= 0.0 >= d2 or d1 <= 0.0 <= d2) and abs(x[i]) >= min_prominence_ratio * scale:
            denom = x[i - 1] - 2.0 * x[i] + x[i + 1]
            delta = 0.0 if denom == 0.0 else 0.5 * (x[i - 1] - x[i + 1]) / denom
            delta = float(np.clip(delta, -0.5, 0.5))
            dt = ts[i + 1] - ts[i] if delta >= 0 else ts[i] - ts[i - 1]
            out.append(ts[i] + delta * dt)
    return out


def _beat_errors_us(times_us: Sequence[float], grid: BeatGrid) -> np.ndarray:
    times = np.asarray(times_us, dtype=np.float64)
    period = grid.beat_period_us
    offsets = (times - grid.phase_offset_us) % period
    return np.minimum(offsets, period - offsets)


@dataclass
class AlignmentReport:
    applied: bool
    reason: str | None
    no_dominant_period: bool
    detected_period_us: int | None
    rate: float
    measured_joint: int | None
    measured_component: str | None
    pre_error_ms: float | None
    post_error_ms: float | None
    convergence_us: int | None
    extrema_pre: int = 0
    extrema_post: int = 0
    amplitude_ratio: float | None = None

    def to_json_dict(self) -> dict:
        return {k: v for k, v in vars(self).items()}

    def to_text(self) -> str:
        if self.no_dominant_period:
            if self.reason and "window" in self.reason:
                return f"{self.reason}; input copied through"
            return "no dominant period detected; input copied through"
        lines = [
            f"applied: {self.applied}" + (f" ({self.reason})" if self.reason else ""),
            f"detected period: {self.detected_period_us} us, playback rate {self.rate:.4f}",
        ]
        if self.pre_error_ms is not None:
            lines.append(
                f"beat alignment error: pre {self.pre_error_ms:.1f} ms "
                f"({self.extrema_pre} extrema), post {self.post_error_ms:.1f} ms "
                f"({self.extrema_post} extrema, after convergence)"
            )
        if self.convergence_us is not None:
            lines.append(f"warp converged at {self.convergence_us / 1e6:.2f} s")
        if self.amplitude_ratio is not None:
            lines.append(f"sway amplitude ratio post/pre: {self.amplitude_ratio:.3f}")
        return "\n".join(lines)


def _amplify_window_frames(result: PipelineResult, params: CorrectiveParams, fps: float) -> int:
    """Trailing-reference length for amplification: whole detected periods.

    An integer number of periods keeps the rolling reference stationary for
    periodic motion, so the gain applies cleanly to the sway amplitude.
    """
    detected = result.detected
    if detected is None:
        return params.window_frames
    period_frames = detected.period_us * fps / 1e6
    if period_frames <= 0:
        return params.window_frames
    whole = max(1, int(params.window_frames / period_frames))
    return max(2, int(round(whole * period_frames)))


def corrective_experiment(
    recording: Recording,
    grid: BeatGrid,
    params: CorrectiveParams,
    *,
    skeleton: Skeleton | None = None,
    output_path: str | Path | None = None,
) -> tuple[Recording, AlignmentReport]:
    """Run the rhythm correctives over a recording as a live pipeline would
    (windowed, causal) and report pre/post beat alignment.

    Post-alignment error is measured from warp convergence onwards; the
    slewed correction needs |phase shift| / max_warp_slew seconds to land.
    """
    if skeleton is None:
        skeleton = default_skeleton()
        if recording.joint_count != skeleton.joint_count:
            raise ValueError(
                f"recording has {recording.joint_count} joints; pass a matching skeleton"
            )
    result = run_corrective_pipeline(recording.frames, skeleton, grid, params)
    frames = result.frames

    gains_active = any(g != 1.0 for g in params.zone_gains.values())
    amp_window = None
    if gains_active:
        amp_window = _amplify_window_frames(result, params, recording.nominal_fps)
        frames = amplify_zones(frames, skeleton, params, amp_window)

    corrected = Recording(recording.joint_count, recording.nominal_fps, list(frames))
    if output_path is not None:
        from .recording import save_recording

        save_recording(corrected, output_path)

    if result.detected is None:
        report = AlignmentReport(
            applied=False,
            reason=result.reason,
            no_dominant_period=True,
            detected_period_us=None,
            rate=1.0,
            measured_joint=None,
            measured_component=None,
            pre_error_ms=None,
            post_error_ms=None,
            convergence_us=None,
        )
        return corrected, report

    joint = result.detected.joint
    component = _pick_measurement_component(recording, joint)
    pre_times = find_extremum_times_us(recording.frames, joint, component)
    post_times = find_extremum_times_us(corrected.frames, joint, component)
    convergence = result.convergence_us()
    if convergence is None:
        convergence = recording.frames[min(params.window_frames, len(recording.frames) - 1)].timestamp_us
    post_after = [t for t in post_times if t >= convergence]

    pre_err = _beat_errors_us(pre_times, grid) if pre_times else np.array([])
    post_err = _beat_errors_us(post_after, grid) if post_after else np.array([])

    amplitude_ratio = None
    if gains_active and amp_window is not None:
        start = min(amp_window, len(recording.frames) - 1)
        pre_vals = np.array(
            [f.rotations[joint][_COMPONENT_IDX[component]] for f in recording.frames[start:]]
        )
        post_vals = np.array(
            [f.rotations[joint][_COMPONENT_IDX[component]] for f in corrected.frames[start:]]
        )
        pre_amp = (pre_vals.max() - pre_vals.min()) / 2.0
        post_amp = (post_vals.max() - post_vals.min()) / 2.0
        if pre_amp > 0:
            amplitude_ratio = float(post_amp / pre_amp)

    report = AlignmentReport(
        applied=result.applied,
        reason=result.reason,
        no_dominant_period=False,
        detected_period_us=result.detected.period_us,
        rate=result.rate,
        measured_joint=joint,
        measured_component=component,
        pre_error_ms=float(pre_err.mean() / 1000.0) if pre_err.size else None,
        post_error_ms=float(post_err.mean() / 1000.0) if post_err.size else None,
        convergence_us=convergence,
        extrema_pre=len(pre_times),
        extrema_post=len(post_after),
        amplitude_ratio=amplitude_ratio,
    )
    return corrected, report
