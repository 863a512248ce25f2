"""Command-line entry points.

    dancegraph server  --bind 0.0.0.0:31415 --max-clients 64 --timeout-ms 5000
    dancegraph replay  --file take.dgrc --server host:port --fps 30 --loop
    dancegraph record  --out take.dgrc --select pose:any:network --server host:port
    dancegraph bench   --scenario loopback_relay --duration 60 --json out.json
    dancegraph correct --in take.dgrc --bpm 120 --phase-ms 0 --gains hips=2.0 --out fixed.dgrc
    dancegraph bounds  --corpus recordings/ --bits 16 --margin 0.1 --out bounds.json
    dancegraph synth   --out sway.dgrc --seconds 30 --hz 1.0
"""
from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from pathlib import Path

from .codec import BoundsTable, analyze_bounds
from .core import BodyZone, default_skeleton
from .harness import (
    BenchParams,
    corrective_experiment,
    record_sink,
    replay_stream,
    run_latency_experiment,
    synthesize_sway_recording,
)
from .packet import SignalType
from .recording import load_recording, save_recording
from .rhythm import BeatGrid, CorrectiveParams, load_corrective_config
from .router import Origin, SignalSelector
from .transport import RelayServer, ServerConfig, client_connect


def _on_interrupt(stop: threading.Event) -> None:
    """Install a SIGINT/SIGTERM handler when possible (main thread only)."""
    try:
        signal.signal(signal.SIGINT, lambda *a: stop.set())
        signal.signal(signal.SIGTERM, lambda *a: stop.set())
    except ValueError:
        pass  # not the main thread (e.g. driven programmatically)


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _parse_selector(text: str) -> SignalSelector:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("selector must look like pose:any:network")
    type_name, user, origin = parts
    signal_type = {
        "pose": SignalType.POSE,
        "control": SignalType.CONTROL,
        "telemetry": SignalType.TELEMETRY,
    }[type_name.lower()]
    user_id = None if user.lower() in ("any", "*") else int(user)
    org = None if origin.lower() in ("any", "*") else Origin(origin.lower())
    return SignalSelector(signal_type, user_id, org)


def _parse_gains(items: list[str]) -> dict[BodyZone, float]:
    gains = {zone: 1.0 for zone in BodyZone}
    for item in items:
        name, _, value = item.partition("=")
        if not value:
            raise argparse.ArgumentTypeError(f"expected zone=gain, got {item!r}")
        gains[BodyZone(name.lower())] = float(value)
    return gains


def _table_for_recording(args, recording) -> BoundsTable:
    if getattr(args, "bounds", None):
        return BoundsTable.from_json(args.bounds)
    # No table supplied: derive one from the recording itself, which by
    # construction never clamps on replay of that same recording.
    names = None
    if recording.joint_count == default_skeleton().joint_count:
        names = default_skeleton().joint_names
    return analyze_bounds([recording.frames], margin=0.1, bits=16, joint_names=names)


def _cmd_server(args) -> int:
    host, port = args.bind
    config = ServerConfig(
        host=host,
        port=port,
        max_clients=args.max_clients,
        client_timeout_us=args.timeout_ms * 1000,
    )
    server = RelayServer(config)
    print(f"relay listening on {server.address[0]}:{server.port}")
    stop = threading.Event()
    _on_interrupt(stop)
    server.start()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        server.stop()
        print(f"server stats: {vars(server.stats)}")
    return 0


def _cmd_replay(args) -> int:
    recording = load_recording(args.file)
    table = _table_for_recording(args, recording)
    client = client_connect(args.server)
    print(f"connected as user {client.user_id}; replaying {len(recording.frames)} frames")
    stop = threading.Event()
    _on_interrupt(stop)
    try:
        stats = replay_stream(
            client, recording, table, fps=args.fps, loop=args.loop, stop=stop
        )
        print(f"emitted {stats.emitted} packets, p99 timer lateness "
              f"{stats.jitter_percentile_us(99)}us")
    finally:
        client.close()
    return 0


def _cmd_record(args) -> int:
    if not args.bounds:
        print("record needs --bounds to decode incoming payloads", file=sys.stderr)
        return 2
    table = BoundsTable.from_json(args.bounds)
    skeleton = default_skeleton()
    if table.joint_count != skeleton.joint_count:
        print("bounds table joint count does not match the default skeleton", file=sys.stderr)
        return 2
    client = client_connect(args.server)
    stop = threading.Event()
    _on_interrupt(stop)
    print(f"recording {args.select} to {args.out} (ctrl-c to stop)")
    try:
        written = record_sink(
            client.router,
            _parse_selector(args.select),
            args.out,
            table,
            skeleton,
            nominal_fps=args.fps,
            stop=stop,
            duration_s=args.duration,
        )
        print(f"wrote {written} frames")
    finally:
        client.close()
    return 0


def _cmd_bench(args) -> int:
    params = BenchParams(
        duration_s=args.duration,
        fps=args.fps,
        clients=args.clients,
        ring_capacity=args.capacity,
        processes=args.processes,
    )
    report = run_latency_experiment(args.scenario, params)
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json_dict(), indent=2))
        print(f"wrote {args.json}")
    return 0


def _cmd_correct(args) -> int:
    recording = load_recording(args.infile)
    if args.config:
        grid, params = load_corrective_config(args.config)
    else:
        grid = BeatGrid(bpm=args.bpm, phase_offset_us=int(args.phase_ms * 1000))
        params = CorrectiveParams(zone_gains=_parse_gains(args.gains or []))
    corrected, report = corrective_experiment(
        recording, grid, params, output_path=args.out
    )
    print(report.to_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json_dict(), indent=2))
    print(f"wrote {args.out} ({len(corrected.frames)} frames)")
    return 0


def _cmd_bounds(args) -> int:
    corpus_dir = Path(args.corpus)
    files = sorted(corpus_dir.glob("*.dgrc"))
    if not files:
        print(f"no .dgrc recordings under {corpus_dir}", file=sys.stderr)
        return 2
    streams = [load_recording(f).frames for f in files]
    names = None
    if streams and len(streams[0][0].rotations) == default_skeleton().joint_count:
        names = default_skeleton().joint_names
    table = analyze_bounds(streams, margin=args.margin, bits=args.bits, joint_names=names)
    table.to_json(args.out)
    print(f"analyzed {len(files)} recordings -> {args.out} "
          f"({table.joint_count} joints, {table.bits} bits)")
    return 0


def _cmd_synth(args) -> int:
    recording = synthesize_sway_recording(
        duration_s=args.seconds,
        fps=args.fps,
        frequency_hz=args.hz,
        amplitude_rad=args.amplitude,
        phase_rad=args.phase,
    )
    save_recording(recording, args.out)
    print(f"wrote {args.out}: {len(recording.frames)} frames at {args.fps} fps")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dancegraph")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="run a relay server")
    p.add_argument("--bind", type=_parse_addr, default=("0.0.0.0", 31415))
    p.add_argument("--max-clients", type=int, default=64)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.set_defaults(func=_cmd_server)

    p = sub.add_parser("replay", help="stream a recording to a server")
    p.add_argument("--file", required=True)
    p.add_argument("--server", type=_parse_addr, required=True)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--loop", action="store_true")
    p.add_argument("--bounds", default=None, help="bounds table JSON (default: derive from the recording)")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("record", help="record incoming streams to a file")
    p.add_argument("--out", required=True)
    p.add_argument("--select", default="pose:any:network")
    p.add_argument("--server", type=_parse_addr, required=True)
    p.add_argument("--bounds", required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=_cmd_record)

    p = sub.add_parser("bench", help="run a latency experiment")
    p.add_argument("--scenario", choices=("local_direct", "loopback_relay", "swarm"), required=True)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--clients", type=int, default=30)
    p.add_argument("--capacity", type=int, default=64)
    p.add_argument("--processes", action="store_true")
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("correct", help="beat-align and stylize a recording")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bpm", type=float, default=120.0)
    p.add_argument("--phase-ms", type=float, default=0.0)
    p.add_argument("--gains", nargs="*", default=None, metavar="zone=gain")
    p.add_argument("--config", default=None, help="corrective config JSON overriding the flags")
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_correct)

    p = sub.add_parser("bounds", help="analyze a corpus into a bounds table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--margin", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("synth", help="write a synthetic sway recording")
    p.add_argument("--out", required=True)
    p.add_argument("--seconds", type=float, default=30.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--hz", type=float, default=1.0)
    p.add_argument("--amplitude", type=float, default=0.35)
    p.add_argument("--phase", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
