"""Rhythmic motion correction for incoming pose streams.

Three stages, each usable on its own:

1. Detection: per joint component, a Hann-windowed periodogram of the
   motion time series locates the dominant sway frequency in the danceable
   band (0.25 to 4 Hz, i.e. 15 to 240 sways per minute); the peak is
   refined by parabolic interpolation over log magnitudes, so the estimate
   resolves far below the raw bin width. Per-joint estimates are fused by
   clustering periods that agree within 10% and energy-weighting the
   heaviest cluster: the dance has one rhythm.

2. Beat alignment: a monotonic time warp resamples the stream so motion
   extrema land on the local beat grid. An oscillation produces extrema
   every half period, so the extremum interval (period / 2) is matched
   against the beat period at whole multiples or subdivisions; the residual
   playback-rate ratio must stay within max_rate_ratio or the stream is
   passed through untouched and flagged. The phase correction converges to
   the constant that puts extrema on the nearest grid points (never more
   than half a beat away) and is slew-limited so a live viewer never sees a
   pop; the constant rate factor is bounded separately by max_rate_ratio.

3. Stylization: per body zone, rotations are geodesically extrapolated away
   from a rolling reference orientation, widening (gain > 1), muting
   (gain < 1), or freezing (gain 0) the motion of that zone.

The feature signal is the raw quaternion component: for a sway about a
fixed axis it is a monotone function of the sway angle, so extrema timing
is preserved without needing any skeleton hierarchy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import (
    BodyZone,
    PoseFrame,
    Skeleton,
    UnitQuaternion,
    karcher_mean_rows,
    rows_slerp,
    scale_rotation,
)

__all__ = [
    "BeatGrid",
    "PeriodEstimate",
    "CorrectiveParams",
    "FeatureSeries",
    "InsufficientDataError",
    "extract_feature_series",
    "detect_dominant_period",
    "aggregate_joint_period",
    "beat_align_remap",
    "amplify_zones",
    "RemapResult",
    "WarpSample",
    "run_corrective_pipeline",
    "PipelineResult",
    "load_corrective_config",
]

DETECTION_BAND_HZ = (0.25, 4.0)

_COMPONENT_INDEX = {"x": 0, "y": 1, "z": 2}
_TWO_PI = 2.0 * math.pi

# Phase shifts and rate offsets below these are treated as already aligned,
# keeping the no-op warp bit-stable.
_PHASE_SNAP_US = 0.5
_RATE_SNAP = 1e-9


class InsufficientDataError(ValueError):
    """Analysis window is too short or too irregular to use."""


@dataclass(frozen=True)
class BeatGrid:
    """Musical time reference: tempo plus the stream-clock time of beat 0."""

    bpm: float
    phase_offset_us: int = 0
    beats_per_bar: int = 4

    def __post_init__(self) -> None:
        if not (30.0 <= self.bpm <= 300.0):
            raise ValueError(f"bpm must be in [30, 300], got {self.bpm}")
        if self.beats_per_bar < 1:
            raise ValueError("beats_per_bar must be >= 1")

    @property
    def beat_period_us(self) -> float:
        return 60e6 / self.bpm

    def nearest_beat_us(self, t_us: float) -> float:
        period = self.beat_period_us
        k = round((t_us - self.phase_offset_us) / period)
        return self.phase_offset_us + k * period


@dataclass(frozen=True)
class PeriodEstimate:
    """Dominant period of one joint's motion over an analysis window.

    The phase is that of a cosine model evaluated at the first sample of
    the analysis window; extrema of the motion sit where the model phase is
    a multiple of pi.
    """

    period_us: int
    phase_rad: float
    energy_ratio: float
    joint: int

    def __post_init__(self) -> None:
        if self.period_us <= 0:
            raise ValueError("period_us must be positive")
        if not (0.0 <= self.energy_ratio <= 1.0):
            raise ValueError("energy_ratio must be in [0, 1]")


def _default_gains() -> dict[BodyZone, float]:
    return {zone: 1.0 for zone in BodyZone}


@dataclass(frozen=True)
class CorrectiveParams:
    window_frames: int = 256
    detection_threshold: float = 0.2
    max_warp_slew: float = 0.03  # seconds of added warp per second of playback
    max_rate_ratio: float = 1.1
    zone_gains: Mapping[BodyZone, float] = field(default_factory=_default_gains)

    def __post_init__(self) -> None:
        if self.window_frames < 16 or self.window_frames & (self.window_frames - 1):
            raise ValueError("window_frames must be a power of two >= 16")
        if self.max_rate_ratio < 1.0:
            raise ValueError("max_rate_ratio must be >= 1")
        if self.max_warp_slew <= 0.0:
            raise ValueError("max_warp_slew must be positive")
        if not (0.0 <= self.detection_threshold <= 1.0):
            raise ValueError("detection_threshold must be in [0, 1]")
        gains = dict(self.zone_gains)
        for zone in BodyZone:
            gains.setdefault(zone, 1.0)
        if any(g < 0.0 for g in gains.values()):
            raise ValueError("zone gains must be >= 0")
        object.__setattr__(self, "zone_gains", gains)

    def gain_for(self, zone: BodyZone) -> float:
        return self.zone_gains.get(zone, 1.0)


@dataclass(frozen=True)
class FeatureSeries:
    """One quaternion component of one joint over a uniform window."""

    joint: int
    component: str
    samples: np.ndarray
    fps: float
    start_us: int = 0

    def __post_init__(self) -> None:
        if self.component not in _COMPONENT_INDEX:
            raise ValueError(f"component must be one of x, y, z, got {self.component!r}")
        samples = np.asarray(self.samples, dtype=np.float64)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.fps <= 0:
            raise ValueError("fps must be positive")


def load_corrective_config(src: str | Path) -> tuple[BeatGrid, CorrectiveParams]:
    """Read the JSON corrective config: beat grid plus corrective parameters."""
    with open(src, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    grid = BeatGrid(
        bpm=float(doc["bpm"]),
        phase_offset_us=int(round(float(doc.get("phase_offset_ms", 0.0)) * 1000.0)),
    )
    gains = _default_gains()
    for name, value in doc.get("zone_gains", {}).items():
        gains[BodyZone(name.lower())] = float(value)
    params = CorrectiveParams(
        window_frames=int(doc.get("window_frames", 256)),
        detection_threshold=float(doc.get("detection_threshold", 0.2)),
        max_warp_slew=float(doc.get("max_warp_slew", 0.03)),
        max_rate_ratio=float(doc.get("max_rate_ratio", 1.1)),
        zone_gains=gains,
    )
    return grid, params


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def extract_feature_series(
    window: Sequence[PoseFrame],
    joint: int,
    component: str,
) -> FeatureSeries:
    """Pull one joint component out of a frame window as a zero-mean series.

    The window must be uniformly sampled: timestamps may jitter at most 10%
    around the median frame interval, otherwise the series is useless for
    spectral analysis and an InsufficientDataError is raised.
    """
    if component not in _COMPONENT_INDEX:
        raise ValueError(f"component must be one of x, y, z, got {component!r}")
    n = len(window)
    if n < 16:
        raise InsufficientDataError(f"window of {n} frames is too short")
    ts = np.array([f.timestamp_us for f in window], dtype=np.float64)
    dts = np.diff(ts)
    median_dt = float(np.median(dts))
    if median_dt <= 0:
        raise InsufficientDataError("timestamps must be strictly increasing")
    # +1us slack: integer timestamps quantize the jitter measurement
    if np.any(np.abs(dts - median_dt) > 0.1 * median_dt + 1.0):
        raise InsufficientDataError("frame timing jitter exceeds 10% of the frame interval")
    idx = _COMPONENT_INDEX[component]
    values = np.array([f.rotations[joint][idx] for f in window], dtype=np.float64)
    values -= values.mean()
    return FeatureSeries(
        joint=joint,
        component=component,
        samples=values,
        fps=1e6 / median_dt,
        start_us=int(window[0].timestamp_us),
    )


def detect_dominant_period(
    series: FeatureSeries,
    threshold: float = 0.2,
    band_hz: tuple[float, float] = DETECTION_BAND_HZ,
) -> PeriodEstimate | None:
    """Find the dominant in-band period of a series, or None if aperiodic.

    Hann-windowed periodogram; the peak bin and its neighbors are refined
    with a parabolic fit over log magnitudes, and the phase is read from
    the complex spectrum evaluated at the refined peak frequency. The
    energy ratio is the three-bin peak energy over the total spectral
    energy; below `threshold` there is no usable rhythm in this signal.
    """
    x = np.asarray(series.samples, dtype=np.float64)
    n = x.size
    if n < 16 or n & (n - 1):
        raise ValueError(f"series length must be a power of two >= 16, got {n}")
    x = x - x.mean()
    win = np.hanning(n)
    spectrum = np.fft.rfft(x * win)
    power = np.abs(spectrum) ** 2
    fs = series.fps

    k_lo = max(1, int(math.ceil(band_hz[0] * n / fs)))
    k_hi = min(n // 2 - 1, int(math.floor(band_hz[1] * n / fs)))
    if k_lo > k_hi:
        return None
    k = int(np.argmax(power[k_lo:k_hi + 1])) + k_lo

    total = float(power[1:].sum())
    if total <= 0.0:
        return None
    peak_energy = float(power[k - 1:k + 2].sum())
    ratio = peak_energy / total
    if ratio < threshold:
        return None

    eps = max(power[k] * 1e-12, 1e-300)
    l_prev, l_peak, l_next = np.log(power[k - 1:k + 2] + eps)
    denom = l_prev - 2.0 * l_peak + l_next
    delta = 0.0 if denom == 0.0 else 0.5 * (l_prev - l_next) / denom
    delta = float(np.clip(delta, -0.5, 0.5))
    freq = (k + delta) * fs / n
    freq = min(max(freq, band_hz[0]), band_hz[1])

    # Phase of the cosine model at the first sample, read from the windowed
    # spectrum evaluated at the refined peak frequency.
    m = np.arange(n)
    z = np.sum(x * win * np.exp(-2j * math.pi * freq / fs * m))
    phase = float(np.angle(z)) % _TWO_PI

    return PeriodEstimate(
        period_us=int(round(1e6 / freq)),
        phase_rad=phase,
        energy_ratio=min(1.0, ratio),
        joint=series.joint,
    )


def aggregate_joint_period(
    estimates: Iterable[PeriodEstimate | None],
    threshold: float = 0.2,
) -> PeriodEstimate | None:
    """Fuse per-joint estimates from one analysis window into one rhythm.

    Periods agreeing within 10% are clustered; the cluster with the largest
    combined energy wins and its energy-weighted mean period and circular
    mean phase are returned. None when no cluster's combined energy reaches
    `threshold`.
    """
    valid = sorted((e for e in estimates if e is not None), key=lambda e: e.period_us)
    if not valid:
        return None
    clusters: list[list[PeriodEstimate]] = []
    for est in valid:
        if clusters:
            cluster = clusters[-1]
            weight = sum(c.energy_ratio for c in cluster)
            mean_p = sum(c.energy_ratio * c.period_us for c in cluster) / max(weight, 1e-12)
            if est.period_us <= 1.1 * mean_p:
                cluster.append(est)
                continue
        clusters.append([est])
    best = max(clusters, key=lambda c: sum(e.energy_ratio for e in c))
    weight = sum(e.energy_ratio for e in best)
    if weight < threshold:
        return None
    period = sum(e.energy_ratio * e.period_us for e in best) / weight
    phase_vec = sum(e.energy_ratio * np.exp(1j * e.phase_rad) for e in best)
    phase = float(np.angle(phase_vec)) % _TWO_PI
    strongest = max(best, key=lambda e: e.energy_ratio)
    return PeriodEstimate(
        period_us=int(round(period)),
        phase_rad=phase,
        energy_ratio=min(1.0, weight),
        joint=strongest.joint,
    )


# ---------------------------------------------------------------------------
# Beat-aligned time warp
# ---------------------------------------------------------------------------

class WarpSample(NamedTuple):
    t_us: int          # output frame time (original timeline)
    source_us: float   # warped source time sampled for this frame
    phase_us: float    # phase displacement applied so far
    target_us: float   # phase displacement target at this frame


@dataclass
class RemapResult:
    frames: list[PoseFrame]
    applied: bool
    reason: str | None
    rate: float
    grid_spacing_us: float | None
    phase_target_us: float
    warp: list[WarpSample]


def _match_tempo(
    event_period_us: float,
    beat_period_us: float,
    max_rate_ratio: float,
) -> tuple[float, float] | None:
    """Match the extremum interval to the beat grid.

    Extrema may land on every beat, every m-th beat, or k times per beat;
    the closest of those relations is chosen and the leftover playback-rate
    ratio must fall within [1/max_rate_ratio, max_rate_ratio]. Returns
    (rate, target event spacing in us) or None when the motion simply is
    not dancing to this tempo.
    """
    candidates = [beat_period_us * m for m in range(1, 9)]
    candidates += [beat_period_us / k for k in range(2, 9)]
    spacing = min(candidates, key=lambda s: abs(math.log(event_period_us / s)))
    rate = event_period_us / spacing
    if not (1.0 / max_rate_ratio <= rate <= max_rate_ratio):
        return None
    if abs(rate - 1.0) < _RATE_SNAP:
        rate = 1.0
    return rate, spacing


class _WarpController:
    """Monotonic warp: constant playback rate plus slewed phase displacement.

    Output time t samples the source at s(t); s advances by rate * dt plus
    a phase step bounded by max_warp_slew * dt, so the warp cannot reverse
    (rate >= 1/max_rate_ratio > slew) and the phase displacement converges
    to its target without visible jumps.
    """

    def __init__(self, slew: float, start_us: float):
        self.slew = slew
        self.rate = 1.0
        self.t_prev = float(start_us)
        self.source_prev = float(start_us)
        self.phase_applied = 0.0
        self.phase_target = 0.0

    def advance(self, t_us: float) -> float:
        dt = t_us - self.t_prev
        limit = self.slew * dt
        want = self.phase_target - self.phase_applied
        step = min(max(want, -limit), limit)
        self.phase_applied += step
        self.source_prev = self.source_prev + self.rate * dt + step
        self.t_prev = t_us
        return self.source_prev


def _signed_mod(x: float, period: float) -> float:
    """Fold x into [-period/2, period/2)."""
    return (x + period / 2.0) % period - period / 2.0


def _phase_misalignment(
    controller: _WarpController,
    estimate: PeriodEstimate,
    phase_reference_us: float,
    grid: BeatGrid,
    rate: float,
    event_spacing_us: float,
) -> float:
    """Phase-displacement increment that puts upcoming extrema on the grid.

    The nearest-beat rule: extrema are aligned to the closest point of the
    beat grid (or its subdivision grid when extrema are faster than beats),
    so the correction never exceeds half a beat period in either direction.
    """
    omega = _TWO_PI / estimate.period_us  # radians per source microsecond
    s_now = controller.source_prev
    # Source-time of the extremum (model phase = multiple of pi) nearest the
    # current source cursor.
    k = round((omega * (s_now - phase_reference_us) + estimate.phase_rad) / math.pi)
    s_event = phase_reference_us + (k * math.pi - estimate.phase_rad) / omega
    # Where that extremum will land on the output timeline once the phase
    # displacement already in flight has finished slewing in.
    pending = controller.phase_target - controller.phase_applied
    t_event = controller.t_prev + (s_event - s_now - pending) / rate
    target_spacing = min(grid.beat_period_us, event_spacing_us)
    d = _signed_mod(t_event - grid.phase_offset_us, target_spacing)
    if abs(d) < _PHASE_SNAP_US:
        return 0.0
    return d * rate


class _SourceSampler:
    """Resample a frame sequence at warped, strictly increasing times."""

    def __init__(self, frames: Sequence[PoseFrame]):
        self.frames = frames
        self.ts = np.array([f.timestamp_us for f in frames], dtype=np.float64)
        self.idx = 0

    def sample(self, s_us: float, out_timestamp_us: int) -> PoseFrame:
        ts = self.ts
        n = len(ts)
        if s_us <= ts[0]:
            src = self.frames[0]
            return PoseFrame(out_timestamp_us, src.root_translation, src.rotations)
        if s_us >= ts[-1]:
            # Past the end of the source: hold the last pose.
            src = self.frames[-1]
            return PoseFrame(out_timestamp_us, src.root_translation, src.rotations)
        i = self.idx
        while i + 1 < n and ts[i + 1] < s_us:
            i += 1
        while i > 0 and ts[i] > s_us:
            i -= 1
        self.idx = i
        a, b = self.frames[i], self.frames[i + 1]
        u = (s_us - ts[i]) / (ts[i + 1] - ts[i])
        if u <= 0.0:
            return PoseFrame(out_timestamp_us, a.root_translation, a.rotations)
        if u >= 1.0:
            return PoseFrame(out_timestamp_us, b.root_translation, b.rotations)
        rot = rows_slerp(a.rotation_array(), b.rotation_array(), float(u))
        ra = np.asarray(a.root_translation)
        rb = np.asarray(b.root_translation)
        root = tuple((ra + (rb - ra) * u).tolist())
        return PoseFrame.from_array(out_timestamp_us, root, rot)


def beat_align_remap(
    stream: Sequence[PoseFrame],
    detected: PeriodEstimate,
    grid: BeatGrid,
    params: CorrectiveParams,
    *,
    phase_reference_us: int | None = None,
) -> RemapResult:
    """Re-time a stream so detected motion extrema land on the beat grid.

    `detected.phase_rad` is referenced to `phase_reference_us` (defaults to
    the first frame's timestamp). Output frames keep the original uniform
    timeline; content is sampled at the warped time by spherical-linear
    interpolation between the bracketing source frames. On a tempo mismatch
    beyond max_rate_ratio the stream passes through unchanged and the
    result is flagged.
    """
    frames = list(stream)
    if len(frames) < 2:
        return RemapResult(frames, False, "stream too short", 1.0, None, 0.0, [])
    t0 = frames[0].timestamp_us
    ref = float(t0 if phase_reference_us is None else phase_reference_us)

    match = _match_tempo(detected.period_us / 2.0, grid.beat_period_us, params.max_rate_ratio)
    if match is None:
        return RemapResult(frames, False, "tempo mismatch", 1.0, None, 0.0, [])
    rate, spacing = match

    slew_per_us = params.max_warp_slew  # dimensionless: us of warp per us
    controller = _WarpController(slew_per_us, t0)
    controller.rate = rate
    controller.phase_target = _phase_misalignment(
        controller, detected, ref, grid, rate, spacing
    )

    if rate == 1.0 and controller.phase_target == 0.0:
        # Already aligned: bit-stable pass-through.
        warp = [
            WarpSample(f.timestamp_us, float(f.timestamp_us), 0.0, 0.0) for f in frames
        ]
        return RemapResult(list(frames), True, None, 1.0, spacing, 0.0, warp)

    sampler = _SourceSampler(frames)
    out: list[PoseFrame] = []
    warp: list[WarpSample] = []
    for i, frame in enumerate(frames):
        t = frame.timestamp_us
        s = controller.advance(t) if i else controller.source_prev
        out.append(sampler.sample(s, t))
        warp.append(WarpSample(t, s, controller.phase_applied, controller.phase_target))
    return RemapResult(
        out, True, None, rate, spacing, controller.phase_target, warp
    )


# ---------------------------------------------------------------------------
# Zone amplification
# ---------------------------------------------------------------------------

def amplify_zones(
    stream: Sequence[PoseFrame],
    skeleton: Skeleton,
    params: CorrectiveParams,
    reference_window: int,
) -> list[PoseFrame]:
    """Exaggerate (or mute) motion per body zone.

    Each joint's output rotation is scale_rotation(reference, input, gain)
    where the reference is the geodesic mean over the trailing
    `reference_window` frames; the root translation's deviation from its
    rolling mean is scaled by the hips gain. Frames before the window fills
    pass through unchanged. Zones with gain exactly 1.0 are left untouched
    byte-for-byte.
    """
    if reference_window < 1:
        raise ValueError("reference_window must be >= 1")
    frames = list(stream)
    n = len(frames)
    joint_gain = [params.gain_for(skeleton.zone_of(j)) for j in range(skeleton.joint_count)]
    active = [j for j, g in enumerate(joint_gain) if g != 1.0]
    hips_gain = params.gain_for(BodyZone.HIPS)
    if not active and hips_gain == 1.0:
        return frames
    if n < reference_window:
        return frames

    rotations = np.stack([f.rotation_array() for f in frames])  # (n, J, 4)
    roots = np.array([f.root_translation for f in frames], dtype=np.float64)
    out_rot = rotations.copy()
    out_roots = roots.copy()
    first = reference_window - 1

    for j in active:
        gain = joint_gain[j]
        track = rotations[:, j, :]
        reference: np.ndarray | None = None
        for i in range(first, n):
            window = track[i - first:i + 1]
            reference = karcher_mean_rows(window, tolerance=1e-9, init=reference)
            out_rot[i, j] = scale_rotation(
                UnitQuaternion(*reference), UnitQuaternion(*track[i]), gain
            )

    if hips_gain != 1.0:
        csum = np.cumsum(roots, axis=0)
        for i in range(first, n):
            lo = i - first
            window_sum = csum[i] - (csum[lo - 1] if lo > 0 else 0.0)
            mean = window_sum / reference_window
            out_roots[i] = mean + hips_gain * (roots[i] - mean)

    out = frames[:first]
    for i in range(first, n):
        out.append(PoseFrame.from_array(frames[i].timestamp_us, out_roots[i], out_rot[i]))
    return out


# ---------------------------------------------------------------------------
# Windowed causal pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineResult:
    frames: list[PoseFrame]
    applied: bool
    reason: str | None
    estimates: list[tuple[int, PeriodEstimate | None]]  # (window end index, fused estimate)
    rate: float
    warp: list[WarpSample]

    @property
    def detected(self) -> PeriodEstimate | None:
        for _, est in self.estimates:
            if est is not None:
                return est
        return None

    def convergence_us(self) -> int | None:
        """Output time at which the initial phase correction has landed.

        Later re-estimates nudge the target by a few milliseconds per hop;
        those stay well inside alignment tolerance and do not reset this.
        """
        if not self.applied or not self.warp:
            return None
        seen_target = False
        for sample in self.warp:
            if sample.target_us != 0.0:
                seen_target = True
            if seen_target and abs(sample.phase_us - sample.target_us) <= _PHASE_SNAP_US:
                return sample.t_us
        if not seen_target:
            return self.warp[0].t_us
        return None


def run_corrective_pipeline(
    stream: Sequence[PoseFrame],
    skeleton: Skeleton,
    grid: BeatGrid,
    params: CorrectiveParams,
    *,
    joints: Sequence[int] | None = None,
) -> PipelineResult:
    """Causal windowed beat alignment over a whole stream.

    Detection re-runs every half window on the trailing window_frames
    frames, exactly as a live pipeline would see them; each fused estimate
    retargets the warp controller, which then slews toward the new phase
    target. Frame content is drawn from the stream by interpolation at the
    warped times.
    """
    frames = list(stream)
    n = len(frames)
    window = params.window_frames
    if n < window:
        return PipelineResult(frames, False, "stream shorter than analysis window", [], 1.0, [])
    if joints is None:
        joints = range(skeleton.joint_count)

    hop = window // 2
    estimates: list[tuple[int, PeriodEstimate | None]] = []
    for end in range(window, n + 1, hop):
        chunk = frames[end - window:end]
        per_joint: list[PeriodEstimate] = []
        for j in joints:
            best: PeriodEstimate | None = None
            for component in ("x", "y", "z"):
                series = extract_feature_series(chunk, j, component)
                est = detect_dominant_period(series, params.detection_threshold)
                if est is not None and (best is None or est.energy_ratio > best.energy_ratio):
                    best = est
            if best is not None:
                per_joint.append(best)
        estimates.append((end, aggregate_joint_period(per_joint, params.detection_threshold)))

    if all(est is None for _, est in estimates):
        return PipelineResult(frames, False, "no dominant period", estimates, 1.0, [])

    controller = _WarpController(params.max_warp_slew, frames[0].timestamp_us)
    sampler = _SourceSampler(frames)
    out: list[PoseFrame] = []
    warp: list[WarpSample] = []
    pending = list(estimates)
    rate_used = 1.0
    mismatch = True
    for i, frame in enumerate(frames):
        t = frame.timestamp_us
        while pending and pending[0][0] <= i:
            end, est = pending.pop(0)
            if est is None:
                continue
            match = _match_tempo(
                est.period_us / 2.0, grid.beat_period_us, params.max_rate_ratio
            )
            if match is None:
                continue
            mismatch = False
            rate, spacing = match
            controller.rate = rate
            rate_used = rate
            window_start_us = frames[end - window].timestamp_us
            controller.phase_target += _phase_misalignment(
                controller, est, window_start_us, grid, rate, spacing
            )
        s = controller.advance(t) if i else controller.source_prev
        out.append(sampler.sample(s, t))
        warp.append(WarpSample(t, s, controller.phase_applied, controller.phase_target))

    if mismatch:
        return PipelineResult(frames, False, "tempo mismatch", estimates, 1.0, [])
    return PipelineResult(out, True, None, estimates, rate_used, warp)
