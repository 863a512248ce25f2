"""In-process signal manager connecting producers to consumers.

One exclusive publisher per stream, any number of polling consumers. Each
stream owns a preallocated ring of packet slots: publishing copies payload
bytes into a slot and never allocates; consumers copy out and re-check the
slot's publish counter afterwards, accepting a rare re-read when the ring
wraps mid-copy. Overwrite drops the oldest entries (a stale pose is worth
less than a fresh one), and Every-mode polls report how many entries were
lost that way.

Registration and subscription take a coarse lock; publish and poll run
lock-free against the published counter.
"""
from __future__ import annotations

import threading
from array import array
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .packet import MAX_PAYLOAD, SignalPacket, SignalType

__all__ = [
    "Origin",
    "SignalType",
    "SignalDescriptor",
    "SignalSelector",
    "Mode",
    "StreamConflictError",
    "SequenceError",
    "SignalRouter",
    "ProducerHandle",
    "ConsumerHandle",
    "Polled",
]

_MIN_CAPACITY = 2
_MAX_CAPACITY = 4096


class Origin(Enum):
    LOCAL = "local"
    NETWORK = "network"


class Mode(Enum):
    EVERY = "every"
    LATEST_WINS = "latest_wins"


class SignalDescriptor(NamedTuple):
    signal_type: SignalType
    user_id: int
    origin: Origin


class SignalSelector(NamedTuple):
    """Stream pattern: signal type is concrete, user and origin may be None
    to match any."""

    signal_type: SignalType
    user_id: int | None = None
    origin: Origin | None = None

    def matches(self, desc: SignalDescriptor) -> bool:
        if desc.signal_type is not self.signal_type:
            return False
        if self.user_id is not None and desc.user_id != self.user_id:
            return False
        if self.origin is not None and desc.origin is not self.origin:
            return False
        return True


class StreamConflictError(RuntimeError):
    """A producer is already registered for this descriptor."""


class SequenceError(RuntimeError):
    """Publish with a sequence number not greater than the previous one."""


class Polled(NamedTuple):
    packets: list[SignalPacket]
    lost: int


@dataclass
class StreamStats:
    published: int = 0
    ordering_errors: int = 0


class _Stream:
    """One descriptor's ring. Slots are preallocated at registration."""

    __slots__ = (
        "desc", "capacity", "mask", "max_payload", "slab", "lengths",
        "seqs", "send_ts", "recv_ts", "tags", "pub_count", "last_seq",
        "consumers", "stats", "metadata", "closed",
    )

    def __init__(self, desc: SignalDescriptor, capacity: int, max_payload: int, metadata):
        self.desc = desc
        self.capacity = capacity
        self.mask = capacity - 1
        self.max_payload = max_payload
        self.slab = bytearray(capacity * max_payload)
        self.lengths = array("i", [0]) * capacity
        self.seqs = array("Q", [0]) * capacity
        self.send_ts = array("Q", [0]) * capacity
        self.recv_ts = array("q", [-1]) * capacity
        self.tags = array("q", [-1]) * capacity
        self.pub_count = 0
        self.last_seq = 0
        self.consumers: list["_Cursor"] = []
        self.stats = StreamStats()
        self.metadata = metadata
        self.closed = False

    def publish(self, packet: SignalPacket) -> int:
        if packet.seq <= self.last_seq:
            self.stats.ordering_errors += 1
            raise SequenceError(
                f"sequence {packet.seq} not greater than {self.last_seq} on {self.desc}"
            )
        payload = packet.payload
        n = len(payload)
        if n > self.max_payload:
            raise ValueError(f"payload {n} exceeds stream slot size {self.max_payload}")
        count = self.pub_count
        idx = count & self.mask
        off = idx * self.max_payload
        self.tags[idx] = -1  # mark in-progress before touching slot data
        self.slab[off:off + n] = payload
        self.lengths[idx] = n
        self.seqs[idx] = packet.seq
        self.send_ts[idx] = packet.send_timestamp_us
        self.recv_ts[idx] = -1 if packet.recv_timestamp_us is None else packet.recv_timestamp_us
        self.tags[idx] = count
        self.pub_count = count + 1  # release: consumers read this last value
        self.last_seq = packet.seq
        self.stats.published += 1
        return len(self.consumers)

    def read_slot(self, count: int) -> SignalPacket | None:
        """Copy out entry `count`; None if it was overwritten during the copy."""
        idx = count & self.mask
        off = idx * self.max_payload
        n = self.lengths[idx]
        payload = bytes(self.slab[off:off + n])
        seq = self.seqs[idx]
        send_ts = self.send_ts[idx]
        recv_ts = self.recv_ts[idx]
        if self.tags[idx] != count:
            return None  # wrapped while reading
        return SignalPacket(
            signal_type=self.desc.signal_type,
            user_id=self.desc.user_id,
            seq=seq,
            send_timestamp_us=send_ts,
            payload=payload,
            recv_timestamp_us=None if recv_ts < 0 else recv_ts,
            origin=self.desc.origin,
        )


class _Cursor:
    __slots__ = ("stream", "next_count")

    def __init__(self, stream: _Stream, next_count: int):
        self.stream = stream
        self.next_count = next_count


class ProducerHandle:
    """Exclusive publish rights for one stream."""

    def __init__(self, router: "SignalRouter", stream: _Stream):
        self._router = router
        self._stream = stream

    @property
    def descriptor(self) -> SignalDescriptor:
        return self._stream.desc

    @property
    def stats(self) -> StreamStats:
        return self._stream.stats

    def publish(self, packet: SignalPacket) -> int:
        """Copy the packet into the ring; returns the consumer count."""
        if self._stream.closed:
            raise StreamConflictError(f"stream {self._stream.desc} is closed")
        return self._stream.publish(packet)

    def close(self) -> None:
        """Unregister the stream; a later re-register starts a fresh ring."""
        self._router._unregister(self._stream)


class ConsumerHandle:
    """Cursors over every stream matching a selector, including streams
    registered after the subscription was made."""

    def __init__(self, router: "SignalRouter", selector: SignalSelector, mode: Mode):
        self._router = router
        self.selector = selector
        self.mode = mode
        self._cursors: list[_Cursor] = []
        self.lost_total = 0

    @property
    def attached(self) -> list[SignalDescriptor]:
        return [c.stream.desc for c in self._cursors if not c.stream.closed]

    def _attach(self, stream: _Stream) -> None:
        cursor = _Cursor(stream, stream.pub_count)
        # copy-on-write so in-flight polls see a consistent list
        self._cursors = self._cursors + [cursor]
        stream.consumers.append(cursor)

    def poll(self, max_packets: int = 64) -> Polled:
        """Drain pending packets.

        Every mode returns up to `max_packets` in publish order per stream
        plus the count of packets lost to ring overwrite. Latest-wins
        returns at most the newest unread packet per attached stream; the
        entries it skipped are reported in the same counter.
        """
        if max_packets < 1:
            raise ValueError("max_packets must be >= 1")
        packets: list[SignalPacket] = []
        lost = 0
        for cursor in self._cursors:
            stream = cursor.stream
            if stream.closed:
                continue
            end = stream.pub_count
            if end <= cursor.next_count:
                continue
            if self.mode is Mode.LATEST_WINS:
                lost += end - 1 - cursor.next_count
                for count in range(end - 1, cursor.next_count - 1, -1):
                    pkt = stream.read_slot(count)
                    if pkt is not None:
                        packets.append(pkt)
                        break
                cursor.next_count = end
            else:
                start = max(cursor.next_count, end - stream.capacity)
                lost += start - cursor.next_count
                budget = max_packets - len(packets)
                stop = min(end, start + budget)
                count = start
                while count < stop:
                    pkt = stream.read_slot(count)
                    if pkt is None:
                        # overwritten under our feet: everything up to the
                        # writer's trailing edge is gone
                        refreshed = max(count + 1, stream.pub_count - stream.capacity)
                        lost += refreshed - count
                        count = refreshed
                        stop = min(stream.pub_count, start + budget)
                        continue
                    packets.append(pkt)
                    count += 1
                cursor.next_count = count
            if len(packets) >= max_packets:
                break
        self.lost_total += lost
        return Polled(packets, lost)


class SignalRouter:
    """Routing table tying producer streams to subscribed consumers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._streams: dict[SignalDescriptor, _Stream] = {}
        self._consumers: list[ConsumerHandle] = []

    def register_producer(
        self,
        desc: SignalDescriptor,
        capacity: int = 64,
        *,
        max_payload: int = MAX_PAYLOAD,
        metadata=None,
    ) -> ProducerHandle:
        """Create a stream and grant exclusive publish rights to the caller.

        Capacity must be a power of two in [2, 4096]; ring slots are
        preallocated here so publishing allocates nothing. `metadata` is an
        opaque blob attached to the stream; the router assigns no meaning
        to it.
        """
        if capacity < _MIN_CAPACITY or capacity > _MAX_CAPACITY or capacity & (capacity - 1):
            raise ValueError(
                f"capacity must be a power of two in [{_MIN_CAPACITY}, {_MAX_CAPACITY}], "
                f"got {capacity}"
            )
        with self._lock:
            if desc in self._streams:
                raise StreamConflictError(f"producer already registered for {desc}")
            stream = _Stream(desc, capacity, max_payload, metadata)
            self._streams[desc] = stream
            for consumer in self._consumers:
                if consumer.selector.matches(desc):
                    consumer._attach(stream)
            return ProducerHandle(self, stream)

    def subscribe(self, selector: SignalSelector, mode: Mode = Mode.EVERY) -> ConsumerHandle:
        """Attach to every current and future stream matching the selector.

        The consumer sees packets published after this call.
        """
        with self._lock:
            handle = ConsumerHandle(self, selector, mode)
            for desc, stream in self._streams.items():
                if selector.matches(desc):
                    handle._attach(stream)
            self._consumers.append(handle)
            return handle

    def unsubscribe(self, handle: ConsumerHandle) -> None:
        with self._lock:
            if handle in self._consumers:
                self._consumers.remove(handle)
            for cursor in handle._cursors:
                if cursor in cursor.stream.consumers:
                    cursor.stream.consumers.remove(cursor)
            handle._cursors = []

    def _unregister(self, stream: _Stream) -> None:
        with self._lock:
            stream.closed = True
            existing = self._streams.get(stream.desc)
            if existing is stream:
                del self._streams[stream.desc]

    def streams(self) -> list[SignalDescriptor]:
        with self._lock:
            return list(self._streams.keys())

    def stream_metadata(self, desc: SignalDescriptor):
        with self._lock:
            return self._streams[desc].metadata

    def stream_stats(self, desc: SignalDescriptor) -> StreamStats:
        with self._lock:
            return self._streams[desc].stats
