"""Batched UDP datagram syscalls (Linux sendmmsg / recvmmsg).

Relaying one pose packet to N peers costs N sendto calls, and a busy
receive loop pays one syscall per datagram; on hosts where syscalls are
expensive that dominates the whole pipeline. These wrappers batch many
datagrams into one syscall while keeping every packet its own datagram,
so nothing about the wire protocol changes. On platforms without the
calls the helpers quietly fall back to plain sendto/recv loops.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import errno
import socket
import struct

__all__ = ["batching_available", "FanoutSender", "BatchReceiver"]

_libc = None
_HAVE = False
try:
    _name = ctypes.util.find_library("c")
    if _name:
        _libc = ctypes.CDLL(_name, use_errno=True)
        _HAVE = hasattr(_libc, "sendmmsg") and hasattr(_libc, "recvmmsg")
except OSError:  # pragma: no cover - exotic platforms
    _HAVE = False


def batching_available() -> bool:
    return _HAVE


class _iovec(ctypes.Structure):
    _fields_ = [("iov_base", ctypes.c_void_p), ("iov_len", ctypes.c_size_t)]


class _msghdr(ctypes.Structure):
    _fields_ = [
        ("msg_name", ctypes.c_void_p),
        ("msg_namelen", ctypes.c_uint),
        ("msg_iov", ctypes.POINTER(_iovec)),
        ("msg_iovlen", ctypes.c_size_t),
        ("msg_control", ctypes.c_void_p),
        ("msg_controllen", ctypes.c_size_t),
        ("msg_flags", ctypes.c_int),
    ]


class _mmsghdr(ctypes.Structure):
    _fields_ = [("msg_hdr", _msghdr), ("msg_len", ctypes.c_uint)]


class _sockaddr_in(ctypes.Structure):
    _fields_ = [
        ("sin_family", ctypes.c_ushort),
        ("sin_port", ctypes.c_uint16),
        ("sin_addr", ctypes.c_uint32),
        ("sin_zero", ctypes.c_char * 8),
    ]


def _pack_sockaddr(addr: tuple[str, int]) -> _sockaddr_in:
    host, port = addr
    sa = _sockaddr_in()
    sa.sin_family = socket.AF_INET
    sa.sin_port = socket.htons(port)
    sa.sin_addr = struct.unpack("<I", socket.inet_aton(host))[0]
    return sa


class FanoutSender:
    """Send one payload to a fixed set of destinations in one syscall.

    Destination arrays are prepared once per membership change; per send
    only the shared payload buffer and its length are updated.
    """

    MAX_PAYLOAD = 2048

    def __init__(self, sock: socket.socket, destinations: list[tuple[str, int]]):
        self._sock = sock
        self._fallback = not _HAVE
        self._dests = list(destinations)
        if self._fallback:
            return
        try:
            n = len(destinations)
            self._buf = ctypes.create_string_buffer(self.MAX_PAYLOAD)
            self._iov = _iovec(ctypes.cast(self._buf, ctypes.c_void_p), 0)
            self._addrs = (_sockaddr_in * max(n, 1))()
            self._msgs = (_mmsghdr * max(n, 1))()
            for i, dest in enumerate(destinations):
                self._addrs[i] = _pack_sockaddr(dest)
                self._msgs[i].msg_hdr.msg_name = ctypes.cast(
                    ctypes.byref(self._addrs[i]), ctypes.c_void_p
                )
                self._msgs[i].msg_hdr.msg_namelen = ctypes.sizeof(_sockaddr_in)
                self._msgs[i].msg_hdr.msg_iov = ctypes.pointer(self._iov)
                self._msgs[i].msg_hdr.msg_iovlen = 1
        except OSError:
            self._fallback = True

    def send(self, data: bytes) -> int:
        """Returns the number of destinations the datagram reached."""
        n = len(self._dests)
        if n == 0:
            return 0
        if self._fallback or len(data) > self.MAX_PAYLOAD:
            sent = 0
            for dest in self._dests:
                try:
                    self._sock.sendto(data, dest)
                    sent += 1
                except OSError:
                    pass
            return sent
        size = len(data)
        ctypes.memmove(self._buf, data, size)
        self._iov.iov_len = size
        sent = _libc.sendmmsg(self._sock.fileno(), self._msgs, n, 0)
        if sent < 0:
            err = ctypes.get_errno()
            if err in (errno.EAGAIN, errno.EWOULDBLOCK, errno.ENOBUFS):
                return 0
            raise OSError(err, "sendmmsg failed")
        return sent


class BatchReceiver:
    """Drain up to `max_batch` datagrams from a nonblocking socket per syscall."""

    def __init__(self, sock: socket.socket, max_batch: int = 32, bufsize: int = 2048):
        self._sock = sock
        self._fallback = not _HAVE
        self.max_batch = max_batch
        self.bufsize = bufsize
        if self._fallback:
            return
        self._bufs = [ctypes.create_string_buffer(bufsize) for _ in range(max_batch)]
        self._iovs = (_iovec * max_batch)()
        self._msgs = (_mmsghdr * max_batch)()
        for i in range(max_batch):
            self._iovs[i].iov_base = ctypes.cast(self._bufs[i], ctypes.c_void_p)
            self._iovs[i].iov_len = bufsize
            self._msgs[i].msg_hdr.msg_iov = ctypes.pointer(self._iovs[i])
            self._msgs[i].msg_hdr.msg_iovlen = 1

    def recv_batch(self) -> list[bytes]:
        """Nonblocking: returns whatever is queued, up to max_batch packets."""
        if self._fallback:
            out = []
            for _ in range(self.max_batch):
                try:
                    out.append(self._sock.recv(self.bufsize))
                except (BlockingIOError, InterruptedError):
                    break
                except OSError:
                    break
            return out
        got = _libc.recvmmsg(self._sock.fileno(), self._msgs, self.max_batch, 0, None)
        if got < 0:
            err = ctypes.get_errno()
            if err in (errno.EAGAIN, errno.EWOULDBLOCK, errno.EINTR):
                return []
            raise OSError(err, "recvmmsg failed")
        msgs = self._msgs
        bufs = self._bufs
        return [bufs[i].raw[: msgs[i].msg_len] for i in range(got)]
