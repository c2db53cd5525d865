"""Raw-socket transport for live probing (Linux).

Probes go out through a header-included raw IPv4 socket exactly as encoded.
Replies are read from raw ICMP and TCP sockets, filtered in userspace to
ICMP time-exceeded / unreachable messages quoting a TCP packet to port 80,
and TCP segments from port 80 (RST or SYN-ACK).  Kernel receive timestamps
(SO_TIMESTAMPNS) are used when the platform provides them.

Needs root or CAP_NET_RAW.  Never exercised against the live Internet in CI.
"""
from __future__ import annotations

import errno
import select
import socket
import struct
import sys
import time
from dataclasses import dataclass
from typing import Iterator, Optional

from . import wire
from .clock import WallClock
from .engine import TransportError

SO_TIMESTAMPNS = getattr(socket, "SO_TIMESTAMPNS", 35)
_UNREACHABLE = (errno.ENETUNREACH, errno.EHOSTUNREACH)


class RawNetError(TransportError):
    pass


@dataclass
class RawTransportConfig:
    interface: Optional[str] = None
    src: Optional[int] = None
    capture_filter: str = "icmp-quote-tcp80 or tcp-from-80"


def detect_source(probe_dst: str = "198.51.100.1") -> int:
    """Local address the kernel would use to reach ``probe_dst`` (no packet is sent)."""
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        s.connect((probe_dst, 9))
        return wire.ip_int(s.getsockname()[0])
    except OSError as exc:
        raise RawNetError("cannot determine a source address: %s" % exc) from exc
    finally:
        s.close()


def accept_reply(packet: bytes, local: Optional[int] = None) -> bool:
    """Userspace capture filter for replies to our probes."""
    try:
        ip = wire.parse_ipv4(packet)
    except wire.UndecodableReply:
        return False
    if local is not None and ip.dst != local:
        return False
    body = packet[ip.ihl:]
    if ip.proto == wire.PROTO_ICMP:
        if len(body) < 8 + wire.MIN_QUOTE or body[0] not in (wire.ICMP_TIME_EXCEEDED, wire.ICMP_UNREACH):
            return False
        quote = body[8:]
        qihl = (quote[0] & 0x0F) * 4
        if quote[0] >> 4 != 4 or qihl < 20 or len(quote) < qihl + 4 or quote[9] != wire.PROTO_TCP:
            return False
        return struct.unpack_from("!H", quote, qihl + 2)[0] == wire.DPORT
    if ip.proto == wire.PROTO_TCP:
        if len(body) < 14:
            return False
        sport = struct.unpack_from("!H", body)[0]
        flags = body[13]
        return sport == wire.DPORT and bool(flags & (wire.TCP_RST | wire.TCP_SYN))
    return False


class RawTransport:
    def __init__(self, config: RawTransportConfig = None, clock=None):
        self.config = config or RawTransportConfig()
        self.clock = clock or WallClock()
        self.src = self.config.src
        self.unreachable = 0
        self._tx = None
        self._rx: list[socket.socket] = []
        # kernel stamps are wall time; the engine runs on the monotonic clock
        self._offset = time.time() - time.monotonic()
        self._last_ts = float("-inf")

    @property
    def is_open(self) -> bool:
        return self._tx is not None

    def open(self):
        if not sys.platform.startswith("linux"):
            raise RawNetError("raw transport is implemented for Linux only")
        try:
            tx = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
            rx = [socket.socket(socket.AF_INET, socket.SOCK_RAW, p) for p in (socket.IPPROTO_ICMP, socket.IPPROTO_TCP)]
        except PermissionError as exc:
            raise RawNetError("raw sockets need root or CAP_NET_RAW (%s); refusing to start" % exc) from exc
        tx.setsockopt(socket.IPPROTO_IP, socket.IP_HDRINCL, 1)
        for s in [tx] + rx:
            if self.config.interface:
                s.setsockopt(socket.SOL_SOCKET, socket.SO_BINDTODEVICE, self.config.interface.encode())
        for s in rx:
            s.setsockopt(socket.SOL_SOCKET, SO_TIMESTAMPNS, 1)
            s.setblocking(False)
        self._tx, self._rx = tx, rx
        if self.src is None:
            self.src = detect_source()

    def close(self):
        for s in [self._tx] + self._rx:
            if s is not None:
                s.close()
        self._tx, self._rx = None, []

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, *exc):
        self.close()

    def send_raw(self, packet: bytes, dst: int):
        if self._tx is None:
            raise RawNetError("send on closed raw socket")
        try:
            self._tx.sendto(packet, (wire.ip_str(dst), 0))
        except OSError as exc:
            if exc.errno in _UNREACHABLE:
                self.unreachable += 1
                return
            raise RawNetError("send failed: %s" % exc) from exc

    send = send_raw

    def _read(self, s: socket.socket):
        try:
            data, anc, _flags, addr = s.recvmsg(65535, 1024)
        except BlockingIOError:
            return None
        except OSError as exc:
            raise RawNetError("capture failed: %s" % exc) from exc
        ts = None
        for level, kind, payload in anc:
            if level == socket.SOL_SOCKET and kind == SO_TIMESTAMPNS and len(payload) >= 16:
                sec, nsec = struct.unpack("@qq", payload[:16])
                ts = sec + nsec * 1e-9 - self._offset
        if ts is None:
            ts = self.clock.now()
        return data, ts, wire.ip_int(addr[0])

    def receive(self, timeout: float = 0.0) -> list[tuple[bytes, float, int]]:
        if not self._rx:
            raise RawNetError("receive on closed raw transport")
        ready, _, _ = select.select(self._rx, [], [], max(0.0, timeout))
        out = []
        for s in ready:
            while True:
                item = self._read(s)
                if item is None:
                    break
                if accept_reply(item[0], self.src):
                    out.append(item)
        out.sort(key=lambda x: x[1])
        mono = []
        for data, ts, src in out:
            ts = max(ts, self._last_ts)
            self._last_ts = ts
            mono.append((data, ts, src))
        return mono

    def recv_replies(self, timeout: float = 0.1) -> Iterator[tuple[bytes, float, int]]:
        while self._rx:
            yield from self.receive(timeout)
