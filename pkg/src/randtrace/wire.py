"""Probe header encoding and ICMP quotation decoding.

Per-probe state rides in the probe itself:

* IP-ID      low octet = originating TTL, high octet = 0
* TCP seq    elapsed time since run start (ms or us)
* TCP sport  ones'-complement checksum of the destination address
* TCP dport  80

Every field a per-flow load balancer hashes on (dst, proto, sport, dport)
is therefore a function of the destination alone.
"""
from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

DPORT = 80
PROTO_ICMP = 1
PROTO_TCP = 6
MIN_QUOTE = 28

TCP_FIN, TCP_SYN, TCP_RST, TCP_PSH, TCP_ACK = 0x01, 0x02, 0x04, 0x08, 0x10

ICMP_UNREACH = 3
ICMP_TIME_EXCEEDED = 11

_IP = struct.Struct("!BBHHHBBHII")
_TCP = struct.Struct("!HHIIBBHHH")


class UndecodableReply(ValueError):
    """Reply too short or malformed to recover probe state."""


class ForeignPacket(UndecodableReply):
    """Well-formed reply that does not quote one of our probes."""


class TimeUnit(str, enum.Enum):
    MS = "ms"
    US = "us"

    @property
    def scale(self) -> int:
        return 1000 if self is TimeUnit.MS else 1_000_000


def to_ticks(seconds: float, unit: TimeUnit) -> int:
    return int(round(seconds * unit.scale))


def ip_str(addr: int) -> str:
    return str(ipaddress.IPv4Address(addr))


def ip_int(addr) -> int:
    return addr if isinstance(addr, int) else int(ipaddress.IPv4Address(addr))


def inet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    s = sum(struct.unpack("!%dH" % (len(data) // 2), data))
    while s >> 16:
        s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


def addr_checksum(addr) -> int:
    """Internet checksum of the four address octets as two 16-bit words."""
    a = ip_int(addr)
    s = (a >> 16) + (a & 0xFFFF)
    s = (s & 0xFFFF) + (s >> 16)
    return ~s & 0xFFFF


@dataclass(frozen=True)
class ProbeDescriptor:
    target: int
    ttl: int
    elapsed: int
    mode: str = "tcp_ack"
    dscp: int = 0

    def __post_init__(self):
        if not 1 <= self.ttl <= 255:
            raise ValueError("ttl must be in [1, 255], got %d" % self.ttl)
        if not 0 <= self.elapsed < 1 << 32:
            raise ValueError("elapsed stamp does not fit in 32 bits")
        if self.mode not in ("tcp_ack", "tcp_syn"):
            raise ValueError("unknown probe mode %r" % self.mode)
        if not 0 <= self.dscp < 64:
            raise ValueError("dscp is a 6-bit field")


@dataclass(frozen=True)
class EncodedProbe:
    ip_ttl: int
    ip_id: int
    ip_dst: int
    tcp_sport: int
    tcp_dport: int
    tcp_seq: int
    tcp_flags: int
    dscp: int = 0

    def flow_tuple(self) -> tuple[int, int, int, int]:
        return (self.ip_dst, PROTO_TCP, self.tcp_sport, self.tcp_dport)

    def to_bytes(self, src: int) -> bytes:
        return _build_packet(src, self.ip_dst, self.ip_ttl, self.ip_id, self.dscp,
                             self.tcp_sport, self.tcp_dport, self.tcp_seq, 0, self.tcp_flags)


def encode_probe(d: ProbeDescriptor) -> EncodedProbe:
    return EncodedProbe(
        ip_ttl=d.ttl,
        ip_id=d.ttl & 0xFF,
        ip_dst=d.target,
        tcp_sport=addr_checksum(d.target),
        tcp_dport=DPORT,
        tcp_seq=d.elapsed,
        tcp_flags=TCP_SYN if d.mode == "tcp_syn" else TCP_ACK,
        dscp=d.dscp,
    )


def _build_packet(src, dst, ttl, ipid, dscp, sport, dport, seq, ack, flags, window=65535) -> bytes:
    tcp = _TCP.pack(sport, dport, seq, ack, 5 << 4, flags, window, 0, 0)
    pseudo = struct.pack("!IIBBH", src, dst, 0, PROTO_TCP, len(tcp))
    tcp = tcp[:16] + struct.pack("!H", inet_checksum(pseudo + tcp)) + tcp[18:]
    ip = _IP.pack(0x45, dscp << 2, 20 + len(tcp), ipid, 0, ttl, PROTO_TCP, 0, src, dst)
    ip = ip[:10] + struct.pack("!H", inet_checksum(ip)) + ip[12:]
    return ip + tcp


def probe_packet(d: ProbeDescriptor, src: int) -> bytes:
    """Complete IPv4+TCP probe with valid IP and TCP checksums."""
    return encode_probe(d).to_bytes(src)


def raw_probe(src: int, target: int, ttl: int, elapsed: int, flags: int = TCP_ACK, dscp: int = 0) -> bytes:
    """Same bytes as ``probe_packet`` without building intermediate objects (hot path)."""
    return _build_packet(src, target, ttl, ttl & 0xFF, dscp, addr_checksum(target), DPORT,
                         elapsed & 0xFFFFFFFF, 0, flags)


class IPv4Header(NamedTuple):
    ihl: int
    tos: int
    total_len: int
    ipid: int
    ttl: int
    proto: int
    src: int
    dst: int


def parse_ipv4(packet: bytes) -> IPv4Header:
    if len(packet) < 20:
        raise UndecodableReply("IPv4 header truncated")
    vihl, tos, tlen, ipid, _frag, ttl, proto, _ck, src, dst = _IP.unpack_from(packet)
    if vihl >> 4 != 4:
        raise UndecodableReply("not an IPv4 packet")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20 or len(packet) < ihl:
        raise UndecodableReply("bad IPv4 header length")
    return IPv4Header(ihl, tos, tlen, ipid, ttl, proto, src, dst)


class TCPHeader(NamedTuple):
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int


def parse_tcp(segment: bytes) -> TCPHeader:
    if len(segment) < 14:
        raise UndecodableReply("TCP header truncated")
    sport, dport, seq, ack, _off, flags = struct.unpack_from("!HHIIBB", segment)
    return TCPHeader(sport, dport, seq, ack, flags)


def flow_tuple(packet: bytes) -> tuple[int, int, int, int, int]:
    """(src, dst, proto, sport, dport) as hashed by per-flow balancers."""
    ip = parse_ipv4(packet)
    sport, dport = struct.unpack_from("!HH", packet, ip.ihl)
    return (ip.src, ip.dst, ip.proto, sport, dport)


class ReplyMeta(NamedTuple):
    reply_ttl: int = 0
    reply_size: int = 0
    dscp: int = 0


RESPONSE_TYPES = ("ttl_exceeded", "dest_unreachable", "echo_of_target", "tcp_reply")


@dataclass(slots=True)
class ResponseRecord:
    target: int
    sent_ttl: int
    hop_addr: int
    rtt: Optional[int]
    recv_time: float
    response_type: str
    reply_ttl: int = 0
    quoted_ipid: int = 0
    quoted_size: int = 0
    reply_size: int = 0
    dscp: int = 0
    checksum_valid: bool = True


def decode_quote(icmp_payload: bytes, recv_time: float, run_start: float, outer_src: int,
                 icmp_type_code: tuple[int, int], reply_meta: ReplyMeta = ReplyMeta(),
                 unit: TimeUnit = TimeUnit.MS) -> ResponseRecord:
    """Recover probe state from the quotation carried by an ICMP error.

    ``icmp_payload`` starts at the quoted IPv4 header (the octets following
    the 8-octet ICMP header).  ``quoted_size`` on the result is the number of
    quoted octets the router returned.
    """
    n = len(icmp_payload)
    if n < MIN_QUOTE:
        raise UndecodableReply("quotation of %d octets, need %d" % (n, MIN_QUOTE))
    vihl = icmp_payload[0]
    if vihl >> 4 != 4:
        raise UndecodableReply("quoted packet is not IPv4")
    ihl = (vihl & 0x0F) * 4
    if ihl < 20:
        raise UndecodableReply("quoted IHL below minimum")
    if n < ihl + 8:
        raise UndecodableReply("quotation too short for IHL %d" % ihl)
    _, _, _, ipid, _, _, proto, _, _, dst = _IP.unpack_from(icmp_payload)
    if proto != PROTO_TCP:
        raise ForeignPacket("quoted protocol %d is not TCP" % proto)
    sport, dport, seq = struct.unpack_from("!HHI", icmp_payload, ihl)
    if dport != DPORT:
        raise ForeignPacket("quoted destination port %d" % dport)
    sent_ttl = ipid & 0xFF
    if sent_ttl == 0:
        raise UndecodableReply("quoted IP-ID carries TTL 0")
    itype, _code = icmp_type_code
    if itype == ICMP_TIME_EXCEEDED:
        rtype = "ttl_exceeded"
    elif itype == ICMP_UNREACH:
        rtype = "dest_unreachable"
    else:
        raise UndecodableReply("unsupported ICMP type %d" % itype)
    if outer_src == dst:
        rtype = "echo_of_target"
    now = to_ticks(recv_time - run_start, unit)
    return ResponseRecord(
        target=dst,
        sent_ttl=sent_ttl,
        hop_addr=outer_src,
        rtt=(now - seq) & 0xFFFFFFFF,
        recv_time=recv_time,
        response_type=rtype,
        reply_ttl=reply_meta.reply_ttl,
        quoted_ipid=ipid,
        quoted_size=n,
        reply_size=reply_meta.reply_size,
        dscp=reply_meta.dscp,
        checksum_valid=addr_checksum(dst) == sport,
    )


def decode_reply(packet: bytes, recv_time: float, run_start: float, outer_src: Optional[int] = None,
                 unit: TimeUnit = TimeUnit.MS, mode: str = "tcp_ack") -> ResponseRecord:
    """Decode a captured IPv4 reply (ICMP error or TCP answer from a target)."""
    ip = parse_ipv4(packet)
    src = ip.src if outer_src is None else outer_src
    meta = ReplyMeta(ip.ttl, ip.total_len or len(packet), ip.tos >> 2)
    body = packet[ip.ihl:]
    if ip.proto == PROTO_ICMP:
        if len(body) < 8:
            raise UndecodableReply("ICMP header truncated")
        return decode_quote(body[8:], recv_time, run_start, src, (body[0], body[1]), meta, unit)
    if ip.proto == PROTO_TCP:
        tcp = parse_tcp(body)
        if tcp.sport != DPORT:
            raise ForeignPacket("TCP reply from port %d" % tcp.sport)
        rtt = None
        if mode == "tcp_syn" and tcp.flags & TCP_ACK:
            elapsed = (tcp.ack - 1) & 0xFFFFFFFF
            rtt = (to_ticks(recv_time - run_start, unit) - elapsed) & 0xFFFFFFFF
        return ResponseRecord(
            target=src, sent_ttl=0, hop_addr=src, rtt=rtt, recv_time=recv_time,
            response_type="tcp_reply", reply_ttl=meta.reply_ttl, reply_size=meta.reply_size,
            dscp=meta.dscp, checksum_valid=addr_checksum(src) == tcp.dport,
        )
    raise ForeignPacket("IP protocol %d" % ip.proto)


def build_icmp_error(quoted: bytes, router: int, vantage: int, icmp_type: int = ICMP_TIME_EXCEEDED,
                     code: int = 0, quote_len: int = MIN_QUOTE, reply_ttl: int = 64) -> bytes:
    """ICMP error from ``router`` to ``vantage`` quoting ``quoted[:quote_len]``."""
    quote = quoted[:quote_len]
    icmp = struct.pack("!BBHI", icmp_type, code, 0, 0) + quote
    icmp = icmp[:2] + struct.pack("!H", inet_checksum(icmp)) + icmp[4:]
    ip = _IP.pack(0x45, 0, 20 + len(icmp), 0, 0, reply_ttl, PROTO_ICMP, 0, router, vantage)
    ip = ip[:10] + struct.pack("!H", inet_checksum(ip)) + ip[12:]
    return ip + icmp


def build_tcp_reply(probe: bytes, reply_ttl: int = 64, isn: int = 0) -> bytes:
    """Answer a probe as its destination host would: SYN-ACK to SYN, RST to ACK."""
    ip = parse_ipv4(probe)
    tcp = parse_tcp(probe[ip.ihl:])
    if tcp.flags & TCP_SYN:
        seq, ack, flags = isn, (tcp.seq + 1) & 0xFFFFFFFF, TCP_SYN | TCP_ACK
    else:
        seq, ack, flags = tcp.ack, 0, TCP_RST
    return _build_packet(ip.dst, ip.src, reply_ttl, 0, 0, tcp.dport, tcp.sport, seq, ack, flags, window=0)
