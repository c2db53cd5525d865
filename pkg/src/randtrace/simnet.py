"""Deterministic simulated network used as ground truth.

A topology is a set of routers plus, per destination, a route: an ordered
sequence of hop groups.  A group with one member is an ordinary router; a
group with several members is the far side of a per-flow load balancer
(the router before it, or the vantage point for the first group), which
picks a member by hashing the flow tuple.

Text format (``#`` comments allowed)::

    topology vantage=<addr> seed=<int> hop_latency=<s> jitter=<s> quote_len=<n> burst=<tokens>
    router <id> <addr>[,<addr>...] responds=<0|1> rate=<replies/s> loss=<prob>
    route <dest> <group> <group> ...        group := <id>[|<id>...]
    default <group> ...                     route taken by unknown destinations

Ground-truth files hold one ``<dest> <hop1> <hop2> ...`` line per
destination (router interface addresses for TTL 1..path length).
"""
from __future__ import annotations

import heapq
import ipaddress
import random
import struct
import zlib
from dataclasses import dataclass
from typing import Optional

from . import wire
from .clock import VirtualClock

_HDR = struct.Struct("!BBHHHBBHII")


class TopologyError(ValueError):
    pass


@dataclass
class Router:
    rid: int
    addrs: tuple[int, ...]
    responds: bool = True
    rate_limit: float = 0.0
    loss_prob: float = 0.0

    @property
    def addr(self) -> int:
        return self.addrs[0]


@dataclass
class SimTopology:
    routers: dict[int, Router]
    routes: dict[int, tuple[tuple[int, ...], ...]]
    vantage: int = int(ipaddress.IPv4Address("192.0.2.1"))
    seed: int = 0
    hop_latency: float = 0.001
    jitter: float = 0.0
    quote_len: int = wire.MIN_QUOTE
    burst: float = 1.0
    default_route: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        for dest, route in self.routes.items():
            self._check_route(route, wire.ip_str(dest))
        self._check_route(self.default_route, "default")

    def _check_route(self, route, name):
        seen = set()
        for group in route:
            if not group:
                raise TopologyError("empty hop group on route %s" % name)
            for rid in group:
                if rid not in self.routers:
                    raise TopologyError("route %s references unknown router %d" % (name, rid))
                if rid in seen:
                    raise TopologyError("forwarding loop on route %s at router %d" % (name, rid))
                seen.add(rid)

    @property
    def destinations(self) -> list[int]:
        return sorted(self.routes)

    @property
    def balancers(self) -> set[int]:
        """Routers (0 = vantage) that split traffic across a multi-member group."""
        out = set()
        for route in list(self.routes.values()) + [self.default_route]:
            for k, group in enumerate(route):
                if len(group) > 1:
                    out.update(route[k - 1] if k else (0,))
        return out

    def links(self) -> dict[int, set[int]]:
        """Directed adjacency router -> possible next-hop routers (0 = vantage)."""
        adj: dict[int, set[int]] = {}
        for route in list(self.routes.values()) + [self.default_route]:
            prev: tuple[int, ...] = (0,)
            for group in route:
                for p in prev:
                    adj.setdefault(p, set()).update(group)
                prev = group
        return adj

    def _pick(self, group, prev_rid, flow) -> int:
        if len(group) == 1:
            return group[0]
        h = zlib.crc32(struct.pack("!iiIIBHH", self.seed, prev_rid, *flow))
        return group[h % len(group)]

    def path(self, dest: int, flow: Optional[tuple] = None) -> list[int]:
        """Router ids a packet of ``flow`` toward ``dest`` traverses."""
        route = self.routes.get(dest, self.default_route)
        if flow is None:
            flow = self.probe_flow(dest)
        out = []
        prev = 0
        for group in route:
            prev = self._pick(group, prev, flow)
            out.append(prev)
        return out

    def probe_flow(self, dest: int) -> tuple[int, int, int, int, int]:
        return (self.vantage, dest, wire.PROTO_TCP, wire.addr_checksum(dest), wire.DPORT)

    def ground_truth(self, dest: int) -> "GroundTruthPath":
        return GroundTruthPath(dest, tuple(self.routers[r].addr for r in self.path(dest)))

    def ground_truths(self) -> dict[int, "GroundTruthPath"]:
        return {d: self.ground_truth(d) for d in self.destinations}


@dataclass(frozen=True)
class GroundTruthPath:
    destination: int
    hops: tuple[int, ...]


class SimNetwork:
    """Forwarding, expiry, rate limiting and loss over a SimTopology."""

    def __init__(self, topo: SimTopology, record_arrivals: bool = False):
        self.topo = topo
        self.rng = random.Random(topo.seed)
        self._tokens = {rid: topo.burst for rid, r in topo.routers.items() if r.rate_limit > 0}
        self._refill = dict.fromkeys(self._tokens, None)
        self.record_arrivals = record_arrivals
        self.arrivals: dict[int, list[float]] = {}
        self.injected = 0
        self._path_cache: dict[tuple, list[int]] = {}

    def _allow(self, router: Router, t: float) -> bool:
        rid = router.rid
        last = self._refill[rid]
        tokens = self._tokens[rid]
        if last is not None:
            tokens = min(self.topo.burst, tokens + max(0.0, t - last) * router.rate_limit)
        self._refill[rid] = t
        if tokens >= 1.0:
            self._tokens[rid] = tokens - 1.0
            return True
        self._tokens[rid] = tokens
        return False

    def inject(self, packet: bytes, now: float = 0.0) -> Optional[tuple[bytes, float, int]]:
        """Route one probe sent at ``now``; returns (reply, delay, outer source) or None."""
        self.injected += 1
        topo = self.topo
        vihl, _tos, _tlen, _ipid, _frag, ttl, proto, _ck, src, dst = _HDR.unpack_from(packet)
        ihl = (vihl & 0x0F) * 4
        if proto != wire.PROTO_TCP or ttl == 0:
            return None
        sport, dport = struct.unpack_from("!HH", packet, ihl)
        flow = (src, dst, proto, sport, dport)
        path = self._path_cache.get(flow)
        if path is None:
            path = topo.path(dst, flow)
            # bounded by topology size; unknown destinations are not cached
            if dst in topo.routes:
                self._path_cache[flow] = path
        lat = topo.hop_latency
        if ttl <= len(path):
            router = topo.routers[path[ttl - 1]]
            arrive = now + ttl * lat
            if self.record_arrivals:
                self.arrivals.setdefault(router.rid, []).append(arrive)
            if not router.responds:
                return None
            if router.rate_limit > 0 and not self._allow(router, arrive):
                return None
            if router.loss_prob > 0 and self.rng.random() < router.loss_prob:
                return None
            quoted = packet[:8] + b"\x01" + packet[9:]
            reply = wire.build_icmp_error(quoted, router.addr, src, quote_len=topo.quote_len,
                                          reply_ttl=max(1, 64 - ttl))
            delay = 2 * ttl * lat
            src_addr = router.addr
        elif dst in topo.routes:
            hops = len(path) + 1
            reply = wire.build_tcp_reply(packet, reply_ttl=max(1, 64 - hops))
            delay = 2 * hops * lat
            src_addr = dst
        else:
            return None
        if topo.jitter > 0:
            delay += self.rng.uniform(0, topo.jitter)
        return reply, delay, src_addr


class SimTransport:
    """Transport backed by SimNetwork; replies surface when their arrival time is reached."""

    def __init__(self, topo: SimTopology, clock=None, record_arrivals: bool = False):
        self.net = SimNetwork(topo, record_arrivals)
        self.clock = clock or VirtualClock()
        self._pending: list = []
        self._seq = 0
        self.is_open = False

    def open(self):
        self.is_open = True

    def close(self):
        self.is_open = False

    def send(self, packet: bytes, dst: int):
        if not self.is_open:
            raise OSError("simulated transport is closed")
        res = self.net.inject(packet, self.clock.now())
        if res is not None:
            reply, delay, src = res
            self._seq += 1
            heapq.heappush(self._pending, (self.clock.now() + delay, self._seq, reply, src))

    def in_flight(self) -> int:
        return len(self._pending)

    def receive(self, timeout: float = 0.0) -> list[tuple[bytes, float, int]]:
        pending = self._pending
        now = self.clock.now()
        if (not pending or pending[0][0] > now) and timeout > 0:
            if pending and pending[0][0] <= now + timeout:
                self.clock.sleep_until(pending[0][0])
            else:
                self.clock.sleep(timeout)
            now = self.clock.now()
        out = []
        while pending and pending[0][0] <= now:
            due, _, reply, src = heapq.heappop(pending)
            out.append((reply, due, src))
        return out


@dataclass
class TopologySpec:
    n_dests: int
    max_depth: int = 20
    balancer_density: float = 0.0
    fanout: int = 2
    seed: int = 0
    peak_depth: float = 14.0
    depth_sd: float = 3.0
    default_depth: int = 4

    def validate(self):
        if self.n_dests < 1 or self.max_depth < 1:
            raise TopologyError("need at least one destination and depth >= 1")
        if self.n_dests > 1 << 22:
            raise TopologyError("too many destinations for distinct /24s")
        if not 0.0 <= self.balancer_density <= 1.0:
            raise TopologyError("balancer density must be in [0, 1]")
        if self.balancer_density > 0 and self.fanout < 2:
            raise TopologyError("balancers need fanout >= 2")


def _slash24_target(b0, b1, b2) -> int:
    return (b0 << 24) | (b1 << 16) | (b2 << 8) | ((b0 + b1 + b2) & 0xFF)


def generate_topology(spec: TopologySpec) -> SimTopology:
    """Random tree of hop groups with optional balancer diamonds.

    The first hop is shared by every destination.  Reuse of existing
    branches stays high near the vantage point and falls off cubically,
    and path lengths concentrate around ``peak_depth`` (clipped to
    ``max_depth``), so distinct interfaces per depth peak a little short of
    ``peak_depth``.
    """
    spec.validate()
    rng = random.Random(spec.seed)
    routers: dict[int, Router] = {}
    next_addr = [int(ipaddress.IPv4Address("10.0.0.1"))]

    def new_group(level):
        size = 1
        if level > 0 and spec.balancer_density > 0 and rng.random() < spec.balancer_density:
            size = spec.fanout
        group = []
        for _ in range(size):
            rid = len(routers) + 1
            routers[rid] = Router(rid, (next_addr[0],))
            next_addr[0] += 1
            group.append(rid)
        return tuple(group)

    # children[node] -> list of child nodes; node = group tuple, root = ()
    children: dict[tuple, list[tuple]] = {}
    dests = set()
    while len(dests) < spec.n_dests:
        b0 = rng.randint(11, 223)
        if b0 == 127:
            continue
        dests.add(_slash24_target(b0, rng.randrange(256), rng.randrange(256)))
    peak = min(spec.peak_depth, spec.max_depth * 0.7)
    routes = {}
    for dest in sorted(dests):
        depth = int(round(rng.gauss(peak, spec.depth_sd)))
        depth = max(1, min(spec.max_depth, depth))
        node: tuple = ()
        route = []
        for level in range(depth):
            kids = children.setdefault(node, [])
            share = 1.0 if level == 0 else max(0.02, 1.0 - (level / (peak + 2.0)) ** 3)
            if kids and rng.random() < share:
                child = kids[rng.randrange(len(kids))]
            else:
                child = new_group(level)
                kids.append(child)
            route.append(child)
            node = child
        routes[dest] = tuple(route)
    first = routes[min(routes)]
    default = first[: min(spec.default_depth, len(first))]
    return SimTopology(routers, routes, seed=spec.seed, default_route=default)


def _fmt_group(g) -> str:
    return "|".join(str(r) for r in g)


def dump_topology(topo: SimTopology, fh):
    fh.write("# randtrace topology v1\n")
    fh.write("topology vantage=%s seed=%d hop_latency=%r jitter=%r quote_len=%d burst=%r\n" % (
        wire.ip_str(topo.vantage), topo.seed, topo.hop_latency, topo.jitter, topo.quote_len, topo.burst))
    for rid in sorted(topo.routers):
        r = topo.routers[rid]
        fh.write("router %d %s responds=%d rate=%r loss=%r\n" % (
            rid, ",".join(wire.ip_str(a) for a in r.addrs), int(r.responds), r.rate_limit, r.loss_prob))
    for dest in sorted(topo.routes):
        fh.write("route %s %s\n" % (wire.ip_str(dest), " ".join(_fmt_group(g) for g in topo.routes[dest])))
    if topo.default_route:
        fh.write("default %s\n" % " ".join(_fmt_group(g) for g in topo.default_route))


def _kv(tokens, lineno):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise TopologyError("line %d: expected key=value, got %r" % (lineno, tok))
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def load_topology(fh) -> SimTopology:
    params = {}
    routers = {}
    routes = {}
    default = ()
    for lineno, raw in enumerate(fh, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "topology":
                kv = _kv(parts[1:], lineno)
                params = dict(
                    vantage=wire.ip_int(kv.get("vantage", "192.0.2.1")),
                    seed=int(kv.get("seed", 0)),
                    hop_latency=float(kv.get("hop_latency", 0.001)),
                    jitter=float(kv.get("jitter", 0.0)),
                    quote_len=int(kv.get("quote_len", wire.MIN_QUOTE)),
                    burst=float(kv.get("burst", 1.0)),
                )
            elif parts[0] == "router":
                kv = _kv(parts[3:], lineno)
                rid = int(parts[1])
                routers[rid] = Router(
                    rid, tuple(wire.ip_int(a) for a in parts[2].split(",")),
                    responds=kv.get("responds", "1") == "1",
                    rate_limit=float(kv.get("rate", 0)),
                    loss_prob=float(kv.get("loss", 0)),
                )
            elif parts[0] in ("route", "default"):
                groups = parts[2:] if parts[0] == "route" else parts[1:]
                route = tuple(tuple(int(r) for r in g.split("|")) for g in groups)
                if parts[0] == "route":
                    routes[wire.ip_int(parts[1])] = route
                else:
                    default = route
            else:
                raise TopologyError("unknown record %r" % parts[0])
        except (ValueError, IndexError) as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError("line %d: %s" % (lineno, exc)) from None
    return SimTopology(routers, routes, default_route=default, **params)


def dump_ground_truth(topo: SimTopology, fh):
    fh.write("# randtrace ground truth v1: destination then router interfaces for TTL 1..n\n")
    for dest, gt in sorted(topo.ground_truths().items()):
        fh.write("%s %s\n" % (wire.ip_str(dest), " ".join(wire.ip_str(a) for a in gt.hops)))


def load_ground_truth(fh) -> dict[int, GroundTruthPath]:
    out = {}
    for line in fh:
        line = line.split("#", 1)[0].split()
        if line:
            d = wire.ip_int(line[0])
            out[d] = GroundTruthPath(d, tuple(wire.ip_int(a) for a in line[1:]))
    return out
