"""The probing loop.

Walks a shard of the permuted domain, drops unrouted / out-of-range /
neighborhood-suppressed assignments, paces transmission with a token
bucket and streams every decoded reply to the response file in arrival
order.  Nothing is remembered per probe: replies are matched purely from
their quotations.

Response file format (text, one record per line)::

    #randtrace v1 key=<hex> rounds=.. kind=.. ttl_min=.. ttl_max=.. nbrhd_ttl=.. eta=.. \
        run_start=<unix seconds> unit=ms|us mode=tcp_ack|tcp_syn rate=.. shard=V/N ...
    <target> <sent_ttl> <hop> <rtt|-> <recv> <type> <reply_ttl> <quoted_ipid> \
        <quoted_size> <reply_size> <dscp> <checksum_ok 0|1>
    ...
    #end sent=.. responses=.. ...          (clean completion)
    #aborted reason=..                     (transport failure)

``recv`` is seconds since run start.  A file with neither footer was cut
short by a crash and is still reconstructible.
"""
from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wire
from .clock import WallClock
from .permute import PREFIX_THRESHOLD, CipherKey, DomainKind, PermutedDomain, ProbeDomain, shard_range
from .routefilter import RoutingTrie, load_trie
from .wire import ResponseRecord, TimeUnit

log = logging.getLogger(__name__)

FILE_MAGIC = "#randtrace v1"
US_RUN_LIMIT = (1 << 32) / 1_000_000


class TransportError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    domain: ProbeDomain
    key: CipherKey
    rate: float = 1000.0
    mode: str = "tcp_ack"
    nbrhd_ttl: int = 0
    eta: float = 30.0
    route_filter: Optional[str] = None
    shard: tuple[int, int] = (0, 1)
    unit: TimeUnit = TimeUnit.MS
    src: int = wire.ip_int("192.0.2.1")
    dscp: int = 0
    drain: float = 2.0
    prefix_threshold: int = PREFIX_THRESHOLD
    suppress_silent: bool = True

    def validate(self):
        if not self.rate > 0:
            raise ConfigError("rate must be positive")
        if self.mode not in ("tcp_ack", "tcp_syn"):
            raise ConfigError("mode must be tcp_ack or tcp_syn")
        if not 0 <= self.nbrhd_ttl <= self.domain.ttl_max:
            raise ConfigError("nbrhd_ttl must be in [0, ttl_max]")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.prefix_threshold < 0:
            raise ConfigError("prefix_threshold must be non-negative")
        v, n = self.shard
        if n < 1 or not 0 <= v < n:
            raise ConfigError("shard %d/%d invalid: need 0 <= v < n" % (v, n))
        self.unit = TimeUnit(self.unit)
        if self.unit is TimeUnit.US:
            est = self.expected_probes() / self.rate
            if est >= US_RUN_LIMIT:
                raise ConfigError("microsecond stamps wrap after %.0f s; this run needs about %.0f s"
                                  % (US_RUN_LIMIT, est))

    def expected_probes(self) -> float:
        size = self.domain.size / self.shard[1]
        if self.domain.kind is DomainKind.SLASH24:
            size *= self.domain.ttl_count / 256
        return size


@dataclass
class RunSummary:
    sent: int = 0
    skipped_unrouted: int = 0
    skipped_ttl_range: int = 0
    skipped_neighborhood: int = 0
    responses: int = 0
    undecodable: int = 0
    foreign: int = 0
    send_errors: int = 0
    duration: float = 0.0
    aborted: bool = False
    suppressed_ttls: list = field(default_factory=list)
    sent_by_ttl: Counter = field(default_factory=Counter)

    def as_line(self) -> str:
        return ("sent=%d skipped_unrouted=%d skipped_ttl_range=%d skipped_neighborhood=%d "
                "responses=%d undecodable=%d foreign=%d send_errors=%d duration=%.6f" % (
                    self.sent, self.skipped_unrouted, self.skipped_ttl_range, self.skipped_neighborhood,
                    self.responses, self.undecodable, self.foreign, self.send_errors, self.duration))


class Pacer:
    """Token bucket: ``rate`` tokens/s, at most 1 ms worth banked (min 1 token).

    Kept as a theoretical-arrival-time schedule (GCRA) so float drift cannot
    leave a sub-nanosecond wait that a virtual clock would never get past.
    """

    EPS = 1e-9

    def __init__(self, rate: float, clock, burst_seconds: float = 0.001):
        if not rate > 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.clock = clock
        self.capacity = max(1.0, rate * burst_seconds)
        self.interval = 1.0 / rate
        self.tolerance = (self.capacity - 1.0) * self.interval
        self.tat = clock.now() + self.tolerance  # start with one token banked

    @property
    def tokens(self) -> float:
        now = self.clock.now()
        return min(self.capacity, self.capacity - (self.tat - now) * self.rate)

    def delay(self) -> float:
        """Seconds until a token is available (0 if one is ready)."""
        w = self.tat - self.tolerance - self.clock.now()
        return w if w > self.EPS else 0.0

    def take(self):
        self.tat = max(self.tat, self.clock.now()) + self.interval

    def acquire(self):
        while True:
            w = self.delay()
            if w <= 0:
                break
            self.clock.sleep(w)
        self.take()


def pace(rate: float, count: int, clock=None):
    """Yield send timestamps for ``count`` transmissions paced at ``rate``."""
    clock = clock or WallClock()
    if count <= 0:
        return
    pacer = Pacer(rate, clock)
    for _ in range(count):
        pacer.acquire()
        yield clock.now()


class NeighborhoodState:
    """Per-TTL discovery bookkeeping for TTLs 1..nbrhd_ttl.

    The window for TTL t opens at the first probe sent with TTL t.  TTL t
    is suppressed for good once the latest probe at t was sent more than
    ``eta`` seconds after the last new interface at t (or after the window
    opened, if nothing has answered and ``suppress_silent`` is set).
    """

    def __init__(self, nbrhd_ttl: int, eta: float = 30.0, suppress_silent: bool = True):
        self.nbrhd_ttl = nbrhd_ttl
        self.eta = eta
        self.suppress_silent = suppress_silent
        n = nbrhd_ttl + 1
        self.seen_interfaces: list[set[int]] = [set() for _ in range(n)]
        self.last_probe_sent: list[Optional[float]] = [None] * n
        self.window_open: list[Optional[float]] = [None] * n
        self.last_new_interface: list[Optional[float]] = [None] * n
        self.skipping = [False] * n
        self.suppressed_at: list[Optional[float]] = [None] * n

    def covers(self, ttl: int) -> bool:
        return 1 <= ttl <= self.nbrhd_ttl

    def _recheck(self, ttl: int, now: float):
        if self.skipping[ttl] or self.last_probe_sent[ttl] is None:
            return
        ref = self.last_new_interface[ttl]
        if ref is None:
            if not self.suppress_silent:
                return
            ref = self.window_open[ttl]
        if self.last_probe_sent[ttl] - ref > self.eta:
            self.skipping[ttl] = True
            self.suppressed_at[ttl] = now

    def should_skip(self, ttl: int, now: float) -> bool:
        if not self.covers(ttl):
            return False
        self._recheck(ttl, now)
        return self.skipping[ttl]

    def note_probe(self, ttl: int, now: float):
        if self.covers(ttl):
            if self.window_open[ttl] is None:
                self.window_open[ttl] = now
            self.last_probe_sent[ttl] = now

    def update(self, response: ResponseRecord, now: float):
        ttl = response.sent_ttl
        if not self.covers(ttl) or response.response_type == "tcp_reply":
            return
        seen = self.seen_interfaces[ttl]
        if response.hop_addr not in seen:
            seen.add(response.hop_addr)
            self.last_new_interface[ttl] = now
        self._recheck(ttl, now)


def neighborhood_update(state: NeighborhoodState, response: ResponseRecord, now: float) -> NeighborhoodState:
    state.update(response, now)
    return state


def format_record(r: ResponseRecord, run_start: float) -> str:
    return "%s %d %s %s %.6f %s %d %d %d %d %d %d\n" % (
        wire.ip_str(r.target), r.sent_ttl, wire.ip_str(r.hop_addr),
        "-" if r.rtt is None else r.rtt, r.recv_time - run_start, r.response_type,
        r.reply_ttl, r.quoted_ipid, r.quoted_size, r.reply_size, r.dscp, int(r.checksum_valid))


class ResponseWriter:
    """Append-only response file; flushes every ``flush_every`` records."""

    def __init__(self, fh, flush_every: int = 1000):
        self.fh = fh
        self.flush_every = flush_every
        self._n = 0

    def header(self, meta: dict):
        self.fh.write(FILE_MAGIC + " " + " ".join("%s=%s" % kv for kv in meta.items()) + "\n")
        self.fh.flush()

    def write(self, record: ResponseRecord, run_start: float):
        self.fh.write(format_record(record, run_start))
        self._n += 1
        if self._n % self.flush_every == 0:
            self.fh.flush()

    def footer(self, tag: str, text: str):
        self.fh.write("#%s %s\n" % (tag, text))
        self.fh.flush()


def run_metadata(config: RunConfig, pd: PermutedDomain, wall_start: float) -> dict:
    d = config.domain
    meta = {
        "key": config.key.hex(),
        "rounds": config.key.rounds,
        "kind": d.kind.value,
        "ttl_min": d.ttl_min,
        "ttl_max": d.ttl_max,
        "nbrhd_ttl": config.nbrhd_ttl,
        "eta": config.eta,
        "run_start": "%.6f" % wall_start,
        "unit": config.unit.value,
        "mode": config.mode,
        "rate": config.rate,
        "shard": "%d/%d" % config.shard,
        "strategy": pd.strategy,
        "size": pd.size,
        "src": wire.ip_str(config.src),
    }
    if d.kind is DomainKind.FULL_V4_TTL:
        meta["network"] = d.network
    return meta


def run(config: RunConfig, transport, output, clock=None, trie: Optional[RoutingTrie] = None,
        progress: Optional[Callable[[int, RunSummary], None]] = None, progress_every: int = 10000,
        wall_start: Optional[float] = None) -> RunSummary:
    """Probe one shard of the domain through ``transport``, writing replies to ``output``.

    ``output`` is a writable text file object.  ``clock`` defaults to the
    transport's clock when it has one, else real time.  ``progress`` is
    called every ``progress_every`` domain indices with the index count and
    the running summary.
    """
    config.validate()
    clock = clock or getattr(transport, "clock", None) or WallClock()
    if trie is None and config.route_filter:
        trie = load_trie(config.route_filter)
    pd = PermutedDomain(config.domain, config.key, config.prefix_threshold)
    interval = shard_range(pd, *config.shard)
    ttl_min, ttl_max = config.domain.ttl_min, config.domain.ttl_max
    unit = config.unit
    scale = unit.scale
    flags = wire.TCP_SYN if config.mode == "tcp_syn" else wire.TCP_ACK
    src, dscp = config.src, config.dscp

    nbr = NeighborhoodState(config.nbrhd_ttl, config.eta, config.suppress_silent)
    use_nbr = config.nbrhd_ttl > 0
    summary = RunSummary()
    writer = ResponseWriter(output)
    wall_start = time.time() if wall_start is None else wall_start
    start = clock.now()
    pacer = Pacer(config.rate, clock)
    writer.header(run_metadata(config, pd, wall_start))

    def handle(replies):
        for pkt, ts, outer in replies:
            try:
                rec = wire.decode_reply(pkt, ts, start, outer, unit, config.mode)
            except wire.ForeignPacket:
                summary.foreign += 1
                continue
            except wire.UndecodableReply:
                summary.undecodable += 1
                continue
            summary.responses += 1
            if use_nbr:
                nbr.update(rec, ts)
            writer.write(rec, start)

    def fail(exc):
        summary.aborted = True
        summary.duration = clock.now() - start
        writer.footer("aborted", "reason=%s %s" % (type(exc).__name__, summary.as_line()))
        raise TransportError(str(exc)) from exc

    send = transport.send
    _receive = transport.receive

    def receive(timeout):
        try:
            return _receive(timeout)
        except OSError as exc:
            raise TransportError("receive failed: %s" % exc) from exc

    is_routed = trie.is_routed if trie is not None else None
    done = 0
    try:
        for target, ttl in pd.assignments(interval.start, interval.stop):
            done += 1
            if progress is not None and done % progress_every == 0:
                progress(done, summary)
            if ttl < ttl_min or ttl > ttl_max:
                summary.skipped_ttl_range += 1
                continue
            if is_routed is not None and not is_routed(target):
                summary.skipped_unrouted += 1
                continue
            if use_nbr and ttl <= config.nbrhd_ttl and nbr.should_skip(ttl, clock.now()):
                summary.skipped_neighborhood += 1
                continue
            w = pacer.delay()
            while w > 0:
                handle(receive(w))
                w = pacer.delay()
            pacer.take()
            now = clock.now()
            elapsed = int(round((now - start) * scale))
            try:
                send(wire.raw_probe(src, target, ttl, elapsed, flags, dscp), target)
            except (TransportError, OSError) as exc:
                fail(exc)
            summary.sent += 1
            summary.sent_by_ttl[ttl] += 1
            if use_nbr:
                nbr.note_probe(ttl, now)
            handle(receive(0.0))
        if progress is not None and done % progress_every:
            progress(done, summary)
        # stragglers: wait until the transport is empty or the drain window passes
        deadline = clock.now() + config.drain
        in_flight = getattr(transport, "in_flight", None)
        while clock.now() < deadline:
            if in_flight is not None and in_flight() == 0:
                break
            handle(receive(min(0.05, max(0.0, deadline - clock.now()))))
    except TransportError as exc:
        if not summary.aborted:
            fail(exc)
        raise
    summary.duration = clock.now() - start
    suppressed = [t for t in range(1, config.nbrhd_ttl + 1) if nbr.skipping[t]]
    summary.suppressed_ttls = suppressed
    writer.footer("end", "%s suppressed=%s" % (summary.as_line(), ",".join(map(str, suppressed)) or "-"))
    log.info("run complete: %s", summary.as_line())
    return summary
