"""Offline path reconstruction from an unordered response file.

Path files are JSON Lines.  The first line is ``{"format": "randtrace-paths/1",
"meta": {...}}`` carrying the run header; each following line is one path::

    {"target": "a.b.c.d", "reached": true, "max_ttl": 12,
     "hops": [[ttl, addr or null, rtt or null, "o" | "s" | "a"], ...]}

where the provenance letter is observed, stitched or anonymous.  Paths are
sorted by target address.
"""
from __future__ import annotations

import heapq
import itertools
import json
import logging
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

from . import wire
from .engine import FILE_MAGIC
from .wire import ResponseRecord

log = logging.getLogger(__name__)

PATHS_FORMAT = "randtrace-paths/1"
OBSERVED, STITCHED, ANONYMOUS = "observed", "stitched", "anonymous"
_PROV_CODE = {OBSERVED: "o", STITCHED: "s", ANONYMOUS: "a"}
_CODE_PROV = {v: k for k, v in _PROV_CODE.items()}
REQUIRED_META = ("ttl_min", "ttl_max", "nbrhd_ttl", "run_start", "unit")
# stands in for the header of a zero-length file
EMPTY_META = {"ttl_min": 1, "ttl_max": 32, "nbrhd_ttl": 0, "run_start": 0.0, "unit": "ms"}


class ResponseFileError(ValueError):
    def __init__(self, source, lineno, msg):
        self.source = source
        self.lineno = lineno
        super().__init__("%s:%d: %s" % (source, lineno, msg))


@dataclass
class TraceHop:
    ttl: int
    addr: Optional[int] = None
    rtt: Optional[int] = None
    provenance: str = ANONYMOUS


@dataclass
class TracePath:
    target: int
    hops: list[TraceHop]
    destination_reached: bool = False

    @property
    def max_responsive_ttl(self) -> int:
        return max((h.ttl for h in self.hops if h.provenance == OBSERVED), default=0)

    def symbols(self) -> list[Optional[int]]:
        return [h.addr for h in self.hops]

    def hop(self, ttl: int) -> Optional[TraceHop]:
        for h in self.hops:
            if h.ttl == ttl:
                return h
        return None


@dataclass
class ResponseFile:
    meta: dict
    records: list[ResponseRecord]
    footer: Optional[tuple[str, dict]] = None

    @property
    def truncated(self) -> bool:
        return self.footer is None


@dataclass
class ReconSummary:
    records: int = 0
    hops: int = 0
    duplicates: int = 0
    destination_replies: int = 0
    quarantined: Counter = field(default_factory=Counter)

    def accounted(self) -> int:
        return self.hops + self.duplicates + self.destination_replies + sum(self.quarantined.values())


@dataclass
class Reconstruction:
    meta: dict
    paths: list[TracePath]
    summary: ReconSummary

    def by_target(self) -> dict[int, TracePath]:
        return {p.target: p for p in self.paths}


def _parse_kv(tokens) -> dict:
    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise ValueError("expected key=value, got %r" % tok)
        out[k] = v
    return out


def parse_header(line: str, source="<responses>") -> dict:
    if not line.startswith(FILE_MAGIC):
        raise ResponseFileError(source, 1, "missing response-file header")
    try:
        meta = _parse_kv(line[len(FILE_MAGIC):].split())
        for k in REQUIRED_META:
            if k not in meta:
                raise ValueError("header lacks %s" % k)
        for k in ("ttl_min", "ttl_max", "nbrhd_ttl"):
            meta[k] = int(meta[k])
        meta["run_start"] = float(meta["run_start"])
        wire.TimeUnit(meta["unit"])
    except ValueError as exc:
        raise ResponseFileError(source, 1, "corrupt header: %s" % exc) from None
    return meta


def parse_record(line: str) -> ResponseRecord:
    f = line.split()
    if len(f) != 12:
        raise ValueError("expected 12 fields, got %d" % len(f))
    if f[5] not in wire.RESPONSE_TYPES:
        raise ValueError("unknown response type %r" % f[5])
    return ResponseRecord(
        target=wire.ip_int(f[0]), sent_ttl=int(f[1]), hop_addr=wire.ip_int(f[2]),
        rtt=None if f[3] == "-" else int(f[3]), recv_time=float(f[4]), response_type=f[5],
        reply_ttl=int(f[6]), quoted_ipid=int(f[7]), quoted_size=int(f[8]), reply_size=int(f[9]),
        dscp=int(f[10]), checksum_valid=f[11] == "1",
    )


def _iter_file(fh) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(fh, 1):
        yield lineno, line.rstrip("\n")


def _open(src):
    if hasattr(src, "read"):
        return src, getattr(src, "name", "<responses>"), False
    return open(src), str(src), True


def read_responses(src) -> ResponseFile:
    """Parse a response file (path or text file object)."""
    fh, name, close = _open(src)
    try:
        meta = None
        records = []
        footer = None
        for lineno, line in _iter_file(fh):
            if meta is None:
                meta = parse_header(line, name)
                continue
            if not line.strip():
                continue
            if line.startswith("#"):
                tag, _, rest = line[1:].partition(" ")
                if tag in ("end", "aborted"):
                    try:
                        footer = (tag, _parse_kv(rest.split()))
                    except ValueError as exc:
                        raise ResponseFileError(name, lineno, "corrupt footer: %s" % exc) from None
                continue
            try:
                records.append(parse_record(line))
            except ValueError as exc:
                raise ResponseFileError(name, lineno, str(exc)) from None
        if meta is None:
            log.warning("%s is empty; nothing to reconstruct", name)
            meta = dict(EMPTY_META)
        return ResponseFile(meta, records, footer)
    finally:
        if close:
            fh.close()


def stitch(neighborhood: Iterable[ResponseRecord], depth: int) -> TraceHop:
    """Dominant interface seen at ``depth``; ties go to the earliest first sighting."""
    counts: Counter = Counter()
    first: dict[int, float] = {}
    for r in neighborhood:
        if r.sent_ttl != depth or r.response_type == "tcp_reply" or not r.checksum_valid:
            continue
        counts[r.hop_addr] += 1
        if r.hop_addr not in first or r.recv_time < first[r.hop_addr]:
            first[r.hop_addr] = r.recv_time
    if not counts:
        return TraceHop(depth, None, None, ANONYMOUS)
    addr = min(counts, key=lambda a: (-counts[a], first[a], a))
    return TraceHop(depth, addr, None, STITCHED)


def _stitch_depths(meta: dict, footer) -> list[int]:
    nb = meta.get("nbrhd_ttl", 0)
    if not nb:
        return []
    if footer and footer[0] == "end" and "suppressed" in footer[1]:
        s = footer[1]["suppressed"]
        return [] if s == "-" else [int(t) for t in s.split(",")]
    return list(range(1, nb + 1))


class _Builder:
    """Turns per-target record groups into TracePaths with shared stitching."""

    def __init__(self, meta, footer, neighborhood_records):
        self.ttl_min = meta["ttl_min"]
        self.ttl_max = meta["ttl_max"]
        self.summary = ReconSummary()
        depths = [d for d in _stitch_depths(meta, footer) if self.ttl_min <= d <= self.ttl_max]
        nbr = list(neighborhood_records)
        self.stitched = {d: stitch(nbr, d) for d in depths}
        self._warned = False

    def classify(self, r: ResponseRecord) -> Optional[str]:
        """Quarantine reason, or None if the record is usable."""
        if not r.checksum_valid:
            return "checksum"
        if r.response_type == "tcp_reply":
            return None
        if not self.ttl_min <= r.sent_ttl <= self.ttl_max:
            return "ttl_range"
        return None

    def build(self, target: int, records: list[ResponseRecord]) -> Optional[TracePath]:
        s = self.summary
        best: dict[int, ResponseRecord] = {}
        reached = False
        usable = False
        for r in records:
            s.records += 1
            reason = self.classify(r)
            if reason is not None:
                s.quarantined[reason] += 1
                if reason == "ttl_range" and not self._warned:
                    log.warning("records outside the run's TTL range quarantined (first: %s ttl %d)",
                                wire.ip_str(r.target), r.sent_ttl)
                    self._warned = True
                continue
            usable = True
            if r.response_type == "tcp_reply":
                s.destination_replies += 1
                reached = True
                continue
            if r.response_type == "echo_of_target" or r.hop_addr == target:
                reached = True
            prev = best.get(r.sent_ttl)
            if prev is None:
                best[r.sent_ttl] = r
            else:
                s.duplicates += 1
                if r.recv_time < prev.recv_time:
                    best[r.sent_ttl] = r
        if not usable:
            return None
        s.hops += len(best)
        hops = []
        for ttl in range(self.ttl_min, self.ttl_max + 1):
            r = best.get(ttl)
            if r is not None:
                hops.append(TraceHop(ttl, r.hop_addr, r.rtt, OBSERVED))
            elif ttl in self.stitched:
                h = self.stitched[ttl]
                hops.append(TraceHop(ttl, h.addr, None, h.provenance))
            else:
                hops.append(TraceHop(ttl, None, None, ANONYMOUS))
        return TracePath(target, hops, reached)


def _neighborhood(records, meta):
    nb = meta.get("nbrhd_ttl", 0)
    return (r for r in records if 1 <= r.sent_ttl <= nb)


def reconstruct(source) -> Reconstruction:
    """Rebuild per-target paths from a response file (path, file object or ResponseFile)."""
    rf = source if isinstance(source, ResponseFile) else read_responses(source)
    builder = _Builder(rf.meta, rf.footer, _neighborhood(rf.records, rf.meta))
    groups: dict[int, list[ResponseRecord]] = {}
    for r in rf.records:
        groups.setdefault(r.target, []).append(r)
    paths = []
    for target in sorted(groups):
        p = builder.build(target, groups[target])
        if p is not None:
            paths.append(p)
    return Reconstruction(rf.meta, paths, builder.summary)


def reconstruct_external(path, chunk_records: int = 200_000, tmpdir=None) -> Reconstruction:
    """Same result as ``reconstruct`` while holding one chunk of records in memory.

    Records are sorted by target in chunks spilled to temporary files, then
    merged so each target's records are consumed together.
    """
    meta = None
    footer = None
    nb_records = []
    chunks = []

    def key(line):
        f = line.split(" ", 2)
        return wire.ip_int(f[0])

    def spill(buf):
        buf.sort(key=key)
        tf = tempfile.NamedTemporaryFile("w+", dir=tmpdir, delete=False, suffix=".chunk")
        tf.writelines(buf)
        tf.flush()
        tf.seek(0)
        chunks.append(tf)

    try:
        with open(path) as fh:
            buf = []
            for lineno, line in enumerate(fh, 1):
                if meta is None:
                    meta = parse_header(line.rstrip("\n"), str(path))
                    continue
                if not line.strip():
                    continue
                if line.startswith("#"):
                    tag, _, rest = line[1:].strip().partition(" ")
                    if tag in ("end", "aborted"):
                        footer = (tag, _parse_kv(rest.split()))
                    continue
                try:
                    rec = parse_record(line)
                except ValueError as exc:
                    raise ResponseFileError(str(path), lineno, str(exc)) from None
                if 1 <= rec.sent_ttl <= meta["nbrhd_ttl"]:
                    nb_records.append(rec)
                buf.append(line if line.endswith("\n") else line + "\n")
                if len(buf) >= chunk_records:
                    spill(buf)
                    buf = []
            if buf:
                spill(buf)
        if meta is None:
            log.warning("%s is empty; nothing to reconstruct", path)
            meta = dict(EMPTY_META)
        builder = _Builder(meta, footer, nb_records)
        paths = []
        merged = heapq.merge(*chunks, key=key)
        for target, lines in itertools.groupby(merged, key=key):
            p = builder.build(target, [parse_record(l) for l in lines])
            if p is not None:
                paths.append(p)
        return Reconstruction(meta, paths, builder.summary)
    finally:
        for tf in chunks:
            tf.close()
            os.unlink(tf.name)


def _addr_out(a):
    return None if a is None else wire.ip_str(a)


def path_to_json(p: TracePath) -> dict:
    return {
        "target": wire.ip_str(p.target),
        "reached": p.destination_reached,
        "max_ttl": p.max_responsive_ttl,
        "hops": [[h.ttl, _addr_out(h.addr), h.rtt, _PROV_CODE[h.provenance]] for h in p.hops],
    }


def path_from_json(obj: dict) -> TracePath:
    hops = [TraceHop(t, None if a is None else wire.ip_int(a), rtt, _CODE_PROV[c]) for t, a, rtt, c in obj["hops"]]
    return TracePath(wire.ip_int(obj["target"]), hops, bool(obj["reached"]))


def write_paths(recon: Reconstruction, fh):
    meta = {k: v for k, v in recon.meta.items()}
    fh.write(json.dumps({"format": PATHS_FORMAT, "meta": meta}, sort_keys=True) + "\n")
    for p in recon.paths:
        fh.write(json.dumps(path_to_json(p), sort_keys=True) + "\n")


def read_paths(src) -> tuple[dict, list[TracePath]]:
    fh, name, close = _open(src)
    try:
        meta = None
        paths = []
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if meta is None:
                    if obj.get("format") != PATHS_FORMAT:
                        raise ValueError("not a path file (format %r)" % obj.get("format"))
                    meta = obj.get("meta", {})
                    continue
                paths.append(path_from_json(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise ResponseFileError(name, lineno, str(exc)) from None
        if meta is None:
            raise ResponseFileError(name, 1, "empty path file")
        return meta, paths
    finally:
        if close:
            fh.close()
