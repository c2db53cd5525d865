"""Snapshot analytics over reconstructed paths.

Every tabular result can be written as tab-separated text with a leading
``#`` line naming the columns, for use by any plotting tool.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence, Union

from . import wire
from .recon import OBSERVED, TracePath
from .wire import ResponseRecord

log = logging.getLogger(__name__)

ANON = None
PathSet = Union[Mapping[int, TracePath], Iterable[TracePath]]


def _as_map(paths: PathSet) -> dict[int, TracePath]:
    if isinstance(paths, Mapping):
        return dict(paths)
    return {p.target: p for p in paths}


@dataclass
class InterfaceGraph:
    nodes: set[int] = field(default_factory=set)
    edges: set[tuple[int, int]] = field(default_factory=set)

    def degrees(self) -> Counter:
        deg = Counter({n: 0 for n in self.nodes})
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg


def build_graph(paths: PathSet) -> InterfaceGraph:
    """Interfaces as nodes; an edge joins interfaces answering at consecutive TTLs.

    Anonymous hops break adjacency.  Stitched hops count as observed.
    """
    g = InterfaceGraph()
    for p in _as_map(paths).values():
        prev = None
        for h in p.hops:
            if h.addr is None:
                prev = None
                continue
            g.nodes.add(h.addr)
            if prev is not None and prev.ttl == h.ttl - 1 and prev.addr != h.addr:
                a, b = prev.addr, h.addr
                g.edges.add((a, b) if a < b else (b, a))
            prev = h
    return g


def degree_distribution(g: InterfaceGraph) -> list[tuple[int, int]]:
    """Sorted ``(degree, node count)`` pairs."""
    hist = Counter(g.degrees().values())
    return sorted(hist.items())


def discovery_curve(records: Sequence[ResponseRecord], bucket: float = 1.0) -> list[tuple[float, int]]:
    """Cumulative distinct responding addresses at the end of each time bucket.

    Times are the records' receive times (seconds since run start in a
    response file).  Returns ``(bucket end, cumulative count)`` pairs.
    """
    if not records:
        return []
    if bucket <= 0:
        raise ValueError("bucket must be positive")
    ordered = sorted(records, key=lambda r: r.recv_time)
    seen = set()
    out = []
    edge = bucket * (int(ordered[0].recv_time // bucket) + 1)
    for r in ordered:
        while r.recv_time >= edge:
            out.append((edge, len(seen)))
            edge += bucket
        seen.add(r.hop_addr)
    out.append((edge, len(seen)))
    return out


def gap_truncated_max_ttl(path: TracePath, gap: int = 5) -> int:
    """Highest observed TTL a prober stopping after ``gap`` silent hops in a row would see."""
    best = 0
    silent = 0
    for h in sorted(path.hops, key=lambda h: h.ttl):
        if h.provenance == OBSERVED:
            best = h.ttl
            silent = 0
        else:
            silent += 1
            if silent >= gap:
                break
    return best


@dataclass
class GapLimitResult:
    diffs: dict[int, int]
    cdf: list[tuple[int, float]]


def cdf_of(values: Iterable[int]) -> list[tuple[int, float]]:
    values = sorted(values)
    n = len(values)
    out = []
    for i, v in enumerate(values):
        if i + 1 == n or values[i + 1] != v:
            out.append((v, (i + 1) / n))
    return out


def gap_limit_diff(paths_a: PathSet, paths_b: PathSet, gap: int = 5) -> GapLimitResult:
    """max_responsive_ttl(a) minus gap-truncated max of b for every shared target."""
    a, b = _as_map(paths_a), _as_map(paths_b)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise ValueError("path sets share no targets")
    diffs = {t: a[t].max_responsive_ttl - gap_truncated_max_ttl(b[t], gap) for t in shared}
    return GapLimitResult(diffs, cdf_of(diffs.values()))


@dataclass(frozen=True)
class EditOp:
    kind: str  # insert | delete | substitute
    depth: int
    old: Optional[int]
    new: Optional[int]

    @property
    def missing_hop(self) -> bool:
        return self.kind == "substitute" and (self.old is ANON) != (self.new is ANON)


@dataclass
class PathDiff:
    target: int
    distance: int
    operations: list[EditOp]

    @property
    def missing_hop_substitutions(self) -> int:
        return sum(op.missing_hop for op in self.operations)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Plain two-row edit distance (unit costs)."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_script(a: Sequence, b: Sequence, a_depths: Sequence[int] = None,
                b_depths: Sequence[int] = None) -> list[EditOp]:
    """Minimal edit operations turning ``a`` into ``b``.

    Backtrace from the end prefers a diagonal step (match or substitution),
    then deletion, then insertion, which pushes insert/delete pairs into
    single substitutions and leaves shiftable operations at earlier depths.
    """
    n, m = len(a), len(b)
    a_depths = a_depths if a_depths is not None else range(1, n + 1)
    b_depths = b_depths if b_depths is not None else range(1, m + 1)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        x = a[i - 1]
        row, up = D[i], D[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j] + 1, row[j - 1] + 1, up[j - 1] + (x != b[j - 1]))
    ops = []
    i, j = n, m
    while i or j:
        if i and j and D[i][j] == D[i - 1][j - 1] + (a[i - 1] != b[j - 1]):
            if a[i - 1] != b[j - 1]:
                ops.append(EditOp("substitute", a_depths[i - 1], a[i - 1], b[j - 1]))
            i, j = i - 1, j - 1
        elif i and D[i][j] == D[i - 1][j] + 1:
            ops.append(EditOp("delete", a_depths[i - 1], a[i - 1], None))
            i -= 1
        else:
            ops.append(EditOp("insert", b_depths[j - 1], None, b[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def _diff_view(p: TracePath, cutoff: int, limit: int):
    hops = [h for h in p.hops if cutoff < h.ttl <= limit]
    return [h.addr for h in hops], [h.ttl for h in hops]


def _last_responsive(p: TracePath) -> int:
    return max((h.ttl for h in p.hops if h.addr is not None), default=0)


def path_edit_distance(a: TracePath, b: TracePath, cutoff: int = 0) -> PathDiff:
    """Edit distance between two paths to the same target.

    Hops at TTL <= ``cutoff`` are ignored, and anonymous tails past the last
    responsive hop of both paths are trimmed before diffing.
    """
    if a.target != b.target:
        raise ValueError("paths to different targets: %s vs %s" % (wire.ip_str(a.target), wire.ip_str(b.target)))
    limit = max(_last_responsive(a), _last_responsive(b))
    sa, da = _diff_view(a, cutoff, limit)
    sb, db = _diff_view(b, cutoff, limit)
    ops = edit_script(sa, sb, da, db)
    return PathDiff(a.target, len(ops), ops)


@dataclass
class SnapshotComparison:
    diffs: dict[int, PathDiff]
    cdf: list[tuple[int, float]]
    op_counts: Counter
    missing_by_depth: Counter
    only_in_first: int = 0
    only_in_second: int = 0

    @property
    def identical_fraction(self) -> float:
        if not self.diffs:
            return 0.0
        return sum(d.distance == 0 for d in self.diffs.values()) / len(self.diffs)


def snapshot_compare(s1: PathSet, s2: PathSet, cutoff: int = 0) -> SnapshotComparison:
    """Per-target diffs between two snapshots plus aggregate tables.

    ``op_counts`` keys: insert, delete, substitute (address for address) and
    missing_hop (substitution with exactly one anonymous side).
    """
    a, b = _as_map(s1), _as_map(s2)
    shared = sorted(set(a) & set(b))
    if not shared:
        log.warning("snapshots share no targets; comparison is empty")
    diffs = {t: path_edit_distance(a[t], b[t], cutoff) for t in shared}
    ops = Counter({"insert": 0, "delete": 0, "substitute": 0, "missing_hop": 0})
    missing = Counter()
    for d in diffs.values():
        for op in d.operations:
            if op.missing_hop:
                ops["missing_hop"] += 1
                missing[op.depth] += 1
            else:
                ops[op.kind] += 1
    return SnapshotComparison(
        diffs, cdf_of(d.distance for d in diffs.values()) if diffs else [], ops, missing,
        len(set(a) - set(b)), len(set(b) - set(a)))


def write_table(fh, columns: Sequence[str], rows: Iterable[Sequence]):
    fh.write("#" + "\t".join(columns) + "\n")
    for row in rows:
        fh.write("\t".join(("%.6f" % v) if isinstance(v, float) else str(v) for v in row) + "\n")


def missing_hop_table(cmp: SnapshotComparison) -> list[tuple[int, int, float]]:
    total = sum(cmp.missing_by_depth.values())
    return [(d, c, c / total) for d, c in sorted(cmp.missing_by_depth.items())]
