import io
import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ip, reconstruct_text, run_sim
from oracles import edit_graph_distances
from randtrace import analyze, wire
from randtrace.analyze import EditOp
from randtrace.recon import ANONYMOUS, OBSERVED, STITCHED, TraceHop, TracePath

T1, T2, T3 = ip("198.51.100.1"), ip("198.51.100.2"), ip("198.51.100.3")


def path(target, addrs, reached=False):
    hops = [TraceHop(k, a, 1 if a is not None else None, OBSERVED if a is not None else ANONYMOUS)
            for k, a in enumerate(addrs, 1)]
    return TracePath(target, hops, reached)


@pytest.fixture(scope="module")
def edit_oracle():
    return edit_graph_distances(["A", "B", None], 6)


def test_graph_chain():
    g = analyze.build_graph([path(T1, [1, 2, 3])])
    assert g.nodes == {1, 2, 3}
    assert g.edges == {(1, 2), (2, 3)}


def test_graph_anonymous_breaks_adjacency():
    g = analyze.build_graph([path(T1, [1, None, 3, 4])])
    assert g.edges == {(3, 4)}
    assert g.nodes == {1, 3, 4}


def test_graph_stitched_hops_count():
    p = path(T1, [1, 2])
    p.hops[0] = TraceHop(1, 1, None, STITCHED)
    assert analyze.build_graph([p]).edges == {(1, 2)}


def test_star_graph_degrees():
    paths = [path(ip("198.51.100.0") + k, [100, k + 1]) for k in range(6)]
    g = analyze.build_graph(paths)
    deg = g.degrees()
    assert deg[100] == 6
    assert all(deg[k + 1] == 1 for k in range(6))
    assert analyze.degree_distribution(g) == [(1, 6), (6, 1)]


def test_edges_are_undirected_and_deduplicated():
    g = analyze.build_graph([path(T1, [1, 2]), path(T2, [2, 1]), path(T3, [1, 2])])
    assert g.edges == {(1, 2)}


def test_degree_recount_on_simulation(balanced_topo):
    _, text = run_sim(balanced_topo)
    paths = reconstruct_text(text).paths
    g = analyze.build_graph(paths)
    nbrs = {}
    for p in paths:
        addrs = [h.addr for h in p.hops]
        for a, b in zip(addrs, addrs[1:]):
            if a is not None and b is not None and a != b:
                nbrs.setdefault(a, set()).add(b)
                nbrs.setdefault(b, set()).add(a)
    for n in g.nodes:
        assert g.degrees()[n] == len(nbrs.get(n, ()))


def _rec(addr, t):
    return wire.ResponseRecord(T1, 1, addr, 1, t, "ttl_exceeded")


def test_discovery_curve():
    recs = [_rec(1, 0.1), _rec(2, 0.5), _rec(1, 1.2), _rec(3, 3.4)]
    assert analyze.discovery_curve(recs, 1.0) == [(1.0, 2), (2.0, 2), (3.0, 2), (4.0, 3)]
    assert analyze.discovery_curve([], 1.0) == []
    with pytest.raises(ValueError):
        analyze.discovery_curve(recs, 0)


def test_discovery_curve_monotone(small_topo):
    _, text = run_sim(small_topo, rate=200)
    from randtrace import recon
    rf = recon.read_responses(io.StringIO(text))
    curve = analyze.discovery_curve(rf.records, 0.5)
    counts = [c for _, c in curve]
    assert counts == sorted(counts)
    assert counts[-1] == len({r.hop_addr for r in rf.records})


def test_gap_limit_example():
    full = [1, 2, 3, 4, 5] + [None] * 6 + [12]
    a = path(T1, full)
    assert a.max_responsive_ttl == 12
    assert analyze.gap_truncated_max_ttl(a, 5) == 5
    assert analyze.gap_truncated_max_ttl(a, 7) == 12
    res = analyze.gap_limit_diff([a], [a], gap=5)
    assert res.diffs == {T1: 7}
    assert res.cdf == [(7, 1.0)]


def test_gap_limit_needs_shared_targets():
    with pytest.raises(ValueError):
        analyze.gap_limit_diff([path(T1, [1])], [path(T2, [1])])


def test_cdf():
    assert analyze.cdf_of([0, 0, 1, 3]) == [(0, 0.5), (1, 0.75), (3, 1.0)]


def test_edit_examples():
    assert analyze.levenshtein("ABC", "ABC") == 0
    assert analyze.levenshtein("ABC", "AXC") == 1
    assert analyze.levenshtein("", "AB") == 2
    assert analyze.edit_script([1, 2, 3], [1, 9, 3]) == [EditOp("substitute", 2, 2, 9)]
    assert analyze.edit_script([1, 2, 3], [1, 3]) == [EditOp("delete", 2, 2, None)]
    assert analyze.edit_script([1, 3], [1, 2, 3]) == [EditOp("insert", 2, None, 2)]


def test_missing_hop_classification():
    op = analyze.edit_script([1, None, 3], [1, 2, 3])[0]
    assert op.missing_hop
    assert not EditOp("substitute", 1, 4, 5).missing_hop
    assert not EditOp("insert", 1, None, None).missing_hop


def test_path_edit_distance_cutoff_and_tail():
    a = path(T1, [1, 2, 3, 4, None, None])
    b = path(T1, [7, 8, 3, 4, None, None, None])
    assert analyze.path_edit_distance(a, b).distance == 2
    assert analyze.path_edit_distance(a, b, cutoff=2).distance == 0
    with pytest.raises(ValueError):
        analyze.path_edit_distance(a, path(T2, [1]))


def test_snapshot_identical(balanced_topo):
    _, text = run_sim(balanced_topo)
    paths = reconstruct_text(text).paths
    cmp = analyze.snapshot_compare(paths, paths)
    assert cmp.identical_fraction == 1.0
    assert cmp.cdf == [(0, 1.0)]
    assert sum(cmp.op_counts.values()) == 0


def test_snapshot_single_reroute():
    s1 = [path(T1, [1, 2, 3, 4]), path(T2, [1, 5, 6]), path(T3, [1, None, 3])]
    s2 = [path(T1, [1, 2, 3, 4]), path(T2, [1, 9, 6]), path(T3, [1, 2, 3])]
    cmp = analyze.snapshot_compare(s1, s2)
    assert {wire.ip_str(t): d.distance for t, d in cmp.diffs.items()} == {
        "198.51.100.1": 0, "198.51.100.2": 1, "198.51.100.3": 1}
    assert cmp.op_counts["substitute"] == 1 and cmp.op_counts["missing_hop"] == 1
    assert analyze.missing_hop_table(cmp) == [(2, 1, 1.0)]


def test_snapshot_disjoint_warns(caplog):
    with caplog.at_level(logging.WARNING):
        cmp = analyze.snapshot_compare([path(T1, [1])], [path(T2, [1])])
    assert cmp.diffs == {} and cmp.identical_fraction == 0.0
    assert cmp.only_in_first == 1 and cmp.only_in_second == 1
    assert any("share no targets" in m for m in caplog.messages)


def test_write_table():
    buf = io.StringIO()
    analyze.write_table(buf, ("a", "b"), [(1, 0.5), (2, 1.0)])
    assert buf.getvalue() == "#a\tb\n1\t0.500000\n2\t1.000000\n"


def test_edit_distance_matches_edit_graph(edit_oracle):
    seqs, index, dist = edit_oracle
    short = [s for s in seqs if len(s) <= 4]
    for a in short:
        for b in short:
            want = dist[index[a], index[b]]
            assert analyze.levenshtein(a, b) == want
            assert len(analyze.edit_script(a, b)) == want


seq = st.lists(st.sampled_from(["A", "B", None]), max_size=6)


@settings(max_examples=200, deadline=None)
@given(seq, seq, seq)
def test_metric_laws(a, b, c):
    d = analyze.levenshtein
    assert d(a, a) == 0
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert abs(len(a) - len(b)) <= d(a, b) <= max(len(a), len(b))


@settings(max_examples=200, deadline=None)
@given(seq, seq)
def test_edit_script_minimal_against_oracle(edit_oracle, a, b):
    seqs, index, dist = edit_oracle
    ops = analyze.edit_script(a, b)
    assert len(ops) == dist[index[tuple(a)], index[tuple(b)]]
    # replaying the script turns a into b
    out = list(a)
    offset = 0
    for op in ops:
        k = op.depth - 1 + offset
        if op.kind == "substitute":
            assert out[k] == op.old
            out[k] = op.new
        elif op.kind == "delete":
            assert out[k] == op.old
            del out[k]
            offset -= 1
        else:
            out.insert(op.depth - 1, op.new)
            offset += 1
    assert out == b
