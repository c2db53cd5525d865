import io
import math
import time
from collections import Counter

import pytest

from conftest import TEST_KEY, chain_topology, ip, reconstruct_text, run_sim
from randtrace import engine, recon, simnet, wire
from randtrace.clock import VirtualClock, WallClock
from randtrace.engine import ConfigError, NeighborhoodState, Pacer, RunConfig, TransportError, pace
from randtrace.permute import ProbeDomain
from randtrace.routefilter import build_trie

TARGETS = ["198.51.100.1", "198.51.100.2", "198.51.100.3"]


class RecordingTransport(simnet.SimTransport):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.sent = []

    def send(self, packet, dst):
        ipv4 = wire.parse_ipv4(packet)
        self.sent.append((ipv4.dst, ipv4.ttl, self.clock.now()))
        super().send(packet, dst)


class FailingTransport(simnet.SimTransport):
    def __init__(self, *a, fail_after=5, **kw):
        super().__init__(*a, **kw)
        self.left = fail_after

    def send(self, packet, dst):
        self.left -= 1
        if self.left < 0:
            raise OSError("link down")
        super().send(packet, dst)


def test_empty_shard():
    topo = chain_topology(TARGETS[:1], 2)
    domain = ProbeDomain.target_list(topo.destinations, 1, 1)
    summary, text = run_sim(topo, domain, shard=(0, 2))
    assert summary.sent == summary.responses == 0
    lines = text.splitlines()
    assert lines[0].startswith(engine.FILE_MAGIC) and lines[-1].startswith("#end")
    assert len(lines) == 2
    assert recon.reconstruct(io.StringIO(text)).paths == []


def test_three_targets_four_ttls_exact():
    topo = chain_topology(TARGETS, 6)
    summary, text = run_sim(topo, ttl_max=4)
    assert summary.sent == 12 and summary.responses == 12
    paths = reconstruct_text(text).by_target()
    for t in topo.destinations:
        gt = topo.ground_truth(t).hops
        assert [h.addr for h in paths[t].hops] == list(gt[:4])
        assert all(h.provenance == recon.OBSERVED for h in paths[t].hops)
        assert [h.rtt for h in paths[t].hops] == [2, 4, 6, 8]


def test_coverage_exactly_once():
    topo = chain_topology(TARGETS, 3)
    tr = RecordingTransport(topo)
    run_sim(topo, ttl_max=9, transport=tr)
    pairs = [(d, t) for d, t, _ in tr.sent]
    assert Counter(pairs) == Counter({(ip(a), t): 1 for a in TARGETS for t in range(1, 10)})


def test_rate_1000_over_5000_probes_virtual():
    dests = [ip("203.0.113.0") + k for k in range(250)]
    topo = chain_topology(dests, 3)
    tr = RecordingTransport(topo)
    summary, _ = run_sim(topo, rate=1000, ttl_max=20, transport=tr, drain=0.0)
    assert summary.sent == 5000
    span = tr.sent[-1][2] - tr.sent[0][2]
    assert span == pytest.approx(5.0, rel=0.05)


def test_pacer_burst_bound():
    clock = VirtualClock()
    p = Pacer(1e6, clock)
    assert p.capacity == pytest.approx(1000)
    clock.sleep(10.0)  # idle time must not bank more than 1 ms of tokens
    n = 0
    while p.delay() == 0:
        p.take()
        n += 1
    assert n == 1000


def test_pacer_minimum_capacity():
    p = Pacer(10, VirtualClock())
    assert p.capacity == 1.0


def test_pace_zero_and_slow():
    assert list(pace(100, 0)) == []
    t0 = time.monotonic()
    stamps = list(pace(1, 3, WallClock()))
    assert time.monotonic() - t0 >= 1.95
    assert len(stamps) == 3


@pytest.mark.slow
def test_pace_1e5_pps_1e6_probes_virtual():
    clock = VirtualClock()
    last = None
    for last in pace(1e5, 10**6, clock):
        pass
    assert last == pytest.approx(10.0, abs=0.5)


def test_pace_long_run_rate():
    clock = VirtualClock()
    stamps = list(pace(2500, 20000, clock))
    rate = (len(stamps) - 1) / (stamps[-1] - stamps[0])
    assert rate == pytest.approx(2500, rel=0.05)


def test_config_validation():
    d = ProbeDomain.target_list([1], 1, 4)
    bad = [dict(rate=0), dict(mode="udp"), dict(nbrhd_ttl=5), dict(eta=-1), dict(shard=(2, 2)), dict(shard=(0, 0))]
    for kw in bad:
        with pytest.raises(ConfigError):
            RunConfig(domain=d, key=TEST_KEY, **kw).validate()
    RunConfig(domain=d, key=TEST_KEY, nbrhd_ttl=4).validate()


def test_microsecond_guard():
    # 2^32 us is about 4295 s; a /24 sweep of 32 TTLs at 1000 pps is far longer
    with pytest.raises(ConfigError):
        RunConfig(domain=ProbeDomain.slash24(), key=TEST_KEY, unit="us").validate()
    RunConfig(domain=ProbeDomain.target_list(range(100), 1, 32), key=TEST_KEY, unit="us").validate()


def test_microsecond_run_rtts():
    topo = chain_topology(TARGETS, 4)
    _, text = run_sim(topo, ttl_max=4, unit="us")
    paths = reconstruct_text(text).by_target()
    assert [h.rtt for h in paths[ip(TARGETS[0])].hops] == [2000, 4000, 6000, 8000]


def test_route_filter_skips_without_tokens():
    routed = [ip("203.0.113.0") + k for k in range(20)]
    unrouted = [ip("198.18.0.0") + k for k in range(20)]
    topo = chain_topology(routed + unrouted, 2)
    trie = build_trie(["203.0.113.0/24"])
    cfg = RunConfig(domain=ProbeDomain.target_list(routed + unrouted, 1, 5), key=TEST_KEY, rate=100,
                    src=topo.vantage, drain=0.0)
    tr = RecordingTransport(topo)
    tr.open()
    summary = engine.run(cfg, tr, io.StringIO(), trie=trie)
    assert summary.sent == 100 and summary.skipped_unrouted == 100
    assert {d for d, _, _ in tr.sent} == set(routed)
    # 100 probes at 100 pps: skipped entries cost no pacing time
    assert tr.sent[-1][2] - tr.sent[0][2] == pytest.approx(0.99, rel=0.02)


def test_route_filter_from_file(tmp_path):
    p = tmp_path / "bgp.txt"
    p.write_text("203.0.113.0/25\n")
    dests = [ip("203.0.113.1"), ip("203.0.113.200")]
    topo = chain_topology(dests, 2)
    summary, _ = run_sim(topo, ttl_max=2, route_filter=str(p))
    assert summary.sent == 2 and summary.skipped_unrouted == 2


def test_slash24_filters_ttl_range_and_zero():
    topo = chain_topology([], 2)
    domain = ProbeDomain.slash24(1, 16)
    summary, _ = run_sim(topo, domain, shard=(0, 1 << 16), drain=0.0)
    assert summary.sent + summary.skipped_ttl_range == (1 << 32) >> 16
    # ttl octet uniform over 0..255: 16 of 256 values are kept
    assert summary.sent == pytest.approx(65536 * 16 / 256, rel=0.1)


def test_transport_failure_marks_output():
    topo = chain_topology(TARGETS, 3)
    out = io.StringIO()
    cfg = RunConfig(domain=ProbeDomain.target_list(topo.destinations, 1, 8), key=TEST_KEY, src=topo.vantage)
    tr = FailingTransport(topo, fail_after=5)
    tr.open()
    with pytest.raises(TransportError):
        engine.run(cfg, tr, out)
    last = out.getvalue().splitlines()[-1]
    assert last.startswith("#aborted") and "sent=5" in last
    rf = recon.read_responses(io.StringIO(out.getvalue()))
    assert rf.footer[0] == "aborted" and len(rf.records) <= 5


def test_output_failure_aborts():
    class Broken(io.StringIO):
        def write(self, s):
            if not s.startswith("#"):
                raise OSError("disk full")
            return super().write(s)

    topo = chain_topology(TARGETS, 3)
    cfg = RunConfig(domain=ProbeDomain.target_list(topo.destinations, 1, 3), key=TEST_KEY, src=topo.vantage)
    tr = simnet.SimTransport(topo)
    tr.open()
    with pytest.raises(OSError, match="disk full"):
        engine.run(cfg, tr, Broken())


def test_byte_identical_reruns():
    topo = simnet.generate_topology(simnet.TopologySpec(n_dests=40, balancer_density=0.3, seed=5))
    topo.routers[3].loss_prob = 0.3
    _, a = run_sim(topo)
    _, b = run_sim(topo)
    assert a == b


def test_single_shard_equals_unsharded(small_topo):
    _, a = run_sim(small_topo)
    _, b = run_sim(small_topo, shard=(0, 1))
    assert a == b


def test_shards_cover_domain(small_topo):
    total = Counter()
    for v in range(3):
        tr = RecordingTransport(small_topo)
        run_sim(small_topo, transport=tr, shard=(v, 3))
        total.update((d, t) for d, t, _ in tr.sent)
    assert len(total) == len(small_topo.destinations) * 32
    assert set(total.values()) == {1}


def test_randomized_order_no_consecutive_clustering():
    # slash24 domain: first 10^4 transmitted probes
    topo = chain_topology([], 1)
    tr = RecordingTransport(topo)
    run_sim(topo, ProbeDomain.slash24(1, 32), shard=(0, 1 << 12), transport=tr, drain=0.0)
    seq = [d >> 8 for d, _, _ in tr.sent[:10_000]]
    assert len(seq) == 10_000
    repeats = sum(a == b for a, b in zip(seq, seq[1:]))
    # each /24 holds 32 of the 2^24*32 kept pairs: chance of a repeat is ~2^-24
    expected = (len(seq) - 1) / (1 << 24)
    assert repeats <= expected + 5 * math.sqrt(expected) + 1


# -- neighborhood ------------------------------------------------------------

def _rec(ttl, addr):
    return wire.ResponseRecord(ip("198.51.100.1"), ttl, addr, 1, 0.0, "ttl_exceeded")


def test_neighborhood_first_response():
    st = NeighborhoodState(3, eta=2.0)
    st.note_probe(1, 0.0)
    engine.neighborhood_update(st, _rec(1, 7), 0.01)
    assert st.seen_interfaces[1] == {7} and not st.skipping[1]


def test_neighborhood_suppresses_after_eta():
    st = NeighborhoodState(3, eta=2.0)
    st.note_probe(1, 0.0)
    st.update(_rec(1, 7), 0.01)
    for t in (0.5, 1.0, 2.0):
        st.note_probe(1, t)
        assert not st.should_skip(1, t)
    st.note_probe(1, 2.02)
    assert st.should_skip(1, 2.03)
    # once suppressed, stays suppressed even if something new shows up
    st.update(_rec(1, 8), 2.1)
    assert st.should_skip(1, 5.0)


def test_neighborhood_new_interface_resets_window():
    st = NeighborhoodState(3, eta=2.0)
    st.note_probe(2, 0.0)
    st.update(_rec(2, 7), 0.01)
    st.note_probe(2, 1.9)
    st.update(_rec(2, 8), 1.95)  # second balanced router
    st.note_probe(2, 3.5)
    assert not st.should_skip(2, 3.5)
    st.note_probe(2, 3.96)
    assert st.should_skip(2, 3.96)


def test_neighborhood_window_opens_at_first_probe():
    st = NeighborhoodState(2, eta=2.0, suppress_silent=True)
    assert not st.should_skip(2, 100.0)
    st.note_probe(2, 100.0)
    st.note_probe(2, 101.0)
    assert not st.should_skip(2, 101.0)
    st.note_probe(2, 102.5)
    assert st.should_skip(2, 102.5)


def test_neighborhood_silent_depth_policy():
    st = NeighborhoodState(2, eta=1.0, suppress_silent=False)
    st.note_probe(1, 0.0)
    st.note_probe(1, 50.0)
    assert not st.should_skip(1, 50.0)


def test_neighborhood_ignores_deep_and_tcp():
    st = NeighborhoodState(2, eta=1.0)
    st.update(_rec(5, 9), 0.0)
    r = _rec(1, 9)
    r.response_type = "tcp_reply"
    st.update(r, 0.0)
    assert st.seen_interfaces[1] == set()
    assert not st.should_skip(5, 100.0)


def _nbr_topology(n_dests=200):
    dests = [ip("203.0.113.0") + k for k in range(n_dests)]
    routers = {i: simnet.Router(i, (ip("10.0.0.0") + i,)) for i in range(1, 8)}
    routes = {d: ((1,), (2,), (3,), (4,), (5, 6), (7,)) for d in dests}
    return simnet.SimTopology(routers, routes, seed=1)


def test_engine_neighborhood_run():
    topo = _nbr_topology()
    summary, text = run_sim(topo, rate=200, ttl_max=8, nbrhd_ttl=3, eta=2.0)
    assert summary.suppressed_ttls == [1, 2, 3]
    assert summary.skipped_neighborhood > 0
    for t in (1, 2, 3):
        assert summary.sent_by_ttl[t] < summary.sent_by_ttl[6]
    assert "suppressed=1,2,3" in text.splitlines()[-1]


def test_neighborhood_safety_without_silent_suppression():
    topo = _nbr_topology(60)
    topo.routers[2].responds = False
    summary, text = run_sim(topo, rate=50, ttl_max=6, nbrhd_ttl=3, eta=2.0, suppress_silent=False)
    rf = recon.read_responses(io.StringIO(text))
    answered = {r.sent_ttl for r in rf.records}
    assert 2 not in summary.suppressed_ttls
    for t in summary.suppressed_ttls:
        assert t in answered


def test_silent_depth_suppressed_by_default_and_left_anonymous():
    topo = _nbr_topology(60)
    topo.routers[2].responds = False
    summary, text = run_sim(topo, rate=50, ttl_max=6, nbrhd_ttl=3, eta=2.0)
    assert 2 in summary.suppressed_ttls
    for p in reconstruct_text(text).paths:
        assert p.hop(2).provenance == recon.ANONYMOUS
