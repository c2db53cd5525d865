import io
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from randtrace import engine, recon, simnet, wire  # noqa: E402
from randtrace.permute import CipherKey, ProbeDomain  # noqa: E402

TEST_KEY = CipherKey.from_hex("000102030405060708090a0b0c0d0e0f")
OTHER_KEY = CipherKey.from_hex("f0e1d2c3b4a5968778695a4b3c2d1e0f")


def ip(s):
    return wire.ip_int(s)


def chain_topology(dests, depth, policy=None, first_rid=1):
    """Every destination behind the same linear chain of ``depth`` routers.

    ``policy`` maps router id to Router keyword overrides.
    """
    policy = policy or {}
    routers = {}
    route = []
    for k in range(depth):
        rid = first_rid + k
        routers[rid] = simnet.Router(rid, (ip("10.0.0.0") + rid,), **policy.get(rid, {}))
        route.append((rid,))
    routes = {ip(d) if isinstance(d, str) else d: tuple(route) for d in dests}
    return simnet.SimTopology(routers, routes)


def run_sim(topo, domain=None, *, rate=1e4, clock=None, targets=None, ttl_max=None, transport=None, **cfg):
    """Run the engine over ``topo`` on a virtual clock; returns (summary, response text)."""
    if domain is None:
        targets = targets if targets is not None else topo.destinations
        domain = ProbeDomain.target_list(targets, 1, ttl_max or 32)
    cfg.setdefault("key", TEST_KEY)
    cfg.setdefault("src", topo.vantage)
    config = engine.RunConfig(domain=domain, rate=rate, **cfg)
    transport = transport or simnet.SimTransport(topo, clock=clock)
    transport.open()
    out = io.StringIO()
    try:
        summary = engine.run(config, transport, out, wall_start=1_700_000_000.0)
    finally:
        transport.close()
    return summary, out.getvalue()


def reconstruct_text(text):
    return recon.reconstruct(io.StringIO(text))


@pytest.fixture
def small_topo():
    return simnet.generate_topology(simnet.TopologySpec(n_dests=30, max_depth=12, seed=7))


@pytest.fixture
def balanced_topo():
    return simnet.generate_topology(simnet.TopologySpec(n_dests=120, max_depth=16, balancer_density=0.3,
                                                        fanout=2, seed=11))


# one "PASS/FAIL criterion N" line per acceptance check, shown after the run
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
