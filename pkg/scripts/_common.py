"""Helpers shared by the experiment scripts (simulated runs only)."""
import io
import os
import sys

from randtrace import engine, recon, simnet
from randtrace.permute import CipherKey, ProbeDomain

KEY = CipherKey.from_hex("000102030405060708090a0b0c0d0e0f")


def simulate(topo, *, rate=1e4, ttl_max=32, key=KEY, transport=None, **cfg):
    """Probe every destination of ``topo`` on a virtual clock; returns (summary, response text)."""
    domain = ProbeDomain.target_list(topo.destinations, 1, ttl_max)
    config = engine.RunConfig(domain=domain, key=key, rate=rate, src=topo.vantage, **cfg)
    transport = transport or simnet.SimTransport(topo)
    transport.open()
    out = io.StringIO()
    try:
        summary = engine.run(config, transport, out, wall_start=0.0)
    finally:
        transport.close()
    return summary, out.getvalue()


def paths_of(text):
    return recon.reconstruct(io.StringIO(text)).paths


def records_of(text):
    return recon.read_responses(io.StringIO(text)).records


def open_out(path):
    if path in (None, "-"):
        return sys.stdout
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w")
