#!/usr/bin/env python3
"""Compare two snapshots of the same simulated network.

The second snapshot sees a few rate-limited routers and a handful of
rerouted destinations, so the diff shows both address substitutions and
missing hops.  Writes the distance CDF and the per-depth missing-hop table.
"""
import argparse
import random
from dataclasses import dataclass

from _common import open_out, paths_of, simulate
from randtrace import analyze, simnet


@dataclass
class Config:
    dests: int = 1000
    max_depth: int = 20
    seed: int = 4
    rate: float = 1000.0
    limited_routers: int = 5
    reply_rate: float = 20.0
    reroutes: int = 20
    cutoff: int = 0
    output: str = "-"
    missing: str = ""


def perturb(topo, cfg: Config, rng):
    # rate limits on the busiest routers
    use = {}
    for route in topo.routes.values():
        for group in route:
            for rid in group:
                use[rid] = use.get(rid, 0) + 1
    for rid in sorted(use, key=use.get, reverse=True)[1:1 + cfg.limited_routers]:
        topo.routers[rid].rate_limit = cfg.reply_rate
    # reroute some destinations through a fresh router at a random depth
    next_rid = max(topo.routers) + 1
    for dest in rng.sample(topo.destinations, min(cfg.reroutes, len(topo.destinations))):
        route = list(topo.routes[dest])
        k = rng.randrange(len(route))
        topo.routers[next_rid] = simnet.Router(next_rid, (0x0A800000 + next_rid,))
        route[k] = (next_rid,)
        topo.routes[dest] = tuple(route)
        next_rid += 1
    return simnet.SimTopology(topo.routers, topo.routes, vantage=topo.vantage, seed=topo.seed,
                              default_route=topo.default_route)


def main(cfg: Config):
    spec = simnet.TopologySpec(cfg.dests, cfg.max_depth, 0.0, 2, cfg.seed)
    s1 = paths_of(simulate(simnet.generate_topology(spec), rate=cfg.rate)[1])
    topo2 = perturb(simnet.generate_topology(spec), cfg, random.Random(cfg.seed))
    s2 = paths_of(simulate(topo2, rate=cfg.rate)[1])
    cmp = analyze.snapshot_compare(s1, s2, cfg.cutoff)
    with open_out(cfg.output) as fh:
        analyze.write_table(fh, ("distance", "cumulative_fraction"), cmp.cdf)
    if cfg.missing:
        with open_out(cfg.missing) as fh:
            analyze.write_table(fh, ("ttl", "missing_hops", "fraction"), analyze.missing_hop_table(cmp))
    print("identical paths: %.1f%%; operations: %s" % (
        100 * cmp.identical_fraction, ", ".join("%s=%d" % kv for kv in sorted(cmp.op_counts.items()))))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for name, default in vars(Config()).items():
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)
    main(Config(**vars(p.parse_args())))
