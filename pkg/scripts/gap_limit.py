#!/usr/bin/env python3
"""How much topology a gap-limited tracer misses.

Marks a fraction of generated routers silent, probes every TTL, then
compares full paths against the same paths cut at the first run of
``gap`` anonymous hops.  Writes the CDF of the TTL differences.
"""
import argparse
import random
from dataclasses import dataclass

from _common import open_out, paths_of, simulate
from randtrace import analyze, simnet


@dataclass
class Config:
    dests: int = 2000
    max_depth: int = 24
    seed: int = 5
    silent: float = 0.3
    gap: int = 5
    rate: float = 5000.0
    output: str = "-"


def main(cfg: Config):
    topo = simnet.generate_topology(simnet.TopologySpec(cfg.dests, cfg.max_depth, 0.1, 2, cfg.seed))
    rng = random.Random(cfg.seed)
    for rid, router in topo.routers.items():
        if rng.random() < cfg.silent:
            router.responds = False
    paths = paths_of(simulate(topo, rate=cfg.rate)[1])
    res = analyze.gap_limit_diff(paths, paths, cfg.gap)
    with open_out(cfg.output) as fh:
        analyze.write_table(fh, ("ttl_difference", "cumulative_fraction"), res.cdf)
    beyond = sum(v > 0 for v in res.diffs.values())
    print("%d of %d targets answer beyond a %d-hop silent gap (%.1f%%)" % (
        beyond, len(res.diffs), cfg.gap, 100.0 * beyond / len(res.diffs)))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for name, default in vars(Config()).items():
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)
    main(Config(**vars(p.parse_args())))
