#!/usr/bin/env python3
"""Interface-graph degree distribution of a probed simulated topology.

Also reports how many distinct interfaces answer at each TTL, which is
where neighborhood suppression pays off (few interfaces near the vantage).
"""
import argparse
from collections import Counter
from dataclasses import dataclass

from _common import open_out, paths_of, simulate
from randtrace import analyze, simnet


@dataclass
class Config:
    dests: int = 3000
    max_depth: int = 24
    balancers: float = 0.3
    seed: int = 6
    rate: float = 1e4
    output: str = "-"


def main(cfg: Config):
    topo = simnet.generate_topology(simnet.TopologySpec(cfg.dests, cfg.max_depth, cfg.balancers, 2, cfg.seed))
    paths = paths_of(simulate(topo, rate=cfg.rate)[1])
    g = analyze.build_graph(paths)
    with open_out(cfg.output) as fh:
        analyze.write_table(fh, ("degree", "nodes"), analyze.degree_distribution(g))
    per_ttl = Counter()
    for ttl in range(1, cfg.max_depth + 1):
        per_ttl[ttl] = len({p.hop(ttl).addr for p in paths if p.hop(ttl) and p.hop(ttl).addr is not None})
    print("nodes=%d edges=%d" % (len(g.nodes), len(g.edges)))
    print("interfaces per ttl: " + " ".join("%d:%d" % kv for kv in sorted(per_ttl.items())))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    for name, default in vars(Config()).items():
        p.add_argument("--" + name.replace("_", "-"), type=type(default), default=default)
    main(Config(**vars(p.parse_args())))
