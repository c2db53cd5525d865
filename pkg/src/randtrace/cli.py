"""Command line entry point: probe, reconstruct, compare, stats, gentopo."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import analyze, engine, recon, simnet, wire
from .clock import WallClock
from .permute import PREFIX_THRESHOLD, CipherKey, DomainError, ProbeDomain

ENV_OUTPUT = "RANDTRACE_OUTPUT"
ENV_KEY = "RANDTRACE_KEY"

log = logging.getLogger("randtrace")


class UsageError(Exception):
    pass


def _ttl(text):
    v = int(text)
    if not 1 <= v <= 255:
        raise argparse.ArgumentTypeError("TTL must be in [1, 255]")
    return v


def _shard(text):
    try:
        v, n = (int(x) for x in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError("shard must look like V/N") from None
    if n < 1 or not 0 <= v < n:
        raise argparse.ArgumentTypeError("shard %s: need 0 <= V < N" % text)
    return v, n


def _positive(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def read_targets(path) -> list[int]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                out.append(wire.ip_int(line))
            except ValueError:
                raise UsageError("%s:%d: not an IPv4 address: %r" % (path, lineno, line)) from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="randtrace", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("probe", help="probe a permuted (target, TTL) domain")
    dom = pr.add_mutually_exclusive_group(required=True)
    dom.add_argument("--input", "--targets", dest="input", metavar="FILE", help="target list, one IPv4 address per line")
    dom.add_argument("--slash24", action="store_true", help="one derived address per /24 across the whole space")
    dom.add_argument("--range", metavar="CIDR", help="every address of CIDR crossed with the TTL range")
    tr = pr.add_mutually_exclusive_group(required=True)
    tr.add_argument("--sim", metavar="FILE", help="simulated network topology file")
    tr.add_argument("--raw", action="store_true", help="live probing over raw sockets (needs privileges)")
    pr.add_argument("--key", help="cipher key as hex (default: $%s or random)" % ENV_KEY)
    pr.add_argument("--rounds", type=int, default=12, help="RC5 rounds (default 12)")
    pr.add_argument("--rate", type=_positive, default=1000.0, help="probes per second (default 1000)")
    pr.add_argument("--ttl-min", type=_ttl, default=1, help="first TTL (default 1)")
    pr.add_argument("--ttl-max", type=_ttl, default=32, help="last TTL (default 32)")
    pr.add_argument("--nbrhd", type=int, default=0, metavar="TTL",
                    help="neighborhood depth for discovery-based suppression (0 disables)")
    pr.add_argument("--eta", type=float, default=30.0, help="suppression window in seconds (default 30)")
    pr.add_argument("--mode", choices=("ack", "syn"), default="ack", help="TCP probe flavor (default ack)")
    pr.add_argument("--bgp", metavar="FILE", help="routed prefixes, one CIDR per line; others are skipped")
    pr.add_argument("--shard", type=_shard, default=(0, 1), metavar="V/N", help="probe shard V of N (default 0/1)")
    pr.add_argument("--output", "-o", help="response file (default: $%s or stdout)" % ENV_OUTPUT)
    pr.add_argument("--us", action="store_true", help="microsecond time stamps (runs must stay under ~4295 s)")
    pr.add_argument("--src", help="source address (raw: auto-detected; sim: topology vantage)")
    pr.add_argument("--iface", help="network interface for raw probing")
    pr.add_argument("--realtime", action="store_true", help="run the simulator against the wall clock")
    pr.add_argument("--prefix-threshold", type=int, default=PREFIX_THRESHOLD, metavar="N",
                    help="largest domain permuted with an in-memory table (default 2^24); larger domains "
                         "cycle-walk, which is slow for small domains")
    pr.add_argument("--drain", type=float, default=2.0, help="seconds to wait for late replies (default 2)")

    rc = sub.add_parser("reconstruct", help="rebuild per-target paths from a response file")
    rc.add_argument("input", help="response file")
    rc.add_argument("--output", "-o", help="path file (default stdout)")
    rc.add_argument("--external-sort", action="store_true", help="bounded-memory mode using temporary files")

    cp = sub.add_parser("compare", help="per-target edit distance between two path files")
    cp.add_argument("first")
    cp.add_argument("second")
    cp.add_argument("--cutoff", type=int, default=0, help="ignore hops with TTL <= CUTOFF (default 0)")
    cp.add_argument("--output", "-o", help="distance CDF table (default stdout)")
    cp.add_argument("--ops", help="write operation counts table here")
    cp.add_argument("--missing", help="write per-depth missing-hop table here")

    st = sub.add_parser("stats", help="graph, discovery and gap-limit statistics")
    st.add_argument("input", help="path file (or response file with --discovery)")
    what = st.add_mutually_exclusive_group(required=True)
    what.add_argument("--degree", action="store_true", help="interface-graph degree distribution")
    what.add_argument("--discovery", action="store_true", help="unique interfaces over time (response file input)")
    what.add_argument("--gap-limit", metavar="PATHS", help="compare against gap-limited traces in PATHS")
    what.add_argument("--summary", action="store_true", help="node and edge counts")
    st.add_argument("--bucket", type=_positive, default=1.0, help="discovery bucket in seconds")
    st.add_argument("--gap", type=int, default=5, help="consecutive silent hops that stop a trace (default 5)")
    st.add_argument("--output", "-o", help="table destination (default stdout)")

    gt = sub.add_parser("gentopo", help="generate a simulated topology")
    gt.add_argument("--dests", type=int, required=True, help="number of destinations")
    gt.add_argument("--max-depth", type=int, default=20, help="longest path in routers (default 20)")
    gt.add_argument("--balancers", type=float, default=0.0, help="probability a hop is a balanced diamond")
    gt.add_argument("--fanout", type=int, default=2, help="diamond width (default 2)")
    gt.add_argument("--seed", type=int, default=0)
    gt.add_argument("--output", "-o", help="topology file (default stdout)")
    gt.add_argument("--truth", help="also write ground-truth paths here")
    gt.add_argument("--targets", help="also write the destination list here")
    return p


class _Out:
    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = sys.stdout if self.path in (None, "-") else open(self.path, "w")
        return self.fh

    def __exit__(self, *exc):
        if self.fh is not sys.stdout:
            self.fh.close()
        else:
            self.fh.flush()


def cmd_probe(args) -> int:
    if args.ttl_min > args.ttl_max:
        raise UsageError("--ttl-min must not exceed --ttl-max")
    if args.nbrhd < 0 or args.nbrhd > args.ttl_max:
        raise UsageError("--nbrhd must be in [0, ttl-max]")
    key_hex = args.key or os.environ.get(ENV_KEY)
    try:
        key = CipherKey.from_hex(key_hex, args.rounds) if key_hex else CipherKey.generate(rounds=args.rounds)
        if args.input:
            domain = ProbeDomain.target_list(read_targets(args.input), args.ttl_min, args.ttl_max)
        elif args.slash24:
            domain = ProbeDomain.slash24(args.ttl_min, args.ttl_max)
        else:
            domain = ProbeDomain.full(args.range, args.ttl_min, args.ttl_max)
    except (ValueError, DomainError) as exc:
        raise UsageError(str(exc)) from None
    config = engine.RunConfig(
        domain=domain, key=key, rate=args.rate, mode="tcp_" + args.mode, nbrhd_ttl=args.nbrhd,
        eta=args.eta, route_filter=args.bgp, shard=args.shard,
        unit=wire.TimeUnit.US if args.us else wire.TimeUnit.MS, drain=args.drain,
        prefix_threshold=args.prefix_threshold,
    )
    try:
        config.validate()
    except engine.ConfigError as exc:
        raise UsageError(str(exc)) from None

    if args.sim:
        with open(args.sim) as f:
            topo = simnet.load_topology(f)
        config.src = wire.ip_int(args.src) if args.src else topo.vantage
        transport = simnet.SimTransport(topo, clock=WallClock() if args.realtime else None)
    else:
        from .rawnet import RawTransport, RawTransportConfig
        transport = RawTransport(RawTransportConfig(args.iface, wire.ip_int(args.src) if args.src else None))
    transport.open()
    if args.raw:
        config.src = transport.src
    out_path = args.output or os.environ.get(ENV_OUTPUT)
    try:
        with _Out(out_path) as fh:
            summary = engine.run(config, transport, fh)
    finally:
        transport.close()
    print("key=%s %s" % (key.hex(), summary.as_line()), file=sys.stderr)
    return 0


def cmd_reconstruct(args) -> int:
    if args.external_sort:
        result = recon.reconstruct_external(args.input)
    else:
        result = recon.reconstruct(args.input)
    with _Out(args.output) as fh:
        recon.write_paths(result, fh)
    s = result.summary
    log.info("paths=%d hops=%d duplicates=%d quarantined=%d", len(result.paths), s.hops, s.duplicates,
             sum(s.quarantined.values()))
    return 0


def cmd_compare(args) -> int:
    _, p1 = recon.read_paths(args.first)
    _, p2 = recon.read_paths(args.second)
    cmp = analyze.snapshot_compare(p1, p2, args.cutoff)
    with _Out(args.output) as fh:
        analyze.write_table(fh, ("distance", "cumulative_fraction"), cmp.cdf)
    if args.ops:
        with _Out(args.ops) as fh:
            analyze.write_table(fh, ("operation", "count"), sorted(cmp.op_counts.items()))
    if args.missing:
        with _Out(args.missing) as fh:
            analyze.write_table(fh, ("ttl", "missing_hops", "fraction"), analyze.missing_hop_table(cmp))
    return 0


def cmd_stats(args) -> int:
    with _Out(args.output) as fh:
        if args.discovery:
            rf = recon.read_responses(args.input)
            analyze.write_table(fh, ("seconds", "unique_interfaces"), analyze.discovery_curve(rf.records, args.bucket))
            return 0
        _, paths = recon.read_paths(args.input)
        if args.degree:
            g = analyze.build_graph(paths)
            analyze.write_table(fh, ("degree", "nodes"), analyze.degree_distribution(g))
        elif args.summary:
            g = analyze.build_graph(paths)
            analyze.write_table(fh, ("paths", "nodes", "edges"), [(len(paths), len(g.nodes), len(g.edges))])
        else:
            _, other = recon.read_paths(args.gap_limit)
            res = analyze.gap_limit_diff(paths, other, args.gap)
            analyze.write_table(fh, ("ttl_difference", "cumulative_fraction"), res.cdf)
    return 0


def cmd_gentopo(args) -> int:
    spec = simnet.TopologySpec(args.dests, args.max_depth, args.balancers, args.fanout, args.seed)
    try:
        topo = simnet.generate_topology(spec)
    except simnet.TopologyError as exc:
        raise UsageError(str(exc)) from None
    with _Out(args.output) as fh:
        simnet.dump_topology(topo, fh)
    if args.truth:
        with open(args.truth, "w") as fh:
            simnet.dump_ground_truth(topo, fh)
    if args.targets:
        with open(args.targets, "w") as fh:
            fh.writelines(wire.ip_str(d) + "\n" for d in topo.destinations)
    return 0


COMMANDS = {
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "compare": cmd_compare,
    "stats": cmd_stats,
    "gentopo": cmd_gentopo,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except (recon.ResponseFileError, simnet.TopologyError, ValueError) as exc:
        print("randtrace: error: %s" % exc, file=sys.stderr)
        return 1
    except (engine.TransportError, OSError) as exc:
        print("randtrace: error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
