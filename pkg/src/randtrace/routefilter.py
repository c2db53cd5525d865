"""Longest-prefix-match routing table used to skip unrouted destinations."""
from __future__ import annotations

import ipaddress
from typing import Iterable, Optional


class PrefixError(ValueError):
    def __init__(self, msg, lineno=None, source=None):
        self.lineno = lineno
        self.source = source
        where = ""
        if source is not None:
            where = "%s:%s: " % (source, lineno)
        elif lineno is not None:
            where = "line %d: " % lineno
        super().__init__(where + msg)


def parse_prefix(text: str) -> tuple[int, int]:
    """Canonical ``(network, length)`` from CIDR text; host bits must be zero."""
    try:
        net = ipaddress.IPv4Network(text.strip(), strict=True)
    except ValueError as exc:
        raise PrefixError(str(exc)) from None
    return int(net.network_address), net.prefixlen


def read_prefix_table(path) -> frozenset[tuple[int, int]]:
    """One CIDR per line; '#' starts a comment, blank lines are skipped."""
    entries = set()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                entries.add(parse_prefix(line))
            except PrefixError as exc:
                raise PrefixError(str(exc), lineno, path) from None
    return frozenset(entries)


class _Node:
    __slots__ = ("prefix", "length", "entry", "children")

    def __init__(self, prefix, length, entry=False):
        self.prefix = prefix
        self.length = length
        self.entry = entry
        self.children = [None, None]


def _mask(length: int) -> int:
    return (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF


def _bit(addr: int, pos: int) -> int:
    # pos 0 is the most significant bit
    return (addr >> (31 - pos)) & 1


def _common_len(a: int, b: int, limit: int) -> int:
    diff = (a ^ b) & 0xFFFFFFFF
    n = 32 - diff.bit_length()
    return min(n, limit)


class RoutingTrie:
    """Path-compressed binary (Patricia) trie over IPv4 prefixes.

    Each node holds the full prefix bits it represents; edges may skip any
    number of bits.  Lookups compare the node prefix against the masked
    address, so a walk touches at most one node per stored prefix depth.
    """

    def __init__(self):
        self.root: Optional[_Node] = None
        self.count = 0

    def insert(self, prefix: int, length: int):
        if not 0 <= length <= 32:
            raise PrefixError("prefix length %d" % length)
        if prefix & ~_mask(length) & 0xFFFFFFFF:
            raise PrefixError("host bits set in %s/%d" % (ipaddress.IPv4Address(prefix), length))
        if self.root is None:
            self.root = _Node(prefix, length, True)
            self.count = 1
            return
        parent, slot, node = None, 0, self.root
        while True:
            common = _common_len(prefix, node.prefix, min(length, node.length))
            if common == node.length == length:
                if not node.entry:
                    node.entry = True
                    self.count += 1
                return
            if common == node.length:
                # descend below node
                b = _bit(prefix, node.length)
                child = node.children[b]
                if child is None:
                    node.children[b] = _Node(prefix, length, True)
                    self.count += 1
                    return
                parent, slot, node = node, b, child
                continue
            # split: new node covers the shared bits
            if common == length:
                new = _Node(prefix, length, True)
                new.children[_bit(node.prefix, length)] = node
            else:
                new = _Node(prefix & _mask(common), common, False)
                new.children[_bit(node.prefix, common)] = node
                new.children[_bit(prefix, common)] = _Node(prefix, length, True)
            self.count += 1
            if parent is None:
                self.root = new
            else:
                parent.children[slot] = new
            return

    def longest_match(self, addr: int) -> Optional[tuple[int, int]]:
        node = self.root
        best = None
        while node is not None:
            length = node.length
            if length and (addr ^ node.prefix) >> (32 - length):
                break
            if node.entry:
                best = node
            if length == 32:
                break
            node = node.children[(addr >> (31 - length)) & 1]
        return None if best is None else (best.prefix, best.length)

    def is_routed(self, addr: int) -> bool:
        node = self.root
        while node is not None:
            length = node.length
            if length and (addr ^ node.prefix) >> (32 - length):
                return False
            if node.entry:
                return True
            if length == 32:
                return False
            node = node.children[(addr >> (31 - length)) & 1]
        return False

    def __len__(self):
        return self.count

    def __contains__(self, addr) -> bool:
        return self.is_routed(addr)


def build_trie(entries: Iterable) -> RoutingTrie:
    """Build a trie from ``(prefix, length)`` pairs or CIDR strings."""
    trie = RoutingTrie()
    for e in entries:
        prefix, length = parse_prefix(e) if isinstance(e, str) else e
        trie.insert(prefix, length)
    return trie


def is_routed(trie: RoutingTrie, addr) -> bool:
    if not isinstance(addr, int):
        addr = int(ipaddress.IPv4Address(addr))
    return trie.is_routed(addr)


def load_trie(path) -> RoutingTrie:
    return build_trie(read_prefix_table(path))
