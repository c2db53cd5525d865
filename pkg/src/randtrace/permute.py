"""Keyed permutation of the (target, TTL) probing domain.

A 32-bit RC5 block cipher (16-bit words) provides the bijection.  Domains
smaller than the block space are handled either by ranking every element
by its ciphertext (prefix cipher) or by re-encrypting until the value
falls back inside the domain (cycle walking).
"""
from __future__ import annotations

import enum
import ipaddress
import logging
import secrets
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

BLOCK_SPACE = 1 << 32
# Cycle walking costs about 2**32 / size encryptions per index, so the table
# (4 bytes per element) stays in use up to 2**24 elements, where the walk is
# short enough for numpy RC5 to keep ahead of a 10^4 pps sender.
PREFIX_THRESHOLD = 1 << 24
CYCLE_WALK_CAP = 1 << 16
# mean encryptions per index above which cycle walking gets a warning
SLOW_WALK = 256
DEFAULT_ROUNDS = 12
DEFAULT_KEY_BYTES = 16

_P16 = 0xB7E1
_Q16 = 0x9E37
_MASK = 0xFFFF


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CipherKey:
    key_bytes: bytes
    rounds: int = DEFAULT_ROUNDS

    def __post_init__(self):
        if not 1 <= len(self.key_bytes) <= 255:
            raise ValueError("key must be 1-255 octets, got %d" % len(self.key_bytes))
        if not 1 <= self.rounds <= 255:
            raise ValueError("rounds must be in [1, 255]")

    @classmethod
    def from_hex(cls, text: str, rounds: int = DEFAULT_ROUNDS) -> "CipherKey":
        text = text.strip().lower()
        if text.startswith("0x"):
            text = text[2:]
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise ValueError("key is not valid hex: %r" % text) from exc
        return cls(raw, rounds)

    @classmethod
    def generate(cls, nbytes: int = DEFAULT_KEY_BYTES, rounds: int = DEFAULT_ROUNDS) -> "CipherKey":
        return cls(secrets.token_bytes(nbytes), rounds)

    def hex(self) -> str:
        return self.key_bytes.hex()


def _rotl(x: int, n: int) -> int:
    n &= 15
    return ((x << n) | (x >> (16 - n))) & _MASK


def _rotr(x: int, n: int) -> int:
    n &= 15
    return ((x >> n) | (x << (16 - n))) & _MASK


class RC5:
    """RC5 with 16-bit words, i.e. a 32-bit block.

    Integers map to blocks in network order: the four octets of the
    plaintext, most significant first, are the RC5 input bytes, and words
    are loaded little-endian from those bytes as in the reference cipher.
    """

    def __init__(self, key: CipherKey):
        self.key = key
        self.rounds = key.rounds
        self.S = self._expand(key.key_bytes, key.rounds)
        self._S_np = np.array(self.S, dtype=np.uint32)

    @staticmethod
    def _expand(key: bytes, rounds: int) -> list[int]:
        c = max(1, (len(key) + 1) // 2)
        padded = key + b"\x00" * (2 * c - len(key))
        L = [padded[2 * i] | (padded[2 * i + 1] << 8) for i in range(c)]
        t = 2 * rounds + 2
        S = [(_P16 + i * _Q16) & _MASK for i in range(t)]
        A = B = i = j = 0
        for _ in range(3 * max(t, c)):
            A = S[i] = _rotl((S[i] + A + B) & _MASK, 3)
            B = L[j] = _rotl((L[j] + A + B) & _MASK, (A + B) & 15)
            i = (i + 1) % t
            j = (j + 1) % c
        return S

    def encrypt(self, x: int) -> int:
        S = self.S
        # octets b0 b1 | b2 b3 -> little-endian words
        A = ((x >> 24) & 0xFF) | ((x >> 8) & 0xFF00)
        B = ((x >> 8) & 0xFF) | ((x << 8) & 0xFF00)
        A = (A + S[0]) & _MASK
        B = (B + S[1]) & _MASK
        for r in range(1, self.rounds + 1):
            n = B & 15
            A ^= B
            A = ((((A << n) | (A >> (16 - n))) & _MASK) + S[2 * r]) & _MASK
            n = A & 15
            B ^= A
            B = ((((B << n) | (B >> (16 - n))) & _MASK) + S[2 * r + 1]) & _MASK
        return ((A & 0xFF) << 24) | ((A >> 8) << 16) | ((B & 0xFF) << 8) | (B >> 8)

    def decrypt(self, y: int) -> int:
        S = self.S
        A = ((y >> 24) & 0xFF) | ((y >> 8) & 0xFF00)
        B = ((y >> 8) & 0xFF) | ((y << 8) & 0xFF00)
        for r in range(self.rounds, 0, -1):
            B = _rotr((B - S[2 * r + 1]) & _MASK, A) ^ A
            A = _rotr((A - S[2 * r]) & _MASK, B) ^ B
        B = (B - S[1]) & _MASK
        A = (A - S[0]) & _MASK
        return ((A & 0xFF) << 24) | ((A >> 8) << 16) | ((B & 0xFF) << 8) | (B >> 8)

    def encrypt_array(self, xs) -> np.ndarray:
        """Vectorized encrypt over an array of 32-bit plaintexts."""
        x = np.asarray(xs, dtype=np.uint32)
        S = self._S_np
        A = ((x >> 24) & 0xFF) | ((x >> 8) & 0xFF00)
        B = ((x >> 8) & 0xFF) | ((x << 8) & 0xFF00)
        A = (A + S[0]) & _MASK
        B = (B + S[1]) & _MASK
        for r in range(1, self.rounds + 1):
            A ^= B
            n = B & 15
            A = ((((A << n) | (A >> (16 - n))) & _MASK) + S[2 * r]) & _MASK
            B ^= A
            n = A & 15
            B = ((((B << n) | (B >> (16 - n))) & _MASK) + S[2 * r + 1]) & _MASK
        return ((A & 0xFF) << 24) | ((A >> 8) << 16) | ((B & 0xFF) << 8) | (B >> 8)


def block_encrypt(key: CipherKey, plaintext: int) -> int:
    return RC5(key).encrypt(plaintext & 0xFFFFFFFF)


def block_decrypt(key: CipherKey, ciphertext: int) -> int:
    return RC5(key).decrypt(ciphertext & 0xFFFFFFFF)


class DomainKind(str, enum.Enum):
    FULL_V4_TTL = "full_v4_ttl"
    SLASH24 = "slash24_mode"
    TARGET_LIST = "target_list"


class ProbeAssignment(NamedTuple):
    target: int
    ttl: int

    def __str__(self):
        return "%s/%d" % (ipaddress.IPv4Address(self.target), self.ttl)


def _as_int_addr(a) -> int:
    return a if isinstance(a, int) else int(ipaddress.IPv4Address(a))


@dataclass(frozen=True)
class ProbeDomain:
    """The set of (target, TTL) pairs a run may probe.

    ``full_v4_ttl`` covers every address of ``network`` crossed with the TTL
    range; ``slash24_mode`` covers the whole 32-bit block space and derives
    one destination per /24; ``target_list`` crosses an explicit list of
    addresses with the TTL range.
    """

    kind: DomainKind
    targets: tuple[int, ...] = ()
    ttl_min: int = 1
    ttl_max: int = 32
    network: str = "0.0.0.0/0"
    _net: tuple[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", DomainKind(self.kind))
        if not 1 <= self.ttl_min <= self.ttl_max <= 255:
            raise DomainError("need 1 <= ttl_min <= ttl_max <= 255, got [%d, %d]" % (self.ttl_min, self.ttl_max))
        object.__setattr__(self, "targets", tuple(_as_int_addr(t) for t in self.targets))
        net = ipaddress.IPv4Network(self.network)
        object.__setattr__(self, "_net", (int(net.network_address), net.num_addresses))
        if self.kind is DomainKind.TARGET_LIST and not self.targets:
            raise DomainError("target_list domain needs at least one target")
        if self.size > BLOCK_SPACE:
            raise DomainError("domain of %d elements exceeds the 32-bit block space; narrow the network or TTL range" % self.size)

    @classmethod
    def target_list(cls, targets: Sequence, ttl_min: int = 1, ttl_max: int = 32) -> "ProbeDomain":
        return cls(DomainKind.TARGET_LIST, tuple(targets), ttl_min, ttl_max)

    @classmethod
    def slash24(cls, ttl_min: int = 1, ttl_max: int = 32) -> "ProbeDomain":
        return cls(DomainKind.SLASH24, (), ttl_min, ttl_max)

    @classmethod
    def full(cls, network: str, ttl_min: int = 1, ttl_max: int = 32) -> "ProbeDomain":
        return cls(DomainKind.FULL_V4_TTL, (), ttl_min, ttl_max, network)

    @property
    def ttl_count(self) -> int:
        return self.ttl_max - self.ttl_min + 1

    @property
    def size(self) -> int:
        if self.kind is DomainKind.SLASH24:
            return BLOCK_SPACE
        if self.kind is DomainKind.TARGET_LIST:
            return len(self.targets) * self.ttl_count
        return self._net[1] * self.ttl_count


class PermutedDomain:
    """Immutable keyed bijection over ``[0, domain.size)``."""

    def __init__(self, domain: ProbeDomain, key: CipherKey, threshold: int = PREFIX_THRESHOLD):
        self.domain = domain
        self.key = key
        self.threshold = threshold
        self.cipher = RC5(key)
        self.size = domain.size
        self.strategy = "prefix_cipher" if self.size <= threshold else "cycle_walking"
        self._table = None
        if self.strategy == "prefix_cipher":
            cts = self.cipher.encrypt_array(np.arange(self.size, dtype=np.uint32))
            # ciphertexts of a bijection never tie
            self._table = np.argsort(cts).astype(np.uint32)
        elif BLOCK_SPACE / self.size > SLOW_WALK:
            log.warning("cycle walking a %d-element domain costs ~%.0f encryptions per index; "
                        "a prefix threshold of at least %d trades memory for speed",
                        self.size, BLOCK_SPACE / self.size, self.size)
        if domain.kind is DomainKind.TARGET_LIST:
            self._targets = np.array(domain.targets, dtype=np.uint32)

    def __len__(self):
        return self.size

    def permute_index(self, i: int) -> int:
        if not 0 <= i < self.size:
            raise IndexError("index %d outside [0, %d)" % (i, self.size))
        if self._table is not None:
            return int(self._table[i])
        x = i
        enc = self.cipher.encrypt
        for _ in range(CYCLE_WALK_CAP):
            x = enc(x)
            if x < self.size:
                return x
        raise RuntimeError("cycle walking exceeded %d iterations" % CYCLE_WALK_CAP)

    def permute_array(self, start: int, stop: int) -> np.ndarray:
        """Permuted values for indices ``start..stop-1`` as a uint32 array."""
        if not 0 <= start <= stop <= self.size:
            raise IndexError("range [%d, %d) outside [0, %d)" % (start, stop, self.size))
        if self._table is not None:
            return self._table[start:stop]
        x = np.arange(start, stop, dtype=np.uint64).astype(np.uint32)
        out = self.cipher.encrypt_array(x)
        if self.size == BLOCK_SPACE:
            return out
        pending = np.nonzero(out >= self.size)[0]
        for _ in range(CYCLE_WALK_CAP):
            if pending.size == 0:
                return out
            out[pending] = self.cipher.encrypt_array(out[pending])
            pending = pending[out[pending] >= self.size]
        raise RuntimeError("cycle walking exceeded %d iterations" % CYCLE_WALK_CAP)

    def decode(self, v: int) -> ProbeAssignment:
        kind = self.domain.kind
        if kind is DomainKind.SLASH24:
            return decode_slash24(v)
        if kind is DomainKind.TARGET_LIST:
            return decode_target_list(self, v)
        return decode_full(self, v)

    def assignments(self, start: int, stop: int, batch: int = 8192) -> Iterator[tuple[int, int]]:
        """Yield ``(target, ttl)`` for every index in ``[start, stop)`` in order.

        TTLs outside the domain range (only possible in /24 mode) are yielded
        as-is; filtering is the caller's job.
        """
        d = self.domain
        tc = d.ttl_count
        for lo in range(start, stop, batch):
            vals = self.permute_array(lo, min(stop, lo + batch))
            if d.kind is DomainKind.SLASH24:
                octsum = ((vals >> 24) + ((vals >> 16) & 0xFF) + ((vals >> 8) & 0xFF)) & 0xFF
                targets = (vals & 0xFFFFFF00) | octsum
                ttls = vals & 0xFF
            elif d.kind is DomainKind.TARGET_LIST:
                targets = self._targets[vals // tc]
                ttls = d.ttl_min + vals % tc
            else:
                targets = (d._net[0] + vals // tc).astype(np.uint32)
                ttls = d.ttl_min + vals % tc
            yield from zip(targets.tolist(), ttls.tolist())


def decode_slash24(c: int) -> ProbeAssignment:
    b0, b1, b2, b3 = (c >> 24) & 0xFF, (c >> 16) & 0xFF, (c >> 8) & 0xFF, c & 0xFF
    return ProbeAssignment((c & 0xFFFFFF00) | ((b0 + b1 + b2) & 0xFF), b3)


def decode_target_list(pd: PermutedDomain, v: int) -> ProbeAssignment:
    d = pd.domain
    if d.kind is not DomainKind.TARGET_LIST:
        raise DomainError("not a target_list domain")
    if not 0 <= v < pd.size:
        raise IndexError("value %d outside [0, %d)" % (v, pd.size))
    q, r = divmod(v, d.ttl_count)
    return ProbeAssignment(d.targets[q], d.ttl_min + r)


def decode_full(pd: PermutedDomain, v: int) -> ProbeAssignment:
    d = pd.domain
    if not 0 <= v < pd.size:
        raise IndexError("value %d outside [0, %d)" % (v, pd.size))
    q, r = divmod(v, d.ttl_count)
    return ProbeAssignment(d._net[0] + q, d.ttl_min + r)


def shard_range(pd, v: int, n: int) -> range:
    """Index interval assigned to shard ``v`` of ``n``.

    ``pd`` may be a PermutedDomain, a ProbeDomain or a plain size.
    """
    size = pd if isinstance(pd, int) else pd.size
    if n < 1:
        raise ValueError("shard count must be positive")
    if not 0 <= v < n:
        raise ValueError("shard id %d outside [0, %d)" % (v, n))
    return range(size * v // n, size * (v + 1) // n)
