"""Safe-prime subgroup arithmetic, fixed-width encodings, and hash-to-exponent.

All group work happens in G_q, the order-q subgroup of Z_p^* for a safe
prime p = 2q + 1.  Exponents live in Z_q^* (zero excluded).  Byte encodings
are big-endian and fixed width so that message bytes are canonical:
exponents and masks are ``exponent_width_bytes`` wide, group elements
``element_width_bytes`` wide.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from . import metrics
from .errors import (
    HashToExponentFailure,
    MaskDecodeError,
    ParameterSearchExhausted,
    SubgroupViolation,
)

_SMALL_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67)

PRIMALITY_ROUNDS = 64  # Miller-Rabin error below 4^-64


def is_probable_prime(n: int, rounds: int = PRIMALITY_ROUNDS) -> bool:
    """Miller-Rabin with witnesses drawn from a PRNG seeded by ``n`` itself,
    so the verdict is deterministic per candidate."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    rng = random.Random(n)
    for _ in range(rounds):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class GroupParams:
    """A safe-prime group (p = 2q + 1) with a generator g of the order-q subgroup."""

    p: int
    q: int
    g: int
    exponent_width_bytes: int

    @classmethod
    def create(cls, p: int, q: int, g: int) -> "GroupParams":
        """Build and fully validate a parameter set."""
        params = cls(p=p, q=q, g=g, exponent_width_bytes=(q.bit_length() + 7) // 8)
        params.validate()
        return params

    def validate(self) -> None:
        if self.p != 2 * self.q + 1:
            raise ValueError("p != 2q + 1")
        if not is_probable_prime(self.q):
            raise ValueError("q is not prime")
        if not is_probable_prime(self.p):
            raise ValueError("p is not prime")
        if not 2 <= self.g <= self.p - 2:
            raise ValueError("g out of range [2, p-2]")
        if pow(self.g, self.q, self.p) != 1:
            raise ValueError("g does not generate the order-q subgroup")
        if self.exponent_width_bytes != (self.q.bit_length() + 7) // 8:
            raise ValueError("exponent_width_bytes inconsistent with q")

    @property
    def element_width_bytes(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def to_json(self) -> dict:
        return {"p": str(self.p), "q": str(self.q), "g": str(self.g)}

    @classmethod
    def from_json(cls, obj: dict) -> "GroupParams":
        return cls.create(p=int(obj["p"]), q=int(obj["q"]), g=int(obj["g"]))


def generate_group_params(q_bit_length: int, rng: random.Random) -> GroupParams:
    """Search for a safe-prime group with a q of exactly ``q_bit_length`` bits.

    Deterministic for a given rng seed.  The generator is the smallest
    integer >= 2 lying in the order-q subgroup (4 = 2^2 always qualifies,
    so the scan terminates immediately).
    """
    if q_bit_length < 4:
        raise ValueError("q_bit_length must be at least 4")
    max_attempts = max(10_000, 50 * q_bit_length * q_bit_length)
    for _ in range(max_attempts):
        q = rng.getrandbits(q_bit_length) | (1 << (q_bit_length - 1)) | 1
        if not is_probable_prime(q):
            continue
        p = 2 * q + 1
        if not is_probable_prime(p):
            continue
        for h in range(2, p - 1):
            if pow(h, q, p) == 1:
                return GroupParams(
                    p=p, q=q, g=h, exponent_width_bytes=(q.bit_length() + 7) // 8
                )
    raise ParameterSearchExhausted(
        f"no safe prime with a {q_bit_length}-bit q in {max_attempts} attempts"
    )


def mod_exp(base: int, exponent: int, params: GroupParams) -> int:
    """base^exponent mod p.  Counted as one protocol exponentiation."""
    metrics.note_exp()
    return pow(base, exponent, params.p)


def is_subgroup_member(value: int, params: GroupParams) -> bool:
    """True iff value is in [1, p-1] and value^q mod p = 1.

    A deserialization guard, not a protocol operation: it does not tick
    the exponentiation counter.
    """
    return 1 <= value <= params.p - 1 and pow(value, params.q, params.p) == 1


# ---------------------------------------------------------------------------
# Hash to Z_q^*
# ---------------------------------------------------------------------------

_registered_labels: set[bytes] = set()


def register_hash_label(label: bytes) -> None:
    """Register a domain-separation label for hash_to_exponent."""
    if not label or len(label) > 32:
        raise ValueError("label must be 1..32 bytes")
    _registered_labels.add(bytes(label))


def hash_to_exponent(domain_label: bytes, data: bytes, params: GroupParams) -> int:
    """Map bytes into Z_q^* by SHAKE-256(label || counter || data) mod q,
    bumping the one-byte counter until the residue is nonzero.

    The digest is sized to the exponent width plus a 128-bit margin, so the
    reduction is close to uniform and masks fill their full width at every
    group size.  One logical hash evaluation regardless of counter retries.
    """
    if domain_label not in _registered_labels:
        raise ValueError(f"unregistered hash domain label: {domain_label!r}")
    metrics.note_hash()
    digest_width = params.exponent_width_bytes + 16
    for counter in range(256):
        digest = hashlib.shake_256(
            domain_label + bytes([counter]) + data
        ).digest(digest_width)
        value = int.from_bytes(digest, "big") % params.q
        if value != 0:
            return value
    raise HashToExponentFailure("256 consecutive zero residues; digest is broken")


# ---------------------------------------------------------------------------
# Fixed-width encodings
# ---------------------------------------------------------------------------


def encode_fixed(e: int, params: GroupParams) -> bytes:
    """Big-endian encoding of an exponent, zero-padded to the mask width."""
    return e.to_bytes(params.exponent_width_bytes, "big")


def decode_exponent(m: bytes, params: GroupParams) -> int:
    """Inverse of encode_fixed; rejects values outside Z_q^*."""
    if len(m) != params.exponent_width_bytes:
        raise ValueError(
            f"mask length {len(m)} != exponent width {params.exponent_width_bytes}"
        )
    value = int.from_bytes(m, "big")
    if not 1 <= value <= params.q - 1:
        raise MaskDecodeError(f"decoded value {value} outside [1, q-1]")
    return value


def encode_element(x: int, params: GroupParams) -> bytes:
    """Big-endian encoding of a group element, zero-padded to the element width."""
    return x.to_bytes(params.element_width_bytes, "big")


def decode_element(b: bytes, params: GroupParams) -> int:
    """Inverse of encode_element; enforces subgroup membership."""
    if len(b) != params.element_width_bytes:
        raise ValueError(
            f"element length {len(b)} != element width {params.element_width_bytes}"
        )
    value = int.from_bytes(b, "big")
    if not is_subgroup_member(value, params):
        raise SubgroupViolation(f"{value} is not in the order-q subgroup")
    return value


def xor_mask(a: bytes, b: bytes) -> bytes:
    """Bytewise XOR of two equal-length strings."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return bytes(x ^ y for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# Compiled-in groups
# ---------------------------------------------------------------------------

# Desk-scale group: 64-bit q, found by seeded search and frozen here.
_TEST64 = GroupParams(
    p=30037198723195177763,
    q=15018599361597588881,
    g=3,
    exponent_width_bytes=8,
)

# Well-known 2048-bit safe prime (the 2048-bit MODP group); 2 generates the
# order-q subgroup because p = 7 mod 8 makes 2 a quadratic residue.
_RFC3526_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E08"
    "8A67CC74020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B"
    "302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9"
    "A637ED6B0BFF5CB6F406B7EDEE386BFB5A899FA5AE9F24117C4B1FE6"
    "49286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8"
    "FD24CF5F83655D23DCA3AD961C62F356208552BB9ED529077096966D"
    "670C354E4ABC9804F1746C08CA18217C32905E462E36CE3BE39E772C"
    "180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFF"
    "FFFFFFFF",
    16,
)

_RFC3526_2048 = GroupParams(
    p=_RFC3526_2048_P,
    q=(_RFC3526_2048_P - 1) // 2,
    g=2,
    exponent_width_bytes=256,
)

GROUP_PRESETS = {
    "test64": _TEST64,
    "rfc3526-2048": _RFC3526_2048,
}


def group_preset(name: str) -> GroupParams:
    try:
        return GROUP_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown group preset {name!r}; choose from {sorted(GROUP_PRESETS)}"
        ) from None
