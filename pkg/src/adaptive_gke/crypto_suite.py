"""Keyed contribution derivation, signatures, and key-derivation conventions.

All devices of one manufacturer share a single signing keypair, so a
device's contribution exponent can be derived by any of them: it is a MAC
of the session id under a key derived from the manufacturer private key.
Signature payloads are framed with 4-byte big-endian length prefixes so
field concatenation is injective.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import metrics
from .algebra import (
    GroupParams,
    encode_element,
    encode_fixed,
    hash_to_exponent,
    register_hash_label,
)

SID_BYTES = 16

CONTRIB_LABEL = b"tds-contrib"
MASK_LABEL = b"mask"
GROUP_KEY_LABEL = b"group-key"
_MAC_KEY_LABEL = b"mac-key"

for _label in (CONTRIB_LABEL, MASK_LABEL, GROUP_KEY_LABEL):
    register_hash_label(_label)


def new_session_id(rng: random.Random) -> bytes:
    """Fresh 16-byte session id from the session randomness source."""
    return rng.randbytes(SID_BYTES)


def frame(*fields: bytes) -> bytes:
    """Length-prefix every field (4-byte big-endian) and concatenate."""
    return b"".join(len(f).to_bytes(4, "big") + f for f in fields)


# ---------------------------------------------------------------------------
# Keypairs (Ed25519; deterministic signatures, pluggable behind sign/verify)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4096)
def _signer(private_key: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(private_key)


@lru_cache(maxsize=4096)
def _verifier(public_key: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(public_key)


def _public_from_private(private_key: bytes) -> bytes:
    from cryptography.hazmat.primitives.serialization import (
        Encoding,
        PublicFormat,
    )

    return _signer(private_key).public_key().public_bytes(
        Encoding.Raw, PublicFormat.Raw
    )


@dataclass(frozen=True)
class ManufacturerKeyPair:
    """One signing keypair shared by every device of a manufacturer."""

    manufacturer_id: str
    private_key: bytes
    public_key: bytes

    @classmethod
    def generate(cls, manufacturer_id: str, rng: random.Random) -> "ManufacturerKeyPair":
        seed = rng.randbytes(32)
        return cls(
            manufacturer_id=manufacturer_id,
            private_key=seed,
            public_key=_public_from_private(seed),
        )


@dataclass(frozen=True)
class QuerierKeyPair:
    private_key: bytes
    public_key: bytes

    @classmethod
    def generate(cls, rng: random.Random) -> "QuerierKeyPair":
        seed = rng.randbytes(32)
        return cls(private_key=seed, public_key=_public_from_private(seed))


def _sign(private_key: bytes, payload: bytes) -> bytes:
    metrics.note_sig()
    return _signer(private_key).sign(payload)


def _verify(public_key: bytes, payload: bytes, sig: bytes) -> bool:
    metrics.note_sig()
    try:
        _verifier(public_key).verify(sig, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


# ---------------------------------------------------------------------------
# Contribution derivation
# ---------------------------------------------------------------------------


def derive_contribution_exponent(
    keypair: ManufacturerKeyPair, sid: bytes, params: GroupParams
) -> int:
    """The manufacturer-deterministic secret exponent for one session.

    A keyed digest of the session id under a MAC key derived from the
    manufacturer private key, mapped into Z_q^*.  Depends only on
    (private key, sid): every device of the manufacturer computes the
    same value, and a fresh sid yields an unpredictable one.
    """
    mac_key = hmac.new(keypair.private_key, _MAC_KEY_LABEL, hashlib.sha256).digest()
    tag = hmac.new(mac_key, sid, hashlib.sha256).digest()
    return hash_to_exponent(CONTRIB_LABEL, tag, params)


# ---------------------------------------------------------------------------
# Signatures over protocol payloads
# ---------------------------------------------------------------------------


def contribution_payload(sid: bytes, z: int, params: GroupParams) -> bytes:
    return frame(b"contrib", sid, encode_element(z, params))


def sign_contribution(
    keypair: ManufacturerKeyPair, sid: bytes, z: int, params: GroupParams
) -> bytes:
    return _sign(keypair.private_key, contribution_payload(sid, z, params))


def verify_contribution(
    public_key: bytes, sid: bytes, z: int, sig: bytes, params: GroupParams
) -> bool:
    return _verify(public_key, contribution_payload(sid, z, params), sig)


def broadcast_payload(
    sid: bytes,
    contribution_sid: bytes,
    z0: int,
    slots: Sequence[tuple[int, bytes]],
    params: GroupParams,
) -> bytes:
    """The full broadcast body: session ids, z0, and the sorted slot list.

    Covering the whole body (not only z0) means the relay cannot alter any
    mask without invalidating the signature.
    """
    slot_blob = len(slots).to_bytes(4, "big") + b"".join(
        encode_element(z, params) + y for z, y in slots
    )
    return frame(b"bcast", sid, contribution_sid, encode_element(z0, params), slot_blob)


def sign_broadcast(
    keypair: QuerierKeyPair,
    sid: bytes,
    contribution_sid: bytes,
    z0: int,
    slots: Sequence[tuple[int, bytes]],
    params: GroupParams,
) -> bytes:
    return _sign(
        keypair.private_key, broadcast_payload(sid, contribution_sid, z0, slots, params)
    )


def verify_broadcast(
    public_key: bytes,
    sid: bytes,
    contribution_sid: bytes,
    z0: int,
    slots: Sequence[tuple[int, bytes]],
    sig: bytes,
    params: GroupParams,
) -> bool:
    return _verify(
        public_key, broadcast_payload(sid, contribution_sid, z0, slots, params), sig
    )


# ---------------------------------------------------------------------------
# Group key derivation
# ---------------------------------------------------------------------------


def compute_shared_key(
    r: int, ys: Sequence[bytes], sid: bytes, params: GroupParams
) -> bytes:
    """SK from the group secret r, the ordered masks, and the session id.

    All fields are fixed width, so plain concatenation is canonical; the
    caller supplies ``ys`` in slot order so every party hashes the same
    string.
    """
    if not ys:
        raise ValueError("ys must be nonempty")
    data = encode_fixed(r, params) + b"".join(ys) + sid
    return encode_fixed(hash_to_exponent(GROUP_KEY_LABEL, data, params), params)
