"""Querier and device state machines: contribute, finalize, derive, re-key.

A session runs in two rounds.  Round 1: each online device derives its
manufacturer-deterministic exponent r_i for the session id, sends
z_i = g^r_i with a signature.  Round 2: the querier deduplicates the
contributions (one slot per manufacturer), computes x_i = z_i^r0 and masks
the group secret r as y_i = H(x_i || sid) xor r, then broadcasts z0 = g^r0
with the sorted (z_i, y_i) slots under its own signature.  Any device of a
represented manufacturer, online or not during round 1, can recompute r_i,
unmask r from its slot, and derive the same group key.

Re-keying: a join keeps the existing slots, adds the joiner's, and re-masks
everything under a fresh session id and fresh querier secrets.  Because the
retained z_i were derived from the original session id, the broadcast
carries that id separately (``contribution_sid``) so devices know which id
to feed their exponent derivation.  A leave is a full re-run among the
remaining manufacturers with fresh everything.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from . import metrics
from .algebra import (
    GroupParams,
    decode_element,
    decode_exponent,
    encode_element,
    encode_fixed,
    hash_to_exponent,
    is_subgroup_member,
    mod_exp,
    xor_mask,
)
from .crypto_suite import (
    MASK_LABEL,
    SID_BYTES,
    ManufacturerKeyPair,
    QuerierKeyPair,
    compute_shared_key,
    derive_contribution_exponent,
    new_session_id,
    sign_broadcast,
    sign_contribution,
    verify_broadcast,
    verify_contribution,
)
from .errors import (
    BadBroadcastSignature,
    BadSignature,
    DuplicateManufacturer,
    EmptyContributions,
    EmptyGroup,
    InvariantViolation,
    ManufacturerNotRepresented,
    StaleSessionId,
    SubgroupViolation,
    UnknownLeaver,
    WrongSessionId,
)

# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------


def _parse_frames(data: bytes) -> list[bytes]:
    fields = []
    offset = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise ValueError("truncated length prefix")
        n = int.from_bytes(data[offset : offset + 4], "big")
        offset += 4
        if offset + n > len(data):
            raise ValueError("field extends past end of message")
        fields.append(data[offset : offset + n])
        offset += n
    return fields


def _frame_fields(*fields: bytes) -> bytes:
    return b"".join(len(f).to_bytes(4, "big") + f for f in fields)


@dataclass(frozen=True)
class ContributionMessage:
    """Round-1 message from a device: (sid, z, signature, manufacturer key)."""

    sid: bytes
    z: int
    sig: bytes
    manufacturer_public_key: bytes

    def to_bytes(self, params: GroupParams) -> bytes:
        return _frame_fields(
            self.sid, encode_element(self.z, params), self.sig,
            self.manufacturer_public_key,
        )

    @classmethod
    def from_bytes(cls, data: bytes, params: GroupParams) -> "ContributionMessage":
        fields = _parse_frames(data)
        if len(fields) != 4:
            raise ValueError(f"contribution message has {len(fields)} fields, want 4")
        sid, z_enc, sig, pk = fields
        if len(sid) != SID_BYTES:
            raise ValueError("bad sid length")
        return cls(sid=sid, z=decode_element(z_enc, params), sig=sig,
                   manufacturer_public_key=pk)

    def to_json(self, params: GroupParams) -> dict:
        return {
            "sid": self.sid.hex(),
            "z": encode_element(self.z, params).hex(),
            "sig": self.sig.hex(),
            "manufacturer_public_key": self.manufacturer_public_key.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict, params: GroupParams) -> "ContributionMessage":
        return cls(
            sid=bytes.fromhex(obj["sid"]),
            z=decode_element(bytes.fromhex(obj["z"]), params),
            sig=bytes.fromhex(obj["sig"]),
            manufacturer_public_key=bytes.fromhex(obj["manufacturer_public_key"]),
        )


@dataclass(frozen=True)
class BroadcastMessage:
    """Round-2 message from the querier.

    ``slots`` is strictly sorted by z (ascending; identical to sorting by
    the canonical big-endian encoding), one slot per manufacturer.
    ``contribution_sid`` names the session id the slot exponents were
    derived from; it equals ``sid`` except in join re-keys.
    """

    sid: bytes
    contribution_sid: bytes
    z0: int
    slots: tuple[tuple[int, bytes], ...]
    sig: bytes

    def ys(self) -> list[bytes]:
        return [y for _, y in self.slots]

    def to_bytes(self, params: GroupParams) -> bytes:
        slot_blob = len(self.slots).to_bytes(4, "big") + b"".join(
            encode_element(z, params) + y for z, y in self.slots
        )
        return _frame_fields(
            self.sid, self.contribution_sid, encode_element(self.z0, params),
            slot_blob, self.sig,
        )

    @classmethod
    def from_bytes(cls, data: bytes, params: GroupParams) -> "BroadcastMessage":
        fields = _parse_frames(data)
        if len(fields) != 5:
            raise ValueError(f"broadcast message has {len(fields)} fields, want 5")
        sid, csid, z0_enc, slot_blob, sig = fields
        if len(sid) != SID_BYTES or len(csid) != SID_BYTES:
            raise ValueError("bad sid length")
        z0 = decode_element(z0_enc, params)
        count = int.from_bytes(slot_blob[:4], "big")
        stride = params.element_width_bytes + params.exponent_width_bytes
        if len(slot_blob) != 4 + count * stride:
            raise ValueError("slot blob length inconsistent with count")
        slots = []
        for i in range(count):
            start = 4 + i * stride
            z_enc = slot_blob[start : start + params.element_width_bytes]
            y = slot_blob[start + params.element_width_bytes : start + stride]
            slots.append((decode_element(z_enc, params), y))
        msg = cls(sid=sid, contribution_sid=csid, z0=z0, slots=tuple(slots), sig=sig)
        msg.check_slot_order()
        return msg

    def check_slot_order(self) -> None:
        zs = [z for z, _ in self.slots]
        if any(a >= b for a, b in zip(zs, zs[1:])):
            raise ValueError("slots not strictly sorted by z")

    def to_json(self, params: GroupParams) -> dict:
        return {
            "sid": self.sid.hex(),
            "contribution_sid": self.contribution_sid.hex(),
            "z0": encode_element(self.z0, params).hex(),
            "slots": [
                {"z": encode_element(z, params).hex(), "y": y.hex()}
                for z, y in self.slots
            ],
            "sig": self.sig.hex(),
        }

    @classmethod
    def from_json(cls, obj: dict, params: GroupParams) -> "BroadcastMessage":
        msg = cls(
            sid=bytes.fromhex(obj["sid"]),
            contribution_sid=bytes.fromhex(obj["contribution_sid"]),
            z0=decode_element(bytes.fromhex(obj["z0"]), params),
            slots=tuple(
                (decode_element(bytes.fromhex(s["z"]), params), bytes.fromhex(s["y"]))
                for s in obj["slots"]
            ),
            sig=bytes.fromhex(obj["sig"]),
        )
        msg.check_slot_order()
        return msg


# ---------------------------------------------------------------------------
# Participant state
# ---------------------------------------------------------------------------


@dataclass
class TdsState:
    """One device.  Single owner: never share an instance across concurrent calls.

    ``seen_sids`` is the persistent freshness ledger: a session id is added
    once the device has replied to it or derived a key under it, and is
    never accepted for a contribution request again.  ``_contributions``
    caches (r_i, z_i) per session id so the round-2 derivation reuses the
    round-1 work instead of recomputing it.
    """

    device_id: str
    keypair: ManufacturerKeyPair
    seen_sids: set[bytes] = field(default_factory=set)
    derived_keys: dict[bytes, bytes] = field(default_factory=dict)
    _contributions: dict[bytes, tuple[int, int]] = field(default_factory=dict)

    @property
    def manufacturer_id(self) -> str:
        return self.keypair.manufacturer_id


@dataclass
class QuerierSession:
    """Querier-side session state.  Single owner, like TdsState.

    ``contribution_sid`` is the id the group's contribution exponents were
    derived from; it equals ``sid`` for a fresh session and is inherited
    unchanged by join re-keys.
    """

    keypair: QuerierKeyPair
    sid: bytes
    contribution_sid: bytes
    r0: int
    r: int
    z0: int
    accepted_slots: dict[int, bytes] = field(default_factory=dict)
    slot_owners: dict[int, bytes] = field(default_factory=dict)
    shared_key: Optional[bytes] = None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def tds_contribute(state: TdsState, sid: bytes, params: GroupParams) -> ContributionMessage:
    """Round 1 on a device: derive r_i, send z_i = g^r_i with a signature.

    Refuses a session id it has already served (replay defense).
    """
    if sid in state.seen_sids:
        raise StaleSessionId(f"{state.device_id} already served sid {sid.hex()}")
    r_i = derive_contribution_exponent(state.keypair, sid, params)
    z = mod_exp(params.g, r_i, params)
    sig = sign_contribution(state.keypair, sid, z, params)
    state.seen_sids.add(sid)
    state._contributions[sid] = (r_i, z)
    return ContributionMessage(
        sid=sid, z=z, sig=sig, manufacturer_public_key=state.keypair.public_key
    )


def querier_open_session(
    keypair: QuerierKeyPair, params: GroupParams, rng: random.Random
) -> QuerierSession:
    """Start a session: fresh sid, secrets r0 and r, and z0 = g^r0."""
    sid = new_session_id(rng)
    r0 = rng.randrange(1, params.q)
    r = rng.randrange(1, params.q)
    z0 = mod_exp(params.g, r0, params)
    return QuerierSession(
        keypair=keypair, sid=sid, contribution_sid=sid, r0=r0, r=r, z0=z0
    )


def _mask_for(x: int, sid: bytes, params: GroupParams) -> bytes:
    return encode_fixed(hash_to_exponent(MASK_LABEL, encode_element(x, params) + sid, params), params)


def _assemble_broadcast(
    session: QuerierSession,
    slot_sources: Sequence[tuple[int, bytes]],
    params: GroupParams,
) -> tuple[BroadcastMessage, bytes]:
    """Mask r for every (z, owner key) pair and emit the signed broadcast."""
    r_enc = encode_fixed(session.r, params)
    slots = []
    owners = {}
    for z, owner in sorted(slot_sources, key=lambda pair: pair[0]):
        x = mod_exp(z, session.r0, params)
        y = xor_mask(_mask_for(x, session.sid, params), r_enc)
        slots.append((z, y))
        owners[z] = owner
    shared_key = compute_shared_key(session.r, [y for _, y in slots], session.sid, params)
    sig = sign_broadcast(
        session.keypair, session.sid, session.contribution_sid, session.z0, slots, params
    )
    broadcast = BroadcastMessage(
        sid=session.sid,
        contribution_sid=session.contribution_sid,
        z0=session.z0,
        slots=tuple(slots),
        sig=sig,
    )
    session.accepted_slots = {z: y for z, y in slots}
    session.slot_owners = owners
    session.shared_key = shared_key
    return broadcast, shared_key


def querier_finalize(
    session: QuerierSession,
    contributions: Sequence[ContributionMessage],
    params: GroupParams,
) -> tuple[BroadcastMessage, bytes]:
    """Round 2 on the querier: dedup, verify, mask, sort, sign, derive SK.

    Contributions are deduplicated by exact z before verification, so one
    signature check happens per manufacturer, not per device.  Any bad
    signature aborts the whole session.  The output is invariant under
    permutation of the input list.
    """
    if not contributions:
        raise EmptyContributions("no contributions to finalize")
    for c in contributions:
        if c.sid != session.contribution_sid:
            raise WrongSessionId(
                f"contribution for sid {c.sid.hex()}, session expects "
                f"{session.contribution_sid.hex()}"
            )
    distinct: dict[int, ContributionMessage] = {}
    for c in contributions:
        distinct.setdefault(c.z, c)
    for z, c in distinct.items():
        if not is_subgroup_member(z, params):
            raise SubgroupViolation(f"contribution z {z} outside the subgroup")
        if not verify_contribution(
            c.manufacturer_public_key, c.sid, c.z, c.sig, params
        ):
            raise BadSignature(
                f"bad contribution signature under key "
                f"{c.manufacturer_public_key.hex()}",
                public_key=c.manufacturer_public_key,
            )
    slot_sources = [(z, c.manufacturer_public_key) for z, c in distinct.items()]
    return _assemble_broadcast(session, slot_sources, params)


def tds_derive_key(
    state: TdsState,
    broadcast: BroadcastMessage,
    querier_public_key: bytes,
    params: GroupParams,
) -> bytes:
    """Broadcast receipt on a device: verify, find own slot, unmask, derive SK.

    Works whether or not this device contributed in round 1: the exponent
    for ``broadcast.contribution_sid`` is reused from the round-1 cache if
    present and derived fresh otherwise.  Fails if no slot matches the
    device's manufacturer.
    """
    if not verify_broadcast(
        querier_public_key,
        broadcast.sid,
        broadcast.contribution_sid,
        broadcast.z0,
        broadcast.slots,
        broadcast.sig,
        params,
    ):
        raise BadBroadcastSignature("broadcast signature invalid")
    cached = state._contributions.get(broadcast.contribution_sid)
    if cached is not None:
        r_i, z_i = cached
    else:
        r_i = derive_contribution_exponent(
            state.keypair, broadcast.contribution_sid, params
        )
        z_i = mod_exp(params.g, r_i, params)
    slot_y = None
    for z, y in broadcast.slots:
        if z == z_i:
            slot_y = y
            break
    if slot_y is None:
        raise ManufacturerNotRepresented(
            f"no slot for manufacturer {state.keypair.manufacturer_id!r} "
            f"in broadcast {broadcast.sid.hex()}"
        )
    x = mod_exp(broadcast.z0, r_i, params)
    r = decode_exponent(xor_mask(slot_y, _mask_for(x, broadcast.sid, params)), params)
    shared_key = compute_shared_key(r, broadcast.ys(), broadcast.sid, params)
    state.derived_keys[broadcast.sid] = shared_key
    state.seen_sids.add(broadcast.sid)
    state.seen_sids.add(broadcast.contribution_sid)
    state._contributions.setdefault(broadcast.contribution_sid, (r_i, z_i))
    return shared_key


ContributionProvider = Callable[[bytes], Sequence[ContributionMessage]]


def querier_rekey_join(
    old_session: QuerierSession,
    new_contribution: ContributionMessage,
    keypair: QuerierKeyPair,
    params: GroupParams,
    rng: random.Random,
) -> tuple[QuerierSession, BroadcastMessage, bytes]:
    """Admit a new manufacturer: keep the old slots, re-mask under fresh secrets.

    The joiner contributes under the group's contribution sid (the old
    devices' exponents stay valid), while the session id, r0, and r are all
    fresh, so the joiner cannot unmask any earlier group secret and the new
    key differs from the old one.
    """
    if old_session.shared_key is None:
        raise ValueError("old session was never finalized")
    if new_contribution.sid != old_session.contribution_sid:
        raise WrongSessionId(
            f"joiner contributed for sid {new_contribution.sid.hex()}, group "
            f"uses {old_session.contribution_sid.hex()}"
        )
    if not is_subgroup_member(new_contribution.z, params):
        raise SubgroupViolation("joiner z outside the subgroup")
    if new_contribution.z in old_session.accepted_slots:
        raise DuplicateManufacturer("joiner z collides with an existing slot")
    if not verify_contribution(
        new_contribution.manufacturer_public_key,
        new_contribution.sid,
        new_contribution.z,
        new_contribution.sig,
        params,
    ):
        raise BadSignature(
            "bad joiner signature",
            public_key=new_contribution.manufacturer_public_key,
        )
    sid = new_session_id(rng)
    r0 = rng.randrange(1, params.q)
    r = rng.randrange(1, params.q)
    session = QuerierSession(
        keypair=keypair,
        sid=sid,
        contribution_sid=old_session.contribution_sid,
        r0=r0,
        r=r,
        z0=mod_exp(params.g, r0, params),
    )
    slot_sources = [
        (z, old_session.slot_owners[z]) for z in old_session.accepted_slots
    ] + [(new_contribution.z, new_contribution.manufacturer_public_key)]
    broadcast, shared_key = _assemble_broadcast(session, slot_sources, params)
    return session, broadcast, shared_key


def querier_rekey_leave(
    old_session: QuerierSession,
    leaving_z: int,
    remaining_contributions: ContributionProvider,
    keypair: QuerierKeyPair,
    params: GroupParams,
    rng: random.Random,
) -> tuple[QuerierSession, BroadcastMessage, bytes]:
    """Evict a manufacturer: full re-run among the rest with fresh everything.

    ``remaining_contributions`` is called with the fresh session id and must
    return round-1 contributions from the remaining manufacturers only; the
    departed manufacturer's exponent for the new id is unknowable to it
    before the fact, so it ends up with no slot.
    """
    if old_session.shared_key is None:
        raise ValueError("old session was never finalized")
    if leaving_z not in old_session.accepted_slots:
        raise UnknownLeaver(f"z {leaving_z} does not match any slot")
    if len(old_session.accepted_slots) == 1:
        raise EmptyGroup("the last manufacturer cannot leave")
    departed_key = old_session.slot_owners[leaving_z]
    session = querier_open_session(keypair, params, rng)
    contributions = list(remaining_contributions(session.sid))
    for c in contributions:
        if c.manufacturer_public_key == departed_key:
            raise ValueError("departed manufacturer present in remaining contributions")
    broadcast, shared_key = querier_finalize(session, contributions, params)
    return session, broadcast, shared_key


# ---------------------------------------------------------------------------
# Runtime invariant checks
# ---------------------------------------------------------------------------


def recover_slot_value(
    broadcast: BroadcastMessage, r_i: int, params: GroupParams
) -> int:
    """Unmask one slot using a manufacturer exponent r_i; returns the group secret r.

    Uses the device-side pairing x_i = z0^r_i, so it checks the actual
    derivation path rather than the querier's construction.
    """
    z_i = pow(params.g, r_i, params.p)
    for z, y in broadcast.slots:
        if z == z_i:
            x = pow(broadcast.z0, r_i, params.p)
            return decode_exponent(
                xor_mask(y, _mask_for_unmetered(x, broadcast.sid, params)), params
            )
    raise ManufacturerNotRepresented("r_i matches no slot")


def _mask_for_unmetered(x: int, sid: bytes, params: GroupParams) -> bytes:
    # Same mask computation as the protocol path, but during invariant
    # checking the hash counter of the ambient participant must not move.
    with metrics.counting(None):
        return _mask_for(x, sid, params)


def check_contribution_chain(
    broadcast: BroadcastMessage,
    slot_exponents: Iterable[int],
    params: GroupParams,
    expected_r: Optional[int] = None,
) -> int:
    """Verify the unmasking equality chain: every slot yields the same r.

    ``slot_exponents`` supplies one manufacturer exponent per represented
    slot (any device's copy).  Raises InvariantViolation if any two slots
    disagree, if a slot is missing, or if the common value differs from
    ``expected_r`` when given.  Returns the common r.
    """
    values = []
    seen_z = set()
    for r_i in slot_exponents:
        z_i = pow(params.g, r_i, params.p)
        seen_z.add(z_i)
        values.append(recover_slot_value(broadcast, r_i, params))
    if len(seen_z) != len(broadcast.slots):
        raise InvariantViolation(
            f"exponents cover {len(seen_z)} slots, broadcast has {len(broadcast.slots)}"
        )
    if not values:
        raise InvariantViolation("no slot exponents supplied")
    if any(v != values[0] for v in values):
        raise InvariantViolation("slots unmask to different group secrets")
    if expected_r is not None and values[0] != expected_r:
        raise InvariantViolation("unmasked group secret differs from the querier's r")
    return values[0]
