"""Honest-but-curious relay simulator.

The relay (SSI) forwards round-1 contributions to the querier, stores the
round-2 broadcast so weakly-connected devices can fetch it later, and keeps
a totally ordered transcript of everything it observed.  Time is logical:
every transcript entry carries a tick, and a device that is offline for the
broadcast fetches it ``fetch_delay`` ticks later.  The relay never mutates
or drops anything; its entire knowledge is exposed through
``adversary_view`` so tests can scan what a curious relay actually sees.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .algebra import GroupParams
from .crypto_suite import QuerierKeyPair, SID_BYTES, ManufacturerKeyPair
from .errors import GkeError, InvariantViolation, StaleSessionId, UnknownSessionId
from .metrics import OpCounter, counting
from .protocol import (
    BroadcastMessage,
    ContributionMessage,
    QuerierSession,
    TdsState,
    check_contribution_chain,
    querier_finalize,
    querier_open_session,
    querier_rekey_join,
    querier_rekey_leave,
    tds_contribute,
    tds_derive_key,
)

QUERIER = "querier"
BROADCAST_RECIPIENT = "*"

# Transcript entry kinds.  Only contributions and broadcasts are protocol
# traffic; deliveries, fetches, and rejections are relay bookkeeping.
KIND_CONTRIBUTION = "contribution"
KIND_BROADCAST = "broadcast"
KIND_DELIVERY = "delivery"
KIND_FETCH = "fetch"
KIND_STALE_REJECTION = "stale_sid_rejection"

PROTOCOL_KINDS = frozenset({KIND_CONTRIBUTION, KIND_BROADCAST})


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceSchedule:
    """Connectivity of one device: which rounds it attends, and how many
    ticks after the broadcast it fetches when it missed round 2."""

    online_round1: bool = True
    online_round2: bool = True
    fetch_delay: int = 1

    def __post_init__(self):
        if self.fetch_delay < 0:
            raise ValueError("fetch_delay must be non-negative")


@dataclass
class ConnectivitySchedule:
    devices: dict[str, DeviceSchedule]

    def __post_init__(self):
        if not any(s.online_round1 for s in self.devices.values()):
            raise ValueError("at least one device must be online in round 1")

    def for_device(self, device_id: str) -> DeviceSchedule:
        return self.devices[device_id]

    @classmethod
    def for_fleet(
        cls,
        fleet: Sequence[TdsState],
        default: DeviceSchedule = DeviceSchedule(),
        overrides: Optional[dict[str, DeviceSchedule]] = None,
    ) -> "ConnectivitySchedule":
        overrides = overrides or {}
        return cls(
            devices={d.device_id: overrides.get(d.device_id, default) for d in fleet}
        )


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEntry:
    tick: int
    sender: str
    recipient: str
    kind: str
    payload: bytes
    sid: bytes

    def to_json_obj(self) -> dict:
        return {
            "tick": self.tick,
            "from": self.sender,
            "to": self.recipient,
            "type": self.kind,
            "payload": self.payload.hex(),
        }


def _sid_from_payload(kind: str, payload: bytes) -> bytes:
    if kind in PROTOCOL_KINDS:
        # Both message types open with a length-prefixed sid field.
        n = int.from_bytes(payload[:4], "big")
        return payload[4 : 4 + n]
    return payload[:SID_BYTES]


class SessionTranscript:
    """Totally ordered log of everything the relay handled."""

    def __init__(self) -> None:
        self.entries: list[TranscriptEntry] = []
        self._clock = 0

    @property
    def clock(self) -> int:
        return self._clock

    def log(
        self,
        sender: str,
        recipient: str,
        kind: str,
        payload: bytes,
        sid: bytes,
        tick: Optional[int] = None,
    ) -> TranscriptEntry:
        if tick is None:
            tick = self._clock
        entry = TranscriptEntry(
            tick=tick, sender=sender, recipient=recipient, kind=kind,
            payload=payload, sid=sid,
        )
        self.entries.append(entry)
        self._clock = max(self._clock, tick) + 1
        return entry

    def protocol_entries(self) -> list[TranscriptEntry]:
        return [e for e in self.entries if e.kind in PROTOCOL_KINDS]

    def session_round_counts(self) -> list[tuple[bytes, int]]:
        """Rounds per session, derived purely from message order.

        A session's traffic is the run of contributions since the previous
        broadcast, plus the broadcast that closes it.  Each direction flip
        within that slice is a round: devices-to-querier collection, then
        the querier's broadcast.
        """
        counts = []
        rounds = 0
        last_direction = None
        for e in self.protocol_entries():
            direction = "up" if e.kind == KIND_CONTRIBUTION else "down"
            if direction != last_direction:
                rounds += 1
                last_direction = direction
            if e.kind == KIND_BROADCAST:
                counts.append((e.sid, rounds))
                rounds = 0
                last_direction = None
        return counts

    def to_json_lines(self) -> str:
        return "".join(
            json.dumps(e.to_json_obj(), sort_keys=True) + "\n" for e in self.entries
        )

    @classmethod
    def from_json_lines(cls, text: str) -> "SessionTranscript":
        transcript = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            payload = bytes.fromhex(obj["payload"])
            kind = obj["type"]
            transcript.log(
                sender=obj["from"],
                recipient=obj["to"],
                kind=kind,
                payload=payload,
                sid=_sid_from_payload(kind, payload),
                tick=obj["tick"],
            )
        return transcript


# ---------------------------------------------------------------------------
# Broadcast store
# ---------------------------------------------------------------------------


class BroadcastStore:
    """Relay-side store: one immutable broadcast per session id."""

    def __init__(self) -> None:
        self._broadcasts: dict[bytes, BroadcastMessage] = {}

    def put(self, broadcast: BroadcastMessage) -> None:
        if broadcast.sid in self._broadcasts:
            raise ValueError(f"broadcast already stored for sid {broadcast.sid.hex()}")
        self._broadcasts[broadcast.sid] = broadcast

    def fetch(self, sid: bytes) -> BroadcastMessage:
        try:
            return self._broadcasts[sid]
        except KeyError:
            raise UnknownSessionId(f"no broadcast stored for sid {sid.hex()}") from None

    def __contains__(self, sid: bytes) -> bool:
        return sid in self._broadcasts


def fetch_broadcast(store: BroadcastStore, sid: bytes) -> BroadcastMessage:
    """Return the stored broadcast, unmodified; the relay never rewrites it."""
    return store.fetch(sid)


# ---------------------------------------------------------------------------
# Fleet
# ---------------------------------------------------------------------------


def build_fleet(
    manufacturers: Sequence[tuple[str, int]], rng: random.Random
) -> list[TdsState]:
    """Instantiate devices; all devices of a manufacturer share one keypair."""
    fleet = []
    for manufacturer_id, device_count in manufacturers:
        keypair = ManufacturerKeyPair.generate(manufacturer_id, rng)
        for k in range(device_count):
            fleet.append(
                TdsState(device_id=f"{manufacturer_id}-{k}", keypair=keypair)
            )
    return fleet


# ---------------------------------------------------------------------------
# Relay operations
# ---------------------------------------------------------------------------


def run_collection(
    fleet: Sequence[TdsState],
    schedule: ConnectivitySchedule,
    sid: bytes,
    params: GroupParams,
    transcript: SessionTranscript,
    rng: random.Random,
    counters: Optional[dict[str, OpCounter]] = None,
) -> list[ContributionMessage]:
    """Round 1: ask every round-1-online device to contribute.

    Arrival order is randomized by the harness rng.  A device that has
    already served the sid is logged as a rejection and skipped; the
    collection itself never aborts.
    """
    counters = counters or {}
    online = [d for d in fleet if schedule.for_device(d.device_id).online_round1]
    rng.shuffle(online)
    messages = []
    for device in online:
        try:
            with counting(counters.get(device.device_id)):
                msg = tds_contribute(device, sid, params)
        except StaleSessionId:
            transcript.log(
                sender=device.device_id, recipient="ssi",
                kind=KIND_STALE_REJECTION, payload=sid, sid=sid,
            )
            continue
        transcript.log(
            sender=device.device_id, recipient=QUERIER,
            kind=KIND_CONTRIBUTION, payload=msg.to_bytes(params), sid=sid,
        )
        messages.append(msg)
    return messages


@dataclass(frozen=True)
class DeliveryOutcome:
    device_id: str
    tick: int
    shared_key: Optional[bytes] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def deliver_broadcast(
    broadcast: BroadcastMessage,
    fleet: Sequence[TdsState],
    schedule: ConnectivitySchedule,
    store: BroadcastStore,
    querier_public_key: bytes,
    params: GroupParams,
    transcript: SessionTranscript,
    counters: Optional[dict[str, OpCounter]] = None,
) -> dict[str, DeliveryOutcome]:
    """Round 2 and stragglers: every device eventually gets the broadcast.

    Round-2-online devices receive it immediately; the rest fetch the
    stored copy after their fetch delay.  Each delivery runs the device's
    key derivation; failures are recorded per device, never raised.
    """
    if broadcast.sid not in store:
        raise ValueError("broadcast must be stored before delivery")
    counters = counters or {}
    base_tick = transcript.clock
    planned = []
    for device in fleet:
        sched = schedule.for_device(device.device_id)
        if sched.online_round2:
            planned.append((base_tick, KIND_DELIVERY, device))
        else:
            planned.append((base_tick + sched.fetch_delay, KIND_FETCH, device))
    planned.sort(key=lambda item: (item[0], item[2].device_id))

    outcomes: dict[str, DeliveryOutcome] = {}
    for tick, kind, device in planned:
        delivered = fetch_broadcast(store, broadcast.sid)
        transcript.log(
            sender="ssi", recipient=device.device_id, kind=kind,
            payload=broadcast.sid, sid=broadcast.sid, tick=tick,
        )
        try:
            with counting(counters.get(device.device_id)):
                shared_key = tds_derive_key(
                    device, delivered, querier_public_key, params
                )
            outcomes[device.device_id] = DeliveryOutcome(
                device_id=device.device_id, tick=tick, shared_key=shared_key
            )
        except GkeError as exc:
            outcomes[device.device_id] = DeliveryOutcome(
                device_id=device.device_id, tick=tick, error=exc.code
            )
    return outcomes


def adversary_view(transcript: SessionTranscript, params: GroupParams) -> set[bytes]:
    """Every byte string the relay observed: whole messages and their fields.

    This feeds a sanity scan (the key and the group secret must not appear
    anywhere in it), not a security proof.
    """
    view: set[bytes] = set()
    for entry in transcript.entries:
        view.add(entry.payload)
        view.add(entry.sid)
        if entry.kind == KIND_CONTRIBUTION:
            msg = ContributionMessage.from_bytes(entry.payload, params)
            view.update(
                {
                    msg.sid,
                    msg.z.to_bytes(params.element_width_bytes, "big"),
                    msg.sig,
                    msg.manufacturer_public_key,
                }
            )
        elif entry.kind == KIND_BROADCAST:
            msg = BroadcastMessage.from_bytes(entry.payload, params)
            view.add(msg.sid)
            view.add(msg.contribution_sid)
            view.add(msg.z0.to_bytes(params.element_width_bytes, "big"))
            view.add(msg.sig)
            for z, y in msg.slots:
                view.add(z.to_bytes(params.element_width_bytes, "big"))
                view.add(y)
    return view


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpenSessionEvent:
    kind: str = field(default="open_session", init=False)


@dataclass(frozen=True)
class RekeyJoinEvent:
    manufacturer_id: str
    kind: str = field(default="rekey_join", init=False)


@dataclass(frozen=True)
class RekeyLeaveEvent:
    manufacturer_id: str
    kind: str = field(default="rekey_leave", init=False)


@dataclass(frozen=True)
class ReplaySidEvent:
    kind: str = field(default="replay_sid", init=False)


Event = Union[OpenSessionEvent, RekeyJoinEvent, RekeyLeaveEvent, ReplaySidEvent]


@dataclass
class Scenario:
    params: GroupParams
    querier_keypair: QuerierKeyPair
    fleet: list[TdsState]
    schedule: ConnectivitySchedule
    rng: random.Random
    events: list[Event] = field(default_factory=lambda: [OpenSessionEvent()])

    def devices_of(self, manufacturer_id: str) -> list[TdsState]:
        return [d for d in self.fleet if d.manufacturer_id == manufacturer_id]


@dataclass
class SessionResult:
    kind: str
    session: QuerierSession
    broadcast: BroadcastMessage
    shared_key: bytes
    contributors: list[str]
    stale_rejections: list[str]
    outcomes: dict[str, DeliveryOutcome]
    counters: dict[str, OpCounter]
    rounds: int

    @property
    def slot_count(self) -> int:
        return len(self.broadcast.slots)

    @property
    def verdict(self) -> str:
        """"agree" iff every successful device derived the querier's key and
        every failure is the expected miss of an unrepresented manufacturer."""
        for outcome in self.outcomes.values():
            if outcome.ok:
                if outcome.shared_key != self.shared_key:
                    return "disagree"
            elif outcome.error != "manufacturer-not-represented":
                return "disagree"
        return "agree"


@dataclass
class ReplayResult:
    kind: str
    target_sid: bytes
    outcomes: dict[str, str]


@dataclass
class ScenarioRun:
    results: list[Union[SessionResult, ReplayResult]]
    transcript: SessionTranscript
    store: BroadcastStore

    def session_results(self) -> list[SessionResult]:
        return [r for r in self.results if isinstance(r, SessionResult)]


def _new_counters(scenario: Scenario) -> dict[str, OpCounter]:
    counters = {d.device_id: OpCounter() for d in scenario.fleet}
    counters[QUERIER] = OpCounter()
    return counters


def _slot_exponents(fleet: Sequence[TdsState], broadcast: BroadcastMessage) -> list[int]:
    per_z: dict[int, int] = {}
    for device in fleet:
        cached = device._contributions.get(broadcast.contribution_sid)
        if cached is not None:
            r_i, z_i = cached
            per_z.setdefault(z_i, r_i)
    return [per_z[z] for z, _ in broadcast.slots if z in per_z]


def _finish_session(
    scenario: Scenario,
    kind: str,
    session: QuerierSession,
    broadcast: BroadcastMessage,
    shared_key: bytes,
    contributors: list[str],
    stale_rejections: list[str],
    counters: dict[str, OpCounter],
    transcript: SessionTranscript,
    store: BroadcastStore,
) -> SessionResult:
    transcript.log(
        sender=QUERIER, recipient=BROADCAST_RECIPIENT, kind=KIND_BROADCAST,
        payload=broadcast.to_bytes(scenario.params), sid=broadcast.sid,
    )
    store.put(broadcast)
    outcomes = deliver_broadcast(
        broadcast, scenario.fleet, scenario.schedule, store,
        scenario.querier_keypair.public_key, scenario.params, transcript, counters,
    )
    check_contribution_chain(
        broadcast,
        _slot_exponents(scenario.fleet, broadcast),
        scenario.params,
        expected_r=session.r,
    )
    rounds = dict(transcript.session_round_counts()).get(broadcast.sid, 0)
    return SessionResult(
        kind=kind, session=session, broadcast=broadcast, shared_key=shared_key,
        contributors=contributors, stale_rejections=stale_rejections,
        outcomes=outcomes, counters=counters, rounds=rounds,
    )


def _collection_log_split(
    transcript: SessionTranscript, start: int
) -> tuple[list[str], list[str]]:
    contributors = []
    rejections = []
    for entry in transcript.entries[start:]:
        if entry.kind == KIND_CONTRIBUTION:
            contributors.append(entry.sender)
        elif entry.kind == KIND_STALE_REJECTION:
            rejections.append(entry.sender)
    return contributors, rejections


def run_base_session(
    scenario: Scenario, transcript: SessionTranscript, store: BroadcastStore
) -> SessionResult:
    counters = _new_counters(scenario)
    with counting(counters[QUERIER]):
        session = querier_open_session(
            scenario.querier_keypair, scenario.params, scenario.rng
        )
    mark = len(transcript.entries)
    contributions = run_collection(
        scenario.fleet, scenario.schedule, session.sid, scenario.params,
        transcript, scenario.rng, counters,
    )
    contributors, rejections = _collection_log_split(transcript, mark)
    with counting(counters[QUERIER]):
        broadcast, shared_key = querier_finalize(session, contributions, scenario.params)
    return _finish_session(
        scenario, "open_session", session, broadcast, shared_key,
        contributors, rejections, counters, transcript, store,
    )


def run_rekey_join(
    scenario: Scenario,
    current: SessionResult,
    manufacturer_id: str,
    transcript: SessionTranscript,
    store: BroadcastStore,
) -> SessionResult:
    """Admit one manufacturer: its first device contributes for the group's
    contribution sid, then the querier re-masks everything fresh."""
    devices = scenario.devices_of(manufacturer_id)
    if not devices:
        raise ValueError(f"no devices for manufacturer {manufacturer_id!r}")
    joiner = min(devices, key=lambda d: d.device_id)
    counters = _new_counters(scenario)
    contribution_sid = current.session.contribution_sid
    with counting(counters[joiner.device_id]):
        message = tds_contribute(joiner, contribution_sid, scenario.params)
    transcript.log(
        sender=joiner.device_id, recipient=QUERIER, kind=KIND_CONTRIBUTION,
        payload=message.to_bytes(scenario.params), sid=contribution_sid,
    )
    with counting(counters[QUERIER]):
        session, broadcast, shared_key = querier_rekey_join(
            current.session, message, scenario.querier_keypair,
            scenario.params, scenario.rng,
        )
    return _finish_session(
        scenario, "rekey_join", session, broadcast, shared_key,
        [joiner.device_id], [], counters, transcript, store,
    )


def run_rekey_leave(
    scenario: Scenario,
    current: SessionResult,
    manufacturer_id: str,
    transcript: SessionTranscript,
    store: BroadcastStore,
) -> SessionResult:
    """Evict one manufacturer: fresh session among the remaining devices."""
    devices = scenario.devices_of(manufacturer_id)
    if not devices:
        raise ValueError(f"no devices for manufacturer {manufacturer_id!r}")
    departed_key = devices[0].keypair.public_key
    leaving_z = next(
        (
            z
            for z, owner in current.session.slot_owners.items()
            if owner == departed_key
        ),
        None,
    )
    if leaving_z is None:
        raise InvariantViolation(
            f"manufacturer {manufacturer_id!r} holds no slot in the current session"
        )
    # The group is whoever holds a slot right now; solicit them minus the
    # leaver, so a manufacturer that departed earlier stays departed.
    member_keys = set(current.session.slot_owners.values()) - {departed_key}
    remaining = [d for d in scenario.fleet if d.keypair.public_key in member_keys]
    counters = _new_counters(scenario)
    mark = len(transcript.entries)

    def provider(new_sid: bytes) -> list[ContributionMessage]:
        return run_collection(
            remaining, scenario.schedule, new_sid, scenario.params,
            transcript, scenario.rng, counters,
        )

    with counting(counters[QUERIER]):
        session, broadcast, shared_key = querier_rekey_leave(
            current.session, leaving_z, provider, scenario.querier_keypair,
            scenario.params, scenario.rng,
        )
    contributors, rejections = _collection_log_split(transcript, mark)
    return _finish_session(
        scenario, "rekey_leave", session, broadcast, shared_key,
        contributors, rejections, counters, transcript, store,
    )


def run_replay(
    scenario: Scenario, current: SessionResult, transcript: SessionTranscript
) -> ReplayResult:
    """Re-offer the last session id to every device that served it."""
    target_sid = current.session.sid
    targets = sorted(
        set(current.contributors)
        | {d for d, o in current.outcomes.items() if o.ok}
    )
    device_by_id = {d.device_id: d for d in scenario.fleet}
    outcomes = {}
    for device_id in targets:
        try:
            tds_contribute(device_by_id[device_id], target_sid, scenario.params)
        except StaleSessionId:
            transcript.log(
                sender=device_id, recipient="ssi", kind=KIND_STALE_REJECTION,
                payload=target_sid, sid=target_sid,
            )
            outcomes[device_id] = "stale-sid"
        else:
            outcomes[device_id] = "accepted"
    return ReplayResult(kind="replay_sid", target_sid=target_sid, outcomes=outcomes)


def execute_scenario(scenario: Scenario) -> ScenarioRun:
    """Run the scenario's events in order against one relay."""
    transcript = SessionTranscript()
    store = BroadcastStore()
    results: list[Union[SessionResult, ReplayResult]] = []
    current: Optional[SessionResult] = None
    for event in scenario.events:
        if isinstance(event, OpenSessionEvent):
            current = run_base_session(scenario, transcript, store)
            results.append(current)
        elif isinstance(event, RekeyJoinEvent):
            if current is None:
                raise ValueError("rekey_join before any open_session")
            current = run_rekey_join(
                scenario, current, event.manufacturer_id, transcript, store
            )
            results.append(current)
        elif isinstance(event, RekeyLeaveEvent):
            if current is None:
                raise ValueError("rekey_leave before any open_session")
            current = run_rekey_leave(
                scenario, current, event.manufacturer_id, transcript, store
            )
            results.append(current)
        elif isinstance(event, ReplaySidEvent):
            if current is None:
                raise ValueError("replay_sid before any open_session")
            results.append(run_replay(scenario, current, transcript))
        else:
            raise TypeError(f"unknown event {event!r}")
    return ScenarioRun(results=results, transcript=transcript, store=store)


def run_instrumented_base_session(scenario: Scenario) -> SessionResult:
    """One base session with fresh counters; used by the metrics module."""
    transcript = SessionTranscript()
    store = BroadcastStore()
    return run_base_session(scenario, transcript, store)
