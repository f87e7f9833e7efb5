"""Shared builders for randomized fleet scenarios.

Scenario shapes are driven entirely by a seeded rng so every test run sees
the same fleets.  A manufacturer is "represented" when at least one of its
devices is online in round 1; unrepresented manufacturers model fleets
whose devices all miss the collection phase (their devices must fail key
derivation, and they are the natural candidates for later join events).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from adaptive_gke.crypto_suite import QuerierKeyPair
from adaptive_gke.ssi_sim import (
    ConnectivitySchedule,
    DeviceSchedule,
    OpenSessionEvent,
    RekeyJoinEvent,
    RekeyLeaveEvent,
    Scenario,
    build_fleet,
)

MANUFACTURER_NAMES = [
    "acme", "zeta", "nova", "apex", "flux", "iris", "onyx", "pico", "quill", "vega",
]


@dataclass
class FleetShape:
    manufacturers: list[tuple[str, int]]
    represented: set[str]


def random_fleet_shape(
    rng: random.Random,
    max_manufacturers: int = 10,
    max_devices: int = 200,
    unrepresented_probability: float = 0.2,
) -> FleetShape:
    m = rng.randint(1, max_manufacturers)
    counts = [1] * m
    total = rng.randint(m, max_devices)
    for _ in range(total - m):
        counts[rng.randrange(m)] += 1
    manufacturers = [(MANUFACTURER_NAMES[i], counts[i]) for i in range(m)]
    represented = {MANUFACTURER_NAMES[0]}  # at least one manufacturer online
    for mid, _ in manufacturers[1:]:
        if rng.random() >= unrepresented_probability:
            represented.add(mid)
    return FleetShape(manufacturers=manufacturers, represented=represented)


def random_schedule(
    rng: random.Random, shape: FleetShape, fleet
) -> ConnectivitySchedule:
    """Random connectivity with one guaranteed round-1 device per represented
    manufacturer; unrepresented manufacturers sit out round 1 entirely."""
    devices = {}
    for device in fleet:
        mid = device.manufacturer_id
        if mid in shape.represented:
            anchor = device.device_id.endswith("-0")
            online_r1 = anchor or rng.random() < 0.5
        else:
            online_r1 = False
        devices[device.device_id] = DeviceSchedule(
            online_round1=online_r1,
            online_round2=rng.random() < 0.6,
            fetch_delay=rng.randint(0, 5),
        )
    return ConnectivitySchedule(devices=devices)


def random_scenario(
    seed: int,
    params,
    max_manufacturers: int = 10,
    max_devices: int = 200,
    unrepresented_probability: float = 0.2,
    with_rekey_events: bool = False,
) -> Scenario:
    rng = random.Random(seed)
    shape = random_fleet_shape(
        rng, max_manufacturers, max_devices, unrepresented_probability
    )
    fleet = build_fleet(shape.manufacturers, rng)
    schedule = random_schedule(rng, shape, fleet)
    querier_keypair = QuerierKeyPair.generate(rng)
    events = [OpenSessionEvent()]
    if with_rekey_events:
        events.extend(_eligible_rekey_events(rng, shape))
    return Scenario(
        params=params,
        querier_keypair=querier_keypair,
        fleet=fleet,
        schedule=schedule,
        rng=rng,
        events=events,
    )


def _eligible_rekey_events(rng: random.Random, shape: FleetShape) -> list:
    """A random join/leave tail that is always well-formed for the shape.

    Tracks which manufacturers hold a slot after each event: a join targets
    an unslotted manufacturer, a leave targets a slotted one and must keep
    at least one manufacturer slotted after the re-collection (which only
    reaches manufacturers with a round-1-online device)."""
    all_ids = {mid for mid, _ in shape.manufacturers}
    slotted = set(shape.represented)
    events = []
    for _ in range(rng.randint(1, 3)):
        join_targets = sorted(all_ids - slotted)
        leave_targets = sorted(
            mid
            for mid in slotted
            if (slotted - {mid}) & shape.represented
        )
        options = []
        if join_targets:
            options.append("join")
        if leave_targets:
            options.append("leave")
        if not options:
            break
        if rng.choice(options) == "join":
            target = rng.choice(join_targets)
            events.append(RekeyJoinEvent(target))
            slotted.add(target)
        else:
            target = rng.choice(leave_targets)
            events.append(RekeyLeaveEvent(target))
            slotted = (slotted - {target}) & shape.represented
    return events
