"""Scenario runner and offline artifact verifier.

``run`` loads a JSON scenario config, executes its events through the relay
simulator, and writes four artifacts into the output directory: the relay
transcript (JSON lines), a summary (JSON), the cost comparison table (CSV),
and the comparison figure (PNG).  Identical (config, seed) pairs produce
byte-identical artifacts.

``verify`` re-derives every offline-checkable invariant from the artifacts
alone: message well-formedness and slot ordering, contribution and
broadcast signatures, per-session round counts, and the absence of each
session key from everything the relay observed.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import metrics, ssi_sim
from .algebra import (
    GroupParams,
    encode_fixed,
    generate_group_params,
    group_preset,
)
from .crypto_suite import QuerierKeyPair, verify_broadcast, verify_contribution
from .errors import GkeError
from .metrics import OpCounts, cost_comparison_report
from .protocol import BroadcastMessage, ContributionMessage
from .ssi_sim import (
    ConnectivitySchedule,
    DeviceSchedule,
    OpenSessionEvent,
    RekeyJoinEvent,
    RekeyLeaveEvent,
    ReplayResult,
    ReplaySidEvent,
    Scenario,
    SessionResult,
    SessionTranscript,
    adversary_view,
    build_fleet,
    execute_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2

SUMMARY_SCHEMA = 1

# Below this mask width the key bytes are short enough to show up in
# transcripts by chance, so the absence scan would be meaningless.
MIN_SCAN_WIDTH_BYTES = 8


class ConfigError(Exception):
    """Invalid scenario config; the message names the offending field."""


@dataclass
class ScenarioConfig:
    seed: int
    group: dict
    manufacturers: list[tuple[str, int]]
    schedule_default: DeviceSchedule
    schedule_overrides: dict[str, DeviceSchedule]
    events: list


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _parse_device_schedule(obj: dict, where: str) -> DeviceSchedule:
    _require(isinstance(obj, dict), f"{where}: must be an object")
    allowed = {"online_round1", "online_round2", "fetch_delay"}
    for key in obj:
        _require(key in allowed, f"{where}.{key}: unknown field")
    kwargs = {}
    for key in ("online_round1", "online_round2"):
        if key in obj:
            _require(isinstance(obj[key], bool), f"{where}.{key}: must be a boolean")
            kwargs[key] = obj[key]
    if "fetch_delay" in obj:
        value = obj["fetch_delay"]
        _require(
            isinstance(value, int) and not isinstance(value, bool) and value >= 0,
            f"{where}.fetch_delay: must be a non-negative integer",
        )
        kwargs["fetch_delay"] = value
    return DeviceSchedule(**kwargs)


def load_config(path) -> ScenarioConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON: {exc}") from None
    _require(isinstance(raw, dict), "config: top level must be an object")

    seed = raw.get("seed", 0)
    _require(
        isinstance(seed, int) and not isinstance(seed, bool),
        "seed: must be an integer",
    )

    group = raw.get("group", {"preset": "test64"})
    _require(isinstance(group, dict), "group: must be an object")
    group_keys = set(group)
    _require(
        group_keys in ({"preset"}, {"p", "q", "g"}, {"q_bit_length"}),
        "group: must be one of {preset}, {p,q,g}, {q_bit_length}",
    )

    manufacturers_raw = raw.get("manufacturers")
    _require(
        isinstance(manufacturers_raw, list) and manufacturers_raw,
        "manufacturers: must be a nonempty list",
    )
    manufacturers = []
    seen_ids = set()
    for i, m in enumerate(manufacturers_raw):
        where = f"manufacturers[{i}]"
        _require(isinstance(m, dict), f"{where}: must be an object")
        mid = m.get("id")
        _require(
            isinstance(mid, str) and mid and "-" not in mid,
            f"{where}.id: must be a nonempty string without '-'",
        )
        _require(mid not in seen_ids, f"{where}.id: duplicate manufacturer id {mid!r}")
        seen_ids.add(mid)
        count = m.get("device_count")
        _require(
            isinstance(count, int) and not isinstance(count, bool) and count >= 1,
            f"{where}.device_count: must be an integer >= 1",
        )
        manufacturers.append((mid, count))
    device_ids = {
        f"{mid}-{k}" for mid, count in manufacturers for k in range(count)
    }

    schedule_raw = raw.get("schedule", {})
    _require(isinstance(schedule_raw, dict), "schedule: must be an object")
    default = _parse_device_schedule(
        schedule_raw.get("default", {}), "schedule.default"
    )
    overrides = {}
    for device_id, entry in schedule_raw.get("devices", {}).items():
        _require(
            device_id in device_ids,
            f"schedule.devices.{device_id}: unknown device id",
        )
        overrides[device_id] = _parse_device_schedule(
            entry, f"schedule.devices.{device_id}"
        )

    events_raw = raw.get("events")
    _require(
        isinstance(events_raw, list) and events_raw,
        "events: must be a nonempty list",
    )
    events = []
    for i, e in enumerate(events_raw):
        where = f"events[{i}]"
        _require(isinstance(e, dict), f"{where}: must be an object")
        etype = e.get("type")
        if etype == "open_session":
            events.append(OpenSessionEvent())
        elif etype in ("rekey_join", "rekey_leave"):
            mid = e.get("manufacturer_id")
            _require(
                mid in seen_ids,
                f"{where}.manufacturer_id: unknown manufacturer {mid!r}",
            )
            events.append(
                RekeyJoinEvent(mid) if etype == "rekey_join" else RekeyLeaveEvent(mid)
            )
        elif etype == "replay_sid":
            events.append(ReplaySidEvent())
        else:
            raise ConfigError(f"{where}.type: unknown event type {etype!r}")
    _require(
        isinstance(events[0], OpenSessionEvent),
        "events[0].type: first event must be open_session",
    )

    return ScenarioConfig(
        seed=seed,
        group=group,
        manufacturers=manufacturers,
        schedule_default=default,
        schedule_overrides=overrides,
        events=events,
    )


def _resolve_group(group: dict, rng: random.Random) -> GroupParams:
    if "preset" in group:
        try:
            return group_preset(group["preset"])
        except ValueError as exc:
            raise ConfigError(f"group.preset: {exc}") from None
    if "q_bit_length" in group:
        bits = group["q_bit_length"]
        _require(
            isinstance(bits, int) and not isinstance(bits, bool) and bits >= 4,
            "group.q_bit_length: must be an integer >= 4",
        )
        return generate_group_params(bits, rng)
    try:
        return GroupParams.from_json(group)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"group: invalid inline parameters: {exc}") from None


def build_scenario(
    config: ScenarioConfig,
    seed_override: Optional[int] = None,
    preset_override: Optional[str] = None,
) -> Scenario:
    seed = config.seed if seed_override is None else seed_override
    rng = random.Random(seed)
    group = {"preset": preset_override} if preset_override else config.group
    params = _resolve_group(group, rng)
    fleet = build_fleet(config.manufacturers, rng)
    try:
        schedule = ConnectivitySchedule.for_fleet(
            fleet, default=config.schedule_default, overrides=config.schedule_overrides
        )
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    querier_keypair = QuerierKeyPair.generate(rng)
    return Scenario(
        params=params,
        querier_keypair=querier_keypair,
        fleet=fleet,
        schedule=schedule,
        rng=rng,
        events=list(config.events),
    )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


@dataclass
class CheckLedger:
    checks: dict[str, str] = field(default_factory=dict)
    first_failure: Optional[str] = None

    def record(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks[name] = "pass" if passed else f"fail{': ' + detail if detail else ''}"
        if not passed and self.first_failure is None:
            self.first_failure = name


def _measured_tds_counts(result: SessionResult) -> Optional[OpCounts]:
    for device_id in sorted(result.contributors):
        outcome = result.outcomes.get(device_id)
        if outcome is not None and outcome.ok:
            return result.counters[device_id].snapshot()
    return None


def _scan_absent(needle: bytes, view: set[bytes], payloads: list[bytes]) -> bool:
    if needle in view:
        return False
    return not any(needle in payload for payload in payloads)


def _run_invariant_checks(
    scenario: Scenario, run: ssi_sim.ScenarioRun, ledger: CheckLedger
) -> None:
    sessions = run.session_results()

    ledger.record(
        "round count",
        all(r.rounds == 2 for r in sessions),
        "a session took a number of rounds other than 2",
    )
    ledger.record(
        "key agreement",
        all(r.verdict == "agree" for r in sessions),
        "a device derived a different key than the querier",
    )
    replay_ok = all(
        all(v == "stale-sid" for v in r.outcomes.values())
        for r in run.results
        if isinstance(r, ReplayResult)
    )
    ledger.record("replay rejection", replay_ok, "a device accepted a replayed sid")

    dedup_ok = True
    for r in sessions:
        if r.kind == "rekey_join":
            continue  # contributors list holds only the joiner
        device_by_id = {d.device_id: d for d in scenario.fleet}
        distinct = {
            device_by_id[c].keypair.public_key for c in r.contributors
        }
        if len(distinct) != r.slot_count:
            dedup_ok = False
    ledger.record(
        "dedup cardinality",
        dedup_ok,
        "slot count differs from distinct contributing manufacturers",
    )

    try:
        for r in sessions:
            r.broadcast.check_slot_order()
        ledger.record("slot ordering", True)
    except ValueError:
        ledger.record("slot ordering", False, "broadcast slots out of order")

    if scenario.params.exponent_width_bytes >= MIN_SCAN_WIDTH_BYTES:
        view = adversary_view(run.transcript, scenario.params)
        payloads = [e.payload for e in run.transcript.entries]
        scan_ok = all(
            _scan_absent(r.shared_key, view, payloads)
            and _scan_absent(encode_fixed(r.session.r, scenario.params), view, payloads)
            for r in sessions
        )
        ledger.record(
            "adversary view",
            scan_ok,
            "a session key or group secret appeared in relayed bytes",
        )
    else:
        ledger.checks["adversary view"] = "skipped: group too small for the scan"


def _summary_event(index: int, result) -> dict:
    if isinstance(result, ReplayResult):
        return {
            "index": index,
            "type": result.kind,
            "target_sid": result.target_sid.hex(),
            "devices": dict(sorted(result.outcomes.items())),
        }
    return {
        "index": index,
        "type": result.kind,
        "sid": result.session.sid.hex(),
        "contribution_sid": result.session.contribution_sid.hex(),
        "slot_count": result.slot_count,
        "rounds": result.rounds,
        "verdict": result.verdict,
        "sk": result.shared_key.hex(),
        "contributors": sorted(result.contributors),
        "stale_rejections": sorted(result.stale_rejections),
        "devices": {
            device_id: ("ok" if outcome.ok else outcome.error)
            for device_id, outcome in sorted(result.outcomes.items())
        },
    }


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        scenario = build_scenario(
            config, seed_override=args.seed, preset_override=args.group_preset
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ledger = CheckLedger()
    try:
        run = execute_scenario(scenario)
    except GkeError as exc:
        print(f"invariant violation: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ValueError as exc:
        print(f"invariant violation: scenario execution failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT

    _run_invariant_checks(scenario, run, ledger)

    seed = config.seed if args.seed is None else args.seed
    summary = {
        "schema": SUMMARY_SCHEMA,
        "seed": seed,
        "group": scenario.params.to_json(),
        "querier_public_key": scenario.querier_keypair.public_key.hex(),
        "events": [_summary_event(i, r) for i, r in enumerate(run.results)],
        "checks": ledger.checks,
    }
    (out_dir / "transcript.jsonl").write_text(run.transcript.to_json_lines())
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )

    first_session = next(iter(run.session_results()), None)
    measured = _measured_tds_counts(first_session) if first_session else None
    if measured is not None:
        report = cost_comparison_report(measured, first_session.rounds)
    else:
        report = cost_comparison_report(metrics.EXPECTED_TDS_COUNTS)
    report.write_csv(out_dir / "metrics.csv")
    report.write_figure(out_dir / "metrics.png")

    if not args.quiet:
        print(report.as_text())
        for event in summary["events"]:
            if event["type"] == "replay_sid":
                rejections = sum(
                    1 for v in event["devices"].values() if v == "stale-sid"
                )
                print(
                    f"event {event['index']} replay_sid: "
                    f"{rejections}/{len(event['devices'])} rejections"
                )
            else:
                print(
                    f"event {event['index']} {event['type']}: m={event['slot_count']} "
                    f"rounds={event['rounds']} verdict={event['verdict']}"
                )
        for name, status in ledger.checks.items():
            print(f"check {name}: {status}")

    if ledger.first_failure is not None:
        print(
            f"invariant violation: {ledger.first_failure}: "
            f"{ledger.checks[ledger.first_failure]}",
            file=sys.stderr,
        )
        return EXIT_INVARIANT
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _verify_fail(check: str, detail: str) -> int:
    print(f"verification failed: {check}: {detail}", file=sys.stderr)
    return EXIT_INVARIANT


def cmd_verify(args) -> int:
    try:
        summary = json.loads(Path(args.summary).read_text())
        transcript_text = Path(args.transcript).read_text()
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: cannot read artifacts: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params = GroupParams.from_json(summary["group"])
        querier_public_key = bytes.fromhex(summary["querier_public_key"])
        transcript = SessionTranscript.from_json_lines(transcript_text)
    except (ValueError, KeyError) as exc:
        print(f"config error: malformed artifacts: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    broadcasts: dict[bytes, BroadcastMessage] = {}
    for entry in transcript.protocol_entries():
        if entry.kind == ssi_sim.KIND_CONTRIBUTION:
            try:
                msg = ContributionMessage.from_bytes(entry.payload, params)
            except (ValueError, GkeError) as exc:
                return _verify_fail("message well-formedness", str(exc))
            if not verify_contribution(
                msg.manufacturer_public_key, msg.sid, msg.z, msg.sig, params
            ):
                return _verify_fail(
                    "contribution signature",
                    f"contribution signature invalid (from {entry.sender})",
                )
        else:
            try:
                msg = BroadcastMessage.from_bytes(entry.payload, params)
            except (ValueError, GkeError) as exc:
                return _verify_fail("slot ordering", str(exc))
            if not verify_broadcast(
                querier_public_key, msg.sid, msg.contribution_sid, msg.z0,
                msg.slots, msg.sig, params,
            ):
                return _verify_fail(
                    "broadcast signature", "broadcast signature invalid"
                )
            broadcasts[msg.sid] = msg

    for sid, rounds in transcript.session_round_counts():
        if rounds != 2:
            return _verify_fail(
                "round count", f"session {sid.hex()} took {rounds} rounds"
            )

    session_events = [e for e in summary.get("events", []) if "sk" in e]
    for event in session_events:
        sid = bytes.fromhex(event["sid"])
        if sid not in broadcasts:
            return _verify_fail(
                "summary/transcript consistency",
                f"summary session {sid.hex()} has no broadcast in the transcript",
            )
        if len(broadcasts[sid].slots) != event["slot_count"]:
            return _verify_fail(
                "summary/transcript consistency",
                f"slot count mismatch for session {sid.hex()}",
            )

    if params.exponent_width_bytes >= MIN_SCAN_WIDTH_BYTES:
        view = adversary_view(transcript, params)
        payloads = [e.payload for e in transcript.entries]
        for event in session_events:
            sk = bytes.fromhex(event["sk"])
            if not _scan_absent(sk, view, payloads):
                return _verify_fail(
                    "adversary view",
                    f"session key for {event['sid']} appears in relayed bytes",
                )

    print("all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptive-gke",
        description="Run and verify adaptive group key exchange scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario config")
    run_p.add_argument("--config", required=True, help="scenario config (JSON)")
    run_p.add_argument("--out", default="./out", help="artifact directory")
    run_p.add_argument("--seed", type=int, default=None, help="override config seed")
    run_p.add_argument(
        "--group-preset",
        choices=["test64", "rfc3526-2048"],
        default=None,
        help="override the config group with a compiled-in preset",
    )
    run_p.add_argument("--quiet", action="store_true", help="suppress stdout report")
    run_p.set_defaults(func=cmd_run)

    verify_p = sub.add_parser("verify", help="re-check invariants from artifacts")
    verify_p.add_argument("transcript", help="transcript.jsonl path")
    verify_p.add_argument("summary", help="summary.json path")
    verify_p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
