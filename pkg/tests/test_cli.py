import dataclasses
import json
from pathlib import Path

import pytest

from adaptive_gke.cli import main
from adaptive_gke.protocol import BroadcastMessage
from adaptive_gke.algebra import group_preset

FIXTURES = sorted((Path(__file__).parent.parent / "fixtures").glob("*.json"))

ARTIFACTS = ("transcript.jsonl", "summary.json", "metrics.csv", "metrics.png")


def write_config(tmp_path, **overrides):
    config = {
        "seed": 77,
        "group": {"preset": "test64"},
        "manufacturers": [
            {"id": "acme", "device_count": 3},
            {"id": "zeta", "device_count": 3},
        ],
        "events": [{"type": "open_session"}],
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def run_cli(*args):
    return main([str(a) for a in args])


class TestRun:
    def test_basic_session_reports_two_slots_and_agreement(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("run", "--config", config, "--out", out, "--quiet") == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["schema"] == 1
        event = summary["events"][0]
        assert event["slot_count"] == 2
        assert event["verdict"] == "agree"
        assert event["rounds"] == 2
        assert all(v == "ok" for v in event["devices"].values())
        for name in ARTIFACTS:
            assert (out / name).exists(), name

    def test_identical_config_and_seed_give_identical_artifacts(self, tmp_path):
        config = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("run", "--config", config, "--out", out1, "--quiet") == 0
        assert run_cli("run", "--config", config, "--out", out2, "--quiet") == 0
        for name in ARTIFACTS:
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_seed_override_changes_artifacts(self, tmp_path):
        config = write_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("run", "--config", config, "--out", out1, "--quiet") == 0
        assert (
            run_cli("run", "--config", config, "--out", out2, "--seed", 78, "--quiet")
            == 0
        )
        t1 = (out1 / "transcript.jsonl").read_bytes()
        t2 = (out2 / "transcript.jsonl").read_bytes()
        assert t1 != t2
        assert json.loads((out2 / "summary.json").read_text())["seed"] == 78

    def test_group_preset_override(self, tmp_path):
        config = write_config(tmp_path, group={"q_bit_length": 16})
        out = tmp_path / "out"
        assert (
            run_cli(
                "run", "--config", config, "--out", out,
                "--group-preset", "test64", "--quiet",
            )
            == 0
        )
        summary = json.loads((out / "summary.json").read_text())
        assert int(summary["group"]["q"]) == group_preset("test64").q

    def test_replay_event_records_rejections(self, tmp_path):
        config = write_config(
            tmp_path,
            events=[{"type": "open_session"}, {"type": "replay_sid"}],
        )
        out = tmp_path / "out"
        assert run_cli("run", "--config", config, "--out", out, "--quiet") == 0
        summary = json.loads((out / "summary.json").read_text())
        replay = summary["events"][1]
        assert replay["type"] == "replay_sid"
        assert replay["devices"]
        assert all(v == "stale-sid" for v in replay["devices"].values())

    def test_metrics_csv_has_measured_row(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert run_cli("run", "--config", config, "--out", out, "--quiet") == 0
        rows = (out / "metrics.csv").read_text().splitlines()
        assert "P,2,2,3,2,measured" in rows

    def test_generated_group_config(self, tmp_path):
        config = write_config(tmp_path, group={"q_bit_length": 16})
        out = tmp_path / "out"
        assert run_cli("run", "--config", config, "--out", out, "--quiet") == 0
        summary = json.loads((out / "summary.json").read_text())
        assert int(summary["group"]["q"]).bit_length() == 16
        # Too narrow for the relay-view scan, which must say so rather than pass.
        assert summary["checks"]["adversary view"].startswith("skipped")

    @pytest.mark.parametrize("fixture", FIXTURES, ids=lambda p: p.stem)
    def test_shipped_fixtures_exit_zero(self, tmp_path, fixture):
        out = tmp_path / "out"
        assert run_cli("run", "--config", fixture, "--out", out, "--quiet") == 0
        assert run_cli("verify", out / "transcript.jsonl", out / "summary.json") == 0


class TestConfigValidation:
    @pytest.mark.parametrize(
        "overrides, field",
        [
            ({"manufacturers": []}, "manufacturers"),
            ({"manufacturers": [{"id": "a", "device_count": 0}]}, "device_count"),
            ({"manufacturers": [{"id": "", "device_count": 1}]}, "id"),
            (
                {
                    "manufacturers": [
                        {"id": "a", "device_count": 1},
                        {"id": "a", "device_count": 1},
                    ]
                },
                "duplicate",
            ),
            ({"events": []}, "events"),
            ({"events": [{"type": "warp"}]}, "type"),
            ({"events": [{"type": "rekey_join", "manufacturer_id": "who"}]}, "manufacturer_id"),
            ({"events": [{"type": "replay_sid"}]}, "first event"),
            ({"group": {"preset": "test64", "q_bit_length": 8}}, "group"),
            ({"seed": "tomorrow"}, "seed"),
            ({"schedule": {"devices": {"nobody-0": {}}}}, "nobody-0"),
        ],
    )
    def test_invalid_configs_exit_one_naming_the_field(
        self, tmp_path, capsys, overrides, field
    ):
        config = write_config(tmp_path, **overrides)
        assert run_cli("run", "--config", config, "--out", tmp_path / "o") == 1
        assert field in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("run", "--config", tmp_path / "nope.json") == 1
        assert "not found" in capsys.readouterr().err


class TestVerify:
    @pytest.fixture
    def artifacts(self, tmp_path):
        config = write_config(
            tmp_path,
            events=[{"type": "open_session"}, {"type": "replay_sid"}],
        )
        out = tmp_path / "out"
        assert run_cli("run", "--config", config, "--out", out, "--quiet") == 0
        return out

    def test_unmodified_artifacts_pass(self, artifacts):
        assert (
            run_cli("verify", artifacts / "transcript.jsonl", artifacts / "summary.json")
            == 0
        )

    def test_flipped_mask_byte_fails_broadcast_signature(self, artifacts, capsys):
        params = group_preset("test64")
        lines = (artifacts / "transcript.jsonl").read_text().splitlines()
        for i, line in enumerate(lines):
            obj = json.loads(line)
            if obj["type"] != "broadcast":
                continue
            msg = BroadcastMessage.from_bytes(bytes.fromhex(obj["payload"]), params)
            z, y = msg.slots[0]
            tampered = dataclasses.replace(
                msg, slots=((z, bytes([y[0] ^ 1]) + y[1:]),) + msg.slots[1:]
            )
            obj["payload"] = tampered.to_bytes(params).hex()
            lines[i] = json.dumps(obj, sort_keys=True)
            break
        (artifacts / "transcript.jsonl").write_text("\n".join(lines) + "\n")
        assert (
            run_cli("verify", artifacts / "transcript.jsonl", artifacts / "summary.json")
            == 2
        )
        assert "broadcast signature" in capsys.readouterr().err

    def test_missing_collection_fails_round_count(self, artifacts, capsys):
        lines = [
            line
            for line in (artifacts / "transcript.jsonl").read_text().splitlines()
            if json.loads(line)["type"] != "contribution"
        ]
        (artifacts / "transcript.jsonl").write_text("\n".join(lines) + "\n")
        assert (
            run_cli("verify", artifacts / "transcript.jsonl", artifacts / "summary.json")
            == 2
        )
        assert "round count" in capsys.readouterr().err

    def test_unreadable_artifacts_exit_one(self, tmp_path):
        assert run_cli("verify", tmp_path / "a.jsonl", tmp_path / "b.json") == 1

    def test_garbage_summary_exits_one(self, artifacts):
        (artifacts / "summary.json").write_text('{"schema": 1}')
        assert (
            run_cli("verify", artifacts / "transcript.jsonl", artifacts / "summary.json")
            == 1
        )
