import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ECUS, ecu_fleet_scenario, random_world, scenario_from_world
from oracles import brute_force_updates, with_state
from sdv_ota.errors import ScenarioError
from sdv_ota.sim import Scenario, builtin_scenarios, encode_log, load_scenario, replay_check, run_scenario


def fleet_campaign(seed=0, vehicles=6, variants=2, **strategy):
    doc = ecu_fleet_scenario(vehicles, variants, seed=seed)
    doc["campaigns"] = [{"time": 500, "campaign_id": "c", "strategy": {"mode": "FULL", **strategy}}]
    return doc


def test_empty_scenario_logs_start_and_stop():
    result = run_scenario({})
    assert [r["event"] for r in result.records] == ["start", "stop"]
    assert result.passed and result.log_bytes().count(b"\n") == 2


class TestScenarioParsing:
    @pytest.mark.parametrize("doc,needle", [
        ({"fleet": [{"vehicle_id": "a", "variant_id": "x"}] * 2}, "unique"),
        ({"latency_ms": {"min": 9, "max": 1}}, "latency"),
        ({"faults": [{"vehicle": "ghost", "slot": "s", "type": "install"}]}, "unknown vehicle"),
        ({"assertions": [{"type": "vibes"}]}, "assertion type"),
        ({"poll_interval_ms": 0}, "poll_interval"),
        ({"fleet": [{"variant_id": "x"}]}, "malformed"),
        ({"matrix": {"v": {"s": [{"min": "one"}]}}}, "malformed"),
    ])
    def test_rejects(self, doc, needle):
        with pytest.raises(ScenarioError, match=needle):
            Scenario.from_dict(doc)

    def test_bad_files(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{nope")
        with pytest.raises(ScenarioError, match="not valid JSON"):
            load_scenario(path)
        with pytest.raises(ScenarioError, match="no scenario"):
            load_scenario("does-not-exist")

    def test_builtin_lookup(self, tmp_path):
        assert {"s4a-update", "s4a-rollback", "s4c-model"} <= set(builtin_scenarios())
        path = tmp_path / "mine.json"
        path.write_text(json.dumps({"name": "mine", "seed": 3}))
        assert load_scenario(path).name == "mine"
        assert load_scenario("s4a-update.json").name == "s4a-update"


@pytest.mark.parametrize("name", ["s4a-update", "s4a-rollback", "s4c-model"])
def test_builtin_scenarios_pass(name):
    result = run_scenario(name)
    assert result.passed, [a for a in result.assertions if not a.passed] + result.errors


class TestDeterminism:
    def test_same_seed_same_bytes(self):
        doc = fleet_campaign(seed=4)
        assert replay_check(run_scenario(doc), run_scenario(doc)) is None

    def test_seed_changes_the_log(self):
        a, b = run_scenario(fleet_campaign(seed=1)), run_scenario(fleet_campaign(seed=2))
        assert replay_check(a, b) is not None
        # past the start record, different poll offsets and latencies still show
        tail_a, tail_b = a.log_bytes().split(b"\n", 1)[1], b.log_bytes().split(b"\n", 1)[1]
        assert replay_check(tail_a, tail_b) is not None

    def test_divergence_points_at_first_line(self):
        assert replay_check(b"a\nb\nc\n", b"a\nb\nX\n").line == 2
        assert replay_check(b"a\n", b"a\nb\n").line == 1
        assert replay_check(b"same", b"same") is None

    def test_strip_latency(self):
        records = [{"event": "x", "latency_ms": 4, "vehicle": "v"}]
        assert encode_log(records, strip_latency=True) == b'{"event":"x","vehicle":"v"}\n'

    def test_transports_match(self):
        doc = fleet_campaign(seed=7, vehicles=4)
        a, b = run_scenario(doc, "inproc"), run_scenario(doc, "http")
        assert replay_check(a.log_bytes(strip_latency=True), b.log_bytes(strip_latency=True)) is None


class TestOutcomes:
    def test_fleet_is_conserved(self):
        rng = random.Random(11)
        fleet, catalog, matrix = random_world(rng, vehicles=12, variants=3, artifacts=25)
        doc = scenario_from_world(fleet, catalog, matrix,
                                  campaigns=[{"time": 10, "campaign_id": "c", "strategy": {"mode": "FULL"}}])
        result = run_scenario(doc)
        ids = sorted(p["vehicle_id"] for p in fleet)
        assert sorted(result.final_versions()) == ids
        assert sorted(e["vehicle"] for e in result.events("vehicle_registered")) == ids
        assert [v["vehicle_id"] for v in result.service.fleet_snapshot()["vehicles"]] == ids
        assert result.events("stop")[0]["vehicles"] == len(ids)

    def test_failed_assertion_is_reported(self):
        doc = fleet_campaign()
        doc["assertions"] = [{"type": "vehicle_versions", "vehicle": "veh-00", "slots": {ECUS[0]: "9.9.9"}}]
        result = run_scenario(doc)
        (a,) = result.assertions
        assert not a.passed and "9.9.9" in a.detail and not result.passed

    def test_timed_assertion_runs_mid_scenario(self):
        doc = fleet_campaign()
        doc["assertions"] = [
            {"name": "before", "type": "vehicle_versions", "vehicle": "veh-00", "slots": {ECUS[0]: "1.0.0"}, "at": 100},
            {"name": "after", "type": "vehicle_versions", "vehicle": "veh-00", "slots": {ECUS[0]: "2.0.0"}},
        ]
        result = run_scenario(doc)
        assert [(a.name, a.passed) for a in result.assertions] == [("before", True), ("after", True)]

    def test_operation_errors_are_collected(self):
        doc = fleet_campaign()
        doc["publishes"].append(dict(doc["publishes"][0], time=50))  # duplicate publish
        result = run_scenario(doc)
        assert len(result.errors) == 1 and "Duplicate" in result.errors[0]
        assert result.events("operation_failed") and not result.passed

    def test_time_cap(self):
        doc = fleet_campaign()
        doc["time_cap_ms"] = 200
        result = run_scenario(doc)
        assert result.events("time_cap")
        assert result.final_versions()["veh-00"][ECUS[0]] == "1.0.0"

    def test_integrity_fault_is_visible_in_log(self):
        doc = fleet_campaign(vehicles=2, variants=1)
        doc["faults"] = [{"vehicle": "veh-01", "slot": ECUS[1], "type": "corrupt", "position": 9}]
        result = run_scenario(doc)
        reports = [e for e in result.events("report_accepted") if e["vehicle"] == "veh-01"]
        assert reports and reports[0]["ledger_state"][ECUS[1]] == "1.0.0"
        assert result.devices["veh-01"].version(ECUS[1]) == "1.0.0"


@settings(max_examples=15)
@given(st.integers(0, 10**6))
def test_issued_manifests_match_oracle(seed):
    rng = random.Random(seed)
    fleet, catalog, matrix = random_world(rng, vehicles=10, variants=3, artifacts=30)
    doc = scenario_from_world(fleet, catalog, matrix, seed=seed,
                              campaigns=[{"time": 10, "campaign_id": "c", "strategy": {"mode": "FULL"}}])
    result = run_scenario(doc)
    assert not result.errors
    profiles = {p["vehicle_id"]: p for p in fleet}
    for event in result.events("manifest_issued"):
        if event["purpose"] != "update":
            continue
        got = {a["slot"]: (a["artifact_id"], a["to"]) for a in event["manifest"]["actions"]}
        want = brute_force_updates(with_state(profiles[event["vehicle"]], event["reported_state"]), catalog, matrix)
        assert got == want, event["vehicle"]
