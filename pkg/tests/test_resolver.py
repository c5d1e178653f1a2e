import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ECUS, ecu_vehicle, firmware, model, random_world
from oracles import brute_force_updates, compatible, vtuple
from sdv_ota.core import ArtifactDescriptor, VehicleProfile, parse_version
from sdv_ota.errors import ResolutionError, ValidationError
from sdv_ota.resolver import (
    DependencyMatrix,
    Direction,
    UpdateAction,
    UpdateManifest,
    VersionConstraint,
    VersionRange,
    apply_manifest,
    check_compatibility,
    resolve_rollback,
    resolve_updates,
    select_best,
)

ABS, HVAC, AIRBAG = ECUS
IDS = {ABS: "abs-fw", HVAC: "hvac-fw", AIRBAG: "airbag-fw"}

# catalog and matrix that reproduce the two reported version triples
LAB_CATALOG = [
    firmware(IDS[slot], slot, v)[0]
    for slot, v in [(ABS, "2.0.0"), (HVAC, "2.0.0"), (HVAC, "3.0.0"), (AIRBAG, "1.0.0"), (AIRBAG, "2.0.0")]
]
LAB_MATRIX = DependencyMatrix(
    {
        "variant-1": {ABS: VersionConstraint.at_most("2.0.0"), HVAC: VersionConstraint.at_most("2.0.0"),
                      AIRBAG: VersionConstraint.at_most("1.0.0")},
        "variant-2": {ABS: VersionConstraint.at_most("2.0.0"), HVAC: VersionConstraint.at_most("3.0.0"),
                      AIRBAG: VersionConstraint.at_most("2.0.0")},
    }
)


def targets(manifest):
    return {a.slot_name: str(a.to_version) for a in manifest.actions}


class TestConstraints:
    def test_unbounded_range_matches_all(self):
        c = VersionConstraint((VersionRange(),))
        assert c.satisfied_by(parse_version("0.0.0")) and c.satisfied_by(parse_version("999.0.0"))

    def test_union_of_ranges(self):
        c = VersionConstraint.from_list([{"min": "1.0.0", "max": "1.9.9"}, {"min": "3.0.0", "max": None}])
        assert [c.satisfied_by(parse_version(v)) for v in ("0.9.0", "1.5.0", "2.0.0", "3.0.0", "7.1.0")] == [
            False, True, False, True, True
        ]

    def test_empty_constraint_rejected(self):
        with pytest.raises(ValidationError):
            VersionConstraint(())

    def test_matrix_roundtrip_and_deny_default(self):
        assert DependencyMatrix.from_dict(LAB_MATRIX.to_dict()) == LAB_MATRIX
        assert LAB_MATRIX.constraint_for("variant-9", ABS) is None


class TestCompatibility:
    def test_airbag_two_excluded_for_variant_one(self):
        airbag2 = LAB_CATALOG[4]
        verdict = check_compatibility(airbag2, ecu_vehicle(variant="variant-1"), LAB_MATRIX)
        assert not verdict and "matrix constraint" in verdict.reason
        assert check_compatibility(airbag2, ecu_vehicle(variant="variant-2"), LAB_MATRIX)

    def test_unknown_slot(self):
        desc, _ = firmware("x", "Gearbox", "1.0.0")
        verdict = check_compatibility(desc, ecu_vehicle(), LAB_MATRIX)
        assert not verdict and "unknown slot" in verdict.reason

    def test_kind_mismatch(self):
        desc, _ = model("m", ABS, "1.0.0", ["x"])
        assert "kind mismatch" in check_compatibility(desc, ecu_vehicle(), LAB_MATRIX).reason

    def test_missing_matrix_entry_denies(self):
        verdict = check_compatibility(LAB_CATALOG[0], ecu_vehicle(variant="variant-x"), LAB_MATRIX)
        assert not verdict and "no entry" in verdict.reason

    def test_200_random_triples_match_oracle(self):
        rng = random.Random(7)
        checked = 0
        while checked < 200:
            fleet, catalog, matrix = random_world(rng, vehicles=4, artifacts=10)
            m = DependencyMatrix.from_dict(matrix)
            for p in fleet:
                a = rng.choice(catalog)
                got = bool(check_compatibility(ArtifactDescriptor.from_dict(a), VehicleProfile.from_dict(p), m))
                assert got == compatible(a, p, matrix), (a, p)
                checked += 1


class TestSelectBest:
    def test_highest_version(self):
        a, _ = firmware("a", ABS, "2.0.0")
        b, _ = firmware("b", ABS, "3.0.0")
        assert select_best([a, b]).artifact_id == "b"

    def test_single(self):
        a, _ = firmware("a", ABS, "2.0.0")
        assert select_best([a]) is a

    def test_tie_goes_to_smallest_id(self):
        b, _ = firmware("b", ABS, "2.0.0")
        a, _ = firmware("a", ABS, "2.0.0")
        assert select_best([b, a]).artifact_id == "a"

    def test_errors(self):
        with pytest.raises(ResolutionError):
            select_best([])
        with pytest.raises(ResolutionError):
            select_best([firmware("a", ABS, "1.0.0")[0], firmware("a", HVAC, "1.0.0")[0]])


class TestResolveUpdates:
    def test_variant_one_triple(self):
        m = resolve_updates(ecu_vehicle(variant="variant-1"), LAB_CATALOG, LAB_MATRIX)
        assert targets(m) == {ABS: "2.0.0", HVAC: "2.0.0"}
        assert all(a.direction is Direction.UPGRADE for a in m.actions)
        final = apply_manifest(ecu_vehicle(variant="variant-1"), m).installed_state()
        assert final == {ABS: "2.0.0", HVAC: "2.0.0", AIRBAG: "1.0.0"}

    def test_variant_two_triple(self):
        m = resolve_updates(ecu_vehicle("vehicle-2", "variant-2"), LAB_CATALOG, LAB_MATRIX)
        assert targets(m) == {ABS: "2.0.0", HVAC: "3.0.0", AIRBAG: "2.0.0"}

    def test_empty_catalog(self):
        assert resolve_updates(ecu_vehicle(), [], LAB_MATRIX).is_empty

    def test_never_downgrades(self):
        p = ecu_vehicle(versions=("5.0.0", "5.0.0", "5.0.0"))
        assert resolve_updates(p, LAB_CATALOG, LAB_MATRIX).is_empty

    def test_wire_roundtrip(self):
        m = resolve_updates(ecu_vehicle("vehicle-2", "variant-2"), LAB_CATALOG, LAB_MATRIX, manifest_id="m-1")
        assert UpdateManifest.from_dict(m.to_dict()) == m
        assert m.to_dict()["actions"][0]["download_url"].startswith("/api/v1/blobs/")

    def test_deterministic(self):
        p = ecu_vehicle("vehicle-2", "variant-2")
        assert resolve_updates(p, LAB_CATALOG, LAB_MATRIX) == resolve_updates(p, list(reversed(LAB_CATALOG)), LAB_MATRIX)

    @given(st.integers(0, 2**32 - 1))
    def test_sound_maximal_idempotent(self, seed):
        rng = random.Random(seed)
        fleet, catalog, matrix = random_world(rng, vehicles=3, artifacts=rng.randrange(1, 21))
        descs = [ArtifactDescriptor.from_dict(a) for a in catalog]
        m = DependencyMatrix.from_dict(matrix)
        for raw in fleet:
            profile = VehicleProfile.from_dict(raw)
            manifest = resolve_updates(profile, descs, m)
            got = {a.slot_name: (a.artifact_id, str(a.to_version)) for a in manifest.actions}
            # soundness + maximality in one comparison against the brute-force answer
            assert got == brute_force_updates(raw, catalog, matrix)
            for action in manifest.actions:
                assert vtuple(str(action.to_version)) > vtuple(str(action.from_version))
            assert resolve_updates(apply_manifest(profile, manifest), descs, m).is_empty

    def test_model_actions_carry_metadata(self):
        desc, _ = model("det", "detector", "2.0.0", ["robot", "cone"])
        p = VehicleProfile.from_dict({"vehicle_id": "v", "variant_id": "bot",
                                      "installed_models": {"detector": {"artifact_id": "det", "version": "1.0.0"}}})
        matrix = DependencyMatrix({"bot": {"detector": VersionConstraint((VersionRange(),))}})
        action = resolve_updates(p, [desc], matrix).actions[0]
        assert action.model["meta"]["detectable_classes"] == ["robot", "cone"]


class TestResolveRollback:
    post = {ABS: "2.0.0", HVAC: "2.0.0", AIRBAG: "1.0.0"}
    old = [firmware(IDS[s], s, "1.0.0")[0] for s in (ABS, HVAC)]

    def pins(self, variant="variant-1"):
        return {(variant, s): parse_version("1.0.0") for s in ECUS}

    def test_restores_prior_state(self):
        p = ecu_vehicle(versions=tuple(self.post.values()))
        m = resolve_rollback(p, self.pins(), LAB_CATALOG + self.old)
        # Airbag is already at its pin, so only two actions
        assert targets(m) == {ABS: "1.0.0", HVAC: "1.0.0"}
        assert all(a.direction is Direction.ROLLBACK for a in m.actions)

    def test_fixed_point(self):
        assert resolve_rollback(ecu_vehicle(), self.pins(), LAB_CATALOG + self.old).is_empty

    def test_pin_missing_from_catalog(self):
        p = ecu_vehicle(versions=tuple(self.post.values()))
        with pytest.raises(ResolutionError):
            resolve_rollback(p, self.pins(), LAB_CATALOG)

    def test_other_variants_pins_ignored(self):
        p = ecu_vehicle(versions=tuple(self.post.values()))
        assert resolve_rollback(p, self.pins("variant-2"), LAB_CATALOG).is_empty

    def test_pin_above_installed_is_upgrade(self):
        p = ecu_vehicle(versions=("1.0.0", "1.0.0", "1.0.0"))
        m = resolve_rollback(p, {("variant-1", AIRBAG): parse_version("2.0.0")}, LAB_CATALOG)
        assert [a.direction for a in m.actions] == [Direction.UPGRADE]


class TestManifestInvariants:
    def action(self, slot=ABS, frm="1.0.0", to="2.0.0", direction=Direction.UPGRADE):
        d, _ = firmware("x", slot, to)
        return UpdateAction(slot, "x", parse_version(frm), parse_version(to), d.digest, d.size_bytes, direction)

    def test_direction_must_match_versions(self):
        with pytest.raises(ValidationError):
            self.action(frm="2.0.0", to="1.0.0", direction=Direction.UPGRADE)
        with pytest.raises(ValidationError):
            self.action(frm="1.0.0", to="2.0.0", direction=Direction.ROLLBACK)

    def test_one_action_per_slot(self):
        with pytest.raises(ValidationError):
            UpdateManifest("v", "m", (self.action(), self.action(to="3.0.0")))
        assert UpdateManifest("v", "m").is_empty
