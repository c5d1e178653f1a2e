import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import ecu_vehicle, image, service_vehicle
from sdv_ota.core import ArtifactKind, ArtifactRef, VehicleProfile, parse_version
from sdv_ota.errors import NotFound, ValidationError
from sdv_ota.images import FormatError, Image, generate_body, pack_image, pack_parts, unpack_image, unpack_parts
from sdv_ota.installers import Fault, FaultInjector, SimulatedDevice

V1, V2 = parse_version("1.0.0"), parse_version("2.0.0")
ABS = "ABS Control Module"
CLASSES = {"artifact_id": "det", "version": "2.0.0", "meta": {"detectable_classes": ["robot", "cone"]}}


class TestImages:
    @given(st.builds(lambda a, b, c: parse_version(f"{a}.{b}.{c}"), *[st.integers(0, 999)] * 3), st.binary(max_size=300))
    def test_roundtrip(self, version, body):
        assert unpack_image(pack_image(version, body)) == Image(version, body)

    @given(st.binary(max_size=200), st.binary(max_size=200))
    def test_parts_roundtrip(self, a, b):
        assert unpack_parts(pack_parts(a, b)) == (a, b)

    @pytest.mark.parametrize("mutate", [
        lambda d: b"BADMAGIC" + d[8:],
        lambda d: d[:-1],
        lambda d: d + b"\x00",
        lambda d: d[:10],
    ])
    def test_malformed_images(self, mutate):
        with pytest.raises(FormatError):
            unpack_image(mutate(image("1.0.0")))

    def test_parts_reject_trailing_and_truncated(self):
        blob = pack_parts(b"abc", b"de")
        with pytest.raises(FormatError):
            unpack_parts(blob + b"x")
        with pytest.raises(FormatError):
            unpack_parts(blob[:-1])

    def test_generate_body(self):
        assert generate_body(32, 1) == generate_body(32, 1) != generate_body(32, 2)
        assert len(generate_body(1000, "s")) == 1000 and generate_body(0, 1) == b""


class TestFaults:
    def test_unknown_type(self):
        with pytest.raises(ValidationError):
            Fault("x", "meteor")

    def test_schedule_by_attempt(self):
        inj = FaultInjector([Fault("ABS", "install", attempt=2)])
        assert inj.next("ABS", "install") is None
        assert inj.next("ABS", "install").type == "install"
        assert inj.next("ABS", "install") is None
        assert inj.next("ABS", "download") is None

    def test_random_rate_is_seeded(self):
        runs = []
        for _ in range(2):
            inj = FaultInjector(seed=5, rate=0.5)
            runs.append([inj.next("s", "install") is None for _ in range(30)])
        assert runs[0] == runs[1] and any(runs[0]) and not all(runs[0])


class TestFirmware:
    def test_flash_success_keeps_hardware_version(self):
        dev = SimulatedDevice.from_profile(ecu_vehicle())
        out = dev.install(ArtifactKind.FIRMWARE_BINARY, ABS, image("2.0.0"), V2)
        assert out.ok
        assert dev.version(ABS) == "2.0.0"
        assert dev.state["firmware"][ABS]["hardware_version"] == "1.0.0"

    def test_empty_image_rejected_without_change(self):
        dev = SimulatedDevice.from_profile(ecu_vehicle())
        before = dev.snapshot()
        out = dev.flash_firmware(ABS, b"", V2)
        assert not out.ok and "empty" in out.detail
        assert dev.snapshot() == before

    def test_injected_fault_is_atomic(self):
        dev = SimulatedDevice.from_profile(ecu_vehicle(), FaultInjector([Fault(ABS, "install")]))
        before = dev.snapshot()
        assert not dev.flash_firmware(ABS, image("2.0.0"), V2).ok
        assert dev.snapshot() == before
        assert dev.flash_firmware(ABS, image("2.0.0"), V2).ok

    def test_unknown_slot(self):
        dev = SimulatedDevice.from_profile(ecu_vehicle())
        assert not dev.flash_firmware("Gearbox", image("2.0.0"), V2).ok


class TestContainers:
    def test_deploy_and_probe(self):
        dev = SimulatedDevice.from_profile(service_vehicle("bot"))
        assert dev.deploy_container("perception", image("2.0.0"), V2).ok
        assert dev.state["containers"]["perception"]["running"]

    def test_probe_failure_reverts(self):
        dev = SimulatedDevice.from_profile(service_vehicle("bot"))
        before = dev.snapshot()
        out = dev.deploy_container("perception", image("3.0.0"), V2)  # image reports the wrong version
        assert not out.ok and "health probe" in out.detail
        out = dev.deploy_container("perception", b"not an image", V2)
        assert not out.ok
        assert dev.snapshot() == before

    def test_redeploy_same_is_noop(self):
        dev = SimulatedDevice.from_profile(service_vehicle("bot"))
        payload = image("2.0.0")
        assert dev.deploy_container("perception", payload, V2).ok
        snap = dev.snapshot()
        out = dev.deploy_container("perception", payload, V2)
        assert out.ok and dev.snapshot() == snap

    def test_composed_container_exposes_model(self):
        dev = SimulatedDevice.from_profile(service_vehicle("bot"))
        payload = pack_parts(image("2.0.0"), generate_body(64, "m"))
        assert dev.install(ArtifactKind.CONTAINER_IMAGE, "perception", payload, V2, CLASSES).ok
        assert dev.detectable_classes("perception") == ["robot", "cone"]

    def test_composed_with_empty_model_part_fails(self):
        dev = SimulatedDevice.from_profile(service_vehicle("bot"))
        before = dev.snapshot()
        assert not dev.mount_model("perception", pack_parts(image("2.0.0"), b""), V2, CLASSES).ok
        assert dev.snapshot() == before


class TestModels:
    def profile(self):
        return VehicleProfile("v", "var", (), installed_models={"detector": ArtifactRef("det", V1)})

    def test_mount(self):
        dev = SimulatedDevice.from_profile(self.profile())
        assert dev.install(ArtifactKind.AI_MODEL, "detector", generate_body(10, 1), V2, CLASSES).ok
        assert dev.detectable_classes("detector") == ["robot", "cone"]

    def test_mount_fault(self):
        dev = SimulatedDevice.from_profile(self.profile(), FaultInjector([Fault("detector", "probe")]))
        before = dev.snapshot()
        assert not dev.mount_model("detector", generate_body(10, 1), V2, CLASSES).ok
        assert dev.snapshot() == before


class TestABBanks:
    def test_activate_previous_is_one_deep(self):
        dev = SimulatedDevice.from_profile(ecu_vehicle())
        factory = dev.snapshot()
        dev.flash_firmware(ABS, image("2.0.0"), V2)
        dev.activate_previous(ABS)
        assert dev.snapshot() == factory
        with pytest.raises(NotFound):
            dev.activate_previous(ABS)

    def test_describe_and_dump(self, tmp_path):
        dev = SimulatedDevice.from_profile(ecu_vehicle())
        path = dev.dump(tmp_path)
        assert path.exists()
        assert isinstance(dev.describe()["firmware"][ABS]["image"], int)
