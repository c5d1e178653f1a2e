"""Builders shared by the test modules."""

import hashlib

from sdv_ota.core import (
    ArtifactDescriptor,
    ArtifactKind,
    ArtifactRef,
    EcuDescriptor,
    ModelMetadata,
    VehicleProfile,
    compute_digest,
    parse_version,
)
from sdv_ota.images import generate_body, pack_image
from sdv_ota.store import Permission

ECUS = ("ABS Control Module", "HVAC Control Module", "Airbag Control Module")

TOKENS = {
    "admin": list(Permission),
    "publisher": [Permission.PUBLISH],
    "reader": [Permission.FETCH],
}


def image(version: str, seed="x", size=128) -> bytes:
    return pack_image(parse_version(version), generate_body(size, f"{seed}-{version}"))


def firmware(aid, slot, version, payload=None, **kw):
    payload = image(version, aid) if payload is None else payload
    desc = ArtifactDescriptor(
        artifact_id=aid,
        kind=ArtifactKind.FIRMWARE_BINARY,
        slot_name=slot,
        version=parse_version(version),
        digest=compute_digest(payload),
        size_bytes=len(payload),
        **kw,
    )
    return desc, payload


def container(aid, slot, version, payload=None, **kw):
    payload = image(version, aid) if payload is None else payload
    return (
        ArtifactDescriptor(aid, ArtifactKind.CONTAINER_IMAGE, slot, parse_version(version),
                           compute_digest(payload), len(payload), **kw),
        payload,
    )


def model(aid, slot, version, classes, payload=None):
    payload = generate_body(256, f"{aid}-{version}") if payload is None else payload
    return (
        ArtifactDescriptor(aid, ArtifactKind.AI_MODEL, slot, parse_version(version), compute_digest(payload),
                           len(payload), model_meta=ModelMetadata(0.9, "lab", tuple(classes))),
        payload,
    )


def ecu_vehicle(vid="vehicle-1", variant="variant-1", versions=("1.0.0", "1.0.0", "1.0.0"), **kw):
    ecus = tuple(
        EcuDescriptor(slot, parse_version("1.0.0"), parse_version(v)) for slot, v in zip(ECUS, versions)
    )
    return VehicleProfile(vid, variant, ecus, **kw)


def service_vehicle(vid, variant="bot", version="1.0.0", slot="perception", **kw):
    return VehicleProfile(
        vid, variant, (), installed_services={slot: ArtifactRef(slot, parse_version(version))}, **kw
    )


SENSORS = ("camera", "lidar", "radar")


def random_world(rng, vehicles=8, variants=3, artifacts=20):
    """Random fleet, catalog and matrix as plain wire dicts.

    The slot pool mixes ECUs, a service and a model so kind checks matter.
    """
    ecu_slots = ["ABS", "HVAC", "Airbag"]
    ver = lambda: f"{rng.randrange(4)}.{rng.randrange(3)}.{rng.randrange(3)}"
    variant_ids = [f"variant-{i}" for i in range(variants)]
    fleet = []
    for i in range(vehicles):
        fleet.append(
            {
                "vehicle_id": f"veh-{i:03d}",
                "variant_id": rng.choice(variant_ids),
                "compute_tier": rng.randrange(4),
                "sensors": sorted(rng.sample(SENSORS, rng.randrange(len(SENSORS) + 1))),
                "platform": rng.choice([None, "tb4"]),
                "ecus": [
                    {"slot_name": s, "hardware_version": f"{rng.randrange(3)}.0.0", "installed_firmware": ver(),
                     "hardware_model": rng.choice([None, f"{s.lower()}-hw"])}
                    for s in ecu_slots
                    if rng.random() < 0.85
                ],
                "installed_services": {"perception": {"artifact_id": "perception", "version": ver()}}
                if rng.random() < 0.6 else {},
                "installed_models": {"detector": {"artifact_id": "det", "version": ver()}}
                if rng.random() < 0.4 else {},
            }
        )
    slot_pool = [(s, "FIRMWARE_BINARY") for s in ecu_slots] + [("perception", "CONTAINER_IMAGE"),
                                                              ("detector", "AI_MODEL"), ("detector", "CONTAINER_IMAGE")]
    catalog, seen = [], set()
    while len(catalog) < artifacts:
        slot, kind = rng.choice(slot_pool)
        aid = f"{slot.lower()}-{rng.choice('ab')}"
        v = ver()
        if (aid, v) in seen:
            continue
        seen.add((aid, v))
        req = {}
        if rng.random() < 0.3:
            req["min_compute_tier"] = rng.randrange(4)
        if rng.random() < 0.3:
            req["required_sensors"] = rng.sample(SENSORS, rng.randrange(1, 3))
        if rng.random() < 0.15:
            req["hardware_model"] = rng.choice(["tb4", f"{slot.lower()}-hw", "other"])
        if rng.random() < 0.15:
            req["min_hardware_version"] = f"{rng.randrange(3)}.0.0"
        payload = f"{aid}@{v}".encode()
        desc = {
            "artifact_id": aid, "kind": kind, "slot_name": slot, "version": v,
            "digest": "sha256:" + hashlib.sha256(payload).hexdigest(),
            "size_bytes": len(payload), "requirement": req,
        }
        if kind == "AI_MODEL":
            desc["model_meta"] = {"accuracy": 0.5, "detectable_classes": ["robot"]}
        catalog.append(desc)
    matrix = {}
    for var in variant_ids:
        row = {}
        for slot in ecu_slots + ["perception", "detector"]:
            if rng.random() < 0.15:
                continue  # absent entry means deny
            ranges = []
            for _ in range(rng.randrange(1, 3)):
                lo = rng.choice([None, ver()])
                hi = rng.choice([None, ver()])
                ranges.append({"min": lo, "max": hi})
            row[slot] = ranges
        matrix[var] = row
    return fleet, catalog, matrix


def crash_after(root, acks, total=None, free_run=False):
    """Run store_worker.py, SIGKILL it once ``acks`` publishes were acknowledged.

    Returns the acknowledged refs in order.
    """
    import os
    import signal
    import subprocess
    import sys
    from pathlib import Path

    total = acks + 1 if total is None else total
    worker = Path(__file__).with_name("store_worker.py")
    args = [sys.executable, str(worker), str(root), str(total)] + (["--free-run"] if free_run else [])
    proc = subprocess.Popen(args, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
    acked = []
    try:
        assert proc.stdout.readline().strip() == "ready"
        for _ in range(acks):
            if not free_run:
                proc.stdin.write("go\n")
                proc.stdin.flush()
            line = proc.stdout.readline().split()
            assert line[:2] == ["ack", str(len(acked))], line
            acked.append(line[2])
    finally:
        os.kill(proc.pid, signal.SIGKILL)
        proc.wait()
        proc.stdin.close()
        proc.stdout.close()
    return acked


def scenario_from_world(fleet, catalog, matrix, **extra):
    """Wrap a random_world() triple as a simulator scenario document.

    Payloads are regenerated by the simulator, so digests are dropped here;
    models ship raw bytes, everything else a versioned image.
    """
    publishes = []
    for desc in catalog:
        artifact = {k: v for k, v in desc.items() if k not in ("digest", "size_bytes")}
        payload = {"size": 64, "seed": f"{desc['artifact_id']}@{desc['version']}",
                   "raw": desc["kind"] == "AI_MODEL"}
        publishes.append({"time": 0, "artifact": artifact, "payload": payload})
    doc = {"name": "random", "seed": 0, "fleet": fleet, "matrix": matrix, "publishes": publishes}
    doc.update(extra)
    return doc


def ecu_fleet_scenario(vehicles, variants, seed=0):
    """ECU-only fleet at 1.0.0 with 1.0.0 and 2.0.0 artifacts for every slot."""
    fleet = [
        {"vehicle_id": f"veh-{i:02d}", "variant_id": f"variant-{i % variants}", "sensors": [],
         "ecus": [{"slot_name": s, "hardware_version": "1.0.0", "installed_firmware": "1.0.0"} for s in ECUS]}
        for i in range(vehicles)
    ]
    publishes = [
        {"time": 0, "artifact": {"artifact_id": f"fw-{n}", "kind": "FIRMWARE_BINARY", "slot_name": s, "version": v},
         "payload": {"size": 128, "seed": f"{n}-{v}"}}
        for n, s in enumerate(ECUS) for v in ("1.0.0", "2.0.0")
    ]
    matrix = {f"variant-{k}": {s: [{"min": None, "max": None}] for s in ECUS} for k in range(variants)}
    return {"name": "ecu-fleet", "seed": seed, "fleet": fleet, "matrix": matrix, "publishes": publishes}
