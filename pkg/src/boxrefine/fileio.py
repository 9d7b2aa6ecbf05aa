"""On-disk formats: scene files, detection records, split manifests.

A scene file is a single-line JSON header (format version, generator spec
echo, point count, ground-truth boxes with class tags) terminated by a
newline, followed by a little-endian float32 blob of xyz triples.
Per-point labels are an in-memory aid for the simulator and are not
persisted. All writes go through a temp file plus rename, and all JSON is
emitted with sorted keys so seeded reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import PointCloud
from .scene import Detection, Scene, SceneSpec

SCENE_FORMAT_VERSION = 1
DETECTIONS_FORMAT_VERSION = 1
MANIFEST_FORMAT_VERSION = 1


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_scene(path: Path, scene: Scene, scene_id: str, spec: SceneSpec) -> None:
    header = {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_id": scene_id,
        "spec": spec.to_dict(),
        "point_count": int(len(scene.cloud)),
        "boxes": [
            {"box": [float(v) for v in box], "class": cls}
            for box, cls in zip(scene.gt_boxes, scene.gt_classes)
        ],
    }
    blob = np.ascontiguousarray(scene.cloud.points, dtype="<f4").tobytes()
    atomic_write_bytes(path, dumps_canonical(header).encode("utf-8") + b"\n" + blob)


def read_scene(path: Path) -> tuple[Scene, str]:
    """Load a scene file; returns (scene, scene_id). Labels are not stored."""
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed scene header: {exc}") from exc
    if header.get("format_version") != SCENE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported scene format version {header.get('format_version')}")
    count = int(header["point_count"])
    blob = raw[nl + 1 :]
    if len(blob) != count * 12:
        raise DataError(f"{path}: blob length {len(blob)} does not match {count} points")
    points = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(count, 3)
    spec = SceneSpec.from_dict(header["spec"])
    boxes = [np.asarray(b["box"], dtype=np.float64) for b in header["boxes"]]
    classes = [b["class"] for b in header["boxes"]]
    scene = Scene(
        cloud=PointCloud(points=points),
        gt_boxes=np.stack(boxes) if boxes else np.zeros((0, 7)),
        gt_classes=classes,
        sensor_origin=np.asarray(spec.sensor_origin, dtype=np.float64),
    )
    return scene, header["scene_id"]


def detection_record(scene_id: str, det: Detection, **extra) -> dict:
    rec = {
        "scene_id": scene_id,
        "box": [float(v) for v in det.box],
        "confidence": float(det.confidence),
        "class": det.cls,
    }
    rec.update(extra)
    return rec


def write_detections(path: Path, records: list[dict]) -> None:
    payload = {"format_version": DETECTIONS_FORMAT_VERSION, "detections": records}
    atomic_write_text(path, dumps_canonical(payload) + "\n")


def read_detections(path: Path) -> list[dict]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read detections: {exc}") from exc
    if payload.get("format_version") != DETECTIONS_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported detections format version")
    records = payload["detections"]
    for rec in records:
        if len(rec.get("box", [])) != 7:
            raise DataError(f"{path}: detection record without a 7-tuple box")
    return records


def write_manifest(path: Path, root_seed: int, spec: SceneSpec, splits: dict[str, list[dict]]) -> None:
    payload = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "root_seed": int(root_seed),
        "spec": spec.to_dict(),
        "splits": splits,
    }
    atomic_write_text(path, dumps_canonical(payload) + "\n")


def read_manifest(path: Path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    if payload.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported manifest format version")
    return payload
