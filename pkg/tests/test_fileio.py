import json

import numpy as np
import pytest

from boxrefine import fileio
from boxrefine.errors import DataError
from boxrefine.scene import Detection, SceneSpec, sample_scene


@pytest.fixture
def spec():
    return SceneSpec(object_count=(1, 3), surface_density=10.0, background_density=0.3)


class TestSceneFile:
    def test_round_trip(self, tmp_path, spec):
        scene = sample_scene(spec, seed=2)
        path = tmp_path / "scene_000.sbin"
        fileio.write_scene(path, scene, "scene_000", spec)
        loaded, scene_id = fileio.read_scene(path)
        assert scene_id == "scene_000"
        # float32 quantization on points, exact ground-truth boxes
        np.testing.assert_allclose(loaded.cloud.points, scene.cloud.points, atol=1e-4)
        np.testing.assert_array_equal(loaded.gt_boxes, scene.gt_boxes)
        assert loaded.gt_classes == scene.gt_classes
        np.testing.assert_allclose(loaded.sensor_origin, scene.sensor_origin)
        assert loaded.cloud.labels is None

    def test_header_is_single_json_line(self, tmp_path, spec):
        scene = sample_scene(spec, seed=3)
        path = tmp_path / "s.sbin"
        fileio.write_scene(path, scene, "s", spec)
        raw = path.read_bytes()
        header = json.loads(raw[: raw.find(b"\n")])
        assert header["format_version"] == fileio.SCENE_FORMAT_VERSION
        assert header["point_count"] == len(scene.cloud)
        assert len(raw) - raw.find(b"\n") - 1 == 12 * len(scene.cloud)

    def test_truncated_blob_rejected(self, tmp_path, spec):
        scene = sample_scene(spec, seed=4)
        path = tmp_path / "s.sbin"
        fileio.write_scene(path, scene, "s", spec)
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(DataError):
            fileio.read_scene(path)

    def test_bad_version_rejected(self, tmp_path, spec):
        scene = sample_scene(spec, seed=4)
        path = tmp_path / "s.sbin"
        fileio.write_scene(path, scene, "s", spec)
        raw = path.read_bytes()
        nl = raw.find(b"\n")
        header = json.loads(raw[:nl])
        header["format_version"] = 99
        path.write_bytes(json.dumps(header).encode() + raw[nl:])
        with pytest.raises(DataError):
            fileio.read_scene(path)

    def test_deterministic_bytes(self, tmp_path, spec):
        scene = sample_scene(spec, seed=5)
        p1, p2 = tmp_path / "a.sbin", tmp_path / "b.sbin"
        fileio.write_scene(p1, scene, "x", spec)
        fileio.write_scene(p2, scene, "x", spec)
        assert p1.read_bytes() == p2.read_bytes()


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        dets = [
            fileio.detection_record("scene_000", Detection(box=np.arange(7.0), confidence=0.25)),
            fileio.detection_record("scene_001", Detection(box=np.ones(7), confidence=0.75, cls="car"), refined=True),
        ]
        path = tmp_path / "dets.json"
        fileio.write_detections(path, dets)
        loaded = fileio.read_detections(path)
        assert loaded == dets
        assert loaded[1]["refined"] is True

    def test_malformed_box_rejected(self, tmp_path):
        path = tmp_path / "dets.json"
        fileio.write_detections(path, [{"scene_id": "a", "box": [1, 2], "confidence": 0.1, "class": "car"}])
        with pytest.raises(DataError):
            fileio.read_detections(path)


class TestManifest:
    def test_round_trip(self, tmp_path, spec):
        splits = {
            "train": [{"id": "train_000000", "file": "scenes/train_000000.sbin", "seed": 42}],
            "val": [{"id": "val_000000", "file": "scenes/val_000000.sbin", "seed": 43}],
        }
        path = tmp_path / "manifest.json"
        fileio.write_manifest(path, root_seed=7, spec=spec, splits=splits)
        loaded = fileio.read_manifest(path)
        assert loaded["root_seed"] == 7
        assert loaded["splits"] == splits
        assert SceneSpec.from_dict(loaded["spec"]) == spec

    def test_missing_file_raises_data_error(self, tmp_path):
        with pytest.raises(DataError):
            fileio.read_manifest(tmp_path / "nope.json")
