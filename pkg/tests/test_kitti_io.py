import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rangerefine.errors import DataFormatError
from rangerefine.kitti_io import (
    ClassMap,
    PointCloud,
    SyntheticSceneSpec,
    generate_scene,
    place_objects,
    read_labels,
    read_point_cloud,
    write_labels,
    write_point_cloud,
)


def small_map(num_classes=4):
    return ClassMap(
        raw_to_train={0: 0, 10: 1, 11: 2, 20: 3, 252: 1},
        train_to_name={0: "unlabeled", 1: "a", 2: "b", 3: "c"},
        num_classes=num_classes,
    )


# --- point cloud files ---


def test_read_point_cloud_decodes_records(tmp_path):
    payload = struct.pack("<8f", 1, 0, 0, 0.5, 0, 2, 0, 0.1)
    path = tmp_path / "scan.bin"
    path.write_bytes(payload)
    cloud = read_point_cloud(path)
    assert len(cloud) == 2
    np.testing.assert_array_equal(
        cloud.points, np.array([[1, 0, 0, 0.5], [0, 2, 0, 0.1]], dtype=np.float32)
    )


def test_read_point_cloud_empty_file(tmp_path):
    path = tmp_path / "empty.bin"
    path.write_bytes(b"")
    assert len(read_point_cloud(path)) == 0


def test_read_point_cloud_truncated(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 17)
    with pytest.raises(DataFormatError, match="multiple of 16"):
        read_point_cloud(path)


def test_read_point_cloud_rejects_nan(tmp_path):
    path = tmp_path / "nan.bin"
    path.write_bytes(struct.pack("<8f", 1, 0, 0, 0.5, float("nan"), 2, 0, 0.1))
    with pytest.raises(DataFormatError, match="point 1"):
        read_point_cloud(path)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(
            *(st.floats(-100.0, 100.0, width=32) for _ in range(3)),
            st.floats(0.0, 1.0, width=32),
        ),
        max_size=64,
    )
)
def test_point_cloud_roundtrip_bit_exact(tmp_path_factory, records):
    pts = np.array(records, dtype=np.float32).reshape(-1, 4)
    path = tmp_path_factory.mktemp("rt") / "scan.bin"
    write_point_cloud(PointCloud(pts), path)
    back = read_point_cloud(path)
    assert back.points.tobytes() == pts.tobytes()


# --- label files ---


def test_read_labels_mapping_rules(tmp_path):
    cmap = small_map()
    words = [
        0x00000000,              # unlabeled
        0x0000000A,              # raw 10 -> train 1
        (7 << 16) | 0x0000000A,  # instance id in the upper bits is dropped
        0x00000063,              # unmapped raw 99 -> ignore
    ]
    path = tmp_path / "scan.label"
    path.write_bytes(struct.pack("<4I", *words))
    np.testing.assert_array_equal(read_labels(path, cmap), [0, 1, 1, 0])


def test_read_labels_truncated(tmp_path):
    path = tmp_path / "bad.label"
    path.write_bytes(b"\x00" * 5)
    with pytest.raises(DataFormatError, match="multiple of 4"):
        read_labels(path, small_map())


def test_write_labels_empty(tmp_path):
    path = tmp_path / "empty.label"
    write_labels(np.array([], dtype=np.int32), small_map(), path)
    assert path.read_bytes() == b""


def test_write_labels_out_of_range(tmp_path):
    with pytest.raises(DataFormatError, match="train id"):
        write_labels(np.array([4]), small_map(), tmp_path / "x.label")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=200))
def test_label_roundtrip_identity(tmp_path_factory, labels):
    cmap = small_map()
    path = tmp_path_factory.mktemp("rt") / "x.label"
    arr = np.array(labels, dtype=np.int32)
    write_labels(arr, cmap, path)
    np.testing.assert_array_equal(read_labels(path, cmap), arr)


def test_default_semantic_kitti_map():
    cmap = ClassMap.semantic_kitti()
    assert cmap.num_classes == 20
    assert cmap.ignore_class == 0
    # moving-car folds onto car; write picks the canonical raw id back
    assert cmap.to_train(np.array([252]))[0] == 1
    assert cmap.to_raw(np.array([1]))[0] == 10
    assert set(cmap.palette) == set(range(20))


# --- synthetic scenes ---


def test_scene_ground_only_single_class():
    spec = SyntheticSceneSpec(seed=3, boxes=0, cylinders=0, planes=0, azimuth_steps=256)
    cloud = generate_scene(spec)
    assert len(cloud) > 0
    assert set(np.unique(cloud.labels)) == {spec.class_assignment["ground"]}


def test_scene_deterministic():
    spec = SyntheticSceneSpec(seed=11, azimuth_steps=256)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_scene_point_count_within_ray_budget():
    spec = SyntheticSceneSpec(seed=5, azimuth_steps=512)
    cloud = generate_scene(spec)
    nominal = spec.rings * spec.azimuth_steps
    assert 0.5 * nominal <= len(cloud) <= 1.5 * nominal


def test_scene_empty_spec_rejected():
    spec = SyntheticSceneSpec(seed=0, ground_extent=0.0, boxes=0, cylinders=0, planes=0)
    with pytest.raises(DataFormatError, match="empty scene"):
        generate_scene(spec)


def test_box_points_inside_inflated_aabb():
    # derived check: every box-labeled point must lie in the box's AABB
    # inflated by 3 * noise_sigma (range noise is truncated there)
    spec = SyntheticSceneSpec(
        seed=7, boxes=1, cylinders=0, planes=0, noise_sigma=0.05, azimuth_steps=512
    )
    objects = place_objects(spec)
    assert len(objects) == 1 and objects[0].kind == "box"
    lo, hi = objects[0].aabb()
    cloud = generate_scene(spec)
    box_pts = cloud.points[cloud.labels == objects[0].train_id, :3].astype(np.float64)
    assert len(box_pts) > 10
    pad = 3 * spec.noise_sigma + 1e-9
    assert (box_pts >= lo - pad).all() and (box_pts <= hi + pad).all()


def test_scene_reproducible_serialization(tmp_path):
    spec = SyntheticSceneSpec(seed=9, azimuth_steps=256)
    paths = []
    for name in ("a.bin", "b.bin"):
        cloud = generate_scene(spec)
        path = tmp_path / name
        write_point_cloud(cloud, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
