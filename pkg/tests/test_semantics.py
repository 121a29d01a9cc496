import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from sfmsemval.model_io import CameraIntrinsics, ImageRecord, Point3D, SparseModel
from sfmsemval.semantics import (
    UNKNOWN_ID, ClassEntry, ClassTable, LabeledObservation, LabelError, LabelMap, cityscapes_table,
    compact_table, compute_iou, export_labeled_csv, label_at, label_model, load_class_table, load_label_dir,
    load_label_map, load_palette, mean_iou, read_observations_csv, resolve_class_table, save_label_map,
    write_class_table, write_observations_csv,
)
from sfmsemval.synthetic import multi_view_model


def test_class_table_invariants():
    with pytest.raises(LabelError):
        ClassTable([ClassEntry(1, "a"), ClassEntry(1, "b")])
    with pytest.raises(LabelError):
        ClassTable([ClassEntry(1, "a"), ClassEntry(2, "a")])
    with pytest.raises(LabelError):
        ClassTable([ClassEntry(1, "")])
    with pytest.raises(LabelError):
        ClassTable([ClassEntry(UNKNOWN_ID, "void", opaque=True)])
    t = ClassTable([ClassEntry(1, "a")])
    assert UNKNOWN_ID in t and not t[UNKNOWN_ID].opaque and not t[UNKNOWN_ID].dynamic


def test_cityscapes_preset():
    t = cityscapes_table()
    names = lambda ids: {t.name(i) for i in ids}
    assert names(t.opaque_ids) == {"building", "wall", "fence", "bridge", "tunnel"}
    assert names(t.dynamic_ids) == {"sky", "person", "rider", "car", "truck", "bus", "train", "motorcycle",
                                     "bicycle"}
    assert t.by_name("building").class_id == 11
    assert resolve_class_table(None) == t


def test_compact_preset_ids():
    t = compact_table()
    assert [(t.name(i), i) for i in (1, 2, 3, 4, 6, 9)] == [
        ("road", 1), ("building", 2), ("sky", 3), ("car", 4), ("foliage", 6), ("dynamic", 9)]
    assert t.opaque_ids == {2} and t.dynamic_ids == {3, 4, 9}


def test_class_table_file_round_trip(tmp_path):
    buf = io.StringIO()
    write_class_table(compact_table(), buf)
    path = tmp_path / "classes.txt"
    path.write_text("# comment\n" + buf.getvalue())
    assert load_class_table(path) == compact_table()
    assert resolve_class_table(str(path)) == compact_table()
    path.write_text("id=x name=a\n")
    with pytest.raises(LabelError, match=":1"):
        load_class_table(path)


def test_uniform_map(tmp_path):
    Image.fromarray(np.full((2, 2), 2, np.uint8), mode="L").save(tmp_path / "m.png")
    m = load_label_map(tmp_path / "m.png", compact_table())
    assert m.ids.shape == (2, 2) and (m.ids == 2).all()
    assert m.name == "m"


def test_unknown_id_named(tmp_path):
    raster = np.full((3, 3), 2, np.uint8)
    raster[1, 1] = 99
    Image.fromarray(raster, mode="L").save(tmp_path / "m.png")
    with pytest.raises(LabelError, match="99"):
        load_label_map(tmp_path / "m.png", compact_table())


def test_unsupported_depth(tmp_path):
    Image.fromarray(np.full((3, 3), 2, np.uint16)).save(tmp_path / "m.png")
    with pytest.raises(LabelError, match="mode"):
        load_label_map(tmp_path / "m.png", compact_table())


def write_pgm(path, raster):
    h, w = raster.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + raster.astype(np.uint8).tobytes())


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.sampled_from([1, 2, 3, 4, 6, 9, 255])))
def test_pgm_png_equal(tmp_path_factory, raster):
    d = tmp_path_factory.mktemp("maps")
    write_pgm(d / "a.pgm", raster)
    Image.fromarray(raster, mode="L").save(d / "a.png")
    table = compact_table()
    a = load_label_map(d / "a.pgm", table)
    b = load_label_map(d / "a.png", table)
    assert a == b
    assert np.array_equal(a.ids, raster)


def test_indexed_png(tmp_path):
    raster = np.array([[1, 2], [3, 4]], np.uint8)
    img = Image.fromarray(raster, mode="P")
    img.putpalette([0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255, 9, 9, 9] + [0] * (768 - 15))
    img.save(tmp_path / "p.png")
    assert np.array_equal(load_label_map(tmp_path / "p.png", compact_table()).ids, raster)


def test_rgb_palette(tmp_path):
    (tmp_path / "pal.txt").write_text("# r g b id\n70 70 70 2\n128 64 128 1\n")
    rgb = np.zeros((2, 2, 3), np.uint8)
    rgb[:] = (128, 64, 128)
    rgb[0, 1] = (70, 70, 70)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
    palette = load_palette(tmp_path / "pal.txt")
    m = load_label_map(tmp_path / "c.png", compact_table(), palette=palette)
    assert m.ids.tolist() == [[1, 2], [1, 1]]
    rgb[1, 1] = (1, 2, 3)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
    with pytest.raises(LabelError):
        load_label_map(tmp_path / "c.png", compact_table(), palette=palette)
    with pytest.raises(LabelError):
        load_label_map(tmp_path / "c.png", compact_table())


def test_save_load_round_trip(tmp_path):
    m = LabelMap("x", np.random.default_rng(0).choice([1, 2, 3], (5, 7)).astype(np.uint8))
    for suffix in (".png", ".pgm"):
        save_label_map(m, tmp_path / ("x" + suffix))
        assert load_label_map(tmp_path / ("x" + suffix), compact_table()) == m


def test_label_at_examples():
    ids = np.arange(400 * 700, dtype=np.int64).reshape(400, 700) % 256
    m = LabelMap("m", ids.astype(np.uint8))
    assert label_at(m, 0.5, 0.5) == m.ids[0, 0]
    assert label_at(m, 10.9, 3.2) == m.ids[3, 10]
    assert label_at(m, 640.0, 360.0, 0.5) == m.ids[180, 320]
    assert label_at(m, -5, 1e6) == m.ids[399, 0]
    with pytest.raises(LabelError):
        label_at(m, float("nan"), 1.0)
    with pytest.raises(ValueError):
        label_at(m, 1.0, 1.0, 0.0)


@given(st.floats(-50, 500, allow_nan=False), st.floats(-50, 500, allow_nan=False), st.floats(0.1, 4))
def test_label_at_reads_raster(x, y, scale):
    ids = (np.arange(37 * 53).reshape(37, 53) % 251).astype(np.uint8)
    m = LabelMap("m", ids)
    col = min(max(int(np.floor(x * scale)), 0), 52)
    row = min(max(int(np.floor(y * scale)), 0), 36)
    assert label_at(m, x, y, scale) == ids[row, col]


def one_point_model(xy=(0.5, 0.5), image_id=1, xyz=(0.0, 0.0, 1.0)):
    cam = CameraIntrinsics(1, "PINHOLE", 4, 4, [1, 1, 2, 2])
    image = ImageRecord(image_id, [1, 0, 0, 0], [0, 0, 0], 1, "img.png", np.array([xy]), np.array([1]))
    return SparseModel({1: cam}, {image_id: image}, {1: Point3D(1, xyz, (0, 0, 0), 0.0, [(image_id, 0)])})


def test_label_model_single():
    model = one_point_model()
    maps = {"img": LabelMap("img", np.full((4, 4), 2, np.uint8))}
    obs = label_model(model, maps, compact_table())
    assert obs == [LabeledObservation(1, 0, 0.5, 0.5, 1, 2)]


def test_label_model_track_of_three():
    model = multi_view_model(3, 1, seed=0, min_track=3)
    model.points[1].track.sort()
    cam = model.cameras[1]
    maps = {}
    for image_id, cid in zip(sorted(model.images), (2, 2, 3)):
        maps[model.images[image_id].name] = LabelMap(str(image_id), np.full((cam.height, cam.width), cid, np.uint8))
    obs = label_model(model, maps, compact_table())
    assert [o.class_id for o in obs] == [2, 2, 3]


def test_label_model_missing_map():
    model = one_point_model()
    with pytest.raises(LabelError, match="img.png"):
        label_model(model, {}, compact_table())
    obs = label_model(model, {}, compact_table(), policy="skip")
    assert [o.class_id for o in obs] == [UNKNOWN_ID]


def test_label_model_count_and_scale():
    model = multi_view_model(4, 25, seed=1, extra_keypoints=5)
    cam = model.cameras[1]
    maps = {im.name: LabelMap(im.name, np.full((cam.height // 2, cam.width // 2), 6, np.uint8))
            for im in model.images.values()}
    obs = label_model(model, maps, compact_table())
    assert len(obs) == sum(len(p.track) for p in model.points.values())
    assert all(o.class_id == 6 for o in obs)
    keys = [(o.image_id, o.point2d_idx) for o in obs]
    assert keys == sorted(keys)


def test_label_model_half_resolution_lookup():
    # per-image scale is derived from map width / camera width
    model = one_point_model(xy=(3.5, 1.2))
    ids = np.zeros((2, 2), np.uint8) + 1
    ids[0, 1] = 4
    obs = label_model(model, {"img": LabelMap("img", ids)}, compact_table())
    assert obs[0].class_id == 4


def test_csv_first_row_byte_pattern():
    model = one_point_model(xy=(180.35, 297.59), image_id=281, xyz=(-0.036, -0.33, -0.036))
    obs = [LabeledObservation(281, 0, 180.35, 297.59, 1, 2)]
    buf = io.StringIO()
    export_labeled_csv(obs, model, compact_table(), buf)
    assert buf.getvalue() == (
        "imageid,X2D,Y2D,X3D,Y3D,Z3D,INTENSITY,SEMANTIC_LABEL\n"
        "281,180.35,297.59,-0.036,-0.33,-0.036,2,building\n"
    )


def test_csv_empty_and_order():
    model = multi_view_model(2, 3, seed=0)
    buf = io.StringIO()
    export_labeled_csv([], model, compact_table(), buf)
    assert buf.getvalue() == "imageid,X2D,Y2D,X3D,Y3D,Z3D,INTENSITY,SEMANTIC_LABEL\n"
    maps = {im.name: LabelMap(im.name, np.full((720, 1280), 1, np.uint8)) for im in model.images.values()}
    obs = label_model(model, maps, compact_table())[:2]
    buf = io.StringIO()
    export_labeled_csv(list(reversed(obs)), model, compact_table(), buf)
    rows = buf.getvalue().splitlines()[1:]
    assert len(rows) == 2 and rows[0].startswith(f"{obs[0].image_id},{obs[0].x:.12g}")


def test_csv_dangling_reference():
    model = one_point_model()
    with pytest.raises(LabelError):
        export_labeled_csv([LabeledObservation(1, 0, 0.5, 0.5, 42, 2)], model, compact_table(), io.StringIO())


def test_observation_csv_round_trip():
    obs = [LabeledObservation(1, 3, 10.25, 4.5, 7, 2), LabeledObservation(2, 0, 1 / 3, 2.0, 7, 255)]
    buf = io.StringIO()
    write_observations_csv(obs, buf)
    buf.seek(0)
    back = read_observations_csv(buf)
    assert [(o.image_id, o.point2d_idx, o.point3d_id, o.class_id) for o in back] == \
        [(o.image_id, o.point2d_idx, o.point3d_id, o.class_id) for o in obs]
    assert np.allclose([o.x for o in back], [o.x for o in obs], rtol=1e-11)


def test_load_label_dir(tmp_path):
    for name in ("a", "b"):
        Image.fromarray(np.full((2, 2), 1, np.uint8), mode="L").save(tmp_path / f"{name}.png")
    (tmp_path / "notes.txt").write_text("x")
    assert sorted(load_label_dir(tmp_path, compact_table())) == ["a", "b"]


def test_iou_examples():
    a = LabelMap("a", np.array([[2, 2, 1, 1]], np.uint8))
    assert compute_iou(a, a, 2) == 1.0
    pred = LabelMap("p", np.array([[2, 2, 1]], np.uint8))
    truth = LabelMap("t", np.array([[2, 1, 2]], np.uint8))
    assert compute_iou(pred, truth, 2) == pytest.approx(1 / 3)
    assert compute_iou(pred, truth, 9) is None
    with pytest.raises(LabelError):
        compute_iou(a, pred, 2)


def confusion_iou(pred, truth, c, k=256):
    """Per-pixel tally into a confusion matrix."""
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred.ravel(), truth.ravel()):
        cm[t, p] += 1
    tp = cm[c, c]
    fp = cm[:, c].sum() - tp
    fn = cm[c, :].sum() - tp
    return None if tp + fp + fn == 0 else tp / (tp + fp + fn)


def test_iou_confusion_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        p = rng.integers(0, 5, (16, 16)).astype(np.uint8)
        t = rng.integers(0, 5, (16, 16)).astype(np.uint8)
        for c in range(6):
            assert compute_iou(LabelMap("p", p), LabelMap("t", t), c) == confusion_iou(p, t, c)


@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 3)), arrays(np.uint8, (6, 6), elements=st.integers(0, 3)))
def test_iou_bounds(p, t):
    for c in range(4):
        v = compute_iou(LabelMap("p", p), LabelMap("t", t), c)
        assert v is None or 0.0 <= v <= 1.0
        if (p == c).any():
            assert compute_iou(LabelMap("p", p), LabelMap("p", p), c) == 1.0
    m = mean_iou(LabelMap("p", p), LabelMap("t", t), range(4))
    assert m is None or 0.0 <= m <= 1.0
