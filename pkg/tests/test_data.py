import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaef import data as dt
from eaef.data import ObjectSpec, SceneSpec, SceneSpecError


def brute_confusion(pred, truth, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        cm[t, p] += 1
    return cm


# ---------------------------------------------------------------- generation

def test_zero_objects_all_background():
    b = dt.generate(SceneSpec(min_objects=0, max_objects=0, seed=3), 4)
    assert np.all(b.labels == 0)


def test_disc_matches_direct_rasterisation():
    obj = ObjectSpec("disc", 2, "both", cy=10, cx=14, ry=5)
    b = dt.generate(SceneSpec(objects=(obj,), noise=0.0), 1)
    ref = np.zeros((32, 32), dtype=bool)
    for y in range(32):
        for x in range(32):
            ref[y, x] = (y - 10) ** 2 + (x - 14) ** 2 <= 25
    np.testing.assert_array_equal(b.labels[0] == 2, ref)
    assert np.all(b.labels[0][~ref] == 0)
    assert ref.sum() == 81  # lattice points in a radius-5 disc


def test_rectangle_rasterisation():
    obj = ObjectSpec("rectangle", 1, "both", cy=5, cx=6, ry=2, rx=3)
    b = dt.generate(SceneSpec(objects=(obj,), noise=0.0), 1)
    ref = np.zeros((32, 32), dtype=bool)
    ref[3:8, 3:10] = True
    np.testing.assert_array_equal(b.labels[0] == 1, ref)


def test_same_seed_bitwise_identical():
    a, b = dt.generate(SceneSpec(seed=11), 5), dt.generate(SceneSpec(seed=11), 5)
    assert a.rgb.data.tobytes() == b.rgb.data.tobytes()
    assert a.thermal.data.tobytes() == b.thermal.data.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = dt.generate(SceneSpec(seed=12), 5)
    assert a.rgb.data.tobytes() != c.rgb.data.tobytes()


@pytest.mark.parametrize("vis,rgb_shows,t_shows", [("both", True, True), ("rgb_only", True, False),
                                                  ("thermal_only", False, True), ("neither", False, False)])
def test_visibility(vis, rgb_shows, t_shows):
    obj = ObjectSpec("rectangle", 1, vis, cy=16, cx=16, ry=4, rx=4)
    b = dt.generate(SceneSpec(objects=(obj,), noise=0.0, seed=5), 1)
    m = b.labels[0] == 1
    assert m.sum() == 81
    rgb, th = b.rgb.data[0], b.thermal.data[0, 0]
    rgb_differs = not np.allclose(rgb[:, m].mean(axis=1), rgb[:, ~m].mean(axis=1))
    t_differs = not np.isclose(th[m].mean(), th[~m].mean())
    assert rgb_differs == rgb_shows
    assert t_differs == t_shows


def test_value_ranges_and_shapes():
    b = dt.generate(SceneSpec(noise=0.3, seed=2), 6)
    assert b.rgb.shape == (6, 3, 32, 32) and b.thermal.shape == (6, 1, 32, 32)
    assert b.rgb.dtype == np.float32
    for t in (b.rgb.data, b.thermal.data):
        assert t.min() >= 0 and t.max() <= 1
    assert b.labels.min() >= 0 and b.labels.max() < 4


def test_spec_errors():
    with pytest.raises(SceneSpecError):
        SceneSpec(objects=(ObjectSpec("disc", 1, "both", cy=2, cx=10, ry=5),))
    with pytest.raises(SceneSpecError):
        SceneSpec(objects=(ObjectSpec("disc", 4, "both", cy=10, cx=10, ry=2),))
    with pytest.raises(SceneSpecError):
        ObjectSpec("triangle", 1, "both", 5, 5, 2)
    with pytest.raises(SceneSpecError):
        ObjectSpec("disc", 1, "sometimes", 5, 5, 2)
    with pytest.raises(SceneSpecError):
        SceneSpec(visibility_weights=(1, 0, 0))
    with pytest.raises(SceneSpecError):
        SceneSpec(max_radius=20)


def test_visibility_weights_respected():
    # only thermal-only objects: the RGB image is pure background
    b = dt.generate(SceneSpec(visibility_weights=(0, 0, 1, 0), noise=0.0, seed=1), 3)
    for i in range(3):
        assert np.ptp(b.rgb.data[i], axis=(1, 2)).max() == 0
        assert (b.labels[i] > 0).any()


def test_zero_modality_and_subset():
    b = dt.generate(SceneSpec(seed=4), 4)
    z = b.zero_modality("rgb")
    assert not z.rgb.data.any() and np.array_equal(z.thermal.data, b.thermal.data)
    assert not b.zero_modality("thermal").thermal.data.any()
    assert b.zero_modality("none") is b
    with pytest.raises(ValueError):
        b.zero_modality("depth")
    s = b.subset([2, 0])
    np.testing.assert_array_equal(s.labels, b.labels[[2, 0]])


def test_scene_json_roundtrip():
    spec = SceneSpec(seed=9, objects=(ObjectSpec("disc", 1, "rgb_only", 8, 8, 3),), noise=0.1)
    assert SceneSpec.from_json(spec.to_json()) == spec


def test_dataset_directory_roundtrip(tmp_path):
    spec = SceneSpec(seed=6)
    b = dt.generate(spec, 3)
    dt.save_dataset(b, spec, tmp_path, previews=True)
    index = (tmp_path / "index.txt").read_text().splitlines()
    assert index[0].startswith("# scene ") and index[1:] == [f"sample_{i:05d}" for i in range(3)]
    assert (tmp_path / "sample_00000_rgb.ppm").exists()
    back, spec2 = dt.load_dataset(tmp_path)
    assert spec2 == spec
    assert back.rgb.data.tobytes() == b.rgb.data.tobytes()
    np.testing.assert_array_equal(back.labels, b.labels)


# ---------------------------------------------------------------- metrics

def test_perfect_prediction():
    t = np.random.default_rng(0).integers(0, 4, (3, 8, 8))
    r = dt.compute_metrics(t, t, 4)
    assert np.all(r.acc == 1) and np.all(r.iou == 1) and r.miou == 1 and r.macc == 1


def test_disjoint_masks_iou_zero():
    truth = np.zeros((4, 4), int)
    truth[:2] = 1
    pred = np.zeros((4, 4), int)
    pred[2:] = 1
    r = dt.compute_metrics(pred, truth, 2)
    assert r.iou[1] == 0 and r.iou[0] == 0


def test_two_by_two_example():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    r = dt.compute_metrics(pred, truth, 2)
    np.testing.assert_allclose(r.acc, [0.5, 1.0])
    np.testing.assert_allclose(r.iou, [0.5, 2 / 3])
    assert r.miou == pytest.approx(7 / 12)
    assert r.macc == pytest.approx(0.75)


def test_absent_classes_excluded():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    r = dt.compute_metrics(pred, truth, 4)
    assert list(r.evaluated) == [0, 1]
    assert np.isnan(r.iou[2]) and np.isnan(r.acc[3])
    assert r.miou == pytest.approx(7 / 12)
    # predicted but absent from truth: IoU 0 counts, recall undefined
    r2 = dt.compute_metrics(np.array([[2, 1], [1, 1]]), truth, 4)
    assert r2.iou[2] == 0 and np.isnan(r2.acc[2]) and 2 in r2.evaluated


def test_exclude_background():
    truth = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    r = dt.compute_metrics(pred, truth, 2, exclude=(0,))
    assert r.miou == pytest.approx(2 / 3) and r.macc == 1.0


def test_metric_errors():
    with pytest.raises(ValueError):
        dt.compute_metrics(np.array([0, 4]), np.array([0, 1]), 4)
    with pytest.raises(ValueError):
        dt.compute_metrics(np.array([0, 1]), np.array([-1, 1]), 4)
    with pytest.raises(ValueError):
        dt.compute_metrics(np.zeros(3, int), np.zeros(4, int), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_metric_properties(k, seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, k, (8, 8))
    pred = np.where(rng.random((8, 8)) < 0.6, truth, rng.integers(0, k, (8, 8)))
    r = dt.compute_metrics(pred, truth, k)
    np.testing.assert_array_equal(r.confusion, brute_confusion(pred, truth, k))
    assert r.confusion.sum() == 64
    both = ~np.isnan(r.acc) & ~np.isnan(r.iou)
    assert np.all(r.iou[both] <= r.acc[both] + 1e-15)
    for v in (r.acc, r.iou):
        assert np.all((v[~np.isnan(v)] >= 0) & (v[~np.isnan(v)] <= 1))
    perm = rng.permutation(k)
    rp = dt.compute_metrics(perm[pred], perm[truth], k)
    np.testing.assert_allclose(rp.iou[perm], r.iou, equal_nan=True)
    np.testing.assert_allclose(rp.acc[perm], r.acc, equal_nan=True)
    assert rp.miou == pytest.approx(r.miou)


def test_metric_csv_and_table():
    r = dt.compute_metrics(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 3)
    lines = r.to_csv().splitlines()
    assert lines[0] == "class,acc,iou"
    assert lines[1] == "0,0.500000,0.500000"
    assert lines[3] == "2,nan,nan"
    assert lines[-1].startswith("mean,0.750000,0.583333")
    table = r.table().splitlines()
    assert "mIoU" in table[0] and "58.3" in table[2]
