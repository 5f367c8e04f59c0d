import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptconv import data
from adaptconv.config import DatasetSpec
from adaptconv.graph import PointCloud, farthest_point_sample, knn_spatial
from adaptconv.tensor import ConfigError


def spec(generator, per_class=6, points=128, noise=0.01, seed=0, split=(0.5, 0.5)):
    return DatasetSpec(generator, per_class, points, noise, seed, list(split))


def all_clouds(ds):
    return ds.train + ds.test


def fingerprint(ds):
    parts = []
    for c in all_clouds(ds):
        parts.append(c.positions.tobytes())
        parts.append(c.normals.tobytes())
        if c.point_labels is not None:
            parts.append(c.point_labels.tobytes())
        parts.append(str((c.shape_label, c.category)).encode())
    return b"".join(parts)


# shapes3

def test_sphere_radii_within_noise():
    noise = 0.01
    ds = data.generate(spec("shapes3", noise=noise))
    for c in all_clouds(ds):
        if c.shape_label == 0:
            r = np.linalg.norm(c.positions, axis=1)
            assert np.all(np.abs(r - 1.0) <= 3 * noise)


def test_class_balance_exact():
    ds = data.generate(spec("shapes3", per_class=10, split=(0.7, 0.3)))
    train = np.bincount([c.shape_label for c in ds.train], minlength=3)
    test = np.bincount([c.shape_label for c in ds.test], minlength=3)
    assert train.tolist() == [7, 7, 7] and test.tolist() == [3, 3, 3]


def test_default_split_matches_desk_protocol():
    assert DatasetSpec().split_counts() == (200, 60)


@pytest.mark.parametrize("generator", ["shapes3", "parts2", "parts-adaptive"])
def test_generators_are_deterministic(generator):
    a = data.generate(spec(generator, seed=3))
    b = data.generate(spec(generator, seed=3))
    assert fingerprint(a) == fingerprint(b)
    assert fingerprint(a) != fingerprint(data.generate(spec(generator, seed=4)))


@pytest.mark.parametrize("generator", ["shapes3", "parts2", "parts-adaptive"])
@pytest.mark.parametrize("noise", [0.0, 0.01, 0.05])
def test_clouds_fit_unit_sphere(generator, noise):
    for c in all_clouds(data.generate(spec(generator, noise=noise))):
        centred = c.positions - c.positions.mean(axis=0)
        assert np.linalg.norm(centred, axis=1).max() <= 1 + 3 * noise + 1e-12
        assert len(c) == 128


# parts2

def test_parts2_clouds_have_both_parts():
    ds = data.generate(spec("parts2"))
    for c in all_clouds(ds):
        parts = ds.part_sets[c.category]
        assert sorted(set(c.point_labels.tolist())) == parts
        np.testing.assert_array_equal(c.category_onehot, np.eye(2)[c.category])


def test_parts2_labels_follow_surfaces():
    # body points of category 0 sit near a sphere of radius 0.6 before normalisation
    rng = np.random.default_rng(0)
    p, _, labels = data._sample_body_handle(rng, 200)
    np.testing.assert_allclose(np.linalg.norm(p[labels == 0], axis=1), 0.6, atol=1e-12)
    assert np.all(p[labels == 1][:, 0] >= 0.55)
    p, _, labels = data._sample_post_cap(rng, 200)
    np.testing.assert_array_equal(p[labels == 3][:, 2], 0.45)
    np.testing.assert_allclose(np.hypot(p[labels == 2][:, 0], p[labels == 2][:, 1]), 0.2)


@pytest.mark.parametrize("count", [8, 16, 64])
def test_fps_keeps_both_parts(count):
    for c in all_clouds(data.generate(spec("parts2", points=256))):
        kept = c.point_labels[farthest_point_sample(c.positions, count)]
        assert len(set(kept.tolist())) == 2


# parts-adaptive

def test_adaptive_boundary_has_mixed_neighbourhoods():
    ds = data.generate(spec("parts-adaptive", points=512, noise=0.002))
    for c in all_clouds(ds):
        idx = knn_spatial(c.positions, 20).idx
        labels = c.point_labels[idx]
        mixed = np.any(labels != labels[:, :1], axis=1)
        # both parts contribute points whose neighbourhoods straddle the cut
        assert set(c.point_labels[mixed].tolist()) == {0, 1}


def test_adaptive_parts_balanced():
    for c in all_clouds(data.generate(spec("parts-adaptive", points=511))):
        counts = np.bincount(c.point_labels, minlength=2)
        assert abs(counts[0] - counts[1]) <= 0.1 * counts.max()


def test_adaptive_halves_share_the_disk():
    # neither part can be separated from the other by distance to the centre
    c = data.generate(spec("parts-adaptive", points=512, noise=0.0)).train[0]
    r = np.linalg.norm(c.positions[:, :2], axis=1)
    assert abs(r[c.point_labels == 0].mean() - r[c.point_labels == 1].mean()) < 0.1


# points files

def test_points_round_trip_bit_exact(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(20, 3)) * 1e3, rng.normal(size=(20, 3)),
                       rng.integers(0, 4, 20))
    data.save_points(tmp_path / "c.txt", cloud)
    back = data.load_points(tmp_path / "c.txt")
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.normals.tobytes() == cloud.normals.tobytes()
    np.testing.assert_array_equal(back.point_labels, cloud.point_labels)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=3, max_size=30)
       .filter(lambda v: len(v) % 3 == 0))
def test_points_round_trip_any_double(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("pts") / "c.txt"
    cloud = PointCloud(np.array(values).reshape(-1, 3))
    data.save_points(path, cloud)
    back = data.load_points(path)
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.normals is None and back.point_labels is None


def test_header_count_mismatch(tmp_path):
    (tmp_path / "c.txt").write_text("3 3 0\n0 0 0\n1 1 1\n")
    with pytest.raises(data.ParseError, match="N=3.*2"):
        data.load_points(tmp_path / "c.txt")


def test_malformed_line_names_line_number(tmp_path):
    (tmp_path / "c.txt").write_text("2 3 1\n0 0 0 1\n1 x 1 0\n")
    with pytest.raises(data.ParseError, match=":3:"):
        data.load_points(tmp_path / "c.txt")


def test_bad_header(tmp_path):
    (tmp_path / "c.txt").write_text("two 3 0\n")
    with pytest.raises(data.ParseError, match=":1:"):
        data.load_points(tmp_path / "c.txt")


def test_six_columns_give_normals(tmp_path):
    (tmp_path / "c.txt").write_text("2 6 0\n0 0 0 0 0 1\n1 1 1 1 0 0\n")
    cloud = data.load_points(tmp_path / "c.txt")
    np.testing.assert_array_equal(cloud.normals, [[0, 0, 1], [1, 0, 0]])
    assert cloud.attributes.shape == (2, 6)


def test_dataset_directory_round_trip(tmp_path):
    ds = data.generate(spec("parts2", per_class=2, points=32))
    data.save_dataset(ds, tmp_path / "d")
    back = data.load_dataset(tmp_path / "d")
    assert fingerprint(back) == fingerprint(ds)
    assert back.part_sets == ds.part_sets and back.num_categories == 2


# DatasetSpec validation

@pytest.mark.parametrize("bad", [
    dict(generator="modelnet"),
    dict(split=[0.5, 0.6]),
    dict(split=[1.0]),
    dict(samples_per_class=0),
    dict(noise=-0.1),
])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        DatasetSpec(**bad).validate()


def test_points_fewer_than_k():
    with pytest.raises(ConfigError):
        DatasetSpec(points=10).validate(k=20)
