import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from bonesynth.errors import ValidationError
from bonesynth.volcore import (
    AIR_HU,
    DeformationField,
    LabelVolume,
    ScalarVolume,
    SwapTable,
    jacobian_determinants,
    resample,
    sagittal_flip_relabel,
    sample_nearest,
    sample_trilinear,
    voxel_positions,
    warp_labels,
    warp_scalar,
)

from .conftest import random_labels, random_scan


def test_volumes_are_read_only_copies(rng):
    raw = rng.normal(size=(3, 4, 5))
    vol = ScalarVolume(raw, (1, 2, 3))
    raw[0, 0, 0] = 99.0
    assert vol.data[0, 0, 0] != 99.0
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1.0
    assert vol.dims == (3, 4, 5)
    assert vol.spacing_mm == (1.0, 2.0, 3.0)


@pytest.mark.parametrize("bad", [(0, 1, 1), (-1, 1, 1), (1, 1), (np.nan, 1, 1)])
def test_spacing_validation(bad):
    with pytest.raises(ValidationError):
        ScalarVolume(np.zeros((2, 2, 2)), bad)


def test_label_validation():
    with pytest.raises(ValidationError):
        LabelVolume(np.full((2, 2, 2), 3), (1, 1, 1), 3)
    with pytest.raises(ValidationError):
        LabelVolume(np.full((2, 2, 2), -1), (1, 1, 1), 3)
    with pytest.raises(ValidationError):
        LabelVolume(np.full((2, 2, 2), 0.5), (1, 1, 1), 3)
    assert LabelVolume(np.ones((2, 2, 2)), (1, 1, 1), 2).data.dtype == np.int32


def test_field_validation():
    with pytest.raises(ValidationError):
        DeformationField(np.zeros((2, 2, 2, 2)), (1, 1, 1))
    with pytest.raises(ValidationError):
        DeformationField(np.full((2, 2, 2, 3), np.inf), (1, 1, 1))


def test_trilinear_matches_map_coordinates(rng):
    data = rng.normal(size=(6, 7, 8))
    coords = rng.uniform(-1.0, 8.0, size=(500, 3))
    got = sample_trilinear(data, coords)
    clamped = np.clip(coords, 0, np.array(data.shape) - 1)
    want = map_coordinates(data, clamped.T, order=1, mode="nearest")
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_trilinear_out_of_bounds_value(rng):
    data = rng.normal(size=(4, 4, 4))
    coords = np.array([[0.0, 0.0, 0.0], [3.0, 3.0, 3.0], [-0.01, 1, 1], [1, 3.01, 1], [1, 1, 3 + 1e-7]])
    got = sample_trilinear(data, coords, oob_value=-5.0)
    assert got[0] == data[0, 0, 0] and got[1] == data[3, 3, 3]
    np.testing.assert_array_equal(got[2:4], [-5.0, -5.0])
    assert got[4] == pytest.approx(data[1, 1, 3])


def test_trilinear_gradient_matches_finite_differences(rng):
    data = rng.normal(size=(5, 5, 5))
    coords = rng.uniform(0.3, 3.7, size=(50, 3))
    coords = coords + 0.5 * (np.round(coords) == coords)  # stay off cell faces
    _, grad = sample_trilinear(data, coords, with_gradient=True)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (sample_trilinear(data, coords + e) - sample_trilinear(data, coords - e)) / (2 * h)
        np.testing.assert_allclose(grad[:, a], fd, atol=1e-6)


def test_nearest_rounding_and_bounds():
    data = np.arange(27).reshape(3, 3, 3)
    coords = np.array([[0.4, 0.6, 1.49], [2.4, 0, 0], [2.6, 0, 0], [-0.6, 0, 0]])
    np.testing.assert_array_equal(sample_nearest(data, coords), [data[0, 1, 1], data[2, 0, 0], 0, 0])


def test_resample_identity_is_bitwise(rng):
    vol = random_scan(rng, (5, 6, 7), (1.5, 1.5, 2.0))
    out = resample(vol, (1.5, 1.5, 2.0))
    assert out is not vol
    np.testing.assert_array_equal(out.data, vol.data)


def test_resample_dims_and_linear_ramp():
    x = np.arange(10, dtype=float)
    ramp = np.broadcast_to(3.0 * x[:, None, None], (10, 4, 4))
    vol = ScalarVolume(ramp, (1.0, 1.0, 1.0))
    out = resample(vol, (0.5, 2.0, 1.0))
    assert out.dims == (20, 2, 4)
    # interior samples of a linear ramp are exact; past the end they clamp
    np.testing.assert_allclose(out.data[:19, 0, 0], 3.0 * np.arange(19) * 0.5)
    assert out.data[19, 0, 0] == pytest.approx(27.0)
    assert resample(vol, (3.0, 3.0, 3.0)).dims == (3, 1, 1)


def test_resample_labels_nearest_only(rng):
    labels = random_labels(rng, (6, 6, 6), 5)
    with pytest.raises(ValidationError):
        resample(labels, (2, 2, 2), "trilinear")
    out = resample(labels, (2.0, 2.0, 2.0), "nearest")
    assert isinstance(out, LabelVolume)
    np.testing.assert_array_equal(out.data, labels.data[::2, ::2, ::2])


def test_warp_zero_field_is_identity(rng):
    vol = random_scan(rng, (5, 5, 5))
    labels = random_labels(rng, (5, 5, 5), 4)
    zero = DeformationField.zeros((5, 5, 5), (1, 1, 1))
    assert warp_scalar(vol, zero).data.tobytes() == vol.data.tobytes()
    assert warp_labels(labels, zero).data.tobytes() == labels.data.tobytes()


def test_warp_integer_translation(rng):
    vol = random_scan(rng, (6, 5, 4), (2.0, 1.0, 1.0))
    labels = random_labels(rng, (6, 5, 4), 7, (2.0, 1.0, 1.0))
    f = np.zeros((6, 5, 4, 3))
    f[..., 0] = 2.0  # one voxel along x
    field = DeformationField(f, (2.0, 1.0, 1.0))
    w = warp_scalar(vol, field)
    np.testing.assert_allclose(w.data[:-1], vol.data[1:])
    assert np.all(w.data[-1] == AIR_HU)
    wl = warp_labels(labels, field)
    np.testing.assert_array_equal(wl.data[:-1], labels.data[1:])
    assert np.all(wl.data[-1] == 0)


def test_warp_dims_must_match(rng):
    with pytest.raises(ValidationError):
        warp_scalar(random_scan(rng, (4, 4, 4)), DeformationField.zeros((4, 4, 5), (1, 1, 1)))


def test_swap_table_csv_and_lookup(tmp_path):
    table = SwapTable.parse_csv("# comment\nleft,right\n1,2  # a\n\n5,9\n")
    assert table.pairs == ((1, 2), (5, 9))
    assert table.partner(2) == 1 and table.partner(9) == 5 and table.partner(3) == 3
    np.testing.assert_array_equal(table.lookup(10), [0, 2, 1, 3, 4, 9, 6, 7, 8, 5])
    path = tmp_path / "t.csv"
    path.write_text(table.to_csv())
    assert SwapTable.from_csv(path) == table
    with pytest.raises(ValidationError):
        table.lookup(7)  # pair (5, 9) straddles the class range


@pytest.mark.parametrize("text", ["1,1\n", "1,2\n2,3\n", "1,2,3\n", "a,b\n"])
def test_swap_table_rejects_bad_rows(text):
    with pytest.raises(ValidationError):
        SwapTable.parse_csv(text)


def test_upper_body_table():
    table = SwapTable.upper_body()
    assert len(table.pairs) == 47
    assert table.partner(45) == 46  # radius
    lut = table.lookup(126)
    np.testing.assert_array_equal(lut[lut], np.arange(126))


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_flip_relabel_involution(seed, n_cls):
    r = np.random.default_rng(seed)
    dims = tuple(int(d) for d in r.integers(1, 7, size=3))
    scan = random_scan(r, dims)
    labels = random_labels(r, dims, n_cls)
    ids = r.permutation(n_cls)[: 2 * (n_cls // 3)]
    table = SwapTable(tuple(zip(ids[0::2], ids[1::2])))
    s1, l1 = sagittal_flip_relabel(scan, labels, table)
    s2, l2 = sagittal_flip_relabel(s1, l1, table)
    assert s2.data.tobytes() == scan.data.tobytes()
    assert l2.data.tobytes() == labels.data.tobytes()
    np.testing.assert_array_equal(l1.data[::-1], table.lookup(n_cls)[labels.data])


def test_jacobian_of_zero_field_is_one():
    det = jacobian_determinants(DeformationField.zeros((4, 5, 6), (1, 2, 3)))
    np.testing.assert_allclose(det.data, 1.0)
    assert det.kind_tag == "derived"


@given(st.integers(0, 2**32 - 1))
def test_jacobian_of_affine_field(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(-0.3, 0.3, size=(3, 3))
    sp = tuple(r.uniform(0.5, 2.0, size=3))
    pos = voxel_positions((5, 4, 6), sp)
    field = DeformationField(pos @ a.T, sp)
    np.testing.assert_allclose(jacobian_determinants(field).data, np.linalg.det(np.eye(3) + a), rtol=1e-10)


def test_jacobian_detects_folding():
    pos = voxel_positions((6, 6, 6), (1, 1, 1))
    f = np.zeros((6, 6, 6, 3))
    f[..., 0] = -2.0 * pos[..., 0]
    assert np.all(jacobian_determinants(DeformationField(f, (1, 1, 1))).data < 0)
