import numpy as np
import pytest

from bonesynth.deformmodel import (
    DeformationModel,
    SampleDraw,
    build_deformation_model,
    decode_model,
    encode_model,
    flatten_field,
    read_model,
    sample_weights,
    synthesize_field,
    synthesize_sample,
    unflatten_field,
    write_model,
)
from bonesynth.errors import ValidationError
from bonesynth.volcore import DeformationField, LabelVolume, ScalarVolume


def random_fields(rng, n, dims=(4, 3, 5), sp=(1.0, 1.0, 2.0)):
    return [DeformationField(rng.normal(size=(*dims, 3)), sp) for _ in range(n)]


def covariance_oracle(fields):
    x = np.stack([flatten_field(f) for f in fields])
    c = np.cov(x, rowvar=False)
    lam, vec = np.linalg.eigh(c)
    order = np.argsort(lam)[::-1]
    return lam[order], vec[:, order].T


def test_flatten_is_file_order():
    data = np.arange(2 * 3 * 4 * 3, dtype=float).reshape(2, 3, 4, 3)
    f = DeformationField(data, (1, 1, 1))
    vec = flatten_field(f)
    np.testing.assert_array_equal(vec[:6], np.concatenate([data[0, 0, 0], data[1, 0, 0]]))
    np.testing.assert_array_equal(unflatten_field(vec, (2, 3, 4), (1, 1, 1)).data, data)


def test_matches_dense_covariance(rng):
    fields = random_fields(rng, 5)
    model = build_deformation_model(fields, 10)
    lam, vec = covariance_oracle(fields)
    assert model.n_components == 4
    np.testing.assert_allclose(model.eigenvalues, lam[:4], rtol=1e-10)
    for i in range(4):
        s = np.sign(model.components[i] @ vec[i])
        np.testing.assert_allclose(model.components[i], s * vec[i], atol=1e-10)
    np.testing.assert_allclose(model.mean_field, np.mean([flatten_field(f) for f in fields], axis=0))


def test_two_opposite_fields_give_single_mode(rng):
    u = rng.normal(size=(3, 3, 3, 3))
    fields = [DeformationField(u, (1, 1, 1)), DeformationField(-u, (1, 1, 1))]
    model = build_deformation_model(fields, 3)
    assert model.n_components == 1
    assert model.eigenvalues[0] == pytest.approx(2 * np.sum(u**2), rel=1e-12)
    np.testing.assert_allclose(model.mean_field, 0.0, atol=1e-15)
    v = model.components[0]
    np.testing.assert_allclose(np.abs(v), np.abs(u.transpose(2, 1, 0, 3).ravel()) / np.linalg.norm(u), atol=1e-12)
    assert v[np.argmax(np.abs(v))] > 0


def test_identical_fields_have_zero_variance(rng):
    f = random_fields(rng, 1)[0]
    model = build_deformation_model([f, f, f], 2)
    np.testing.assert_array_equal(model.eigenvalues, [0.0, 0.0])
    draw = sample_weights(model, 3)
    assert np.all(draw.weights == 0.0)
    np.testing.assert_allclose(synthesize_field(model, draw).data, f.data)


def test_reconstruction_with_all_components(rng):
    fields = random_fields(rng, 6)
    model = build_deformation_model(fields, 5)
    for f in fields:
        w = model.project(f)
        rec = synthesize_field(model, SampleDraw(w, None, 5))
        assert np.linalg.norm(rec.data - f.data) <= 1e-10 * np.linalg.norm(f.data)


def test_synthesis_is_linear_in_weights(rng):
    model = build_deformation_model(random_fields(rng, 4), 3)
    a, b = rng.normal(size=3), rng.normal(size=3)
    mean = model.mean_field
    fa = flatten_field(synthesize_field(model, SampleDraw(a, None, 3))) - mean
    fb = flatten_field(synthesize_field(model, SampleDraw(b, None, 3))) - mean
    fab = flatten_field(synthesize_field(model, SampleDraw(2 * a - b, None, 3))) - mean
    np.testing.assert_allclose(fab, 2 * fa - fb, atol=1e-12)


def test_sample_weights_determinism_and_truncation(rng):
    model = build_deformation_model(random_fields(rng, 4), 3)
    a, b = sample_weights(model, 17), sample_weights(model, 17)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, sample_weights(model, 18).weights)
    short = sample_weights(model, 17, component_count=2)
    np.testing.assert_array_equal(short.weights, a.weights[:2])
    assert sample_weights(model, 17, component_count=0).weights.size == 0
    with pytest.raises(ValidationError):
        sample_weights(model, 1, component_count=4)


def test_model_validation(rng):
    with pytest.raises(ValidationError):
        build_deformation_model(random_fields(rng, 1), 1)
    fields = random_fields(rng, 2) + random_fields(rng, 1, dims=(4, 3, 4))
    with pytest.raises(ValidationError):
        build_deformation_model(fields, 1)
    with pytest.raises(ValidationError):
        DeformationModel((1, 1, 1), (1, 1, 1), np.zeros(3), np.eye(3)[:2], [1.0, 2.0], 3)


def test_sdm_roundtrip(rng, tmp_path):
    model = build_deformation_model(random_fields(rng, 4), 3)
    back = read_model(write_model(tmp_path / "m.sdm", model))
    assert back.field_dims == model.field_dims and back.spacing_mm == model.spacing_mm
    np.testing.assert_array_equal(back.eigenvalues, model.eigenvalues)
    np.testing.assert_array_equal(back.mean_field, model.mean_field.astype(np.float32))
    np.testing.assert_array_equal(back.components, model.components.astype(np.float32))
    blob = encode_model(model)
    with pytest.raises(ValidationError):
        decode_model(blob[:-3])
    with pytest.raises(ValidationError):
        decode_model(blob.replace(b"SDM1", b"XXXX", 1))


def test_synthesize_sample_warps_reference(rng):
    dims = (6, 6, 6)
    base = np.zeros((*dims, 3))
    fields = [DeformationField(base + [s, 0.0, 0.0], (1, 1, 1)) for s in (0.0, 2.0)]
    model = build_deformation_model(fields, 1)
    scan = ScalarVolume(rng.normal(size=dims), (1, 1, 1))
    labels = LabelVolume(rng.integers(0, 3, dims), (1, 1, 1), 3)
    draw = SampleDraw([0.0], None, 1)  # the mean field: shift by one voxel
    s, lab = synthesize_sample(model, scan, labels, draw)
    np.testing.assert_allclose(s.data[:-1], scan.data[1:])
    np.testing.assert_array_equal(lab.data[:-1], labels.data[1:])
    with pytest.raises(ValidationError):
        synthesize_sample(model, ScalarVolume(np.zeros((5, 6, 6)), (1, 1, 1)), labels, draw)
