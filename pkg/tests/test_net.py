import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mudeepiqa.net import (
    IQANet,
    ModelFormatError,
    ModelSpec,
    PatchPrediction,
    aggregate,
    forward_patches,
    init_model,
    load_model,
    save_model,
)
from oracles import gradient_mismatches


def conv_params(c_in, c_out):
    return 9 * c_in * c_out + c_out


def expected_count(spec):
    n, c_in = 0, 1
    for c in spec.channels:
        n += conv_params(c_in, c) + conv_params(c, c)
        c_in = c
    head = c_in * spec.fc_width + spec.fc_width + spec.fc_width + 1
    return n + 2 * head


def test_parameter_count():
    model = init_model(seed=0)
    assert model.n_parameters() == expected_count(ModelSpec()) == 5_237_986


def test_feature_vector_is_512():
    net = IQANet(ModelSpec())
    assert net.features(torch.zeros(2, 1, 32, 32)).shape == (2, 512)


def test_spec_rejects_wrong_depth():
    with pytest.raises(ValueError):
        ModelSpec(patch_size=64)


def test_init_is_seeded():
    a = init_model(ModelSpec.scaled(8), seed=3).parameters()
    b = init_model(ModelSpec.scaled(8), seed=3).parameters()
    c = init_model(ModelSpec.scaled(8), seed=4).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))


def test_eval_forward_is_deterministic():
    model = init_model(ModelSpec.scaled(4), seed=1)
    x = np.random.default_rng(0).random((10, 32, 32))
    p, q = forward_patches(model, x), forward_patches(model, x)
    np.testing.assert_array_equal(p.qualities, q.qualities)
    np.testing.assert_array_equal(p.weights, q.weights)


def test_weights_respect_floor():
    model = init_model(ModelSpec.scaled(4), seed=2)
    pred = forward_patches(model, np.random.default_rng(1).random((64, 32, 32)))
    assert np.all(pred.weights >= 1e-6)


def test_zero_model():
    model = init_model(ModelSpec.scaled(8), seed=0)
    with torch.no_grad():
        for p in model.net.parameters():
            p.zero_()
    pred = forward_patches(model, np.random.default_rng(0).random((5, 32, 32)))
    np.testing.assert_array_equal(pred.qualities, 0.0)
    np.testing.assert_allclose(pred.weights, 1e-6)


def test_rejects_bad_patch_shape():
    with pytest.raises(ValueError):
        forward_patches(init_model(ModelSpec.scaled(8)), np.zeros((2, 16, 16)))


def test_aggregate_small_case():
    assert aggregate(PatchPrediction(np.array([0.0, 1.0]), np.array([1.0, 3.0]))) == pytest.approx(0.75)


@settings(max_examples=50)
@given(
    st.lists(st.floats(-10, 10), min_size=1, max_size=30),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**31 - 1),
)
def test_aggregate_homogeneous_and_bounded(ys, scale, seed):
    y = np.array(ys)
    a = np.random.default_rng(seed).uniform(1e-6, 5, y.size)
    base = aggregate(PatchPrediction(y, a))
    assert aggregate(PatchPrediction(y, a * scale)) == pytest.approx(base, rel=1e-9, abs=1e-12)
    assert y.min() - 1e-9 <= base <= y.max() + 1e-9


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate(PatchPrediction(np.array([]), np.array([])))


def test_save_load_roundtrip(tmp_path):
    model = init_model(ModelSpec.scaled(4), seed=5, label_mean=3.0, label_std=2.0, target_name="frc_resolution")
    path = save_model(model, tmp_path / "m.bin")
    back = load_model(path, expected=ModelSpec.scaled(4))
    a, b = model.parameters(), back.parameters()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert (back.label_mean, back.label_std, back.target_name) == (3.0, 2.0, "frc_resolution")
    x = np.random.default_rng(0).random((4, 32, 32))
    np.testing.assert_array_equal(forward_patches(model, x).qualities, forward_patches(back, x).qualities)


def test_load_rejects_other_architecture(tmp_path):
    path = save_model(init_model(ModelSpec.scaled(4)), tmp_path / "m.bin")
    with pytest.raises(ModelFormatError, match="fingerprint"):
        load_model(path, expected=ModelSpec.scaled(8))


def test_load_rejects_tampered_fingerprint(tmp_path):
    path = save_model(init_model(ModelSpec.scaled(8)), tmp_path / "m.bin")
    raw = path.read_bytes()
    fp = ModelSpec.scaled(8).fingerprint().encode()
    path.write_bytes(raw.replace(fp, b"0" * len(fp), 1))
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_gradients_match_finite_differences():
    net = init_model(ModelSpec.scaled(8), seed=11).net.double().eval()
    x = torch.from_numpy(np.random.default_rng(0).random((6, 1, 32, 32)))
    checked, bad = gradient_mismatches(net, x, 0.3)
    assert checked >= 100
    assert not bad, bad[:5]
