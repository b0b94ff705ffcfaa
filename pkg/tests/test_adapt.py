import warnings

import numpy as np
import pytest

from filtermend import kernels
from filtermend import net as N
from filtermend.adapt import (
    AdaptConfig,
    FingerprintMismatchWarning,
    ReconstructionModel,
    adapted_forward,
    fit_reconstruction,
    load_model,
    patch_responses,
    save_model,
)
from filtermend.divergence import build_histogram, kl_divergence
from filtermend.errors import DimensionError, FormatError
from filtermend.tensor import ResponseTensor, conv2d_forward

OFFSET = 0.5


def three_filter(rng, n_src=40, n_tgt=10, shift=5.0):
    def block(n, extra):
        f0 = rng.normal(size=(n, 6, 6))
        f1 = rng.gamma(2.0, size=(n, 6, 6))
        f2 = f0 + f1 + OFFSET + extra + rng.normal(scale=0.01, size=(n, 6, 6))
        return np.stack([f0, f1, f2], axis=1)

    return ResponseTensor(block(n_src, 0.0)), ResponseTensor(block(n_tgt, shift))


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(0)
    src, tgt = three_filter(rng)
    return src, tgt, fit_reconstruction(src, tgt, AdaptConfig())


def test_no_shift_marks_nothing(rng):
    src, _ = three_filter(rng)
    model = fit_reconstruction(src, src, AdaptConfig())
    assert model.bad_filters == () and model.unpatched == ()
    assert np.all(model.kl < 1e-9)


def test_constructed_dependency_is_recovered(fitted):
    src, tgt, model = fitted
    assert model.bad_filters == (2,)
    assert set(model.selected[2]) <= {0, 1}
    coef = dict(zip(model.selected[2], model.coefficients[2]))
    assert coef.get(0, 0.0) == pytest.approx(1.0, abs=0.05)
    assert coef.get(1, 0.0) == pytest.approx(1.0, abs=0.05)
    assert model.intercepts[2] == pytest.approx(OFFSET, abs=0.05)
    assert model.kl[2] > 10 * max(model.kl[0], model.kl[1])


def test_patch_values_and_repair(fitted):
    src, tgt, model = fitted
    out = patch_responses(tgt, model)
    expect = tgt.data[:, 0] + tgt.data[:, 1] + OFFSET
    assert np.max(np.abs(out.data[:, 2] - expect)) <= 0.05
    assert np.array_equal(out.data[:, :2], tgt.data[:, :2])
    again = patch_responses(out, model)
    assert np.array_equal(again.data, out.data)
    edges = model.diagnostics["report"].edges[2]
    src_hist = build_histogram(src.data[:, 2].ravel(), edges)
    raw = kl_divergence(build_histogram(tgt.data[:, 2].ravel(), edges), src_hist)
    fixed = kl_divergence(build_histogram(out.data[:, 2].ravel(), edges), src_hist)
    assert fixed <= raw


def test_empty_model_is_identity(rng):
    t = ResponseTensor(rng.normal(size=(2, 3, 4, 4)))
    m = ReconstructionModel(1, 3, (), {}, {}, {}, "fp")
    assert np.array_equal(patch_responses(t, m).data, t.data)
    with pytest.raises(DimensionError):
        patch_responses(ResponseTensor(rng.normal(size=(1, 4, 2, 2))), m)


def test_model_invariants():
    with pytest.raises(ValueError):
        ReconstructionModel(1, 3, (1, 2), {1: (0,), 2: (1,)}, {1: [1.0], 2: [1.0]}, {1: 0.0, 2: 0.0}, "x")
    with pytest.raises(ValueError):
        ReconstructionModel(1, 3, (2,), {2: ()}, {2: []}, {2: 0.0}, "x")
    with pytest.raises(ValueError):
        ReconstructionModel(1, 3, (2,), {2: (5,)}, {2: [1.0]}, {2: 0.0}, "x")
    m = ReconstructionModel(1, 3, (2,), {2: (0, 1)}, {2: np.ones(2)}, {2: 0.0}, "x")
    assert m.good_filters == (0, 1)


def test_fit_is_deterministic_and_thread_independent(tmp_path, monkeypatch):
    rng = np.random.default_rng(5)
    src, tgt = three_filter(rng)
    a = fit_reconstruction(src, tgt, AdaptConfig(seed=3))
    monkeypatch.setenv("FILTERMEND_THREADS", "1")
    b = fit_reconstruction(src, tgt, AdaptConfig(seed=3))
    save_model(a, tmp_path / "a.frec")
    save_model(b, tmp_path / "b.frec")
    assert (tmp_path / "a.frec").read_bytes() == (tmp_path / "b.frec").read_bytes()


def test_single_target_image(rng):
    src, tgt = three_filter(rng, n_tgt=1)
    model = fit_reconstruction(src, tgt, AdaptConfig())
    assert model.bad_filters == (2,)


def test_dimension_mismatch(rng):
    src, _ = three_filter(rng)
    with pytest.raises(DimensionError):
        fit_reconstruction(src, ResponseTensor(rng.normal(size=(2, 3, 5, 5))))
    with pytest.raises(DimensionError):
        fit_reconstruction(src, ResponseTensor(rng.normal(size=(2, 2, 6, 6))))


def test_model_file_round_trip(fitted, tmp_path):
    _, _, model = fitted
    p = tmp_path / "m.frec"
    save_model(model, p)
    back = load_model(p)
    assert back.bad_filters == model.bad_filters and back.selected == model.selected
    assert np.array_equal(back.coefficients[2], model.coefficients[2])
    assert back.intercepts == model.intercepts and back.fingerprint == model.fingerprint
    assert np.array_equal(back.kl, model.kl)
    save_model(back, tmp_path / "n.frec")
    assert (tmp_path / "n.frec").read_bytes() == p.read_bytes()


def test_model_file_errors(fitted, tmp_path):
    _, _, model = fitted
    p = tmp_path / "m.frec"
    save_model(model, p)
    raw = p.read_bytes()
    for cut in (3, 10, 20, len(raw) - 1):
        (tmp_path / "t.frec").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_model(tmp_path / "t.frec")
    (tmp_path / "v.frec").write_bytes(raw[:4] + b"\x63\x00" + raw[6:])
    with pytest.raises(FormatError, match="version"):
        load_model(tmp_path / "v.frec")
    with pytest.warns(FingerprintMismatchWarning):
        load_model(p, expected_fingerprint=AdaptConfig(bins=32).fingerprint())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_model(p, expected_fingerprint=model.fingerprint)


def _manual_forward(net, x, overwrite):
    p = net.params
    z = conv2d_forward(x, p["conv1_w"], p["conv1_b"]).data.copy()
    z = overwrite(z)
    a = np.maximum(z, 0)
    h = a[:, :, : a.shape[2] // 2 * 2, : a.shape[3] // 2 * 2]
    h = h.reshape(h.shape[0], h.shape[1], h.shape[2] // 2, 2, h.shape[3] // 2, 2).max(axis=(3, 5))
    z2 = conv2d_forward(h, p["conv2_w"], p["conv2_b"]).data
    a2 = np.maximum(z2, 0)
    h2 = a2[:, :, : a2.shape[2] // 2 * 2, : a2.shape[3] // 2 * 2]
    h2 = h2.reshape(h2.shape[0], h2.shape[1], h2.shape[2] // 2, 2, h2.shape[3] // 2, 2).max(axis=(3, 5))
    return h2.reshape(len(x), -1) @ p["fc_w"].T + p["fc_b"]


def test_adapted_forward_equals_overwritten_forward(rng):
    arch = N.Architecture(image_size=16, conv1_filters=3, n_classes=4)
    net = N.ToyNet(arch, seed=2)
    x = rng.uniform(size=(1, 3, 16, 16))
    model = ReconstructionModel(1, 3, (0,), {0: (1,)}, {0: np.array([1.0])}, {0: 0.0}, "x")

    def copy_filter_1(z):
        z[:, 0] = z[:, 1]
        return z

    got = adapted_forward(net, x, model)
    assert np.max(np.abs(got - _manual_forward(net, x, copy_filter_1))) < 1e-10
    empty = ReconstructionModel(1, 3, (), {}, {}, {}, "x")
    assert np.array_equal(adapted_forward(net, x, empty), N.forward(net, x))


def test_adapted_forward_batch_consistent(rng):
    net = N.ToyNet(N.Architecture(image_size=16, n_classes=3), seed=1)
    x = rng.uniform(size=(5, 3, 16, 16))
    m = ReconstructionModel(2, 16, (3,), {3: (0, 5)}, {3: np.array([0.5, -1.0])}, {3: 0.1}, "x")
    whole = adapted_forward(net, x, m)
    single = np.concatenate([adapted_forward(net, x[i : i + 1], m) for i in range(5)])
    assert np.max(np.abs(whole - single)) < 1e-12
    with pytest.raises(DimensionError):
        adapted_forward(net, x, ReconstructionModel(3, 16, (), {}, {}, {}, "x"))
    with pytest.raises(DimensionError):
        adapted_forward(net, x, ReconstructionModel(1, 5, (), {}, {}, {}, "x"))
