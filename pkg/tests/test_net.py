import numpy as np
import pytest

from filtermend import net as N
from filtermend.errors import DimensionError, FormatError, TrainingDivergedError
from filtermend.tensor import conv2d_forward

SMALL = N.Architecture(in_channels=3, image_size=12, conv1_filters=4, conv1_kernel=3, conv2_filters=5,
                       conv2_kernel=3, n_classes=3)


def test_architecture_arithmetic():
    a = N.Architecture()
    assert a.conv_out(1) == 24 and a.conv_out(2) == 10 and a.fc_inputs == 16 * 25
    with pytest.raises(DimensionError):
        a.conv_out(3)
    with pytest.raises(DimensionError):
        N.ToyNet(N.Architecture(image_size=8))


def test_capture_shapes_and_scores(rng):
    net = N.ToyNet(seed=1)
    x = rng.uniform(size=(5, 3, 28, 28))
    scores, resp = N.forward_capture(net, x, 1)
    assert resp.dims == (5, 12, 24, 24)
    np.testing.assert_array_equal(scores, N.forward(net, x))
    _, resp2 = N.forward_capture(net, x, 2)
    assert resp2.dims == (5, 16, 10, 10)
    post = N.capture_stage(net, x, 1, "post")
    assert post.data.min() >= 0.0
    with pytest.raises(DimensionError):
        N.forward_capture(net, x, 3)


def test_batch_equals_per_image(rng):
    net = N.ToyNet(SMALL, seed=3)
    x = rng.uniform(size=(4, 3, 12, 12))
    whole = N.forward(net, x)
    single = np.concatenate([N.forward(net, x[i : i + 1]) for i in range(4)])
    assert np.max(np.abs(whole - single)) < 1e-12


def test_gradient_check(rng):
    net = N.ToyNet(SMALL, seed=0)
    for k in net.params:
        net.params[k] += rng.normal(scale=0.05, size=net.params[k].shape)
    x = rng.uniform(size=(3, 3, 12, 12))
    y = np.array([0, 2, 1])
    _, grads = N.loss_and_grads(net, x, y)
    h = 1e-5
    worst = 0.0
    for k in N.PARAM_NAMES:
        p = net.params[k]
        flat = p.reshape(-1)
        for idx in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = N.loss_and_grads(net, x, y)
            flat[idx] = orig - h
            lm, _ = N.loss_and_grads(net, x, y)
            flat[idx] = orig
            num = (lp - lm) / (2 * h)
            ana = grads[k].reshape(-1)[idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst <= 1e-4


def test_training_reduces_loss(rng):
    y = np.repeat([0, 1, 2], 20)
    x = 0.2 * rng.uniform(size=(60, 3, 12, 12))
    for k in range(3):
        x[y == k, k] += 0.7
    net = N.train((x, y), epochs=6, learning_rate=0.02, seed=0, batch_size=10, arch=SMALL)
    assert net.loss_history[-1] < net.loss_history[0]
    assert N.evaluate(net, (x, y)) > 0.9
    again = N.train((x, y), epochs=6, learning_rate=0.02, seed=0, batch_size=10, arch=SMALL)
    for k in N.PARAM_NAMES:
        np.testing.assert_array_equal(net.params[k], again.params[k])


def test_divergence_is_reported(rng):
    x = rng.uniform(size=(20, 3, 12, 12))
    y = np.repeat([0, 1], 10)
    with pytest.raises(TrainingDivergedError), np.errstate(all="ignore"):
        N.train((x, y), epochs=3, learning_rate=1e200, seed=0)


def test_tnet_round_trip(tmp_path, rng):
    net = N.ToyNet(seed=7)
    path = tmp_path / "n.tnet"
    N.save_net(net, path)
    back = N.load_net(path)
    assert back.arch == net.arch
    for k in N.PARAM_NAMES:
        assert np.array_equal(back.params[k], net.params[k])
    N.save_net(back, tmp_path / "m.tnet")
    assert (tmp_path / "m.tnet").read_bytes() == path.read_bytes()


def test_tnet_corruption(tmp_path):
    net = N.ToyNet(SMALL, seed=1)
    path = tmp_path / "n.tnet"
    N.save_net(net, path)
    raw = path.read_bytes()
    (tmp_path / "bad.tnet").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        N.load_net(tmp_path / "bad.tnet")
    (tmp_path / "short.tnet").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        N.load_net(tmp_path / "short.tnet")
    (tmp_path / "long.tnet").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        N.load_net(tmp_path / "long.tnet")


def test_separable_two_class_set_is_learned(rng):
    y = np.repeat([0, 1], 40)
    x = 0.3 * rng.uniform(size=(80, 3, 12, 12))
    x[y == 1, :, :6] += 0.6
    net = N.train((x, y), epochs=20, learning_rate=0.02, seed=0, batch_size=16, arch=SMALL)
    assert N.evaluate(net, (x, y)) >= 0.99


def test_capture_matches_direct_convolution(rng):
    arch = N.Architecture(image_size=12, conv1_filters=1, conv1_kernel=3, conv2_filters=2, conv2_kernel=3)
    net = N.ToyNet(arch, seed=0)
    net.params["conv1_w"][:] = np.arange(27.0).reshape(1, 3, 3, 3) / 27.0 - 0.5
    net.params["conv1_b"][:] = 0.25
    x = rng.uniform(size=(2, 3, 12, 12))
    _, resp = N.forward_capture(net, x, 1)
    direct = conv2d_forward(x, net.params["conv1_w"], net.params["conv1_b"])
    assert np.max(np.abs(resp.data - direct.data)) <= 1e-12


def test_random_net_is_at_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(500, 3, 12, 12))
        y = np.repeat(np.arange(10), 50)
        net = N.ToyNet(N.Architecture(image_size=12, conv1_kernel=3, n_classes=10), seed=seed)
        accs.append(N.evaluate(net, (x, y)))
    assert abs(np.mean(accs) - 0.10) <= 0.03
