"""ToyNet: a two-convolution classifier used as the host network.

Architecture (valid convolutions, 64-bit weights)::

    conv1 (12 @ 5x5) -> relu -> maxpool 2x2
    conv2 (16 @ 3x3) -> relu -> maxpool 2x2
    affine -> class scores
"""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, FormatError, TrainingDivergedError
from .tensor import ResponseTensor

log = logging.getLogger(__name__)

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")
CONV_LAYERS = (1, 2)
FORWARD_CHUNK = 256

NET_MAGIC = b"TNET"
NET_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 3
    image_size: int = 28
    conv1_filters: int = 12
    conv1_kernel: int = 5
    conv2_filters: int = 16
    conv2_kernel: int = 3
    n_classes: int = 8

    def conv_out(self, layer):
        s = self.image_size - self.conv1_kernel + 1
        if layer == 1:
            return s
        s = s // 2 - self.conv2_kernel + 1
        if layer == 2:
            return s
        raise DimensionError(f"no convolution layer {layer}", axis="layer")

    @property
    def fc_inputs(self):
        return self.conv2_filters * (self.conv_out(2) // 2) ** 2

    def validate(self):
        if self.conv_out(1) < 2 or self.conv_out(2) < 2:
            raise DimensionError(f"image size {self.image_size} too small for this architecture", axis="height")


class ToyNet:
    def __init__(self, arch=None, seed=0, params=None):
        self.arch = arch or Architecture()
        self.arch.validate()
        if params is None:
            params = _init_params(self.arch, seed)
        self.params = {k: np.ascontiguousarray(params[k], dtype=np.float64) for k in PARAM_NAMES}

    @property
    def n_classes(self):
        return self.arch.n_classes

    def copy(self):
        return ToyNet(self.arch, params={k: v.copy() for k, v in self.params.items()})

    def n_filters(self, layer):
        if layer == 1:
            return self.arch.conv1_filters
        if layer == 2:
            return self.arch.conv2_filters
        raise DimensionError(f"layer index {layer} out of range (valid: 1, 2)", axis="layer")


def _init_params(arch, seed):
    rng = np.random.default_rng(seed)
    a = arch
    fan1 = a.in_channels * a.conv1_kernel**2
    fan2 = a.conv1_filters * a.conv2_kernel**2
    return {
        "conv1_w": rng.normal(0.0, np.sqrt(2.0 / fan1), (a.conv1_filters, a.in_channels, a.conv1_kernel, a.conv1_kernel)),
        "conv1_b": np.zeros(a.conv1_filters),
        "conv2_w": rng.normal(0.0, np.sqrt(2.0 / fan2), (a.conv2_filters, a.conv1_filters, a.conv2_kernel, a.conv2_kernel)),
        "conv2_b": np.zeros(a.conv2_filters),
        "fc_w": rng.normal(0.0, np.sqrt(1.0 / a.fc_inputs), (a.n_classes, a.fc_inputs)),
        "fc_b": np.zeros(a.n_classes),
    }


def _as_images(images):
    data = getattr(images, "images", images)
    data = getattr(data, "data", data)
    return np.ascontiguousarray(data, dtype=np.float64)


def _forward_batch(net, x, hook=None, keep_cache=False):
    """One forward pass.  ``hook = (layer, stage, fn)`` rewrites a conv output.

    ``stage`` is ``"pre"`` (linear response) or ``"post"`` (after relu);
    ``fn`` maps a 4-D array to a 4-D array of the same shape.
    """
    p = net.params
    cache = {}
    h = x
    captured = {}
    for layer in CONV_LAYERS:
        w, b = p[f"conv{layer}_w"], p[f"conv{layer}_b"]
        z = kernels.conv2d_forward(h, w, b, 1)
        if hook is not None and hook[0] == layer and hook[1] == "pre":
            z = hook[2](z)
        captured[layer] = z
        a = np.maximum(z, 0.0)
        if hook is not None and hook[0] == layer and hook[1] == "post":
            a = hook[2](a)
        pooled, arg = kernels.maxpool2_forward(a)
        if keep_cache:
            cache[layer] = (h, z, a, arg)
        h = pooled
    flat = h.reshape(h.shape[0], -1)
    scores = flat @ p["fc_w"].T + p["fc_b"]
    if keep_cache:
        cache["flat"] = flat
        cache["pool_shape"] = h.shape
    return scores, captured, cache


def forward(net, images, hook=None):
    """Class scores (logits) for a batch, evaluated in fixed-size chunks."""
    x = _as_images(images)
    out = []
    for start in range(0, x.shape[0], FORWARD_CHUNK):
        scores, _, _ = _forward_batch(net, x[start : start + FORWARD_CHUNK], hook)
        out.append(scores)
    return np.concatenate(out, axis=0)


def forward_capture(net, images, capture_layer):
    """Scores plus the captured pre-activation output of ``capture_layer``."""
    if capture_layer not in CONV_LAYERS:
        raise DimensionError(f"capture layer {capture_layer} out of range (valid: 1, 2)", axis="layer")
    x = _as_images(images)
    scores, maps = [], []
    for start in range(0, x.shape[0], FORWARD_CHUNK):
        s, captured, _ = _forward_batch(net, x[start : start + FORWARD_CHUNK])
        scores.append(s)
        maps.append(captured[capture_layer])
    return np.concatenate(scores, axis=0), ResponseTensor(np.concatenate(maps, axis=0))


def capture_stage(net, images, layer, stage="pre"):
    """Layer output at the requested stage (pre- or post-rectifier)."""
    _, resp = forward_capture(net, images, layer)
    if stage == "post":
        return ResponseTensor(np.maximum(resp.data, 0.0))
    return resp


def softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(net, x, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. every parameter."""
    p = net.params
    scores, _, cache = _forward_batch(net, x, keep_cache=True)
    n = x.shape[0]
    probs = softmax(scores)
    loss = -float(np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    dscores = probs
    dscores[np.arange(n), labels] -= 1.0
    dscores /= n
    grads = {
        "fc_w": dscores.T @ cache["flat"],
        "fc_b": dscores.sum(axis=0),
    }
    dh = (dscores @ p["fc_w"]).reshape(cache["pool_shape"])
    for layer in reversed(CONV_LAYERS):
        h_in, z, a, arg = cache[layer]
        da = kernels.maxpool2_backward(np.ascontiguousarray(dh), arg, a.shape)
        dz = da * (z > 0)
        dh, dw, db = kernels.conv2d_backward(h_in, p[f"conv{layer}_w"], np.ascontiguousarray(dz), 1)
        grads[f"conv{layer}_w"] = dw
        grads[f"conv{layer}_b"] = db
    return loss, grads


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        images, labels = dataset
    else:
        images, labels = dataset.images, dataset.labels
    return _as_images(images), np.asarray(labels, dtype=np.int64)


def train(dataset, epochs=12, learning_rate=0.05, momentum=0.9, seed=0, batch_size=32, n_classes=None,
          arch=None, net=None):
    """Momentum SGD on softmax cross-entropy; returns the final-epoch network.

    ``net`` continues training an existing network instead of a fresh one.
    """
    x, y = _dataset_arrays(dataset)
    if n_classes is None:
        n_classes = int(getattr(dataset, "n_classes", 0) or (y.max() + 1))
    if n_classes < 2 or np.unique(y).size < 2:
        raise ValueError("training needs at least two classes")
    if net is None:
        if arch is None:
            arch = Architecture(in_channels=x.shape[1], image_size=x.shape[2], n_classes=n_classes)
        net = ToyNet(arch, seed=seed)
    else:
        net = net.copy()
    rng = np.random.default_rng([seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    n = x.shape[0]
    net.loss_history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grads(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite in epoch {epoch + 1}; try a smaller learning rate"
                )
            total += loss * idx.size
            for k in PARAM_NAMES:
                velocity[k] = momentum * velocity[k] - learning_rate * grads[k]
                net.params[k] += velocity[k]
        mean_loss = total / n
        net.loss_history.append(mean_loss)
        log.info("epoch %d/%d loss %.5f", epoch + 1, epochs, mean_loss)
        if not all(np.all(np.isfinite(v)) for v in net.params.values()):
            raise TrainingDivergedError("weights became non-finite; try a smaller learning rate")
    return net


def predict(net, images, model=None):
    if model is None:
        scores = forward(net, images)
    else:
        from .adapt import adapted_forward

        scores = adapted_forward(net, images, model)
    return np.argmax(scores, axis=1)


def evaluate(net, dataset, model=None):
    """Top-1 accuracy in [0, 1], optionally through a reconstruction model."""
    x, y = _dataset_arrays(dataset)
    if y.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(net, x, model) == y))


# ---------------------------------------------------------------------------
# TNET file format: magic, u16 version, u16 x 7 architecture header,
# then every parameter as little-endian float64 in PARAM_NAMES order
# ---------------------------------------------------------------------------

_ARCH_FIELDS = ("in_channels", "image_size", "conv1_filters", "conv1_kernel", "conv2_filters", "conv2_kernel",
                "n_classes")


def save_net(net, path):
    header = NET_MAGIC + struct.pack("<H", NET_VERSION)
    header += struct.pack("<7H", *(getattr(net.arch, f) for f in _ARCH_FIELDS))
    body = b"".join(np.ascontiguousarray(net.params[k], dtype="<f8").tobytes() for k in PARAM_NAMES)
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_net(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != NET_MAGIC:
        raise FormatError(f"not a TNET file: magic {raw[:4]!r}, expected {NET_MAGIC!r}")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != NET_VERSION:
        raise FormatError(f"unsupported TNET version {version}, expected {NET_VERSION}")
    arch = Architecture(**dict(zip(_ARCH_FIELDS, struct.unpack_from("<7H", raw, 6))))
    shapes = {k: v.shape for k, v in _init_params(arch, 0).items()}
    offset = 20
    params = {}
    for k in PARAM_NAMES:
        count = int(np.prod(shapes[k]))
        if offset + 8 * count > len(raw):
            raise FormatError(f"TNET payload truncated while reading {k}")
        params[k] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shapes[k]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"TNET file has {len(raw) - offset} trailing bytes")
    return ToyNet(arch, params=params)
