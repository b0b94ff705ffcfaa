"""Synthetic shifted datasets, IDX ingestion, and the FTEN tensor format."""
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .tensor import ResponseTensor

SHAPE_CLASSES = ("bar", "cross", "disk", "ring", "triangle", "L", "T", "checker")
SHIFT_KINDS = ("gray", "dark", "tint")
LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601

DARK_GAIN = 0.3
DARK_GAMMA = 1.8

TENSOR_MAGIC = b"FTEN"
TENSOR_VERSION = 1
IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(eq=False)
class DatasetBundle:
    images: ResponseTensor
    labels: np.ndarray
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.images, ResponseTensor):
            self.images = ResponseTensor(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.images.n_images,):
            raise ValueError(f"{self.labels.size} labels for {self.images.n_images} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")
        px = self.images.data
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.size

    def subset(self, index, **meta):
        index = np.asarray(index)
        return DatasetBundle(
            self.images.data[index], self.labels[index], self.n_classes, {**self.metadata, **meta}
        )


# ---------------------------------------------------------------------------
# procedural shapes
# ---------------------------------------------------------------------------


def _shape_mask(kind, u, v):
    au, av = np.abs(u), np.abs(v)
    if kind == "bar":
        return (au <= 0.9) & (av <= 0.22)
    if kind == "cross":
        return ((au <= 0.9) & (av <= 0.2)) | ((av <= 0.9) & (au <= 0.2))
    r = np.hypot(u, v)
    if kind == "disk":
        return r <= 0.75
    if kind == "ring":
        return (r >= 0.5) & (r <= 0.85)
    if kind == "triangle":
        # apex up, base at v = -0.6
        return (v >= -0.6) & (v <= 0.9 - 1.875 * au)
    if kind == "L":
        return ((u >= -0.7) & (u <= -0.3) & (av <= 0.8)) | ((au <= 0.7) & (v >= -0.8) & (v <= -0.4))
    if kind == "T":
        return ((au <= 0.8) & (v >= 0.4) & (v <= 0.8)) | ((au <= 0.2) & (av <= 0.8))
    if kind == "checker":
        cell = np.floor((u + 0.8) / 0.4) + np.floor((v + 0.8) / 0.4)
        return (au <= 0.8) & (av <= 0.8) & (cell % 2 == 0)
    raise ValueError(f"unknown shape {kind!r}")


def hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def render_shape(kind, size, rng, supersample=3, max_rotation=np.pi):
    """Anti-aliased coverage mask of one jittered shape instance."""
    scale = rng.uniform(0.55, 0.8) * size / 2.0
    cx = size / 2.0 + rng.uniform(-0.12, 0.12) * size
    cy = size / 2.0 + rng.uniform(-0.12, 0.12) * size
    theta = rng.uniform(-max_rotation, max_rotation)
    k = supersample
    grid = (np.arange(size * k) + 0.5) / k
    py, px = np.meshgrid(grid, grid, indexing="ij")
    dx, dy = (px - cx) / scale, (py - cy) / scale
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    mask = _shape_mask(kind, u, -v).astype(np.float64)
    return mask.reshape(size, k, size, k).mean(axis=(1, 3))


DEFAULT_HUE_RANGE = (0.0, 0.5)  # red through cyan
DEFAULT_MAX_ROTATION = 0.5  # radians


def gen_shapes(n_per_class, n_classes=8, image_size=28, seed=0, noise=0.03, hue_range=DEFAULT_HUE_RANGE,
               max_rotation=DEFAULT_MAX_ROTATION):
    """Tinted shapes on an achromatic background, ``n_per_class`` of each class.

    Images are shuffled with the seed; the output is a pure function of the
    arguments.
    """
    if not 2 <= n_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"n_classes must be in [2, {len(SHAPE_CLASSES)}]")
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, image_size, image_size))
    for i, k in enumerate(labels):
        mask = render_shape(SHAPE_CLASSES[k], image_size, rng, max_rotation=max_rotation)
        color = np.array(hsv_to_rgb(rng.uniform(*hue_range) % 1.0, 1.0, rng.uniform(0.7, 1.0)))
        bg = rng.uniform(0.0, 0.3)
        gray_noise = rng.normal(0.0, noise, (image_size, image_size))
        base = bg + gray_noise
        images[i] = base[None] * (1.0 - mask[None]) + color[:, None, None] * mask[None]
    np.clip(images, 0.0, 1.0, out=images)
    meta = {"generator": "shapes", "shift": "none", "seed": int(seed), "n_per_class": int(n_per_class),
            "image_size": int(image_size)}
    return DatasetBundle(images, labels, n_classes, meta)


# ---------------------------------------------------------------------------
# shifts
# ---------------------------------------------------------------------------


def to_gray(images):
    lum = np.tensordot(LUMA, images, axes=([0], [1]))  # (N, H, W)
    return np.repeat(lum[:, None], 3, axis=1)


def darken(images, gain=DARK_GAIN, gamma=DARK_GAMMA):
    return (gain * images) ** gamma


def hue_rotation_matrix(angle):
    """Rotation of RGB space about the achromatic axis."""
    axis = np.ones(3) / np.sqrt(3.0)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def apply_shift(bundle, kind, seed=0, gain=DARK_GAIN, gamma=DARK_GAMMA):
    """Return a shifted copy of ``bundle``; labels are untouched."""
    x = bundle.images.data
    if kind == "gray":
        out = to_gray(x)
    elif kind == "dark":
        out = darken(x, gain, gamma)
    elif kind == "tint":
        rng = np.random.default_rng(seed)
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            rot = hue_rotation_matrix(rng.uniform(0.0, 2.0 * np.pi))
            out[i] = np.tensordot(rot, x[i], axes=([1], [0]))
    else:
        raise ValueError(f"unknown shift kind {kind!r}; choose from {', '.join(SHIFT_KINDS)}")
    np.clip(out, 0.0, 1.0, out=out)
    return DatasetBundle(out, bundle.labels.copy(), bundle.n_classes, {**bundle.metadata, "shift": kind})


def take_fraction(bundle, fraction, seed=0, count=None):
    """Seeded subset holding ``fraction`` of the images (at least one), or ``count`` images."""
    n = len(bundle)
    k = int(count) if count is not None else max(1, int(round(fraction * n)))
    k = min(max(k, 1), n)
    idx = np.sort(np.random.default_rng([seed, 7]).permutation(n)[:k])
    return bundle.subset(idx, available=k)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_idx(path, expected_magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise FormatError(f"{path}: payload truncated ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, n_classes=None):
    """MNIST-style IDX pair; grayscale is replicated to three channels."""
    pixels = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1).astype(np.int64)
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels")
    images = np.repeat((pixels.astype(np.float64) / 255.0)[:, None], 3, axis=1)
    if n_classes is None:
        n_classes = max(int(labels.max()) + 1 if labels.size else 1, 2)
    return DatasetBundle(images, labels, n_classes, {"generator": "idx", "shift": "none"})


# ---------------------------------------------------------------------------
# FTEN: magic, u16 version, u32 x 4 dims, float32 payload, all little-endian
# ---------------------------------------------------------------------------

_FTEN_HEADER = 4 + 2 + 16


def save_tensor(path, t):
    data = t.data if isinstance(t, ResponseTensor) else np.asarray(t)
    if data.ndim != 4:
        raise FormatError("FTEN stores 4-D tensors only")
    if any(d < 1 for d in data.shape):
        raise FormatError(f"zero-length dimension in {data.shape}")
    if any(d > 0xFFFFFFFF for d in data.shape):
        raise FormatError(f"dimension overflow: {data.shape} exceeds u32")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC + struct.pack("<H4I", TENSOR_VERSION, *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _FTEN_HEADER:
        raise FormatError(f"{path}: truncated FTEN header")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {TENSOR_MAGIC!r}")
    version, *dims = struct.unpack_from("<H4I", raw, 4)
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported FTEN version {version}")
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero-length dimension in {tuple(dims)}")
    count = math.prod(dims)
    if len(raw) != _FTEN_HEADER + 4 * count:
        raise FormatError(f"{path}: payload is {len(raw) - _FTEN_HEADER} bytes, dims need {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", offset=_FTEN_HEADER).reshape(dims).astype(np.float64)
    return ResponseTensor(data)


def save_bundle(bundle, stem):
    """``<stem>.ften`` for images plus ``<stem>.json`` for labels and metadata."""
    save_tensor(f"{stem}.ften", bundle.images)
    doc = {"n_classes": int(bundle.n_classes), "labels": bundle.labels.tolist(), "metadata": bundle.metadata}
    with open(f"{stem}.json", "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_bundle(stem):
    images = load_tensor(f"{stem}.ften")
    with open(f"{stem}.json") as fh:
        doc = json.load(fh)
    return DatasetBundle(images, doc["labels"], doc["n_classes"], doc.get("metadata", {}))
