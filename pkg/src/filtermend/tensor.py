"""Activation blocks, valid convolution, and the flat per-location view.

A :class:`ResponseTensor` is an ``(images, filters, height, width)`` float64
block.  :func:`to_sample_matrix` flattens it into one row per
``(image, y, x)`` location (image-major, then row-major spatial) with one
column per filter, which is the layout the regression code consumes.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError


@dataclass(frozen=True, eq=False)
class ResponseTensor:
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True, order="C")
        if arr.ndim != 4:
            raise DimensionError(f"expected a 4-D block, got {arr.ndim} dims", axis="ndim")
        for name, size in zip(("images", "filters", "height", "width"), arr.shape):
            if size < 1:
                raise DimensionError(f"{name} axis must be >= 1, got {size}", axis=name)
        if not np.all(np.isfinite(arr)):
            raise ValueError("response tensor contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def dims(self):
        return self.data.shape

    @property
    def n_images(self):
        return self.data.shape[0]

    @property
    def n_filters(self):
        return self.data.shape[1]

    def select_images(self, index):
        return ResponseTensor(self.data[np.asarray(index)])

    def __len__(self):
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class FilterSampleMatrix:
    """Rows are spatial samples, columns are filters.

    ``provenance[r] = (image, y, x)`` for row ``r``; ``dims`` is the shape of
    the block the rows were taken from.
    """

    values: np.ndarray
    provenance: np.ndarray
    dims: tuple

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_filters(self):
        return self.values.shape[1]

    def column(self, j):
        return self.values[:, j]


def _canonical_provenance(n_img, h, w):
    img, yy, xx = np.meshgrid(np.arange(n_img), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([img.ravel(), yy.ravel(), xx.ravel()], axis=1)


def to_sample_matrix(responses):
    arr = responses.data if isinstance(responses, ResponseTensor) else np.asarray(responses, dtype=np.float64)
    if arr.ndim != 4 or arr.size == 0:
        raise DimensionError("responses must be a non-empty 4-D block", axis="ndim")
    n_img, n_f, h, w = arr.shape
    values = np.ascontiguousarray(arr.transpose(0, 2, 3, 1).reshape(n_img * h * w, n_f))
    values.flags.writeable = False
    return FilterSampleMatrix(values, _canonical_provenance(n_img, h, w), (n_img, n_f, h, w))


def from_sample_matrix(matrix, dims=None):
    dims = tuple(matrix.dims if dims is None else dims)
    if len(dims) != 4:
        raise DimensionError("dims must have four entries", axis="ndim")
    n_img, n_f, h, w = dims
    values = np.asarray(matrix.values if isinstance(matrix, FilterSampleMatrix) else matrix)
    if values.ndim != 2 or values.shape[0] != n_img * h * w:
        raise DimensionError(
            f"matrix has {values.shape[0]} rows, dims need {n_img * h * w}", axis="rows"
        )
    if values.shape[1] != n_f:
        raise DimensionError(f"matrix has {values.shape[1]} columns, dims need {n_f}", axis="filters")
    if isinstance(matrix, FilterSampleMatrix):
        if not np.array_equal(matrix.provenance, _canonical_provenance(n_img, h, w)):
            raise DimensionError("rows are not in image-major, row-major spatial order", axis="rows")
    block = values.reshape(n_img, h, w, n_f).transpose(0, 3, 1, 2)
    return ResponseTensor(block)


def conv2d_forward(inputs, kernels_, bias, stride=1):
    """Valid (unpadded) cross-correlation, returning the linear response."""
    x = inputs.data if isinstance(inputs, ResponseTensor) else np.asarray(inputs, dtype=np.float64)
    w = np.ascontiguousarray(kernels_, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64).reshape(-1)
    if x.ndim != 4:
        raise DimensionError("input must be 4-D", axis="ndim")
    if w.ndim != 4:
        raise DimensionError("kernels must be 4-D (filters, channels, kh, kw)", axis="ndim")
    if int(stride) < 1:
        raise DimensionError(f"stride must be positive, got {stride}", axis="stride")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}", axis="channels"
        )
    if w.shape[2] > x.shape[2]:
        raise DimensionError(f"kernel height {w.shape[2]} exceeds input height {x.shape[2]}", axis="height")
    if w.shape[3] > x.shape[3]:
        raise DimensionError(f"kernel width {w.shape[3]} exceeds input width {x.shape[3]}", axis="width")
    if b.shape[0] != w.shape[0]:
        raise DimensionError(f"bias has {b.shape[0]} entries for {w.shape[0]} filters", axis="filters")
    out = kernels.conv2d_forward(np.ascontiguousarray(x), w, b, int(stride))
    return ResponseTensor(out)
