"""IDX-format tensor files (MNIST/F-MNIST layout) and binary-pair datasets.

The container is big-endian: a 4-byte magic (0x00000801 for 1-D unsigned-byte
label vectors, 0x00000803 for 3-D unsigned-byte image stacks), one 4-byte size
per dimension, then the row-major payload.  Reads are exact; images scale to
[0, 1] by /255 only when building a dataset (the plainest k-NN baseline, no
centering or whitening).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .distributions import Dataset
from .errors import DataFileError, DegenerateClassError
from .rng import STREAM_SUBSAMPLE, spawn_generator

LABEL_MAGIC = 0x00000801
IMAGE_MAGIC = 0x00000803
_NDIMS = {LABEL_MAGIC: 1, IMAGE_MAGIC: 3}
_MAX_ELEMENTS = 1 << 31


class BadMagicError(DataFileError):
    pass


class TruncatedPayloadError(DataFileError):
    pass


class DimOverflowError(DataFileError):
    pass


@dataclass(frozen=True)
class IdxTensor:
    magic: int
    dims: tuple
    data: np.ndarray  # row-major unsigned bytes decoded to reals

    @property
    def count(self) -> int:
        return self.dims[0]


def read_idx(path) -> IdxTensor:
    """Decode one IDX file exactly; every failure mode is a distinct error."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise TruncatedPayloadError(f"{path}: file shorter than a magic header")
        (magic,) = struct.unpack(">i", head)
        if magic not in _NDIMS:
            raise BadMagicError(
                f"{path}: magic 0x{magic & 0xFFFFFFFF:08x} is neither a label "
                "vector (0x00000801) nor an image stack (0x00000803)"
            )
        ndims = _NDIMS[magic]
        raw_dims = fh.read(4 * ndims)
        if len(raw_dims) < 4 * ndims:
            raise TruncatedPayloadError(f"{path}: header ends inside the dims")
        dims = struct.unpack(f">{ndims}i", raw_dims)
        if any(d < 0 for d in dims):
            raise DimOverflowError(f"{path}: negative dimension in {dims}")
        total = 1
        for d in dims:
            total *= d
        if total > _MAX_ELEMENTS:
            raise DimOverflowError(f"{path}: {total} elements exceed the cap")
        payload = fh.read(total)
        if len(payload) < total:
            raise TruncatedPayloadError(
                f"{path}: payload has {len(payload)} bytes, expected {total}"
            )
        if fh.read(1):
            raise TruncatedPayloadError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype=np.uint8).astype(float).reshape(dims)
    return IdxTensor(magic=magic, dims=tuple(dims), data=data)


def write_idx(tensor: IdxTensor, path) -> None:
    """Inverse of ``read_idx``: values must be exact bytes (0..255 integers)."""
    data = np.asarray(tensor.data)
    if data.shape != tuple(tensor.dims):
        raise ValueError("tensor dims disagree with its data shape")
    if tensor.magic not in _NDIMS or len(tensor.dims) != _NDIMS[tensor.magic]:
        raise ValueError("magic and dimensionality disagree")
    rounded = np.rint(data)
    if not np.array_equal(rounded, data) or data.min() < 0 or data.max() > 255:
        raise ValueError("IDX payload values must be integers in [0, 255]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">i", tensor.magic))
        fh.write(struct.pack(f">{len(tensor.dims)}i", *tensor.dims))
        fh.write(rounded.astype(np.uint8).tobytes(order="C"))


def to_binary_dataset(
    images: IdxTensor,
    labels: IdxTensor,
    class_a: int,
    class_b: int,
    n_max: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Reduce an image stack to a binary pair: class_a -> 0, class_b -> 1.

    Flattens each image to a d = rows*cols vector scaled to [0, 1] and
    subsamples to at most ``n_max`` rows with the seeded generator.
    """
    if class_a == class_b:
        raise ValueError("the two classes must differ")
    if images.magic != IMAGE_MAGIC or labels.magic != LABEL_MAGIC:
        raise DataFileError("need an image stack and a label vector, in that order")
    if images.count != labels.count:
        raise DataFileError(
            f"{images.count} images vs {labels.count} labels"
        )
    y = labels.data.astype(np.int64)
    if y.min() < 0 or y.max() > 9:
        raise DataFileError(
            f"label value {int(y.max() if y.max() > 9 else y.min())} outside 0..9"
        )
    keep = np.flatnonzero((y == class_a) | (y == class_b))
    if not np.any(y[keep] == class_a) or not np.any(y[keep] == class_b):
        raise DegenerateClassError("a class is empty after filtering")
    if n_max is not None and keep.size > n_max:
        rng = spawn_generator(seed, STREAM_SUBSAMPLE)
        keep = np.sort(rng.choice(keep, size=n_max, replace=False))
    flat = images.data[keep].reshape(keep.size, -1) / 255.0
    binary = (y[keep] == class_b).astype(np.int8)
    return Dataset(flat, binary)
