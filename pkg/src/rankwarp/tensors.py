"""Core grid types and the FTN1 binary tensor format.

Feature grids are H x W x d float32 arrays (one feature vector per spatial
site), label masks are H x W uint32 arrays (one region label per site).  Both
travel between processes in a single deterministic binary format so that
every CLI run is byte-reproducible:

    magic "FTN1" | dtype code (1 byte) | ndim (1 byte) | dims (ndim x u32 LE)
    | payload (row-major, little-endian)

dtype code 1 is float32 (ndim must be 3, a feature grid), dtype code 2 is
uint32 (ndim must be 2, a label mask).  Files are rejected on bad magic,
unknown dtype, wrong rank, payload length mismatch, or non-finite floats;
each failure mode raises its own exception class so callers can map them to
distinct exit codes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FTN1"
DTYPE_FLOAT32 = 1
DTYPE_UINT32 = 2

_HEADER = struct.Struct("<4sBB")


class TensorFormatError(ValueError):
    """Base class for malformed FTN1 files."""


class BadMagicError(TensorFormatError):
    pass


class BadDtypeError(TensorFormatError):
    pass


class BadRankError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


class ValidationError(ValueError):
    """Shape or argument contract violation, distinct from file-format errors."""


def _freeze(a: np.ndarray) -> np.ndarray:
    # grids are shared across worker threads; a read-only buffer makes the
    # immutability contract enforceable rather than aspirational
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FeatureGrid:
    """H x W x d grid of float32 feature vectors, immutable after construction."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ValidationError(f"feature grid must be H x W x d, got shape {a.shape}")
        if any(s < 1 for s in a.shape):
            raise ValidationError(f"feature grid dims must be positive, got {a.shape}")
        a = a.astype(np.float32, copy=False)
        if not np.isfinite(a).all():
            raise NonFiniteError("feature grid contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def site_count(self) -> int:
        """Number of spatial sites L = H * W."""
        return self.height * self.width

    @property
    def vectors(self) -> np.ndarray:
        """The grid flattened to (L, d), raster order."""
        return self.data.reshape(self.site_count, self.channels)


@dataclass(frozen=True)
class LabelMask:
    """H x W grid of uint32 region labels, immutable after construction."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.labels)
        if a.ndim != 2:
            raise ValidationError(f"label mask must be H x W, got shape {a.shape}")
        if any(s < 1 for s in a.shape):
            raise ValidationError(f"label mask dims must be positive, got {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            raise ValidationError(f"label mask must be integer-typed, got {a.dtype}")
        if a.min() < 0:
            raise ValidationError("label mask values must be nonnegative")
        object.__setattr__(self, "labels", _freeze(a.astype(np.uint32, copy=False)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def write_tensor(grid: FeatureGrid | LabelMask, path) -> None:
    """Write a grid or mask to ``path`` in the FTN1 layout, bit-exactly.

    The same grid written twice produces byte-identical files.
    """
    if isinstance(grid, FeatureGrid):
        code, dims = DTYPE_FLOAT32, grid.data.shape
        payload = grid.data.astype("<f4", copy=False)
        if not np.isfinite(payload).all():  # defensive; construction already checks
            raise NonFiniteError("refusing to write non-finite feature grid")
    elif isinstance(grid, LabelMask):
        code, dims = DTYPE_UINT32, grid.labels.shape
        payload = grid.labels.astype("<u4", copy=False)
    else:
        raise ValidationError(f"cannot serialize {type(grid).__name__}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, code, len(dims)))
        fh.write(np.asarray(dims, dtype="<u4").tobytes())
        fh.write(payload.tobytes())


def read_tensor(path) -> FeatureGrid | LabelMask:
    """Read an FTN1 file back into a :class:`FeatureGrid` or :class:`LabelMask`.

    Raises a distinct :class:`TensorFormatError` subclass per failure mode:
    bad magic, unknown dtype code, unsupported rank, payload length mismatch,
    or non-finite float payload.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than header")
    magic, code, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if code not in (DTYPE_FLOAT32, DTYPE_UINT32):
        raise BadDtypeError(f"{path}: unknown dtype code {code}")
    dims_end = _HEADER.size + 4 * ndim
    if len(raw) < dims_end:
        raise TruncatedPayloadError(f"{path}: truncated dims")
    dims = tuple(int(x) for x in np.frombuffer(raw, "<u4", count=ndim, offset=_HEADER.size))
    if code == DTYPE_FLOAT32 and ndim != 3:
        raise BadRankError(f"{path}: float payload must be rank 3, got {ndim}")
    if code == DTYPE_UINT32 and ndim != 2:
        raise BadRankError(f"{path}: uint payload must be rank 2, got {ndim}")
    count = 1
    for d in dims:
        count *= d
    expected = dims_end + 4 * count
    if len(raw) != expected:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw) - dims_end} bytes, expected {4 * count}"
        )
    if code == DTYPE_FLOAT32:
        data = np.frombuffer(raw, "<f4", count=count, offset=dims_end).reshape(dims)
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{path}: payload contains NaN or Inf")
        return FeatureGrid(data.astype(np.float32))
    data = np.frombuffer(raw, "<u4", count=count, offset=dims_end).reshape(dims)
    return LabelMask(data.astype(np.uint32))


def l2_normalize_features(grid: FeatureGrid, epsilon: float = 1e-8) -> FeatureGrid:
    """Scale each site's feature vector to unit L2 norm.

    Zero vectors stay zero: the norm is guarded by ``epsilon`` instead of
    dividing by zero.  Idempotent within 1e-6.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    v = grid.data.astype(np.float64)
    norms = np.sqrt((v * v).sum(axis=2, keepdims=True))
    # vectors at or below the guard collapse to zero outright, which keeps
    # the operation idempotent instead of drifting near the guard scale
    out = np.where(norms > epsilon, v / np.where(norms > epsilon, norms, 1.0), 0.0)
    return FeatureGrid(out.astype(np.float32))
