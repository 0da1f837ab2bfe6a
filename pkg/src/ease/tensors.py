"""Core tensor types, similarity/gradient kernels, and the on-disk tensor format.

Feature maps are channel-major ``C x H x W`` float32 arrays so per-channel
planes stay contiguous for gradient work; per-pixel vector gathers go through
:meth:`FeatureMap.pixels` and nowhere else. Label maps are ``H x W`` uint32
with 0 reserved for background/ignore.

The ``.tns`` file format is bit-exact and little-endian:

    magic   8 bytes  b"EASETNSR"
    version u32      1
    dtype   u32      0 = float32, 1 = uint32
    ndim    u32
    dims    ndim x u64
    payload row-major little-endian values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EASETNSR"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U32 = 1

_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U32: np.dtype("<u4")}
_CODES = {np.dtype("float32"): DTYPE_F32, np.dtype("uint32"): DTYPE_U32}


class TensorFileError(Exception):
    """Base class for tensor file format violations."""


class BadMagicError(TensorFileError):
    """File does not start with the expected magic bytes."""


class DtypeMismatchError(TensorFileError):
    """Stored dtype or rank is not what the caller asked for."""


class TruncatedPayloadError(TensorFileError):
    """Header promises more payload bytes than the file contains."""


@dataclass(frozen=True)
class FeatureMap:
    """Dense C x H x W feature tensor (float32, finite)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be C x H x W, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"feature map dims must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """All pixel vectors as an (H*W, C) array, row-major pixel order."""
        c = self.data.shape[0]
        return self.data.reshape(c, -1).T


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic N_hr x N_lr attention matrix."""

    rows: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.rows, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"attention must be 2-D, got shape {arr.shape}")
        if np.any(arr < -1e-7) or np.any(arr > 1.0 + 1e-5):
            raise ValueError("attention entries must lie in [0, 1]")
        sums = arr.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-5):
            worst = float(np.abs(sums - 1.0).max())
            raise ValueError(f"attention rows must sum to 1 within 1e-5 (off by {worst:.2e})")
        object.__setattr__(self, "rows", arr)

    @property
    def n_hr(self) -> int:
        return self.rows.shape[0]

    @property
    def n_lr(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """H x W segment assignment; 0 is reserved for background/ignore."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if arr.ndim != 2:
            raise ValueError(f"label map must be H x W, got shape {arr.shape}")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def segment_ids(self) -> np.ndarray:
        """Distinct foreground ids, ascending."""
        ids = np.unique(self.labels)
        return ids[ids > 0]

    def compact(self) -> "LabelMap":
        """Relabel foreground ids to contiguous 1..K preserving order."""
        ids = self.segment_ids()
        lut = np.zeros(int(self.labels.max()) + 1, dtype=np.uint32)
        lut[ids] = np.arange(1, len(ids) + 1, dtype=np.uint32)
        return LabelMap(lut[self.labels])


def l2_normalize(fm: FeatureMap) -> FeatureMap:
    """Scale each pixel vector to unit norm; zero vectors stay zero."""
    norms = np.sqrt((fm.data.astype(np.float64) ** 2).sum(axis=0))
    safe = np.where(norms == 0.0, 1.0, norms)
    return FeatureMap((fm.data / safe).astype(np.float32))


def normalized_rows(x: np.ndarray) -> np.ndarray:
    """Unit-normalize matrix rows in float64; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors; zero-norm operands give 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def spatial_gradient(fm: FeatureMap) -> FeatureMap:
    """Per-pixel gradient magnitude, averaged over channels (1 x H x W).

    Forward differences in x and y; the last row/column falls back to the
    one-sided backward difference so every pixel has a defined strength.
    A 1x1 map yields all zeros.
    """
    f = fm.data.astype(np.float64)
    c, h, w = f.shape
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    if w >= 2:
        dx[:, :, :-1] = f[:, :, 1:] - f[:, :, :-1]
        dx[:, :, -1] = f[:, :, -1] - f[:, :, -2]
    if h >= 2:
        dy[:, :-1, :] = f[:, 1:, :] - f[:, :-1, :]
        dy[:, -1, :] = f[:, -1, :] - f[:, -2, :]
    mag = np.sqrt(dx**2 + dy**2).mean(axis=0)
    return FeatureMap(mag[None].astype(np.float32))


def _read_exact(fh, n: int, path: Path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"{path}: expected {n} more bytes, got {len(buf)}")
    return buf


def write_array(path, arr: np.ndarray) -> None:
    """Write an array in the .tns format (float32 or uint32 only)."""
    path = Path(path)
    arr = np.ascontiguousarray(arr)
    key = np.dtype(arr.dtype.name)
    if key not in _CODES:
        raise DtypeMismatchError(f"unsupported dtype {arr.dtype}; use float32 or uint32")
    code = _CODES[key]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_array(path) -> np.ndarray:
    """Read a .tns file back into a numpy array."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, path)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        version, code, ndim = struct.unpack("<III", _read_exact(fh, 12, path))
        if version != FORMAT_VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        if code not in _DTYPES:
            raise DtypeMismatchError(f"{path}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, path))
        dtype = _DTYPES[code]
        count = 1
        for d in dims:
            count *= d
        payload = _read_exact(fh, count * dtype.itemsize, path)
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        return arr.astype(np.dtype(dtype.name))  # native byte order


def write_tensor(path, t) -> None:
    """Write a FeatureMap, LabelMap, AttentionMap, or raw array."""
    if isinstance(t, FeatureMap):
        write_array(path, t.data)
    elif isinstance(t, LabelMap):
        write_array(path, t.labels)
    elif isinstance(t, AttentionMap):
        write_array(path, t.rows)
    else:
        write_array(path, np.asarray(t))


def read_tensor(path):
    """Read a .tns file as a typed tensor.

    3-D float32 becomes a FeatureMap, 2-D uint32 a LabelMap; anything else is
    returned as a plain array (e.g. attention matrices or weight vectors).
    """
    arr = read_array(path)
    if arr.dtype == np.float32 and arr.ndim == 3:
        return FeatureMap(arr)
    if arr.dtype == np.uint32 and arr.ndim == 2:
        return LabelMap(arr)
    return arr


def read_feature_map(path) -> FeatureMap:
    arr = read_array(path)
    if arr.dtype != np.float32 or arr.ndim != 3:
        raise DtypeMismatchError(f"{path}: expected 3-D float32 feature map, got {arr.dtype} ndim={arr.ndim}")
    return FeatureMap(arr)


def read_label_map(path) -> LabelMap:
    arr = read_array(path)
    if arr.dtype != np.uint32 or arr.ndim != 2:
        raise DtypeMismatchError(f"{path}: expected 2-D uint32 label map, got {arr.dtype} ndim={arr.ndim}")
    return LabelMap(arr)


def read_attention(path) -> AttentionMap:
    arr = read_array(path)
    if arr.dtype != np.float32 or arr.ndim != 2:
        raise DtypeMismatchError(f"{path}: expected 2-D float32 attention, got {arr.dtype} ndim={arr.ndim}")
    return AttentionMap(arr)


def write_bundle(directory, tensors: dict) -> None:
    """Write named arrays as one .tns per entry plus a manifest.

    Manifest lines are ``name=file:dims`` (dims joined by 'x'), one per tensor.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        fname = f"{name}.tns"
        write_array(directory / fname, arr)
        dims = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}={fname}:{dims}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_bundle(directory) -> dict:
    """Read a manifest-listed bundle; shapes are checked against headers."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    out = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, rest = line.split("=", 1)
        fname, dims = rest.rsplit(":", 1)
        arr = read_array(directory / fname)
        expect = tuple(int(d) for d in dims.split("x")) if dims else ()
        if arr.shape != expect:
            raise DtypeMismatchError(
                f"{directory / fname}: manifest shape {expect} != stored {arr.shape}"
            )
        out[name] = arr
    return out
