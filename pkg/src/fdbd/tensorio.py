"""Minimal NPY v1.0 reader/writer and the JSON manifest binding arrays to roles.

Only little-endian ``<f4``/``<f8`` arrays of rank 1 or 2 in C order are
supported. The header layout follows the NPY v1.0 format::

    \\x93NUMPY  0x01 0x00  <uint16 LE header_len>  <ASCII dict, space padded, '\\n'>

with the total preamble padded to a multiple of 64 bytes.
"""

from __future__ import annotations

import ast
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .errors import (
    DimensionMismatch,
    MagicMismatch,
    MissingRole,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedLayout,
    ValidationError,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]

MAGIC = b"\x93NUMPY"
VERSION = (1, 0)
ALIGN = 64
SUPPORTED_DESCR = {"<f4": 4, "<f8": 8}
_PREAMBLE_FIXED = len(MAGIC) + 2 + 2  # magic + version + header length


@dataclass(frozen=True)
class ArrayFile:
    """A rank-1 or rank-2 float array plus the dtype it is stored as.

    ``data`` is always a read-only C-contiguous array in the stored dtype.
    """

    dtype: str
    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.dtype not in SUPPORTED_DESCR:
            raise UnsupportedDtype(f"dtype {self.dtype!r} not in {sorted(SUPPORTED_DESCR)}")
        if len(self.shape) not in (1, 2):
            raise UnsupportedLayout(f"only rank 1 or 2 arrays are supported, got shape {self.shape}")
        if int(np.prod(self.shape, dtype=np.int64)) != self.data.size:
            raise ValidationError(
                f"shape {self.shape} does not match {self.data.size} stored elements"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray, *, allow_nonfinite: bool = False) -> ArrayFile:
        """Wrap a numpy array, keeping f32 as f32 and everything else as f64."""
        arr = np.asarray(arr)
        dt = np.dtype("<f4") if arr.dtype == np.float32 else np.dtype("<f8")
        data = np.ascontiguousarray(arr, dtype=dt).copy()
        if not allow_nonfinite:
            _check_finite(data, "array")
        data.setflags(write=False)
        return cls(dt.str, tuple(int(s) for s in data.shape), data)

    def as_float64(self) -> np.ndarray:
        """Row-major float64 copy used for all downstream math."""
        return np.array(self.data, dtype=np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ArrayFile):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def _check_finite(data: np.ndarray, what: str) -> None:
    if data.size and not np.isfinite(data).all():
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise ValidationError(f"{what} contains {bad} non-finite value(s)")


def _encode_header(descr: str, shape: tuple[int, ...]) -> bytes:
    body = "{'descr': %r, 'fortran_order': False, 'shape': %r, }" % (descr, tuple(shape))
    pad = ALIGN - ((_PREAMBLE_FIXED + len(body) + 1) % ALIGN)
    if pad == ALIGN:
        pad = 0
    header = (body + " " * pad + "\n").encode("latin1")
    if len(header) > 0xFFFF:
        raise ValidationError("header too long for NPY v1.0")
    return header


@dataclass(frozen=True)
class _Header:
    descr: str
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * SUPPORTED_DESCR[self.descr]


def _parse_header(buf: bytes, path: PathLike) -> _Header:
    if len(buf) < _PREAMBLE_FIXED or buf[: len(MAGIC)] != MAGIC:
        raise MagicMismatch(f"{path}: not an NPY file (bad magic)")
    major, minor = buf[6], buf[7]
    if (major, minor) != VERSION:
        raise MagicMismatch(f"{path}: unsupported NPY version {major}.{minor}")
    (hlen,) = struct.unpack("<H", buf[8:10])
    raw = buf[10 : 10 + hlen]
    if len(raw) < hlen:
        raise TruncatedPayload(f"{path}: header truncated")
    try:
        meta = ast.literal_eval(raw.decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise MagicMismatch(f"{path}: malformed header dict") from exc
    if not isinstance(meta, dict) or {"descr", "fortran_order", "shape"} - meta.keys():
        raise MagicMismatch(f"{path}: header lacks descr/fortran_order/shape")
    descr = meta["descr"]
    if descr not in SUPPORTED_DESCR:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} unsupported (need '<f4' or '<f8')")
    if meta["fortran_order"]:
        raise UnsupportedLayout(f"{path}: column-major (fortran_order=True) arrays unsupported")
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) not in (1, 2):
        raise UnsupportedLayout(f"{path}: only rank 1 or 2 arrays supported, got {shape}")
    return _Header(descr, shape, 10 + hlen)


def read_header(path: PathLike) -> tuple[str, tuple[int, ...]]:
    """Return ``(descr, shape)`` without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(_PREAMBLE_FIXED)
        if len(head) == _PREAMBLE_FIXED and head[:6] == MAGIC:
            (hlen,) = struct.unpack("<H", head[8:10])
            head += fh.read(hlen)
    hdr = _parse_header(head, path)
    return hdr.descr, hdr.shape


def read_array(path: PathLike, *, allow_nonfinite: bool = False) -> ArrayFile:
    """Parse an NPY v1.0 file into an :class:`ArrayFile`.

    Raises:
        MagicMismatch: missing magic bytes or unsupported version.
        UnsupportedDtype: anything other than ``<f4`` / ``<f8``.
        UnsupportedLayout: ``fortran_order`` set, or rank not 1/2.
        TruncatedPayload: payload size differs from ``prod(shape) * itemsize``.
        ValidationError: non-finite values while ``allow_nonfinite`` is False.
    """
    buf = Path(path).read_bytes()
    hdr = _parse_header(buf, path)
    payload = buf[hdr.offset :]
    if len(payload) != hdr.nbytes:
        raise TruncatedPayload(
            f"{path}: payload has {len(payload)} bytes, header shape {hdr.shape} "
            f"needs {hdr.nbytes}"
        )
    data = np.frombuffer(payload, dtype=np.dtype(hdr.descr)).reshape(hdr.shape)
    if not allow_nonfinite:
        _check_finite(data, str(path))
    return ArrayFile(hdr.descr, hdr.shape, data)


def write_array(
    path: PathLike, arr: ArrayFile | np.ndarray, *, allow_nonfinite: bool = False
) -> None:
    """Write ``arr`` as an NPY v1.0 file. Plain numpy arrays are wrapped first."""
    if not isinstance(arr, ArrayFile):
        arr = ArrayFile.from_array(arr, allow_nonfinite=allow_nonfinite)
    elif not allow_nonfinite:
        _check_finite(arr.data, "array")
    payload = np.ascontiguousarray(arr.data, dtype=np.dtype(arr.dtype)).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes(VERSION))
        header = _encode_header(arr.dtype, arr.shape)
        fh.write(struct.pack("<H", len(header)))
        fh.write(header)
        fh.write(payload)


def load_float64(path: PathLike) -> np.ndarray:
    return read_array(path).as_float64()


# --- manifest --------------------------------------------------------------

REQUIRED_ROLES = ("id_features", "ood_features", "train_features", "head_weights", "head_bias")


@dataclass(frozen=True)
class Manifest:
    """Resolved file paths for every array role, plus the shapes seen at load.

    Relative paths in the JSON are resolved against the manifest's directory.
    """

    path: Path
    id_features: Path
    ood_features: dict[str, Path]
    train_features: Path
    head_weights: Path
    head_bias: Path
    train_labels: Path | None = None
    precomputed_stats: Path | None = None
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict, compare=False)

    @property
    def n_classes(self) -> int:
        return self.shapes["head_weights"][0]

    @property
    def dim(self) -> int:
        return self.shapes["head_weights"][1]

    def feature_sets(self) -> dict[str, Path]:
        """``{"id": ..., <ood name>: ...}`` in a stable order."""
        out = {"id": self.id_features}
        out.update(self.ood_features)
        return out


def load_manifest(path: PathLike) -> Manifest:
    """Load and cross-validate a manifest.

    Only array headers are read here; payloads are read on demand.

    Raises:
        MissingRole: a required role key is absent or a referenced file is missing.
        DimensionMismatch: arrays disagree on ``P`` or ``|C|`` (message names
            the roles and shapes involved).
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise MissingRole(f"{path}: manifest must be a JSON object")
    missing = [r for r in REQUIRED_ROLES if r not in raw]
    if missing:
        raise MissingRole(f"{path}: manifest missing role(s): {', '.join(missing)}")

    base = path.parent

    def resolve(role: str, value: object) -> Path:
        if not isinstance(value, str):
            raise MissingRole(f"{path}: role {role!r} must be a path string")
        p = Path(value)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise MissingRole(f"{path}: file for role {role!r} not found: {p}")
        return p

    ood_raw = raw["ood_features"]
    if not isinstance(ood_raw, dict):
        raise MissingRole(f"{path}: 'ood_features' must map set names to paths")
    if "id" in ood_raw:
        raise MissingRole(f"{path}: OOD set name 'id' is reserved")
    ood = {str(k): resolve(f"ood_features.{k}", v) for k, v in ood_raw.items()}

    roles: dict[str, Path] = {
        r: resolve(r, raw[r]) for r in ("id_features", "train_features", "head_weights", "head_bias")
    }
    labels = resolve("train_labels", raw["train_labels"]) if raw.get("train_labels") else None
    stats = (
        resolve("precomputed_stats", raw["precomputed_stats"])
        if raw.get("precomputed_stats")
        else None
    )

    shapes: dict[str, tuple[int, ...]] = {}
    for role, p in list(roles.items()) + [(f"ood_features.{k}", v) for k, v in ood.items()]:
        shapes[role] = read_header(p)[1]
    if labels is not None:
        shapes["train_labels"] = read_header(labels)[1]

    w_shape, b_shape = shapes["head_weights"], shapes["head_bias"]
    if len(w_shape) != 2:
        raise DimensionMismatch(f"head_weights must be 2-D (|C|, P), got {w_shape}")
    if len(b_shape) != 1 or b_shape[0] != w_shape[0]:
        raise DimensionMismatch(
            f"head_bias shape {b_shape} inconsistent with head_weights shape {w_shape}"
        )
    n_dim = w_shape[1]
    for role, shp in shapes.items():
        if role in ("head_weights", "head_bias", "train_labels"):
            continue
        if len(shp) != 2 or shp[1] != n_dim:
            raise DimensionMismatch(
                f"{role} shape {shp} inconsistent with head_weights shape {w_shape} "
                f"(expected (N, {n_dim}))"
            )
    if labels is not None:
        l_shape, t_shape = shapes["train_labels"], shapes["train_features"]
        if len(l_shape) != 1 or l_shape[0] != t_shape[0]:
            raise DimensionMismatch(
                f"train_labels shape {l_shape} inconsistent with train_features shape {t_shape}"
            )

    unknown = set(raw) - set(REQUIRED_ROLES) - {"train_labels", "precomputed_stats"}
    if unknown:
        logger.debug("ignoring unknown manifest keys: %s", sorted(unknown))

    return Manifest(
        path=path,
        ood_features=ood,
        train_labels=labels,
        precomputed_stats=stats,
        shapes=shapes,
        **roles,
    )


def load_labels(path: PathLike, n_classes: int) -> np.ndarray:
    """Read class labels stored as an integral-valued float array."""
    vals = read_array(path).as_float64()
    if vals.ndim != 1:
        raise DimensionMismatch(f"{path}: labels must be 1-D, got shape {vals.shape}")
    ints = vals.astype(np.int64)
    if not np.array_equal(ints, vals):
        raise ValidationError(f"{path}: labels must be integral values")
    if ints.size and (ints.min() < 0 or ints.max() >= n_classes):
        raise ValidationError(f"{path}: labels must lie in [0, {n_classes})")
    return ints
