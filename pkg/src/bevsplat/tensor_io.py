"""BEVT tensor files and JSON run configuration.

Tensors are plain numpy arrays (float32 or float64). The on-disk layout is::

    offset 0   b"BEVT"
    offset 4   version (0x01)
    offset 5   dtype   (0x01 = f32, 0x02 = f64)
    offset 6   rank
    offset 7   5 x 0x00 pad
    offset 12  rank x uint64 little-endian dims
    then       row-major little-endian payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"BEVT"
VERSION = 1
HEADER_SIZE = 12  # fixed part; dims follow

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """Base class for malformed BEVT files."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedTensorError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


def header_length(rank: int) -> int:
    """Byte offset of the payload for a tensor of the given rank."""
    return HEADER_SIZE + 8 * rank


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _DTYPE_CODES.get(t.dtype)
    if code is None:
        raise UnsupportedDtypeError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if t.ndim < 1 or t.ndim > 255:
        raise TensorFormatError(f"rank must be in [1, 255], got {t.ndim}")
    if any(d < 1 for d in t.shape):
        raise TensorFormatError(f"every dim must be >= 1, got {t.shape}")
    head = MAGIC + struct.pack("<BBB5x", VERSION, code, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_CODE_DTYPES[code]).tobytes(order="C")
    return head + dims + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedTensorError(f"{source}: header truncated ({len(buf)} bytes)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: version {version}, expected {VERSION}")
    if code not in _CODE_DTYPES:
        raise UnsupportedDtypeError(f"{source}: unknown dtype code {code}")
    if rank < 1:
        raise TensorFormatError(f"{source}: rank 0 is not allowed")
    offset = header_length(rank)
    if len(buf) < offset:
        raise TruncatedTensorError(f"{source}: dims truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, HEADER_SIZE)
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.uint64))
    need = count * dtype.itemsize
    if len(buf) - offset < need:
        raise TruncatedTensorError(
            f"{source}: payload has {len(buf) - offset} bytes, expected {need}"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(t: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``t`` to ``path`` in BEVT format."""
    data = encode_tensor(t)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc.strerror}") from exc


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a BEVT file written by :func:`write_tensor`."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path}: {exc.strerror}") from exc
    return decode_tensor(buf, source=str(path))


# ---------------------------------------------------------------------------
# run configuration


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 1.0
    d_max: float = 61.0
    bins: int = 64


@dataclass(frozen=True)
class BevConfig:
    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    resolution: int = 200


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a lift/splat/evaluate run.

    ``dilation`` is the isotropic term added to each projected covariance
    before inversion, in cell^2 of the finest scale (kept constant in metres^2
    across scales); ``k_mode`` selects hard Mahalanobis
    truncation at ``k`` ("truncate") or covariance scaling by ``k**2`` with a
    fixed 3-sigma cutoff ("scale").
    """

    depth: DepthConfig = field(default_factory=DepthConfig)
    k: float = 0.5
    bev: BevConfig = field(default_factory=BevConfig)
    scales: tuple[int, ...] = (50, 100, 200)
    opacity_threshold: float = 0.01
    fuse_mode: str = "sum"
    upsample_mode: str = "bilinear"
    k_mode: str = "truncate"
    dilation: float = 1.0
    feature_stride: int = 8
    image_size: tuple[int, int] = (224, 480)
    dtype: str = "f32"
    seed: int = 0

    def __post_init__(self) -> None:
        validate_config(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "depth": vars(self.depth).copy(),
            "k": self.k,
            "bev": vars(self.bev).copy(),
            "scales": list(self.scales),
            "opacity_threshold": self.opacity_threshold,
            "fuse_mode": self.fuse_mode,
            "upsample_mode": self.upsample_mode,
            "k_mode": self.k_mode,
            "dilation": self.dilation,
            "feature_stride": self.feature_stride,
            "image_size": list(self.image_size),
            "dtype": self.dtype,
            "seed": self.seed,
        }

    def with_updates(self, **kw: Any) -> "RunConfig":
        return replace(self, **kw)


def validate_config(cfg: RunConfig) -> None:
    d = cfg.depth
    if not d.d_min > 0:
        raise ConfigError("depth.d_min: must be > 0")
    if not d.d_max > d.d_min:
        raise ConfigError("depth.d_max: must be > d_min")
    if d.bins < 2:
        raise ConfigError("depth.bins: bins ≥ 2 required")
    if not cfg.k > 0:
        raise ConfigError("k: must be > 0")
    b = cfg.bev
    if not (b.x_max > b.x_min and b.y_max > b.y_min):
        raise ConfigError("bev: extent must satisfy x_max > x_min and y_max > y_min")
    if b.resolution < 1:
        raise ConfigError("bev.resolution: must be >= 1")
    if not cfg.scales:
        raise ConfigError("scales: at least one scale required")
    for s in cfg.scales:
        if s < 1 or b.resolution % s != 0:
            raise ConfigError(f"scales: resolution {b.resolution} is not divisible by scale {s}")
    if not 0.0 <= cfg.opacity_threshold <= 1.0:
        raise ConfigError("opacity_threshold: must lie in [0, 1]")
    if cfg.fuse_mode not in ("sum", "concat"):
        raise ConfigError("fuse_mode: must be 'sum' or 'concat'")
    if cfg.upsample_mode not in ("nearest", "bilinear"):
        raise ConfigError("upsample_mode: must be 'nearest' or 'bilinear'")
    if cfg.k_mode not in ("truncate", "scale"):
        raise ConfigError("k_mode: must be 'truncate' or 'scale'")
    if cfg.dilation < 0:
        raise ConfigError("dilation: must be >= 0")
    h, w = cfg.image_size
    if cfg.feature_stride < 1 or h % cfg.feature_stride or w % cfg.feature_stride:
        raise ConfigError("feature_stride: must divide both image dimensions")
    if cfg.dtype not in ("f32", "f64"):
        raise ConfigError("dtype: must be 'f32' or 'f64'")


def _section(raw: dict, key: str, cls: type) -> Any:
    sub = raw.get(key, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"{key}: expected an object")
    known = cls.__dataclass_fields__
    unknown = set(sub) - set(known)
    if unknown:
        raise ConfigError(f"{key}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**sub)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = set(raw) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {sorted(unknown)}")
    kw: dict[str, Any] = {k: v for k, v in raw.items() if k not in ("depth", "bev")}
    kw["depth"] = _section(raw, "depth", DepthConfig)
    kw["bev"] = _section(raw, "bev", BevConfig)
    if "depth" in raw and "bins" in raw["depth"] and not isinstance(raw["depth"]["bins"], int):
        raise ConfigError("depth.bins: must be an integer")
    if "scales" in kw:
        kw["scales"] = tuple(int(s) for s in kw["scales"])
    if "image_size" in kw:
        kw["image_size"] = tuple(int(s) for s in kw["image_size"])
    return RunConfig(**kw)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse a JSON config file; missing fields fall back to defaults.

    ``None`` returns the default configuration.
    """
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    return config_from_dict(raw)
