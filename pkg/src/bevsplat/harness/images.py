"""Binary PGM/PPM writers and a minimal reader for round-trip checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..rasterizer import BevFeatureMap

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)
BOTH_COLOR = (255, 255, 0)


def normalize_u8(a: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant (or empty) array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return np.zeros(a.shape, dtype=np.uint8)
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def _gray_source(obj, channel: int | None) -> np.ndarray:
    if isinstance(obj, BevFeatureMap):
        return obj.weight if channel is None else obj.values[channel]
    a = np.asarray(obj)
    if a.ndim == 3:
        a = a[0 if channel is None else channel]
    if a.ndim != 2:
        raise ValueError(f"need a 2D map, got shape {a.shape}")
    return a


def write_pgm(gray: np.ndarray, path: str | Path) -> None:
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def overlay_rgb(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    rgb[gt & ~pred] = GT_COLOR
    rgb[pred & ~gt] = PRED_COLOR
    rgb[pred & gt] = BOTH_COLOR
    return rgb


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def emit_image(obj, path: str | Path, mode: str = "pgm_gray", gt=None, channel: int | None = None) -> None:
    """Write ``obj`` as a grayscale PGM or, with ``gt``, an overlay PPM.

    For ``pgm_gray`` a feature map is shown through ``channel`` (its weight
    when ``channel`` is None). For ``ppm_overlay`` ``obj`` is the predicted
    mask: ground truth only is green, prediction only red, both yellow.
    """
    if mode == "pgm_gray":
        write_pgm(normalize_u8(_gray_source(obj, channel)), path)
    elif mode == "ppm_overlay":
        if gt is None:
            raise ValueError("ppm_overlay needs a ground-truth mask")
        write_ppm(overlay_rgb(_gray_source(obj, channel), gt), path)
    else:
        raise ValueError(f"unknown image mode {mode!r}")


def read_pnm(path: str | Path) -> tuple[str, np.ndarray]:
    """Parse the P5/P6 files written above (no comments, maxval 255)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise ValueError("not a P5/P6 file with maxval 255")
    w, h = (int(x) for x in parts[1].split())
    magic = parts[0].decode()
    depth = 3 if magic == "P6" else 1
    body = np.frombuffer(parts[3], dtype=np.uint8)
    if body.size != w * h * depth:
        raise ValueError(f"payload has {body.size} bytes, expected {w * h * depth}")
    return magic, body.reshape((h, w, 3) if depth == 3 else (h, w))
