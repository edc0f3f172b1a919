"""Gramian Angular Field encoding of OHLC windows.

A series is min-max scaled to [0, 1], mapped to polar angles
phi = arccos(x), and expanded into the symmetric summation matrix
G[i][j] = cos(phi_i + phi_j) with index 0 the earliest bar. Because
phi stays in [0, pi/2], the diagonal cos(2 phi_i) inverts exactly:
x_i = sqrt((1 + G[i][i]) / 2), so the normalized series round-trips
through its encoding.

A window's four price series become four (W, W) planes stacked into a
(W, W, 4) tensor. By default all four series share one min/max per window
("joint" mode) so the relative geometry of bodies and shadows survives;
"per-series" normalizes each channel independently.

Constant series have no min-max image; they map to 0.5 everywhere, the
midpoint of the target interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .market_data import Window

_TOL = 1e-12

NORMALIZATION_MODES = ("joint", "per-series")


def minmax_scale(series) -> np.ndarray:
    """Rescale into [0, 1]; a constant series maps to all 0.5."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DomainError("series must be a non-empty 1-D sequence")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


@dataclass(frozen=True)
class AngleSeries:
    """Polar image of a normalized series: angles plus time radii.

    The radius r_i = t_i / N (1-based position over length) is carried for
    completeness but the summation matrix consumes only the angles.
    """

    phi: np.ndarray
    radius: np.ndarray


def to_angles(series) -> AngleSeries:
    """Map a [0, 1] series to angles in [0, pi/2]."""
    x = np.asarray(series, dtype=np.float64)
    if x.min() < -_TOL or x.max() > 1.0 + _TOL:
        raise DomainError("normalized series must lie in [0, 1]")
    x = np.clip(x, 0.0, 1.0)
    n = x.size
    return AngleSeries(phi=np.arccos(x), radius=np.arange(1, n + 1) / n)


def gaf_matrix(angles: AngleSeries) -> np.ndarray:
    """Symmetric summation matrix cos(phi_i + phi_j)."""
    phi = angles.phi
    if phi.size < 1:
        raise DomainError("angle series must be non-empty")
    return np.cos(phi[:, None] + phi[None, :])


def decode_diagonal(matrix) -> np.ndarray:
    """Recover the normalized series from a GAF matrix's diagonal.

    Valid because the encoding keeps phi in [0, pi/2], where cos phi >= 0;
    sqrt((1 + cos 2 phi) / 2) is then exactly cos phi.
    """
    d = np.diagonal(np.asarray(matrix, dtype=np.float64))
    if d.min() < -1.0 - _TOL or d.max() > 1.0 + _TOL:
        raise DomainError("diagonal entries must lie in [-1, 1]")
    return np.sqrt((1.0 + np.clip(d, -1.0, 1.0)) / 2.0)


def encode_series(series) -> np.ndarray:
    """minmax-scale, polar-map and expand one raw series."""
    return gaf_matrix(to_angles(minmax_scale(series)))


def encode_window(window: Window, mode: str = "joint") -> np.ndarray:
    """Encode a window as a (W, W, 4) tensor, one plane per price series."""
    if mode not in NORMALIZATION_MODES:
        raise DomainError(f"mode must be one of {NORMALIZATION_MODES}, got {mode!r}")
    channels = window.channels()  # (4, W)
    if mode == "joint":
        lo, hi = channels.min(), channels.max()
        if hi == lo:
            normalized = np.full_like(channels, 0.5)
        else:
            normalized = (channels - lo) / (hi - lo)
    else:
        normalized = np.stack([minmax_scale(row) for row in channels])
    planes = [gaf_matrix(to_angles(row)) for row in normalized]
    return np.stack(planes, axis=-1)


def encode_windows(windows, mode: str = "joint") -> np.ndarray:
    """Encode a sequence of windows into an (n, W, W, 4) batch."""
    return np.stack([encode_window(w, mode) for w in windows])


def encode_dataset(labeled, mode: str = "joint") -> tuple[np.ndarray, np.ndarray]:
    """Encode labeled windows into (inputs, integer labels)."""
    x = encode_windows([item.window for item in labeled], mode)
    y = np.array([int(item.label) for item in labeled], dtype=np.int64)
    return x, y


def save_encoded(path, x: np.ndarray, y: np.ndarray, mode: str) -> None:
    """Persist an encoded dataset; round-trips bit-exactly via load_encoded."""
    if mode not in NORMALIZATION_MODES:
        raise DomainError(f"unknown normalization mode {mode!r}")
    if x.ndim != 4 or x.shape[1] != x.shape[2] or len(y) != len(x):
        raise DomainError("expected inputs (n, W, W, C) with matching labels")
    np.savez(
        Path(path),
        inputs=np.ascontiguousarray(x, dtype=np.float64),
        labels=np.asarray(y, dtype=np.int64),
        window=np.int64(x.shape[1]),
        channel_count=np.int64(x.shape[3]),
        sample_count=np.int64(x.shape[0]),
        mode=np.bytes_(mode.encode()),
    )


def load_encoded(path) -> tuple[np.ndarray, np.ndarray, str]:
    """Read a cache written by save_encoded; returns (inputs, labels, mode)."""
    with np.load(Path(path)) as data:
        x = data["inputs"]
        y = data["labels"]
        mode = bytes(data["mode"]).decode()
        if x.shape != (int(data["sample_count"]), int(data["window"]),
                       int(data["window"]), int(data["channel_count"])):
            raise DomainError(f"{path}: header inconsistent with payload")
    return x, y, mode
