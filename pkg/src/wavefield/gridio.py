"""Measured/synthesized pressure grids and their on-disk container.

A ``FieldGrid`` is the package's exchange currency: M microphone positions
on a horizontal plane and an N x M time-major pressure matrix sampled at
``fs`` starting at ``t0``.  The binary container ("WFGD") is self-describing
and carries a SHA-256 integrity hash; corrupted files never load silently.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"WFGD"
_VERSION = 1


@dataclass
class FieldGrid:
    """Pressure signals p[n, m] at plane positions (x_m, y_m), sampled at fs.

    ``positions``: (M, 2) meters; ``pressure``: (N, M) Pa, time-major;
    ``z``: the constant plane height (meters).
    """

    positions: np.ndarray
    pressure: np.ndarray
    fs: float
    t0: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.pressure = np.atleast_2d(np.asarray(self.pressure, dtype=np.float64))
        if self.positions.shape[1] != 2:
            raise ValueError(f"positions must be (M, 2), got {self.positions.shape}")
        if self.pressure.shape[1] != self.positions.shape[0]:
            raise ValueError("pressure columns must match position count "
                             f"({self.pressure.shape} vs {self.positions.shape[0]} positions)")
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if not np.isfinite(self.pressure).all():
            raise ValueError("pressure contains non-finite samples")
        uniq = np.unique(self.positions, axis=0)
        if uniq.shape[0] != self.positions.shape[0]:
            raise ValueError("positions must be unique")

    @property
    def n_time(self) -> int:
        return self.pressure.shape[0]

    @property
    def n_pos(self) -> int:
        return self.positions.shape[0]

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_time) / self.fs

    @property
    def duration(self) -> float:
        return self.n_time / self.fs

    def subset(self, index) -> "FieldGrid":
        """New grid restricted to the given position indices."""
        index = np.asarray(index)
        return FieldGrid(self.positions[index], self.pressure[:, index],
                         self.fs, self.t0, self.z)

    def coords3(self) -> np.ndarray:
        """All (x, y, t) sample coordinates, one row per (time, position)."""
        grid = np.empty((self.n_time * self.n_pos, 3))
        grid[:, :2] = np.tile(self.positions, (self.n_time, 1))
        grid[:, 2] = np.repeat(self.times(), self.n_pos)
        return grid


def stride_subset_indices(nx: int, ny: int, stride: int) -> np.ndarray:
    """Row-major indices of every ``stride``-th point of an nx x ny grid."""
    keep = []
    for iy in range(0, ny, stride):
        for ix in range(0, nx, stride):
            keep.append(iy * nx + ix)
    return np.array(keep)


def write_grid(path, grid: FieldGrid) -> None:
    """Serialize to the WFGD container (all payload 64-bit little-endian)."""
    pos3 = np.column_stack([grid.positions,
                            np.full(grid.n_pos, grid.z)]).astype("<f8")
    blob = bytearray()
    blob += _MAGIC
    blob += np.uint32(_VERSION).tobytes()
    blob += np.float64(grid.fs).astype("<f8").tobytes()
    blob += np.float64(grid.t0).astype("<f8").tobytes()
    blob += np.uint32(grid.n_time).tobytes()
    blob += np.uint32(grid.n_pos).tobytes()
    blob += pos3.tobytes()
    blob += np.ascontiguousarray(grid.pressure, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_grid(path) -> FieldGrid:
    """Load a WFGD container, verifying magic, version, sizes, and hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 + 16 + 8 + 32 or raw[:4] != _MAGIC:
        raise ValueError("not a grid file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("grid file corrupted: hash mismatch")
    version = int(np.frombuffer(raw, "<u4", count=1, offset=4)[0])
    if version != _VERSION:
        raise ValueError(f"unsupported grid file version {version}")
    fs = float(np.frombuffer(raw, "<f8", count=1, offset=8)[0])
    t0 = float(np.frombuffer(raw, "<f8", count=1, offset=16)[0])
    n_time = int(np.frombuffer(raw, "<u4", count=1, offset=24)[0])
    n_pos = int(np.frombuffer(raw, "<u4", count=1, offset=28)[0])
    off = 32
    pos3 = np.frombuffer(body, "<f8", count=3 * n_pos, offset=off).reshape(n_pos, 3)
    off += 8 * 3 * n_pos
    pressure = np.frombuffer(body, "<f8", count=n_time * n_pos,
                             offset=off).reshape(n_time, n_pos)
    off += 8 * n_time * n_pos
    if off != len(body):
        raise ValueError("grid file corrupted: size mismatch")
    zs = pos3[:, 2]
    if n_pos and not np.all(zs == zs[0]):
        raise ValueError("position table is not planar (z varies)")
    z = float(zs[0]) if n_pos else 0.0
    return FieldGrid(pos3[:, :2].copy(), pressure.copy(), fs, t0, z)


def export_grid_csv(path, grid: FieldGrid) -> None:
    """Plot-ready CSV: header row of positions, then one row per sample.

    Columns: t, then p at each position labeled ``p(x|y)``.
    """
    header = "t," + ",".join(f"p({x:.6g}|{y:.6g})" for x, y in grid.positions)
    table = np.column_stack([grid.times(), grid.pressure])
    np.savetxt(path, table, delimiter=",", header=header, comments="")
