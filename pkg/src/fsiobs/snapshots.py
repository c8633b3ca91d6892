"""Snapshot and trajectory files.

Field file:      one UTF-8 header line ``FSIOBS1 nx nz`` followed by
                 nx*nz little-endian float64, row-major with x fastest.
Trajectory file: header ``FSIOBS1T nx nz nt`` then nt+1 snapshots in the
                 same layout.
"""

from __future__ import annotations

import numpy as np

from .grid import Field, Grid, Trajectory


def _payload(values: np.ndarray) -> bytes:
    # x fastest: transpose so the flat order runs over x within each z row
    return np.ascontiguousarray(values.T, dtype="<f8").tobytes()


def _read_payload(buf: bytes, nx: int, nz: int) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<f8", count=nx * nz).reshape(nz, nx)
    return arr.T.copy()


def write_field(path, field: Field):
    with open(path, "wb") as fh:
        fh.write(f"FSIOBS1 {field.grid.nx} {field.grid.nz}\n".encode())
        fh.write(_payload(field.values))


def read_field(path, grid: Grid) -> Field:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if header[0] != "FSIOBS1":
            raise ValueError(f"bad magic {header[0]!r}, expected FSIOBS1")
        nx, nz = int(header[1]), int(header[2])
        if (nx, nz) != (grid.nx, grid.nz):
            raise ValueError(f"file is {nx}x{nz}, grid is {grid.nx}x{grid.nz}")
        return Field(_read_payload(fh.read(), nx, nz), grid)


def write_trajectory(path, traj: Trajectory):
    if traj.is_trace:
        raise ValueError("FSIOBS1T stores field trajectories only")
    g = traj.grid
    with open(path, "wb") as fh:
        fh.write(f"FSIOBS1T {g.nx} {g.nz} {g.nt}\n".encode())
        for n in range(g.nt + 1):
            fh.write(_payload(traj.values[n]))


def read_trajectory(path, grid: Grid) -> Trajectory:
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        if header[0] != "FSIOBS1T":
            raise ValueError(f"bad magic {header[0]!r}, expected FSIOBS1T")
        nx, nz, nt = (int(v) for v in header[1:4])
        if (nx, nz, nt) != (grid.nx, grid.nz, grid.nt):
            raise ValueError("file resolution does not match grid")
        raw = fh.read()
        slab = 8 * nx * nz
        vals = np.stack(
            [_read_payload(raw[n * slab : (n + 1) * slab], nx, nz) for n in range(nt + 1)]
        )
        return Trajectory(vals, grid)
