"""Plain geometric data types shared by the kinematics and collision layers."""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Capsule:
    """Swept sphere attached to a chain frame.

    ``joint`` is the index of the frame the endpoints live in: ``k`` is the
    frame after joint ``k`` rotates, ``-1`` the chain base frame.
    """

    joint: int
    a: tuple
    b: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")
        object.__setattr__(self, "a", tuple(float(x) for x in self.a))
        object.__setattr__(self, "b", tuple(float(x) for x in self.b))

    def to_dict(self):
        return {"joint": self.joint, "a": list(self.a), "b": list(self.b), "radius": self.radius}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["joint"]), d["a"], d["b"], float(d["radius"]))


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense voxel map. Voxel (ix, iy, iz) spans origin + [i, i+1) * voxel_size.

    ``occupancy`` is a bool array of shape (nz, ny, nx) so that a C-order
    flatten is row-major with x fastest.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    occupancy: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        dims = tuple(int(d) for d in self.dims)
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.size != dims[0] * dims[1] * dims[2]:
            raise ValueError("occupancy length does not match dims")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "occupancy", occ.reshape(dims[2], dims[1], dims[0]))

    @classmethod
    def empty(cls, origin=(0.0, 0.0, 0.0), voxel_size=0.02, dims=(1, 1, 1)):
        dims = tuple(int(d) for d in dims)
        return cls(np.asarray(origin, float), voxel_size, dims,
                   np.zeros((dims[2], dims[1], dims[0]), bool))

    @property
    def n_occupied(self):
        return int(self.occupancy.sum())

    def voxel_index(self, points):
        """Integer (ix, iy, iz) of the voxel containing each point (floor rule)."""
        pts = np.atleast_2d(np.asarray(points, float))
        return np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)

    def in_bounds(self, idx):
        idx = np.atleast_2d(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)

    def is_occupied(self, points):
        idx = self.voxel_index(points)
        ok = self.in_bounds(idx)
        out = np.zeros(len(idx), bool)
        i = idx[ok]
        out[ok] = self.occupancy[i[:, 2], i[:, 1], i[:, 0]]
        return out

    def occupied_indices(self):
        """(m, 3) array of (ix, iy, iz) for occupied voxels."""
        iz, iy, ix = np.nonzero(self.occupancy)
        return np.stack([ix, iy, iz], axis=1)

    def occupied_boxes(self):
        idx = self.occupied_indices()
        lo = self.origin + idx * self.voxel_size
        return lo, lo + self.voxel_size

    def bits(self):
        return self.occupancy.reshape(-1)

    def to_dict(self):
        packed = np.packbits(self.bits().astype(np.uint8), bitorder="little")
        return {
            "origin": [float(x) for x in self.origin],
            "voxel_size": float(self.voxel_size),
            "dims": list(self.dims),
            "encoding": "base64",
            "bits": base64.b64encode(packed.tobytes()).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, d):
        dims = tuple(int(x) for x in d["dims"])
        n = dims[0] * dims[1] * dims[2]
        enc = d.get("encoding", "base64")
        if enc == "base64":
            raw = np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8)
        elif enc == "hex":
            raw = np.frombuffer(bytes.fromhex(d["bits"]), dtype=np.uint8)
        else:
            raise ValueError(f"unknown grid encoding {enc!r}")
        bits = np.unpackbits(raw, bitorder="little")[:n].astype(bool)
        if bits.size != n:
            raise ValueError("bitset shorter than dims")
        return cls(np.asarray(d["origin"], float), float(d["voxel_size"]), dims, bits)
