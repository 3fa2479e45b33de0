"""HEALPix grids in the nested scheme.

Pixels are addressed by their nested index; ``(face, x, y)`` coordinates are
obtained by splitting off the base tile and de-interleaving the remaining bits
(even bits give ``x``, odd bits give ``y``).  Neighbor slots follow the usual
HEALPix convention ``SW, W, NW, N, NE, E, SE, S`` in face-local coordinates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

MISSING = -1

NEIGHBOR_SLOTS = ("SW", "W", "NW", "N", "NE", "E", "SE", "S")
_XOFF = np.array([-1, -1, 0, 1, 1, 1, 0, -1])
_YOFF = np.array([0, 1, 1, 1, 0, -1, -1, -1])

# Face crossed into, indexed by [offset class][face]; offset class = 4 + dx + 3 dy.
_FACEARRAY = np.array(
    [
        [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9],  # S
        [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],  # SE
        [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1],  # E
        [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],  # SW
        [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],  # center
        [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],  # NE
        [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1],  # W
        [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],  # NW
        [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],  # N
    ]
)
# Coordinate transform on crossing, indexed by [offset class][face row];
# bit 1 flips x, bit 2 flips y, bit 4 swaps x and y.
_SWAPARRAY = np.array(
    [[0, 0, 3], [0, 0, 6], [0, 0, 0], [0, 0, 5], [0, 0, 0], [5, 0, 0], [0, 0, 0], [6, 0, 0], [3, 0, 0]]
)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4])
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7])


class InvalidResolutionError(ValueError):
    pass


class FaceCoord(NamedTuple):
    face: int
    x: int
    y: int


def _check_nside(n_side) -> int:
    try:
        n = int(n_side)
    except (TypeError, ValueError):
        raise InvalidResolutionError(f"n_side must be an integer, got {n_side!r}") from None
    if n != n_side or n < 1 or n & (n - 1):
        raise InvalidResolutionError(f"n_side must be a positive power of two, got {n_side!r}")
    return n


def _check_index(n_side: int, ipix) -> np.ndarray:
    ipix = np.asarray(ipix)
    if ipix.dtype.kind not in "iu":
        raise IndexError("pixel indices must be integers")
    ipix = ipix.astype(np.int64)
    if np.any(ipix < 0) or np.any(ipix >= 12 * n_side * n_side):
        raise IndexError(f"pixel index out of range for n_side={n_side}")
    return ipix


def _compact_bits(v: np.ndarray) -> np.ndarray:
    # Gather the even bits of v into the low half.
    v = v & 0x5555555555555555
    v = (v | (v >> 1)) & 0x3333333333333333
    v = (v | (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v | (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v | (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v & 0x00000000FFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


def _nest2xyf(n_side: int, ipix: np.ndarray):
    npface = n_side * n_side
    face = ipix // npface
    off = ipix & (npface - 1)
    return _compact_bits(off), _compact_bits(off >> 1), face


def _xyf2nest(n_side: int, x, y, face):
    return face * (n_side * n_side) + _spread_bits(x) + (_spread_bits(y) << 1)


def nest_to_face_xy(n_side: int, ipix):
    """Split a nested index into ``(face, x, y)``.

    Scalars give a :class:`FaceCoord`; arrays give a tuple of arrays.
    """
    n_side = _check_nside(n_side)
    scalar = np.ndim(ipix) == 0
    x, y, f = _nest2xyf(n_side, _check_index(n_side, ipix))
    if scalar:
        return FaceCoord(int(f), int(x), int(y))
    return f, x, y


def face_xy_to_nest(n_side: int, fc):
    n_side = _check_nside(n_side)
    face, x, y = (np.asarray(v) for v in fc)
    for name, v, hi in (("face", face, 12), ("x", x, n_side), ("y", y, n_side)):
        if v.dtype.kind not in "iu" or np.any(v < 0) or np.any(v >= hi):
            raise IndexError(f"{name} out of range for n_side={n_side}")
    out = _xyf2nest(n_side, x.astype(np.int64), y.astype(np.int64), face.astype(np.int64))
    return int(out) if np.ndim(out) == 0 else out


def _neighbor_table(n_side: int) -> np.ndarray:
    n_pix = 12 * n_side * n_side
    ipix = np.arange(n_pix, dtype=np.int64)
    ix, iy, face = _nest2xyf(n_side, ipix)
    table = np.empty((n_pix, 8), dtype=np.int64)
    for k in range(8):
        x = ix + _XOFF[k]
        y = iy + _YOFF[k]
        cls = np.full(n_pix, 4)
        cls = np.where(x < 0, cls - 1, np.where(x >= n_side, cls + 1, cls))
        cls = np.where(y < 0, cls - 3, np.where(y >= n_side, cls + 3, cls))
        x = np.mod(x, n_side)
        y = np.mod(y, n_side)
        f = _FACEARRAY[cls, face]
        bits = _SWAPARRAY[cls, face >> 2]
        x = np.where(bits & 1, n_side - x - 1, x)
        y = np.where(bits & 2, n_side - y - 1, y)
        x, y = np.where(bits & 4, y, x), np.where(bits & 4, x, y)
        valid = f >= 0
        nb = _xyf2nest(n_side, x, y, np.where(valid, f, 0))
        table[:, k] = np.where(valid, nb, MISSING)
    return table


def xyf_to_ang(n_side: int, x, y, face):
    """Angles of continuous face coordinates; ``x, y`` in pixel units.

    Pixel centers sit at ``x + 0.5``; corners at integer positions.
    """
    x = np.asarray(x, dtype=np.float64) / n_side
    y = np.asarray(y, dtype=np.float64) / n_side
    face = np.asarray(face)
    jr = _JRLL[face] - x - y
    nr = np.where(jr < 1, jr, np.where(jr > 3, 4 - jr, 1.0))
    z = np.where(jr < 1, 1 - nr * nr / 3.0, np.where(jr > 3, nr * nr / 3.0 - 1, (2 - jr) * 2.0 / 3.0))
    tmp = _JPLL[face] * nr + x - y
    tmp = np.where(tmp < 0, tmp + 8, tmp)
    tmp = np.where(tmp >= 8, tmp - 8, tmp)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(nr < 1e-15, 0.0, 0.25 * np.pi * tmp / np.where(nr < 1e-15, 1.0, nr))
    return np.arccos(np.clip(z, -1.0, 1.0)), phi


def pix2ang(n_side: int, ipix):
    """Colatitude and longitude (radians) of nested pixel centers."""
    n_side = _check_nside(n_side)
    ipix = _check_index(n_side, ipix)
    ix, iy, face = _nest2xyf(n_side, ipix)
    jr = _JRLL[face] * n_side - ix - iy - 1
    north = jr < n_side
    south = jr > 3 * n_side
    nr = np.where(north, jr, np.where(south, 4 * n_side - jr, n_side))
    fact2 = 4.0 / (12 * n_side * n_side)
    z = np.where(
        north,
        1 - nr * nr * fact2,
        np.where(south, nr * nr * fact2 - 1, (2 * n_side - jr) * (2.0 / (3 * n_side))),
    )
    tmp = _JPLL[face] * nr + ix - iy
    tmp = np.where(tmp < 0, tmp + 8 * nr, tmp)
    phi = np.where(nr == n_side, np.pi * tmp / (4.0 * n_side), 0.25 * np.pi * tmp / nr)
    theta = np.arccos(z)
    if theta.ndim == 0:
        return float(theta), float(phi)
    return theta, phi


def ang2pix(n_side: int, theta, phi):
    """Nested index of the pixel containing each direction."""
    n_side = _check_nside(n_side)
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(phi))):
        raise ValueError("angles must be finite")
    if np.any(theta < 0) or np.any(theta > np.pi):
        raise ValueError("colatitude must lie in [0, pi]")
    theta, phi = np.broadcast_arrays(theta, phi)
    z = np.cos(theta)
    za = np.abs(z)
    tt = np.mod(phi, 2 * np.pi) / (0.5 * np.pi)
    tt = np.where(tt >= 4.0, 0.0, tt)

    # equatorial belt
    temp1 = n_side * (0.5 + tt)
    temp2 = n_side * (z * 0.75)
    jp = np.floor(temp1 - temp2).astype(np.int64)
    jm = np.floor(temp1 + temp2).astype(np.int64)
    order = n_side.bit_length() - 1
    ifp = jp >> order
    ifm = jm >> order
    face_eq = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))
    x_eq = jm & (n_side - 1)
    y_eq = n_side - (jp & (n_side - 1)) - 1

    # polar caps
    ntt = np.minimum(3, tt.astype(np.int64))
    tp = tt - ntt
    tmp = n_side * np.sqrt(3 * (1 - za))
    jp_p = np.minimum(np.floor(tp * tmp).astype(np.int64), n_side - 1)
    jm_p = np.minimum(np.floor((1.0 - tp) * tmp).astype(np.int64), n_side - 1)
    north = z >= 0
    x_p = np.where(north, n_side - jm_p - 1, jp_p)
    y_p = np.where(north, n_side - jp_p - 1, jm_p)
    face_p = np.where(north, ntt, ntt + 8)

    eq = za <= 2.0 / 3.0
    out = _xyf2nest(
        n_side,
        np.where(eq, x_eq, x_p),
        np.where(eq, y_eq, y_p),
        np.where(eq, face_eq, face_p),
    )
    return int(out) if out.ndim == 0 else out


def parent(ipix):
    return np.asarray(ipix) // 4 if np.ndim(ipix) else int(ipix) // 4


def children(ipix):
    return [4 * int(ipix) + b for b in range(4)]


def hierarchy(ipix):
    """Return ``(parent, children)`` of a nested index."""
    return parent(ipix), children(ipix)


@dataclass(frozen=True, eq=False)
class HealpixGrid:
    """Full-sphere nested HEALPix grid with a materialized neighbor table.

    The grid also serves as the pixel *frame* consumed by the operators in
    :mod:`spherecodec.ops`; :class:`spherecodec.ops.PatchFrame` is the
    sub-range counterpart.
    """

    n_side: int
    neighbor_table: np.ndarray = field(repr=False)

    @property
    def n_pix(self) -> int:
        return 12 * self.n_side * self.n_side

    @property
    def start(self) -> int:
        return 0

    def neighbors(self, ipix: int) -> list[int]:
        ipix = int(_check_index(self.n_side, ipix))
        return [int(v) for v in self.neighbor_table[ipix]]

    def centers(self):
        return _centers(self.n_side)

    def coarser(self) -> HealpixGrid:
        if self.n_side < 2:
            raise InvalidResolutionError("cannot coarsen a grid with n_side=1")
        return build_grid(self.n_side // 2)

    def finer(self) -> HealpixGrid:
        return build_grid(self.n_side * 2)

    def dump_neighbors_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ipix", *NEIGHBOR_SLOTS])
            for i, row in enumerate(self.neighbor_table):
                w.writerow([i, *row.tolist()])


@lru_cache(maxsize=None)
def _centers(n_side: int):
    theta, phi = pix2ang(n_side, np.arange(12 * n_side * n_side))
    theta.setflags(write=False)
    phi.setflags(write=False)
    return theta, phi


@lru_cache(maxsize=None)
def build_grid(n_side: int) -> HealpixGrid:
    n_side = _check_nside(n_side)
    table = _neighbor_table(n_side)
    table.setflags(write=False)
    return HealpixGrid(n_side, table)


def neighbors(grid: HealpixGrid, ipix: int) -> list[int]:
    return grid.neighbors(ipix)
