"""Dense 3D volumes with physical spacing, voxel neighborhoods, and MetaImage I/O.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x, ``j`` along y and
``k`` along z. On disk (MetaImage raw) the element order is x-fastest, which
is what the transpose in the reader/writer takes care of.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

VoxelIndex = tuple[int, int, int]

DEFAULT_LEGEND = {
    0: "background",
    1: "airway",
    2: "left_lung",
    3: "right_lung",
    4: "vessel",
}

_MET_TO_DTYPE = {
    "MET_SHORT": np.int16,
    "MET_UCHAR": np.uint8,
    "MET_FLOAT": np.float32,
}
_DTYPE_TO_MET = {
    np.dtype(np.int16): "MET_SHORT",
    np.dtype(np.uint8): "MET_UCHAR",
    np.dtype(np.float32): "MET_FLOAT",
}


class Connectivity(Enum):
    """Voxel adjacency: faces only (N6) or faces+edges+corners (N26)."""

    N6 = 6
    N26 = 26


def _check_geometry(dims, spacing, data):
    nx, ny, nz = dims
    if nx <= 0 or ny <= 0 or nz <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    if data.shape != (nx, ny, nz):
        raise ValueError(f"data shape {data.shape} does not match dims {dims}")


@dataclass(frozen=True)
class Volume3D:
    """Scalar volume (CT intensities in HU, or any derived scalar field).

    Immutable after construction; safe to share between workers.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        _check_geometry(self.data.shape, self.spacing, self.data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def index_to_physical(self, idx) -> np.ndarray:
        """Physical position (mm) of a voxel index: origin + index * spacing."""
        return np.asarray(self.origin) + np.asarray(idx) * np.asarray(self.spacing)

    def physical_to_index(self, pos) -> np.ndarray:
        """Continuous index of a physical position (inverse of index_to_physical)."""
        return (np.asarray(pos) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def astype(self, dtype) -> "Volume3D":
        return Volume3D(self.data.astype(dtype), self.spacing, self.origin)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing, self.origin)


@dataclass(frozen=True)
class LabelVolume:
    """Small-integer label volume with a legend mapping label -> name."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    legend: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LEGEND))

    def __post_init__(self):
        _check_geometry(self.data.shape, self.spacing, self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {self.data.dtype}")
        present = np.unique(self.data)
        missing = [int(v) for v in present if int(v) not in self.legend]
        if missing:
            raise ValueError(f"labels {missing} not present in legend")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def mask(self, label: int) -> np.ndarray:
        """Boolean mask of one label."""
        return self.data == label

    def with_data(self, data: np.ndarray, legend=None) -> "LabelVolume":
        return LabelVolume(data, self.spacing, self.origin,
                           dict(self.legend) if legend is None else legend)


_N6_OFFSETS = [(0, 0, -1), (0, -1, 0), (-1, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)]
_N26_OFFSETS = sorted(
    [(di, dj, dk)
     for dk in (-1, 0, 1) for dj in (-1, 0, 1) for di in (-1, 0, 1)
     if (di, dj, dk) != (0, 0, 0)],
    key=lambda o: (o[2], o[1], o[0]),
)


def neighbor_offsets(conn: Connectivity) -> list[VoxelIndex]:
    return _N6_OFFSETS if conn is Connectivity.N6 else _N26_OFFSETS


def neighbors(idx: VoxelIndex, conn: Connectivity, dims) -> list[VoxelIndex]:
    """In-bounds neighbors of idx, ordered lexicographically by (k, j, i)."""
    i, j, k = idx
    nx, ny, nz = dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise ValueError(f"index {idx} out of bounds for dims {dims}")
    out = []
    for di, dj, dk in neighbor_offsets(conn):
        a, b, c = i + di, j + dj, k + dk
        if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
            out.append((a, b, c))
    return out


def connectivity_structure(conn: Connectivity) -> np.ndarray:
    """3x3x3 boolean structuring array for scipy.ndimage operations."""
    s = np.zeros((3, 3, 3), bool)
    s[1, 1, 1] = True
    for di, dj, dk in neighbor_offsets(conn):
        s[1 + di, 1 + dj, 1 + dk] = True
    return s


# -- MetaImage I/O -----------------------------------------------------------

def _parse_header(path: str) -> dict:
    header = {}
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed MetaImage header line: {line!r}")
            key, value = line.split("=", 1)
            header[key.strip()] = value.strip()
    return header


def load_metaimage(path: str):
    """Read an .mhd/.raw pair into a Volume3D (MET_SHORT/MET_FLOAT) or a
    LabelVolume (MET_UCHAR). Data are read bit-exactly."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"MetaImage header not found: {path}")
    header = _parse_header(path)

    if header.get("NDims") != "3":
        raise ValueError(f"only NDims=3 supported, got {header.get('NDims')}")
    elem = header.get("ElementType")
    if elem not in _MET_TO_DTYPE:
        raise ValueError(f"unsupported ElementType {elem!r}")
    dims = tuple(int(v) for v in header["DimSize"].split())
    spacing = tuple(float(v) for v in header.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(v) for v in header.get("Offset", "0 0 0").split())
    msb = header.get("ElementByteOrderMSB", "False").lower() == "true"

    datafile = header.get("ElementDataFile")
    if datafile is None or datafile.upper() == "LOCAL":
        raise ValueError("ElementDataFile must name a separate raw file")
    raw_path = os.path.join(os.path.dirname(os.path.abspath(path)), datafile)
    if not os.path.exists(raw_path):
        raise FileNotFoundError(f"raw data file not found: {raw_path}")

    dtype = np.dtype(_MET_TO_DTYPE[elem]).newbyteorder(">" if msb else "<")
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise ValueError(
            f"raw payload is {actual} bytes but DimSize {dims} with "
            f"{elem} requires {expected}")
    flat = np.fromfile(raw_path, dtype=dtype)
    # raw is x-fastest: reshape as (nz, ny, nx) C-order, transpose to [i,j,k]
    data = np.ascontiguousarray(flat.reshape((nz, ny, nx)).transpose(2, 1, 0))
    data = data.astype(data.dtype.newbyteorder("="))

    if elem == "MET_UCHAR":
        present = np.unique(data)
        legend = dict(DEFAULT_LEGEND)
        for v in present:
            legend.setdefault(int(v), f"label_{int(v)}")
        return LabelVolume(data, spacing, origin, legend)
    return Volume3D(data, spacing, origin)


def save_metaimage(vol, path: str) -> None:
    """Write a Volume3D or LabelVolume as an .mhd header plus raw file.

    load_metaimage(save_metaimage(v)) reproduces dims, spacing, origin and
    data bit-exactly.
    """
    if isinstance(vol, LabelVolume):
        if vol.data.max(initial=0) > 255 or vol.data.min(initial=0) < 0:
            raise ValueError("label values must fit in an unsigned byte")
        data = vol.data.astype(np.uint8)
    elif isinstance(vol, Volume3D):
        dt = vol.data.dtype
        if dt == np.int16 or dt == np.float32:
            data = vol.data
        elif np.issubdtype(dt, np.integer):
            data = vol.data.astype(np.int16)
        else:
            data = vol.data.astype(np.float32)
    else:
        raise TypeError(f"expected Volume3D or LabelVolume, got {type(vol)}")

    nx, ny, nz = vol.dims
    elem = _DTYPE_TO_MET[data.dtype]
    base, ext = os.path.splitext(path)
    if ext != ".mhd":
        base = path
        path = path + ".mhd"
    raw_name = os.path.basename(base) + ".raw"

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "ElementByteOrderMSB = False",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = {:.9g} {:.9g} {:.9g}".format(*vol.spacing),
        "Offset = {:.9g} {:.9g} {:.9g}".format(*vol.origin),
        f"ElementType = {elem}",
        f"ElementDataFile = {raw_name}",
    ]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
    # transpose back to x-fastest raw order
    raw = np.ascontiguousarray(data.transpose(2, 1, 0))
    raw.tofile(os.path.join(os.path.dirname(os.path.abspath(path)), raw_name))
