"""Volumetric image container, NRRD/MetaImage I/O and interpolation.

Voxel ``(i, j, k)`` of a :class:`Volume` lives at world position
``origin + (i, j, k) * spacing`` (mm); arrays are indexed ``data[x, y, z]``
and serialised x-fastest.
"""
from __future__ import annotations

import gzip
import logging
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit
from scipy import ndimage as ndi

logger = logging.getLogger(__name__)

KINDS = ("intensity", "binary", "distance")
METHODS = ("nearest", "trilinear", "tricubic")

# accepted on-disk element types, keyed by numpy dtype
_NRRD_TYPES = {
    "short": np.int16, "int16": np.int16, "int16_t": np.int16,
    "signed short": np.int16, "short int": np.int16, "signed short int": np.int16,
    "uchar": np.uint8, "uint8": np.uint8, "uint8_t": np.uint8,
    "unsigned char": np.uint8,
    "float": np.float32, "double": np.float64,
}
_NRRD_NAMES = {np.dtype(np.int16): "short", np.dtype(np.uint8): "uchar",
               np.dtype(np.float32): "float", np.dtype(np.float64): "double"}
_MET_TYPES = {"MET_SHORT": np.int16, "MET_UCHAR": np.uint8,
              "MET_FLOAT": np.float32, "MET_DOUBLE": np.float64}
_MET_NAMES = {np.dtype(v): k for k, v in _MET_TYPES.items()}


class VolumeError(ValueError):
    """Malformed volume, file or sampling request."""


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with anisotropic spacing.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz)
        Voxel values indexed ``[x, y, z]``.
    spacing : tuple of float
        Voxel size in mm along x, y, z.
    origin : tuple of float
        World position (mm) of voxel ``(0, 0, 0)``.
    kind : {'intensity', 'binary', 'distance'}
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeError("every dimension must hold at least one voxel")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeError(f"spacing must be three positive numbers, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise VolumeError(f"origin must be three finite numbers, got {self.origin}")
        if self.kind not in KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.kind == "binary" and not np.isin(data, (0, 1)).all():
            raise VolumeError("binary volume holds values other than 0 and 1")
        if self.kind == "distance" and (data < 0).any():
            raise VolumeError("distance volume holds negative values")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def world_to_index(self, points):
        """Continuous voxel coordinates of world points, shape (..., 3)."""
        points = np.asarray(points, dtype=float)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def index_to_world(self, index):
        index = np.asarray(index, dtype=float)
        return np.asarray(self.origin) + index * np.asarray(self.spacing)

    def as_float(self) -> np.ndarray:
        """Contiguous float64 copy of the data, computed once."""
        cached = self.__dict__.get("_float")
        if cached is None:
            cached = np.ascontiguousarray(self.data, dtype=np.float64)
            object.__setattr__(self, "_float", cached)
        return cached

    def contains_index(self, index) -> bool:
        index = np.asarray(index)
        return bool(np.all(index >= 0) and np.all(index < np.asarray(self.dims)))


# --------------------------------------------------------------------------
# interpolation

def _catmull_rom_weights(t):
    t2 = t * t
    t3 = t2 * t
    return np.stack([
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ], axis=-1)


def sample_points(v: Volume, points, method: str = "trilinear", *, clamp: bool = False):
    """Interpolate ``v`` at many world points.

    Points up to half a voxel beyond the outermost voxel centres are clamped
    to the edge. Anything farther out raises, unless ``clamp`` is set, in
    which case it is clamped as well and reported in the returned mask.

    Returns
    -------
    values : ndarray, shape (N,)
    outside : ndarray of bool, shape (N,)
        Points that lay beyond the half-voxel margin.
    """
    if method not in METHODS:
        raise VolumeError(f"unknown interpolation method {method!r}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise VolumeError("cannot sample at a non-finite point")
    dims = np.asarray(v.dims)
    idx = v.world_to_index(pts)
    outside = np.any((idx < -0.5 - 1e-9) | (idx > dims - 0.5 + 1e-9), axis=1)
    if outside.any() and not clamp:
        bad = pts[np.argmax(outside)]
        raise VolumeError(f"point {tuple(bad)} lies outside the volume")
    idx = np.clip(idx, 0.0, dims - 1)
    data = v.data

    if method == "nearest":
        near = np.clip(np.floor(idx + 0.5).astype(np.intp), 0, dims - 1)
        return data[near[:, 0], near[:, 1], near[:, 2]].astype(float), outside

    base = np.floor(idx).astype(np.intp)
    frac = idx - base
    if method == "trilinear":
        base = np.minimum(base, np.maximum(dims - 2, 0))
        frac = idx - base
        out = np.zeros(len(pts))
        for dx in (0, 1):
            wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
            ix = np.minimum(base[:, 0] + dx, dims[0] - 1)
            for dy in (0, 1):
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                iy = np.minimum(base[:, 1] + dy, dims[1] - 1)
                for dz in (0, 1):
                    wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                    iz = np.minimum(base[:, 2] + dz, dims[2] - 1)
                    out += wx * wy * wz * data[ix, iy, iz]
        return out, outside

    return _tricubic(v.as_float(), idx), outside


def tricubic_reference(data, idx):
    """Vectorised Catmull-Rom interpolation at continuous indices ``idx``."""
    dims = np.asarray(data.shape)
    base = np.floor(idx).astype(np.intp)
    frac = idx - base
    offsets = np.arange(-1, 3)
    w = [_catmull_rom_weights(frac[:, a]) for a in range(3)]
    ix = np.clip(base[:, 0, None] + offsets, 0, dims[0] - 1)
    iy = np.clip(base[:, 1, None] + offsets, 0, dims[1] - 1)
    iz = np.clip(base[:, 2, None] + offsets, 0, dims[2] - 1)
    block = data[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]
    return np.einsum("nijk,ni,nj,nk->n", block, w[0], w[1], w[2], optimize=True)


@njit(cache=True)
def _tricubic(data, idx):
    nx, ny, nz = data.shape
    out = np.empty(idx.shape[0])
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for n in range(idx.shape[0]):
        bx = int(np.floor(idx[n, 0]))
        by = int(np.floor(idx[n, 1]))
        bz = int(np.floor(idx[n, 2]))
        for w, t in ((wx, idx[n, 0] - bx), (wy, idx[n, 1] - by), (wz, idx[n, 2] - bz)):
            t2 = t * t
            t3 = t2 * t
            w[0] = 0.5 * (-t3 + 2.0 * t2 - t)
            w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0)
            w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t)
            w[3] = 0.5 * (t3 - t2)
        acc = 0.0
        for i in range(4):
            xi = min(max(bx + i - 1, 0), nx - 1)
            for j in range(4):
                yj = min(max(by + j - 1, 0), ny - 1)
                wij = wx[i] * wy[j]
                for k in range(4):
                    zk = min(max(bz + k - 1, 0), nz - 1)
                    acc += wij * wz[k] * data[xi, yj, zk]
        out[n] = acc
    return out


def sample(v: Volume, p: Sequence[float], method: str = "trilinear") -> float:
    """Interpolated value of ``v`` at world point ``p`` (mm)."""
    values, _ = sample_points(v, np.asarray(p, dtype=float)[None, :], method)
    return float(values[0])


# --------------------------------------------------------------------------
# distance transform

def distance_transform(seg: Volume) -> Volume:
    """Exact Euclidean distance (mm) from each foreground voxel centre to the
    nearest background voxel centre.

    The grid is treated as surrounded by background, so a block that fills
    the whole volume still gets finite distances.
    """
    if seg.kind != "binary":
        raise VolumeError("distance transform needs a binary volume")
    mask = np.asarray(seg.data, dtype=bool)
    if not mask.any():
        raise VolumeError("segmentation has no foreground voxels")
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndi.distance_transform_edt(padded, sampling=seg.spacing)[1:-1, 1:-1, 1:-1]
    return Volume(dist, seg.spacing, seg.origin, kind="distance")


# --------------------------------------------------------------------------
# file I/O

def _infer_format(path) -> str:
    name = str(path).lower()
    if name.endswith((".nrrd", ".nhdr")):
        return "nrrd"
    if name.endswith((".mhd", ".mha")):
        return "metaimage"
    raise VolumeError(f"cannot infer volume format from {path!r}")


def _decode_payload(raw: bytes, dtype, dims, big_endian=False):
    dt = np.dtype(dtype).newbyteorder(">" if big_endian else "<")
    count = int(np.prod(dims))
    if len(raw) != count * dt.itemsize:
        raise VolumeError(
            f"payload holds {len(raw) // dt.itemsize} elements, header declares {count}")
    arr = np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))
    return arr.reshape(tuple(dims), order="F")


def _guess_kind(data, declared=None):
    if declared in KINDS:
        return declared
    if data.dtype == np.uint8 and np.isin(data, (0, 1)).all():
        return "binary"
    return "intensity"


def _read_nrrd(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(b"NRRD"):
            raise VolumeError(f"{path}: not an NRRD file")
        fields, keyvals = {}, {}
        while True:
            line = fh.readline()
            if not line:
                break
            line = line.decode("latin-1").rstrip("\r\n")
            if line == "":
                break
            if line.startswith("#"):
                continue
            if ":=" in line:
                k, val = line.split(":=", 1)
                keyvals[k.strip()] = val.strip()
                continue
            if ":" not in line:
                raise VolumeError(f"{path}: malformed header line {line!r}")
            k, val = line.split(":", 1)
            fields[k.strip().lower()] = val.strip()
        payload = fh.read()

    try:
        ndim = int(fields["dimension"])
        dims = [int(s) for s in fields["sizes"].split()]
        type_name = fields["type"].lower()
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed NRRD header ({exc})") from None
    if ndim != 3 or len(dims) != 3:
        raise VolumeError(f"{path}: only 3D volumes are supported")
    if type_name not in _NRRD_TYPES:
        raise VolumeError(f"{path}: unsupported element type {type_name!r}")

    spacing = [1.0, 1.0, 1.0]
    origin = [0.0, 0.0, 0.0]
    if "space directions" in fields:
        vecs = _parse_vectors(fields["space directions"], path)
        mat = np.array(vecs)
        if mat.shape != (3, 3) or np.count_nonzero(mat - np.diag(np.diag(mat))):
            raise VolumeError(f"{path}: non-diagonal space directions are not supported")
        diag = np.diag(mat)
        if np.any(diag <= 0):
            raise VolumeError(f"{path}: flipped or zero space directions are not supported")
        spacing = list(diag)
    elif "spacings" in fields:
        spacing = [float(s) for s in fields["spacings"].split()]
    if "space origin" in fields:
        origin = _parse_vectors(fields["space origin"], path)[0]

    datafile = fields.get("data file") or fields.get("datafile")
    if datafile:
        datafile = os.path.join(os.path.dirname(os.path.abspath(path)), datafile)
        with open(datafile, "rb") as fh:
            payload = fh.read()
    encoding = fields.get("encoding", "raw").lower()
    if encoding in ("gzip", "gz"):
        payload = gzip.decompress(payload)
    elif encoding != "raw":
        raise VolumeError(f"{path}: unsupported encoding {encoding!r}")
    big = fields.get("endian", "little").lower() == "big"
    data = _decode_payload(payload, _NRRD_TYPES[type_name], dims, big)
    kind = _guess_kind(data, keyvals.get("airtaper_kind"))
    return Volume(data, spacing, origin, kind=kind)


def _parse_vectors(text, path):
    out = []
    for chunk in text.replace(" ", "").split(")"):
        chunk = chunk.strip().lstrip("(")
        if not chunk:
            continue
        if chunk == "none":
            continue
        try:
            out.append([float(c) for c in chunk.split(",")])
        except ValueError:
            raise VolumeError(f"{path}: cannot parse vector {chunk!r}") from None
    return out


def _read_metaimage(path):
    fields = {}
    with open(path, "rb") as fh:
        while True:
            line = fh.readline()
            if not line:
                break
            text = line.decode("latin-1").strip()
            if not text:
                continue
            if "=" not in text:
                raise VolumeError(f"{path}: malformed header line {text!r}")
            k, val = text.split("=", 1)
            fields[k.strip()] = val.strip()
            if k.strip() == "ElementDataFile":
                break
        payload = fh.read()
    try:
        ndim = int(fields["NDims"])
        dims = [int(s) for s in fields["DimSize"].split()]
        etype = fields["ElementType"]
        datafile = fields["ElementDataFile"]
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed MetaImage header ({exc})") from None
    if ndim != 3 or len(dims) != 3:
        raise VolumeError(f"{path}: only 3D volumes are supported")
    if etype not in _MET_TYPES:
        raise VolumeError(f"{path}: unsupported element type {etype!r}")
    if "TransformMatrix" in fields:
        mat = np.array([float(s) for s in fields["TransformMatrix"].split()])
        if mat.size != 9 or not np.allclose(mat.reshape(3, 3), np.eye(3)):
            raise VolumeError(f"{path}: non-identity direction cosines are not supported")
    spacing = [float(s) for s in fields.get("ElementSpacing", "1 1 1").split()]
    origin = [float(s) for s in fields.get("Offset", fields.get("Position", "0 0 0")).split()]
    if datafile != "LOCAL":
        with open(os.path.join(os.path.dirname(os.path.abspath(path)), datafile), "rb") as fh:
            payload = fh.read()
    if fields.get("CompressedData", "False").lower() == "true":
        import zlib
        payload = zlib.decompress(payload)
    big = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    data = _decode_payload(payload, _MET_TYPES[etype], dims, big.lower() == "true")
    kind = _guess_kind(data, fields.get("AirtaperKind"))
    return Volume(data, spacing, origin, kind=kind)


def load_volume(path, format: str | None = None) -> Volume:
    """Read a NRRD (attached or detached header) or MetaImage volume."""
    format = format or _infer_format(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if format == "nrrd":
        return _read_nrrd(path)
    if format == "metaimage":
        return _read_metaimage(path)
    raise VolumeError(f"unknown volume format {format!r}")


def _payload_dtype(v: Volume):
    dt = np.dtype(v.data.dtype)
    if dt in _NRRD_NAMES:
        return dt
    if v.kind == "binary" or dt == np.bool_:
        return np.dtype(np.uint8)
    return np.dtype(np.float64)


def write_volume(v: Volume, path, format: str | None = None, *, compress: bool = False):
    """Write ``v`` as NRRD (attached header) or MetaImage (.mhd + .raw, or .mha)."""
    format = format or _infer_format(path)
    dt = _payload_dtype(v)
    raw = np.asarray(v.data, dtype=dt.newbyteorder("<")).tobytes(order="F")
    if format == "nrrd":
        header = [
            "NRRD0004",
            f"type: {_NRRD_NAMES[dt]}",
            "dimension: 3",
            "space: left-posterior-superior",
            "sizes: " + " ".join(str(n) for n in v.dims),
            "space directions: " + " ".join(
                "(" + ",".join(repr(v.spacing[a]) if b == a else "0" for b in range(3)) + ")"
                for a in range(3)),
            "kinds: domain domain domain",
            "endian: little",
            f"encoding: {'gzip' if compress else 'raw'}",
            "space origin: (" + ",".join(repr(o) for o in v.origin) + ")",
            f"airtaper_kind:={v.kind}",
        ]
        if compress:
            raw = gzip.compress(raw, mtime=0)
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n\n").encode("latin-1"))
            fh.write(raw)
        return
    if format != "metaimage":
        raise VolumeError(f"unknown volume format {format!r}")
    local = str(path).lower().endswith(".mha")
    datafile = "LOCAL" if local else os.path.splitext(os.path.basename(path))[0] + ".raw"
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        "Offset = " + " ".join(repr(o) for o in v.origin),
        "ElementSpacing = " + " ".join(repr(s) for s in v.spacing),
        "DimSize = " + " ".join(str(n) for n in v.dims),
        f"AirtaperKind = {v.kind}",
        f"ElementType = {_MET_NAMES[dt]}",
        f"ElementDataFile = {datafile}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("latin-1"))
        if local:
            fh.write(raw)
    if not local:
        with open(os.path.join(os.path.dirname(os.path.abspath(path)), datafile), "wb") as fh:
            fh.write(raw)
