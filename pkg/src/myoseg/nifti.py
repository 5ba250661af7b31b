"""Minimal, bit-exact NIfTI-1 single-file (.nii / .nii.gz) reading and writing.

Only the fields this pipeline needs are interpreted: dims, pixdim,
datatype/bitpix, vox_offset, scl_slope/scl_inter and the magic.  The rest
of the 348-byte header (including qform/sform) is carried as opaque bytes
so a read-modify-write round trip preserves it.  Little-endian files only;
big-endian input is detected and rejected rather than byte-swapped.

On-disk element order is Fortran (first spatial dim fastest), matching the
format; dim[1..3] correspond to the in-memory (D, H, W) extents and
pixdim[1..3] to the spacing triple.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype codes supported by this reader/writer.
DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
CODE_FOR_DTYPE = {np.dtype(v): k for k, v in DTYPE_CODES.items()}
BITPIX = {2: 8, 4: 16, 16: 32}

MAX_CLASS_ID = 4


class NiftiError(ValueError):
    """Structured NIfTI parsing/writing failure; names the offending field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _positive_triple(name: str, values) -> tuple:
    values = tuple(values)
    if len(values) != 3 or any(v <= 0 for v in values):
        raise ValueError(f"{name} must be three positive values, got {values}")
    return values


@dataclass
class Volume:
    """3D scalar intensity grid with voxel spacing in millimetres.

    ``data`` keeps one of the supported on-disk dtypes (uint8, int16,
    float32); float64 input is narrowed to float32 at construction so
    write/read round trips are exact.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    raw_header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"Volume data must be rank-3, got shape {arr.shape}")
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        if arr.dtype not in (np.uint8, np.int16, np.float32):
            raise ValueError(f"Volume dtype {arr.dtype} unsupported (use uint8, int16 or float32)")
        self.data = arr
        self.spacing = _positive_triple("spacing", tuple(float(s) for s in self.spacing))
        _positive_triple("extents", arr.shape)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """3D integer grid holding one class id per voxel, ids in 0..4."""

    classes: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    raw_header: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 3:
            raise ValueError(f"LabelMap classes must be rank-3, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"LabelMap classes must be integers, got dtype {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > MAX_CLASS_ID):
            raise ValueError(
                f"LabelMap class ids span [{arr.min()}, {arr.max()}], outside [0, {MAX_CLASS_ID}]"
            )
        self.classes = arr.astype(np.uint8)
        self.spacing = _positive_triple("spacing", tuple(float(s) for s in self.spacing))
        _positive_triple("extents", arr.shape)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.classes.shape


# Header field offsets (single-file NIfTI-1, 348-byte header).
_OFF_SIZEOF = 0      # i
_OFF_DIM = 40        # 8h
_OFF_DATATYPE = 70   # h
_OFF_BITPIX = 72     # h
_OFF_PIXDIM = 76     # 8f
_OFF_VOXOFF = 108    # f
_OFF_SCL_SLOPE = 112  # f
_OFF_SCL_INTER = 116  # f
_OFF_XYZT = 123      # b
_OFF_MAGIC = 344     # 4s


def _read_file(path) -> bytes:
    path = str(path)
    try:
        with open(path, "rb") as f:
            head = f.read(2)
            f.seek(0)
            if head == b"\x1f\x8b":
                try:
                    return gzip.decompress(f.read())
                except (OSError, EOFError, zlib.error) as exc:
                    raise NiftiError(f"{path}: corrupt gzip stream ({exc})", field="gzip") from exc
            return f.read()
    except FileNotFoundError:
        raise NiftiError(f"{path}: file not found", field="path") from None


def read_nifti(path, as_labels: bool | None = None) -> Volume | LabelMap:
    """Parse a single-file NIfTI-1 volume or label map.

    ``as_labels=None`` infers the kind from the datatype (uint8 reads as a
    LabelMap); pass ``False`` to force a Volume or ``True`` to require a
    label map (class ids validated against the 0..4 scheme).
    """
    blob = _read_file(path)
    if len(blob) < HEADER_SIZE:
        raise NiftiError(
            f"{path}: truncated header ({len(blob)} bytes, need {HEADER_SIZE})", field="sizeof_hdr"
        )
    hdr = blob[:HEADER_SIZE]
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, _OFF_SIZEOF)
    if sizeof_hdr != HEADER_SIZE:
        (swapped,) = struct.unpack_from(">i", hdr, _OFF_SIZEOF)
        if swapped == HEADER_SIZE:
            raise NiftiError(f"{path}: big-endian NIfTI-1 is not supported", field="sizeof_hdr")
        raise NiftiError(f"{path}: sizeof_hdr is {sizeof_hdr}, must be {HEADER_SIZE}", field="sizeof_hdr")
    dim = struct.unpack_from("<8h", hdr, _OFF_DIM)
    if not 1 <= dim[0] <= 7:
        swapped = struct.unpack_from(">8h", hdr, _OFF_DIM)
        if 1 <= swapped[0] <= 7:
            raise NiftiError(f"{path}: big-endian NIfTI-1 is not supported", field="dim")
        raise NiftiError(f"{path}: dim[0]={dim[0]} outside 1..7", field="dim")
    magic = struct.unpack_from("<4s", hdr, _OFF_MAGIC)[0]
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"{path}: magic {magic!r} is not the single-file 'n+1' form", field="magic")
    if dim[0] < 3:
        raise NiftiError(f"{path}: need 3 spatial dims, header declares {dim[0]}", field="dim")
    if any(d > 1 for d in dim[4:4 + max(0, dim[0] - 3)]):
        raise NiftiError(f"{path}: 4D+ payloads unsupported (dim={dim})", field="dim")
    extents = dim[1:4]
    if any(d < 1 for d in extents):
        raise NiftiError(f"{path}: non-positive spatial extent in dim={dim[:4]}", field="dim")
    (datatype,) = struct.unpack_from("<h", hdr, _OFF_DATATYPE)
    if datatype not in DTYPE_CODES:
        raise NiftiError(
            f"{path}: datatype code {datatype} unsupported (supported: {sorted(DTYPE_CODES)})",
            field="datatype",
        )
    (bitpix,) = struct.unpack_from("<h", hdr, _OFF_BITPIX)
    if bitpix != BITPIX[datatype]:
        raise NiftiError(
            f"{path}: bitpix {bitpix} inconsistent with datatype {datatype} "
            f"(expected {BITPIX[datatype]})",
            field="bitpix",
        )
    pixdim = struct.unpack_from("<8f", hdr, _OFF_PIXDIM)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiError(f"{path}: non-positive voxel spacing pixdim[1..3]={spacing}", field="pixdim")
    (vox_offset_f,) = struct.unpack_from("<f", hdr, _OFF_VOXOFF)
    vox_offset = int(vox_offset_f)
    if vox_offset_f != vox_offset or vox_offset < VOX_OFFSET:
        raise NiftiError(
            f"{path}: vox_offset {vox_offset_f} invalid (need integer >= {VOX_OFFSET})",
            field="vox_offset",
        )
    np_dtype = np.dtype(DTYPE_CODES[datatype]).newbyteorder("<")
    count = int(extents[0]) * int(extents[1]) * int(extents[2])
    need = vox_offset + count * np_dtype.itemsize
    if len(blob) < need:
        raise NiftiError(
            f"{path}: truncated payload ({len(blob)} bytes, need {need} for "
            f"{count} voxels at offset {vox_offset})",
            field="payload",
        )
    flat = np.frombuffer(blob, dtype=np_dtype, count=count, offset=vox_offset)
    data = flat.reshape(extents, order="F").copy()
    (slope,) = struct.unpack_from("<f", hdr, _OFF_SCL_SLOPE)
    (inter,) = struct.unpack_from("<f", hdr, _OFF_SCL_INTER)
    scaled = slope not in (0.0, 1.0) or inter != 0.0

    spacing = tuple(float(s) for s in spacing)
    if as_labels is None:
        as_labels = datatype == 2 and not scaled
    if as_labels:
        if scaled:
            raise NiftiError(f"{path}: scl_slope/scl_inter scaling invalid on a label map", field="scl_slope")
        if not np.issubdtype(data.dtype, np.integer):
            raise NiftiError(f"{path}: label map requires an integer datatype, got code {datatype}", field="datatype")
        if data.size and data.max() > MAX_CLASS_ID:
            raise NiftiError(
                f"{path}: label value {int(data.max())} exceeds the maximum class id {MAX_CLASS_ID}",
                field="payload",
            )
        return LabelMap(classes=data, spacing=spacing, raw_header=bytes(hdr))
    if scaled:
        data = (data.astype(np.float32) * np.float32(slope)) + np.float32(inter)
    return Volume(data=data, spacing=spacing, raw_header=bytes(hdr))


def _build_header(template: bytes | None, extents, spacing, dtype_code: int) -> bytearray:
    if template is not None and len(template) == HEADER_SIZE:
        hdr = bytearray(template)
    else:
        hdr = bytearray(HEADER_SIZE)
        struct.pack_into("<b", hdr, _OFF_XYZT, 2)  # spatial units: millimetres
    struct.pack_into("<i", hdr, _OFF_SIZEOF, HEADER_SIZE)
    struct.pack_into("<8h", hdr, _OFF_DIM, 3, extents[0], extents[1], extents[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, _OFF_DATATYPE, dtype_code)
    struct.pack_into("<h", hdr, _OFF_BITPIX, BITPIX[dtype_code])
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, 1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, _OFF_VOXOFF, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, _OFF_SCL_SLOPE, 1.0)
    struct.pack_into("<f", hdr, _OFF_SCL_INTER, 0.0)
    struct.pack_into("<4s", hdr, _OFF_MAGIC, MAGIC_SINGLE)
    return hdr


def write_nifti(path, obj: Volume | LabelMap) -> None:
    """Emit a little-endian single-file NIfTI-1; gzip when the path ends '.gz'.

    Label maps are written as uint8; volumes keep their dtype.  Output is
    byte-deterministic (gzip mtime pinned to 0).
    """
    path = str(path)
    if isinstance(obj, LabelMap):
        data = obj.classes
        dtype_code = 2
    elif isinstance(obj, Volume):
        data = obj.data
        dtype_code = CODE_FOR_DTYPE[np.dtype(data.dtype)]
    else:
        raise TypeError(f"write_nifti expects a Volume or LabelMap, got {type(obj).__name__}")
    hdr = _build_header(obj.raw_header, obj.extents, obj.spacing, dtype_code)
    payload = np.ascontiguousarray(data).astype(np.dtype(DTYPE_CODES[dtype_code]).newbyteorder("<"), copy=False)
    blob = bytes(hdr) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    try:
        if path.endswith(".gz"):
            with open(path, "wb") as f:
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(blob)
        else:
            with open(path, "wb") as f:
                f.write(blob)
    except OSError as exc:
        raise NiftiError(f"{path}: write failed ({exc})", field="path") from exc
