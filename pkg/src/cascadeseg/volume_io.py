"""Volume persistence: the native self-describing format and NIfTI-1 import.

The native format is a short ASCII header terminated by an ``end`` line,
followed by the raw little-endian payload in C order. Saving and loading
round-trip bit-exactly, which the training determinism contract relies on.
NIfTI-1 import covers the minimal uncompressed single-file subset needed to
read BraTS-style scans; everything beyond dims, spacing and payload is
ignored with a notice.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

VOLUME_FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "uint8": "|u1",
    "int16": "<i2",
}
_MAX_VOXELS = 2 ** 31

DEFAULT_AXES = "IPL"  # dim0 inferior-superior, dim1 posterior-anterior, dim2 left-right


class VolumeFormatError(ValueError):
    """A native volume file violates the format contract."""


class NiftiFormatError(ValueError):
    """A NIfTI-1 file is unsupported or malformed."""


@dataclass
class Volume:
    """One scalar volume plus the header metadata that travels with it."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "none"
    axes: str = DEFAULT_AXES

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise VolumeFormatError(f"volume data must be 3-D, got shape {self.data.shape}")
        if self.data.dtype.name not in _DTYPES:
            raise VolumeFormatError(
                f"unsupported element type {self.data.dtype.name}; "
                f"expected one of {sorted(_DTYPES)}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be three positive floats, got {self.spacing}")
        if len(self.axes) != 3:
            raise VolumeFormatError(f"axes declaration must name three axes, got {self.axes!r}")


def save_volume(volume, path):
    """Write a volume; ``load_volume`` reproduces it bit for bit."""
    data = volume.data
    header = (
        f"voxvol {VOLUME_FORMAT_VERSION}\n"
        f"dims {data.shape[0]} {data.shape[1]} {data.shape[2]}\n"
        f"dtype {data.dtype.name}\n"
        f"spacing {volume.spacing[0]!r} {volume.spacing[1]!r} {volume.spacing[2]!r}\n"
        f"modality {volume.modality}\n"
        f"axes {volume.axes}\n"
        "end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(data, dtype=_DTYPES[data.dtype.name]).tobytes())


def _parse_header(fh, path):
    fields = {}
    line = fh.readline()
    if not line.startswith(b"voxvol "):
        raise VolumeFormatError(f"{path}: not a volume file (missing 'voxvol' signature)")
    try:
        version = int(line.split()[1])
    except (IndexError, ValueError):
        raise VolumeFormatError(f"{path}: malformed version line {line!r}")
    if version != VOLUME_FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported volume format version {version}")
    for _ in range(16):
        line = fh.readline()
        if not line:
            raise VolumeFormatError(f"{path}: header ended without 'end' line")
        text = line.decode("ascii", errors="replace").strip()
        if text == "end":
            break
        parts = text.split(None, 1)
        if len(parts) != 2:
            raise VolumeFormatError(f"{path}: malformed header line {text!r}")
        fields[parts[0]] = parts[1]
    else:
        raise VolumeFormatError(f"{path}: header ended without 'end' line")
    for key in ("dims", "dtype", "spacing", "modality", "axes"):
        if key not in fields:
            raise VolumeFormatError(f"{path}: header missing required field {key!r}")
    return fields


def load_volume(path):
    """Read a native volume file back into a ``Volume``."""
    with open(path, "rb") as fh:
        fields = _parse_header(fh, path)
        try:
            dims = tuple(int(v) for v in fields["dims"].split())
        except ValueError:
            raise VolumeFormatError(f"{path}: malformed dims {fields['dims']!r}")
        if len(dims) != 3:
            raise VolumeFormatError(f"{path}: dims must have three entries, got {dims}")
        if any(d <= 0 for d in dims):
            raise VolumeFormatError(f"{path}: non-positive dimension in {dims}")
        n_voxels = dims[0] * dims[1] * dims[2]
        if n_voxels > _MAX_VOXELS:
            raise VolumeFormatError(
                f"{path}: dimension overflow, {dims} implies {n_voxels} voxels")
        dtype_name = fields["dtype"]
        if dtype_name not in _DTYPES:
            raise VolumeFormatError(f"{path}: unsupported element type {dtype_name!r}")
        try:
            spacing = tuple(float(v) for v in fields["spacing"].split())
        except ValueError:
            raise VolumeFormatError(f"{path}: malformed spacing {fields['spacing']!r}")
        dtype = np.dtype(_DTYPES[dtype_name])
        expected = n_voxels * dtype.itemsize
        payload = fh.read(expected + 1)
        if len(payload) < expected:
            raise VolumeFormatError(
                f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
        if len(payload) > expected:
            raise VolumeFormatError(f"{path}: trailing bytes after {expected}-byte payload")
        data = np.frombuffer(payload, dtype=dtype).reshape(dims)
        return Volume(data=data.astype(dtype_name, copy=True), spacing=spacing,
                      modality=fields["modality"], axes=fields["axes"])


# -- NIfTI-1 import ------------------------------------------------------------

_NIFTI_DTYPES = {2: "uint8", 4: "int16", 16: "float32"}
_NIFTI_HEADER_SIZE = 348


def import_nifti(path, modality="unknown"):
    """Import an uncompressed single-file NIfTI-1 volume.

    Supports magic ``n+1``, datatypes uint8 / int16 / float32, and honors
    ``vox_offset``. Dims and pixdim spacing are taken over; orientation,
    scaling and all other header content are ignored with a notice. Integer
    payloads widen losslessly to float32.
    """
    with open(path, "rb") as fh:
        head = fh.read(_NIFTI_HEADER_SIZE)
        if head[:2] == b"\x1f\x8b":
            raise NiftiFormatError(f"{path}: gzip-compressed NIfTI is not supported; "
                                   "decompress the file first")
        if len(head) < _NIFTI_HEADER_SIZE:
            raise NiftiFormatError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
        sizeof_hdr = struct.unpack("<i", head[0:4])[0]
        if sizeof_hdr != _NIFTI_HEADER_SIZE:
            if struct.unpack(">i", head[0:4])[0] == _NIFTI_HEADER_SIZE:
                raise NiftiFormatError(f"{path}: big-endian NIfTI is not supported")
            raise NiftiFormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
        magic = head[344:348]
        if magic != b"n+1\x00":
            raise NiftiFormatError(f"{path}: bad magic {magic!r}, expected b'n+1\\x00'")
        dim = struct.unpack("<8h", head[40:56])
        if dim[0] < 3 or any(d != 1 for d in dim[4:4 + max(0, dim[0] - 3)]):
            raise NiftiFormatError(
                f"{path}: only 3-D volumes are supported, got dim {dim[:dim[0] + 1]}")
        shape_xyz = (dim[1], dim[2], dim[3])
        if any(d <= 0 for d in shape_xyz):
            raise NiftiFormatError(f"{path}: non-positive dimension in {shape_xyz}")
        datatype = struct.unpack("<h", head[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise NiftiFormatError(
                f"{path}: unsupported NIfTI datatype code {datatype}; "
                f"supported: {sorted(_NIFTI_DTYPES)}")
        pixdim = struct.unpack("<8f", head[76:108])
        vox_offset = int(struct.unpack("<f", head[108:112])[0])
        if vox_offset < _NIFTI_HEADER_SIZE:
            raise NiftiFormatError(f"{path}: vox_offset {vox_offset} precedes the header end")
        scl_slope, scl_inter = struct.unpack("<2f", head[112:120])
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            log.info("%s: ignoring scl_slope/scl_inter (%g, %g)", path, scl_slope, scl_inter)
        log.info("%s: NIfTI orientation and remaining header fields are ignored", path)

        fh.seek(vox_offset)
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
        count = shape_xyz[0] * shape_xyz[1] * shape_xyz[2]
        payload = fh.read(count * dtype.itemsize)
        if len(payload) < count * dtype.itemsize:
            raise NiftiFormatError(
                f"{path}: truncated payload, expected {count * dtype.itemsize} bytes, "
                f"got {len(payload)}")
        # NIfTI stores x fastest; reshaping in C order yields (z, y, x)
        data = np.frombuffer(payload, dtype=dtype).reshape(
            (shape_xyz[2], shape_xyz[1], shape_xyz[0]))
        spacing = (float(pixdim[3]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)
        return Volume(data=data.astype(np.float32), spacing=spacing,
                      modality=modality, axes=DEFAULT_AXES)
