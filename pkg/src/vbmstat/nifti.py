"""Minimal NIfTI-1 single-file codec (.nii / .nii.gz).

Only what the pipeline needs: 3D scalar images of a handful of datatypes,
scaling, and the sform/qform affine. Extensions are skipped on read and
never written.
"""

import gzip
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes
from .errors import DatatypeError, NiftiFormatError, UnsupportedShapeError

HEADER_SIZE = 348
VOX_OFFSET = 352

# field layout of the 348-byte header
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(endian):
    fields = []
    for f in _HEADER_FIELDS:
        name, code = f[0], f[1]
        if code[0] in "iuf":
            code = endian + code
        fields.append((name, code) + f[2:])
    return np.dtype(fields)


HEADER_LE = _header_dtype("<")
HEADER_BE = _header_dtype(">")
assert HEADER_LE.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy kind
DATATYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
}
_CODES = {np.dtype(v).str[1:]: k for k, v in DATATYPES.items()}


def _open_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes):
    """Return ``(header record, endian char)``; endianness is detected from sizeof_hdr."""
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for dt, endian in ((HEADER_LE, "<"), (HEADER_BE, ">")):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=dt)[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348 in either byte order")
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise NiftiFormatError(f"bad NIfTI-1 magic {hdr['magic']!r}")
    if hdr["magic"] == b"ni1":
        raise NiftiFormatError("header/image pairs (.hdr/.img) are not supported")
    return hdr, endian


def quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = hdr["pixdim"].astype(float)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def header_affine(hdr) -> np.ndarray:
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    if hdr["qform_code"] > 0:
        return quaternion_affine(hdr)
    return np.diag(np.r_[np.abs(hdr["pixdim"][1:4].astype(float)), 1.0])


def load(path):
    """Read a NIfTI-1 file.

    Returns
    -------
    data : ndarray, float64, shape (nx, ny, nz)
    affine : ndarray (4, 4)
    """
    raw = _open_bytes(path)
    hdr, endian = parse_header(raw)
    dim = hdr["dim"].astype(int)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiFormatError(f"dim[0]={ndim} out of range")
    shape = list(dim[1 : ndim + 1])
    if ndim > 3 and any(s != 1 for s in shape[3:]):
        raise UnsupportedShapeError(f"{path}: image has shape {tuple(shape)}; only 3D volumes are supported")
    shape = (shape + [1, 1, 1])[:3]
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise DatatypeError(f"{path}: unsupported NIfTI datatype code {code}")
    dtype = np.dtype(endian + DATATYPES[code])
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiFormatError(f"{path}: truncated image data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.astype(np.float64).reshape(shape, order="F")
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    return data, header_affine(hdr)


def encode(data: np.ndarray, affine: np.ndarray, dtype="f8", descrip=b"vbmstat") -> bytes:
    """Serialise a 3D array as a little-endian NIfTI-1 image with sform_code 2."""
    dtype = np.dtype(dtype)
    key = dtype.str[1:]
    if key not in _CODES:
        raise DatatypeError(f"cannot write dtype {dtype}")
    data = np.asarray(data)
    if data.ndim != 3:
        raise UnsupportedShapeError(f"expected a 3D array, got shape {data.shape}")
    hdr = np.zeros((), dtype=HEADER_LE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *data.shape, 1, 1, 1, 1]
    hdr["datatype"] = _CODES[key]
    hdr["bitpix"] = dtype.itemsize * 8
    zooms = np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0))
    hdr["pixdim"] = [1.0, *zooms, 1.0, 0, 0, 0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = descrip[:79]
    hdr["sform_code"] = 2
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1"
    body = np.asarray(data, dtype=dtype.newbyteorder("<")).tobytes(order="F")
    return hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body


def save(path, data, affine, dtype="f8") -> None:
    path = Path(path)
    payload = encode(data, affine, dtype=dtype)
    if path.name.endswith(".gz"):
        # mtime=0 keeps compressed output byte-identical between runs
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    atomic_write_bytes(path, payload)
