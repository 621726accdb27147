"""Minimal NIfTI-1 reader/writer: single-file .nii, float32 payload.

The 348-byte header is described by a numpy structured dtype and parsed in
place, the same layout nibabel uses for `Nifti1Header`.
"""
import os
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from utils.errors import NiftiFormatError, NiftiTruncatedError, UnsupportedDatatypeError

header_dtd = [
    ('sizeof_hdr', 'i4'),      # 0; must be 348
    ('data_type', 'S10'),      # 4; unused
    ('db_name', 'S18'),        # 14; unused
    ('extents', 'i4'),         # 32; unused
    ('session_error', 'i2'),   # 36; unused
    ('regular', 'S1'),         # 38; unused
    ('dim_info', 'u1'),        # 39
    ('dim', 'i2', (8,)),       # 40; data array dimensions
    ('intent_p1', 'f4'),       # 56
    ('intent_p2', 'f4'),       # 60
    ('intent_p3', 'f4'),       # 64
    ('intent_code', 'i2'),     # 68
    ('datatype', 'i2'),        # 70
    ('bitpix', 'i2'),          # 72
    ('slice_start', 'i2'),     # 74
    ('pixdim', 'f4', (8,)),    # 76; grid spacings
    ('vox_offset', 'f4'),      # 108; offset to data in image file
    ('scl_slope', 'f4'),       # 112
    ('scl_inter', 'f4'),       # 116
    ('slice_end', 'i2'),       # 120
    ('slice_code', 'u1'),      # 122
    ('xyzt_units', 'u1'),      # 123
    ('cal_max', 'f4'),         # 124
    ('cal_min', 'f4'),         # 128
    ('slice_duration', 'f4'),  # 132
    ('toffset', 'f4'),         # 136
    ('glmax', 'i4'),           # 140
    ('glmin', 'i4'),           # 144
    ('descrip', 'S80'),        # 148; any text
    ('aux_file', 'S24'),       # 228
    ('qform_code', 'i2'),      # 252
    ('sform_code', 'i2'),      # 254
    ('quatern_b', 'f4'),       # 256
    ('quatern_c', 'f4'),       # 260
    ('quatern_d', 'f4'),       # 264
    ('qoffset_x', 'f4'),       # 268
    ('qoffset_y', 'f4'),       # 272
    ('qoffset_z', 'f4'),       # 276
    ('srow_x', 'f4', (4,)),    # 280
    ('srow_y', 'f4', (4,)),    # 296
    ('srow_z', 'f4', (4,)),    # 312
    ('intent_name', 'S16'),    # 328
    ('magic', 'S4'),           # 344; 'ni1\0' or 'n+1\0'
]
header_dtype = np.dtype(header_dtd)

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_FLOAT32 = 16
XYZT_MM = 2
VALID_MAGIC = (b'n+1', b'ni1')


@dataclass
class VolumeHeader:
    """Geometry of a 3D/4D volume; affine maps voxel indices to world mm."""
    dims: Tuple[int, ...]
    voxel_size: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default=None)
    datatype: str = 'float32'
    intent: str = ''

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) not in (3, 4) or min(self.dims) < 1:
            raise ValueError(f"dims must be 3 or 4 positive integers, got {self.dims}")
        # geometry is held at the float32 precision of pixdim/srow_*, so write -> read is exact
        self.voxel_size = tuple(float(np.float32(v)) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel_size must be 3 positive reals, got {self.voxel_size}")
        if self.affine is None:
            self.affine = np.diag(list(self.voxel_size) + [1.0])
        self.affine = np.asarray(self.affine, dtype=np.float32).astype(np.float64)
        if self.affine.shape != (4, 4) or not np.array_equal(self.affine[3], [0, 0, 0, 1]):
            raise ValueError("affine must be 4x4 with last row [0, 0, 0, 1]")
        if self.datatype != 'float32':
            raise UnsupportedDatatypeError(f"only float32 volumes are supported, got {self.datatype}")

    @property
    def spatial_dims(self) -> Tuple[int, int, int]:
        return self.dims[:3]

    def with_dims(self, dims, intent=None) -> 'VolumeHeader':
        """Same geometry, different grid (e.g. a 3D mask derived from a 4D FOD)."""
        return VolumeHeader(dims=tuple(dims), voxel_size=self.voxel_size,
                            affine=self.affine.copy(), intent=self.intent if intent is None else intent)


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ('quatern_b', 'quatern_c', 'quatern_d'))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pixdim = hdr['pixdim'].astype(np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = pixdim[1:4] * np.array([1.0, 1.0, qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * zooms
    affine[:3, 3] = [float(hdr['qoffset_x']), float(hdr['qoffset_y']), float(hdr['qoffset_z'])]
    return affine


def _parse_header(binblock: bytes):
    if len(binblock) < HEADER_SIZE:
        raise NiftiTruncatedError(f"header truncated: {len(binblock)} of {HEADER_SIZE} bytes")
    hdr = np.ndarray((), dtype=header_dtype.newbyteorder('<'), buffer=binblock[:HEADER_SIZE])
    if int(hdr['sizeof_hdr']) != HEADER_SIZE:
        swapped = np.ndarray((), dtype=header_dtype.newbyteorder('>'), buffer=binblock[:HEADER_SIZE])
        if int(swapped['sizeof_hdr']) != HEADER_SIZE:
            raise NiftiFormatError(f"sizeof_hdr is {int(hdr['sizeof_hdr'])}, expected {HEADER_SIZE}")
        hdr = swapped
        endian = '>'
    else:
        endian = '<'
    magic = bytes(hdr['magic']).rstrip(b'\x00')
    if magic not in VALID_MAGIC:
        raise NiftiFormatError(f"bad NIfTI-1 magic {bytes(hdr['magic'])!r}")
    return hdr, endian


def read_nifti(path):
    """Read a float32 NIfTI-1 file.

    Returns:
        (VolumeHeader, np.ndarray shaped like header.dims, x fastest in the file)
    """
    with open(path, 'rb') as f:
        hdr, endian = _parse_header(f.read(HEADER_SIZE))

        if int(hdr['datatype']) != DT_FLOAT32:
            raise UnsupportedDatatypeError(
                f"{path}: datatype code {int(hdr['datatype'])} unsupported, only float32 ({DT_FLOAT32})")

        ndim = int(hdr['dim'][0])
        if ndim not in (3, 4):
            raise NiftiFormatError(f"{path}: dim[0]={ndim}, only 3D and 4D volumes are supported")
        dims = tuple(int(d) for d in hdr['dim'][1:ndim + 1])

        n_bytes = int(np.prod(dims)) * 4
        if bytes(hdr['magic']).rstrip(b'\x00') == b'ni1':
            # header-only file, payload lives in the sibling .img
            with open(os.path.splitext(path)[0] + '.img', 'rb') as img:
                img.seek(int(hdr['vox_offset']))
                payload = img.read(n_bytes)
        else:
            f.seek(int(hdr['vox_offset']))
            payload = f.read(n_bytes)
    if len(payload) < n_bytes:
        raise NiftiTruncatedError(f"{path}: payload has {len(payload)} of {n_bytes} bytes")

    data = np.frombuffer(payload, dtype=np.dtype(np.float32).newbyteorder(endian))
    data = data.astype(np.float32).reshape(dims, order='F')

    slope, inter = float(hdr['scl_slope']), float(hdr['scl_inter'])
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = (data * np.float32(slope if slope != 0.0 else 1.0) + np.float32(inter)).astype(np.float32)

    if int(hdr['sform_code']) > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr['srow_x'], hdr['srow_y'], hdr['srow_z']
    elif int(hdr['qform_code']) > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([float(p) for p in hdr['pixdim'][1:4]] + [1.0])

    pixdim = [abs(float(p)) for p in hdr['pixdim'][1:4]]
    voxel_size = tuple(p if p > 0 else 1.0 for p in pixdim)
    intent = bytes(hdr['descrip']).split(b'\x00')[0].decode('utf-8', errors='replace')
    header = VolumeHeader(dims=dims, voxel_size=voxel_size, affine=affine, intent=intent)
    return header, data


def write_nifti(header: VolumeHeader, data, path):
    """Write a single-file NIfTI-1 (.nii): 348-byte header, 4 zero bytes, float32 LE payload."""
    data = np.asarray(data)
    n_expected = int(np.prod(header.dims))
    if data.size != n_expected:
        raise ValueError(f"data has {data.size} values, header dims {header.dims} need {n_expected}")
    if data.ndim > 1 and tuple(data.shape) != header.dims:
        raise ValueError(f"data shape {data.shape} does not match header dims {header.dims}")

    hdr = build_header(header)
    payload = np.asarray(data, dtype='<f4').reshape(-1, order='F') if data.ndim > 1 \
        else np.asarray(data, dtype='<f4')
    with open(path, 'wb') as f:
        f.write(hdr.tobytes())
        f.write(b'\x00' * (VOX_OFFSET - HEADER_SIZE))
        f.write(payload.tobytes())


def build_header(header: VolumeHeader) -> np.ndarray:
    """Little-endian NIfTI-1 header record for `header` (single-file, float32, sform)."""
    hdr = np.zeros((), dtype=header_dtype.newbyteorder('<'))
    hdr['sizeof_hdr'] = HEADER_SIZE
    hdr['regular'] = b'r'
    dim = np.ones(8, dtype=np.int16)
    dim[0] = len(header.dims)
    dim[1:len(header.dims) + 1] = header.dims
    hdr['dim'] = dim
    hdr['datatype'] = DT_FLOAT32
    hdr['bitpix'] = 32
    pixdim = np.ones(8, dtype=np.float32)
    pixdim[1:4] = header.voxel_size
    hdr['pixdim'] = pixdim
    hdr['vox_offset'] = float(VOX_OFFSET)
    hdr['scl_slope'] = 1.0
    hdr['scl_inter'] = 0.0
    hdr['xyzt_units'] = XYZT_MM
    hdr['descrip'] = header.intent.encode('utf-8')[:79]
    hdr['qform_code'] = 0
    hdr['sform_code'] = 1
    hdr['srow_x'] = header.affine[0]
    hdr['srow_y'] = header.affine[1]
    hdr['srow_z'] = header.affine[2]
    hdr['magic'] = b'n+1\x00'
    return hdr


def nifti_size(dims) -> int:
    """File size in bytes of a volume written by `write_nifti`."""
    return VOX_OFFSET + 4 * int(np.prod(dims))
