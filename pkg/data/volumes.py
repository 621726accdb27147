import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from data.nifti_io import VolumeHeader, read_nifti, write_nifti

TISSUES = ('wm', 'cgm', 'sgm')


@dataclass
class FodVolume:
    """SH coefficient volume [X, Y, Z, C] with its geometry."""
    data: np.ndarray
    header: VolumeHeader

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"FOD volume must be 4D [X,Y,Z,C], got shape {self.data.shape}")
        if tuple(self.data.shape) != self.header.dims:
            self.header = self.header.with_dims(self.data.shape)

    @property
    def spatial_dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def n_coeffs(self) -> int:
        return self.data.shape[3]

    @classmethod
    def load(cls, path) -> 'FodVolume':
        header, data = read_nifti(path)
        return cls(data=data, header=header)

    def save(self, path):
        write_nifti(self.header, self.data.astype(np.float32), path)

    def copy_with(self, data) -> 'FodVolume':
        return FodVolume(data=data, header=self.header.with_dims(np.shape(data)))


@dataclass
class TissueFractions:
    """Co-registered WM / cortical GM / subcortical GM fractions in [0, 1]."""
    wm: np.ndarray
    cgm: np.ndarray
    sgm: np.ndarray
    header: VolumeHeader

    def __post_init__(self):
        shapes = {np.shape(self.wm), np.shape(self.cgm), np.shape(self.sgm)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3:
            raise ValueError(f"tissue fractions must be three 3D volumes of one shape, got {shapes}")

    @property
    def spatial_dims(self) -> Tuple[int, int, int]:
        return tuple(np.shape(self.wm))

    def total(self) -> np.ndarray:
        return self.wm + self.cgm + self.sgm

    @classmethod
    def load_dir(cls, directory) -> 'TissueFractions':
        volumes = {}
        header = None
        for tissue in TISSUES:
            header, volumes[tissue] = read_nifti(os.path.join(directory, f'{tissue}.nii'))
        return cls(header=header.with_dims(header.spatial_dims), **volumes)

    def save_dir(self, directory):
        os.makedirs(directory, exist_ok=True)
        header = self.header.with_dims(self.spatial_dims)
        for tissue in TISSUES:
            write_nifti(header.with_dims(header.dims, intent=f'{tissue} fraction'),
                        getattr(self, tissue).astype(np.float32),
                        os.path.join(directory, f'{tissue}.nii'))
