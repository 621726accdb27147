"""Tissue-gated 3D patch sampling, extraction and insertion."""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from data.volumes import FodVolume, TissueFractions
from utils.errors import SamplingError

TISSUE_THRESHOLD = 0.5


@dataclass(frozen=True)
class PatchSpec:
    origin: Tuple[int, int, int]
    size: Tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, 'origin', tuple(int(o) for o in self.origin))
        object.__setattr__(self, 'size', tuple(int(s) for s in self.size))
        if len(self.origin) != 3 or len(self.size) != 3:
            raise ValueError("origin and size must have 3 entries")
        if min(self.origin) < 0 or min(self.size) < 1:
            raise ValueError(f"invalid patch origin {self.origin} / size {self.size}")

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    def check_within(self, dims):
        if any(o + s > d for o, s, d in zip(self.origin, self.size, dims)):
            raise ValueError(f"patch {self.origin}+{self.size} exceeds volume {tuple(dims)}")


def tissue_indicator(masks: TissueFractions) -> np.ndarray:
    """Voxels whose summed WM+CGM+SGM fraction exceeds one half."""
    return masks.total() > TISSUE_THRESHOLD


def tissue_fraction(masks: TissueFractions, spec: PatchSpec) -> float:
    """Share of patch voxels that are majority tissue."""
    spec.check_within(masks.spatial_dims)
    return float(np.mean(tissue_indicator(masks)[spec.slices]))


class TissueCounter:
    """Summed-volume table of the tissue indicator: O(1) tissue count of any box."""

    def __init__(self, masks: TissueFractions):
        self.dims = masks.spatial_dims
        table = tissue_indicator(masks).astype(np.int64).cumsum(0).cumsum(1).cumsum(2)
        self.table = np.pad(table, ((1, 0), (1, 0), (1, 0)))

    def fraction(self, spec: PatchSpec) -> float:
        (x0, y0, z0), (sx, sy, sz) = spec.origin, spec.size
        x1, y1, z1 = x0 + sx, y0 + sy, z0 + sz
        t = self.table
        count = (t[x1, y1, z1] - t[x0, y1, z1] - t[x1, y0, z1] - t[x1, y1, z0]
                 + t[x0, y0, z1] + t[x0, y1, z0] + t[x1, y0, z0] - t[x0, y0, z0])
        return count / (sx * sy * sz)


def sample_patch(masks: Union[TissueFractions, TissueCounter], size, min_frac, rng_seed, max_attempts=1000,
                 ) -> PatchSpec:
    """Rejection-sample a uniformly distributed in-bounds patch with enough tissue.

    `rng_seed` is an int or a `numpy.random.Generator` (to draw many patches
    from one stream).

    Raises:
        SamplingError: no acceptable origin within max_attempts draws
    """
    counter = masks if isinstance(masks, TissueCounter) else TissueCounter(masks)
    size = tuple(int(s) for s in size)
    dims = counter.dims
    if any(s > d for s, d in zip(size, dims)) or min(size) < 1:
        raise ValueError(f"patch size {size} does not fit volume {dims}")
    if not 0 <= min_frac <= 1:
        raise ValueError(f"min_frac must be in [0, 1], got {min_frac}")
    rng = np.random.default_rng(rng_seed)
    high = np.array(dims) - np.array(size) + 1
    for _ in range(max_attempts):
        spec = PatchSpec(origin=tuple(rng.integers(0, high)), size=size)
        if counter.fraction(spec) >= min_frac:
            return spec
    raise SamplingError(
        f"no {size} patch with tissue fraction >= {min_frac} in {max_attempts} attempts; "
        f"tissue masks look degenerate")


def _array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, FodVolume) else np.asarray(vol)


def extract(vol, spec: PatchSpec) -> np.ndarray:
    """Copy of the sub-block [sx, sy, sz, C] (no aliasing with the source)."""
    data = _array(vol)
    spec.check_within(data.shape[:3])
    return data[spec.slices].copy()


def insert(vol, spec: PatchSpec, patch) -> np.ndarray:
    """Write `patch` into the volume array in place and return that array."""
    data = _array(vol)
    spec.check_within(data.shape[:3])
    patch = np.asarray(patch)
    if patch.shape[:3] != spec.size:
        raise ValueError(f"patch shape {patch.shape} does not match spec size {spec.size}")
    data[spec.slices] = patch
    return data
