import os
from typing import Optional

import numpy as np
import pandas as pd
from PIL import Image

from utils.logger import get_logger
from utils.metrics import AccMap

logger = get_logger('visualization')

AXES = {'x': 0, 'y': 1, 'z': 2}


def acc_to_gray(values: np.ndarray) -> np.ndarray:
    """Linear map [-1, 1] -> [0, 255]; undefined (NaN) -> 0."""
    scaled = np.round((np.clip(values, -1.0, 1.0) + 1.0) * 127.5)
    return np.where(np.isnan(values), 0, scaled).astype(np.uint8)


def take_slice(acc_map: AccMap, axis='z', index=None) -> np.ndarray:
    """2D slice of the map; index defaults to the middle slice."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {list(AXES)}, got {axis!r}")
    dim = acc_map.spatial_dims[AXES[axis]]
    index = dim // 2 if index is None else int(index)
    if not 0 <= index < dim:
        raise ValueError(f"slice index {index} out of range [0, {dim}) along {axis}")
    return np.take(acc_map.values, index, axis=AXES[axis])


def export_heatmap_slice(acc_map: AccMap, axis, index, path, region_mask: Optional[np.ndarray] = None):
    """Write an ACC heatmap slice as 8-bit PGM plus `<stem>_mask.pgm` and `<stem>.csv`.

    The sidecar mask is 255 where the ACC is defined. Voxels outside
    `region_mask` are treated as undefined.

    Returns:
        dict with the written paths
    """
    values = take_slice(acc_map, axis, index).astype(np.float64)
    if region_mask is not None:
        region = take_slice(AccMap(np.asarray(region_mask, dtype=np.float64)), axis, index) > 0
        values = np.where(region, values, np.nan)

    stem = os.path.splitext(path)[0]
    paths = {'image': f'{stem}.pgm', 'mask': f'{stem}_mask.pgm', 'csv': f'{stem}.csv'}
    directory = os.path.dirname(os.path.abspath(paths['image']))
    os.makedirs(directory, exist_ok=True)

    Image.fromarray(acc_to_gray(values)).save(paths['image'])
    Image.fromarray(np.where(np.isnan(values), 0, 255).astype(np.uint8)).save(paths['mask'])
    pd.DataFrame(values).to_csv(paths['csv'], index=False, header=False, float_format='%.17g')
    logger.info(f"Heatmap slice {axis}={index} written to {paths['image']}")
    return paths
