"""Whole-volume super-resolution with overlap-blended sliding windows."""
import math
import sys
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from data.patching import PatchSpec, extract
from data.volumes import FodVolume
from models.swin_fod import FodSwinNet, predict_patches
from utils.logger import get_logger

logger = get_logger('inference')

BLENDS = ('uniform', 'cosine')


def axis_origins(dim, patch, stride) -> List[int]:
    """Multiples of stride, with the last origin clamped to dim - patch."""
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def blend_window(patch, kind='uniform') -> np.ndarray:
    """Per-voxel weight of a tile; strictly positive everywhere."""
    if kind == 'uniform':
        return np.ones(tuple(patch))
    if kind == 'cosine':
        profiles = [0.5 - 0.5 * np.cos(2 * np.pi * (np.arange(p) + 0.5) / p) for p in patch]
        return profiles[0][:, None, None] * profiles[1][None, :, None] * profiles[2][None, None, :]
    raise ValueError(f"blend must be one of {BLENDS}, got {kind!r}")


@dataclass
class TilePlan:
    dims: Tuple[int, int, int]
    patch: Tuple[int, int, int]
    stride: Tuple[int, int, int]
    origins: Tuple[List[int], List[int], List[int]]
    specs: List[PatchSpec]
    blend: np.ndarray

    def __len__(self):
        return len(self.specs)

    def weight_sum(self) -> np.ndarray:
        """Sum of blend weights at every voxel."""
        total = np.zeros(self.dims)
        for spec in self.specs:
            total[spec.slices] += self.blend
        return total


def tile_volume(dims, patch, overlap=0.25, blend='uniform') -> TilePlan:
    """Cover `dims` with patches at stride floor(patch * (1 - overlap)).

    Raises:
        ValueError: patch larger than the volume or overlap outside [0, 1)
    """
    dims, patch = tuple(int(d) for d in dims), tuple(int(p) for p in patch)
    if any(p > d for p, d in zip(patch, dims)) or min(patch) < 1:
        raise ValueError(f"patch {patch} does not fit volume {dims}")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    # tolerance keeps e.g. 96 * 0.75 from landing just below 72
    stride = tuple(max(1, math.floor(p * (1 - overlap) + 1e-9)) for p in patch)
    origins = tuple(axis_origins(d, p, s) for d, p, s in zip(dims, patch, stride))
    specs = [PatchSpec(origin=(x, y, z), size=patch)
             for x in origins[0] for y in origins[1] for z in origins[2]]
    return TilePlan(dims=dims, patch=patch, stride=stride, origins=origins, specs=specs,
                    blend=blend_window(patch, blend))


@dataclass
class SuperResolveResult:
    volume: FodVolume
    forward_passes: int
    # passes a voxel-wise model would need: one per (masked) voxel
    voxelwise_passes: int
    seconds: float

    @property
    def cost_ratio(self) -> float:
        return self.forward_passes / self.voxelwise_passes


def load_model(checkpoint: Union[str, FodSwinNet]) -> FodSwinNet:
    if isinstance(checkpoint, FodSwinNet):
        return checkpoint.eval()
    model, _ = FodSwinNet.from_pretrained(checkpoint)
    return model


def super_resolve(checkpoint, volume: FodVolume, overlap=0.25, blend='uniform', batch_size=2,
                  mask: Optional[np.ndarray] = None, plan: Optional[TilePlan] = None,
                  order: Optional[Sequence[int]] = None) -> SuperResolveResult:
    """Apply the model tile by tile and merge overlaps by weighted averaging.

    Args:
        checkpoint: checkpoint path or a loaded FodSwinNet
        mask: optional boolean brain mask; voxels outside keep their input value
        order: optional permutation of tile indices to process
    """
    model = load_model(checkpoint)
    cfg = model.config
    dims = volume.spatial_dims
    if volume.n_coeffs != cfg.in_channels:
        raise ValueError(f"volume has {volume.n_coeffs} coefficients, model expects {cfg.in_channels}")
    if any(p > d for p, d in zip(cfg.patch_size, dims)):
        raise ValueError(f"model patch {cfg.patch_size} larger than volume {dims}")
    if mask is not None and np.shape(mask) != dims:
        raise ValueError(f"mask shape {np.shape(mask)} != volume dims {dims}")
    if plan is None:
        plan = tile_volume(dims, cfg.patch_size, overlap, blend)
    if plan.dims != dims or plan.patch != cfg.patch_size:
        raise ValueError("tile plan does not match volume dims and model patch size")
    order = list(range(len(plan))) if order is None else list(order)
    if sorted(order) != list(range(len(plan))):
        raise ValueError("order must be a permutation of the tile indices")

    start = time.perf_counter()
    accum = np.zeros(dims + (cfg.out_channels,), dtype=np.float64)
    weights = np.zeros(dims, dtype=np.float64)
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    for batch in tqdm(batches, desc="Sliding window", leave=False):
        patches = np.stack([extract(volume, plan.specs[i]) for i in batch])
        outputs = predict_patches(model, patches)
        for i, out in zip(batch, outputs):
            spec = plan.specs[i]
            accum[spec.slices] += out.astype(np.float64) * plan.blend[..., None]
            weights[spec.slices] += plan.blend

    if np.any(weights <= 0):
        raise AssertionError("tile plan left voxels uncovered")
    result = accum / weights[..., None]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        result[~mask] = volume.data[~mask]
    seconds = time.perf_counter() - start

    voxelwise = int(mask.sum()) if mask is not None else int(np.prod(dims))
    logger.info(f"{len(plan)} forward passes for {dims} ({voxelwise} voxel-wise passes) in {seconds:.2f}s")
    return SuperResolveResult(volume=volume.copy_with(result.astype(np.float32)), forward_passes=len(plan),
                              voxelwise_passes=max(voxelwise, 1), seconds=seconds)


if __name__ == "__main__":
    from cli import run
    sys.exit(run(['infer'] + sys.argv[1:]))
