from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from data.patching import PatchSpec, TissueCounter, extract, sample_patch, tissue_indicator
from data.phantom import Subject
from utils.logger import get_logger

logger = get_logger('dataset')

STD_FLOOR = 1e-6


def sample_patch_set(subjects: Sequence[Subject], n_patches, size, min_frac, seed, max_attempts=1000,
                     ) -> List[Tuple[int, PatchSpec]]:
    """`n_patches` tissue-gated patches over the subjects, drawn from one seeded stream.

    Each draw picks a subject uniformly, then an origin inside it.
    """
    if not subjects:
        raise ValueError("need at least one subject to sample patches from")
    rng = np.random.default_rng(seed)
    counters = [TissueCounter(s.fractions) for s in subjects]
    specs = []
    for _ in range(n_patches):
        idx = int(rng.integers(len(subjects)))
        specs.append((idx, sample_patch(counters[idx], size, min_frac, rng, max_attempts)))
    return specs


@dataclass(frozen=True)
class ChannelStatistics:
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray


def channel_statistics(subjects: Sequence[Subject], residual=False) -> ChannelStatistics:
    """Per-SH-channel mean and std over majority-tissue voxels of the training pairs.

    Input channels without spread (truncated degrees are exactly zero) get std 1.
    Output statistics describe what the head regresses: the targets, or
    target - input in residual mode; their std is floored at STD_FLOOR so a
    constant channel is reproduced by its mean.
    """
    inputs, outputs = [], []
    for s in subjects:
        tissue = tissue_indicator(s.fractions)
        x = s.input.data[tissue].astype(np.float64)
        y = s.target.data[tissue].astype(np.float64)
        inputs.append(x)
        outputs.append(y - x if residual else y)
    inputs, outputs = np.concatenate(inputs, axis=0), np.concatenate(outputs, axis=0)
    if inputs.shape[0] == 0:
        raise ValueError("no tissue voxels to compute channel statistics from")
    input_std = inputs.std(axis=0)
    return ChannelStatistics(
        input_mean=inputs.mean(axis=0),
        input_std=np.where(input_std > STD_FLOOR, input_std, 1.0),
        output_mean=outputs.mean(axis=0),
        output_std=np.maximum(outputs.std(axis=0), STD_FLOOR),
    )


def to_channels_first(patch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """[X, Y, Z, C] numpy patch -> (C, X, Y, Z) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(patch, -1, 0))).to(dtype)


class FodPatchDataset(Dataset):
    """(input patch, target patch) pairs, channel-first, for a fixed list of patch specs."""

    def __init__(self, subjects: Sequence[Subject], specs: Sequence[Tuple[int, PatchSpec]], dtype=torch.float32):
        self.subjects = list(subjects)
        self.specs = list(specs)
        self.dtype = dtype
        for idx, spec in self.specs:
            spec.check_within(self.subjects[idx].input.spatial_dims)

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, i):
        idx, spec = self.specs[i]
        subject = self.subjects[idx]
        return (to_channels_first(extract(subject.input, spec), self.dtype),
                to_channels_first(extract(subject.target, spec), self.dtype))


def get_dataloader(dataset, batch_size, shuffle=False, seed=0):
    """Batches in a fixed order unless shuffled with a seeded generator."""
    generator = torch.Generator().manual_seed(seed) if shuffle else None
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
    )
