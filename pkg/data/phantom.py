"""Synthetic FOD phantoms with known fiber geometry and tissue fractions.

A phantom is an ellipsoidal "brain" in an otherwise empty volume:

- WM core split along x into a single-fiber region (orientation bending with z),
  a two-fiber crossing and a three-fiber crossing;
- a cortical GM band on the outer shell of the ellipsoid with a WM/CGM
  partial-volume transition;
- a subcortical GM blob inside the WM with a WM/SGM transition;
- zero FOD and zero fractions outside the ellipsoid.

`degrade` turns a target into a low-angular-quality input by truncating,
damping and perturbing its coefficients.
"""
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
import yaml
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from data.nifti_io import VolumeHeader
from data.volumes import FodVolume, TissueFractions
from utils.config import DegradeConfig
from utils.logger import get_logger
from utils.sh import LMAX, fit_coeffs, lmax_for, n_coeffs, sh_degrees, sphere_quadrature

logger = get_logger('phantom')

DEFAULT_KAPPA = 50.0
TISSUE_TOTAL = 0.98    # summed tissue fraction inside the brain
ISO_LEVEL = 0.3        # isotropic GM signal relative to a unit-integral fiber FOD
VOXEL_SIZE = (1.25, 1.25, 1.25)


@dataclass
class FiberConfig:
    """Fiber population of one region: 1-3 directions with weights summing to <= 1."""
    directions: Sequence[Sequence[float]]
    weights: Sequence[float]
    kernel_sharpness: float = DEFAULT_KAPPA

    def __post_init__(self):
        dirs = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("fiber directions must be unit vectors")
        weights = np.asarray(self.weights, dtype=np.float64)
        if not 1 <= len(dirs) <= 3 or len(weights) != len(dirs):
            raise ValueError("1 to 3 fibers, one weight per direction")
        if np.any(weights <= 0) or weights.sum() > 1 + 1e-12:
            raise ValueError(f"weights must be positive and sum to <= 1, got {weights.tolist()}")
        if self.kernel_sharpness <= 0:
            raise ValueError("kernel_sharpness must be positive")
        self.directions = dirs
        self.weights = weights


@lru_cache(maxsize=1)
def _projection_design():
    """Dense quadrature grid; a weighted fit on it is the exact SH projection."""
    return sphere_quadrature()


def fiber_kernel(dirs, axis, kappa) -> np.ndarray:
    """Axially symmetric kernel exp(kappa((d.a)^2 - 1)), antipodally symmetric by construction."""
    cos = dirs @ np.asarray(axis, dtype=np.float64)
    return np.exp(kappa * (cos ** 2 - 1.0))


def make_fiber_fod(cfg: FiberConfig, lmax=LMAX) -> np.ndarray:
    """SH coefficients of sum_i w_i K(d . d_i), each kernel normalised to unit integral."""
    dirs, weights = _projection_design()
    samples = np.zeros(dirs.shape[0])
    for direction, w in zip(cfg.directions, cfg.weights):
        kernel = fiber_kernel(dirs, direction, cfg.kernel_sharpness)
        samples += w * kernel / np.sum(weights * kernel)
    return fit_coeffs(samples, dirs, lmax=lmax, weights=weights)


def isotropic_fod(level=1.0, lmax=LMAX) -> np.ndarray:
    """DC-only FOD with integral `level` over the sphere."""
    c = np.zeros(n_coeffs(lmax))
    c[0] = level / np.sqrt(4 * np.pi)
    return c


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _in_plane(angle, elevation=0.0) -> np.ndarray:
    return _unit([np.cos(elevation) * np.cos(angle), np.cos(elevation) * np.sin(angle), np.sin(elevation)])


@dataclass
class PhantomLayout:
    """Random geometry of one phantom, drawn from its seed."""
    center: np.ndarray
    radii: np.ndarray
    x_single_end: float
    x_double_end: float
    single_azimuth: float
    single_elevation: float
    double_azimuth: float
    double_angle: float
    double_weights: Tuple[float, float]
    triple_rotation: np.ndarray
    blob_center: np.ndarray
    blob_radius: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> 'PhantomLayout':
        return cls(
            center=0.5 + rng.uniform(-0.02, 0.02, 3),
            radii=0.42 + rng.uniform(-0.02, 0.02, 3),
            x_single_end=0.42 + rng.uniform(-0.04, 0.04),
            x_double_end=0.68 + rng.uniform(-0.04, 0.04),
            single_azimuth=rng.uniform(0, np.pi),
            single_elevation=rng.uniform(-0.3, 0.3),
            double_azimuth=rng.uniform(0, np.pi),
            double_angle=np.deg2rad(rng.uniform(60, 90)),
            double_weights=tuple(np.array([0.5, 0.5]) + np.array([1, -1]) * rng.uniform(-0.1, 0.1)),
            triple_rotation=Rotation.random(random_state=int(rng.integers(2 ** 31))).as_matrix(),
            blob_center=np.array([0.55, 0.5, 0.5]) + rng.uniform(-0.03, 0.03, 3),
            blob_radius=0.14 + rng.uniform(-0.02, 0.02),
        )


def _check_dims(dims) -> Tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be 3 integers >= 8, got {dims}")
    return dims


def tissue_maps(dims, layout: PhantomLayout):
    """WM/CGM/SGM fractions and the fiber-region label of every voxel.

    Labels: 0 background, 1 single fiber, 2 two-fiber crossing, 3 three-fiber crossing.
    """
    grid = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing='ij')
    u = np.stack(grid, axis=-1)
    rho = np.sqrt(np.sum(((u - layout.center) / layout.radii) ** 2, axis=-1))
    brain = rho <= 1.0

    cortex = np.clip((rho - 0.72) / 0.18, 0.0, 1.0)
    blob_dist = np.linalg.norm(u - layout.blob_center, axis=-1)
    inner = 0.55 * layout.blob_radius
    blob = np.clip((layout.blob_radius - blob_dist) / (layout.blob_radius - inner), 0.0, 1.0)

    total = np.where(brain, TISSUE_TOTAL, 0.0)
    wm = total * (1 - cortex) * (1 - blob)
    cgm = total * cortex
    sgm = total * (1 - cortex) * blob

    labels = np.zeros(dims, dtype=np.int8)
    x = u[..., 0]
    labels[brain & (x < layout.x_single_end)] = 1
    labels[brain & (x >= layout.x_single_end) & (x < layout.x_double_end)] = 2
    labels[brain & (x >= layout.x_double_end)] = 3
    return wm, cgm, sgm, labels


def region_fiber_configs(dims, layout: PhantomLayout, kappa=DEFAULT_KAPPA) -> Dict[str, object]:
    """FiberConfig per region; the single-fiber bundle bends by 90 degrees along z."""
    single = []
    for k in range(dims[2]):
        azimuth = layout.single_azimuth + 0.5 * np.pi * (k + 0.5) / dims[2]
        single.append(FiberConfig([_in_plane(azimuth, layout.single_elevation)], [0.9], kappa))
    first = _in_plane(layout.double_azimuth)
    second = _in_plane(layout.double_azimuth + layout.double_angle)
    double = FiberConfig([first, second], [w * 0.9 for w in layout.double_weights], kappa)
    triple = FiberConfig(list(layout.triple_rotation.T), [0.36, 0.27, 0.27], kappa)
    return {'single': single, 'double': double, 'triple': triple}


def gen_phantom(dims=(48, 48, 48), seed=0, kappa=DEFAULT_KAPPA, lmax=LMAX):
    """Ground-truth FOD volume and tissue fractions, deterministic given seed.

    Returns:
        (FodVolume target, TissueFractions)
    """
    dims = _check_dims(dims)
    rng = np.random.default_rng(seed)
    layout = PhantomLayout.draw(rng)
    wm, cgm, sgm, labels = tissue_maps(dims, layout)
    configs = region_fiber_configs(dims, layout, kappa)

    k = n_coeffs(lmax)
    fiber = np.zeros(dims + (k,))
    single_fods = np.stack([make_fiber_fod(cfg, lmax) for cfg in
                            tqdm(configs['single'], desc="Fiber FODs", leave=False)])
    z_index = np.broadcast_to(np.arange(dims[2]), dims)
    fiber[labels == 1] = single_fods[z_index[labels == 1]]
    fiber[labels == 2] = make_fiber_fod(configs['double'], lmax)
    fiber[labels == 3] = make_fiber_fod(configs['triple'], lmax)

    fod = wm[..., None] * fiber + (cgm + sgm)[..., None] * isotropic_fod(ISO_LEVEL, lmax)
    header = VolumeHeader(dims=dims + (k,), voxel_size=VOXEL_SIZE,
                          affine=np.diag(list(VOXEL_SIZE) + [1.0]), intent=f'phantom seed {seed}')
    target = FodVolume(data=fod.astype(np.float32), header=header)
    fractions = TissueFractions(wm=wm.astype(np.float32), cgm=cgm.astype(np.float32),
                                sgm=sgm.astype(np.float32), header=header.with_dims(dims))
    logger.debug(f"Phantom seed={seed} dims={dims}: {int((labels > 0).sum())} brain voxels")
    return target, fractions


def degrade(target: FodVolume, cfg: DegradeConfig, seed=0) -> FodVolume:
    """Low-angular-quality surrogate of a target FOD.

    Coefficients of degree > truncate_lmax are zeroed, surviving l >= 2
    coefficients are multiplied by amplitude_damping, and Gaussian noise is added
    to surviving coefficients of tissue voxels (voxels with any non-zero
    coefficient). Truncated coefficients stay exactly zero.
    """
    data = target.data.astype(np.float64)
    degrees = sh_degrees(lmax_for(data.shape[-1]))
    keep = degrees <= cfg.truncate_lmax
    data[..., ~keep] = 0.0
    data[..., (degrees >= 2) & keep] *= cfg.amplitude_damping
    if cfg.coeff_noise_sigma > 0:
        tissue = np.any(target.data != 0, axis=-1)
        # one generator over the whole grid in fixed C order: the result only depends on seed
        noise = np.random.default_rng(seed).normal(0.0, cfg.coeff_noise_sigma, size=data.shape)
        data += noise * (tissue[..., None] & keep)
    return target.copy_with(data.astype(np.float32))


@dataclass
class Subject:
    name: str
    target: FodVolume
    input: FodVolume
    fractions: TissueFractions

    def save(self, directory):
        """Write target.nii, input.nii, wm.nii, cgm.nii, sgm.nii."""
        os.makedirs(directory, exist_ok=True)
        self.target.save(os.path.join(directory, 'target.nii'))
        self.input.save(os.path.join(directory, 'input.nii'))
        self.fractions.save_dir(directory)

    @classmethod
    def load(cls, directory) -> 'Subject':
        return cls(name=os.path.basename(os.path.normpath(directory)),
                   target=FodVolume.load(os.path.join(directory, 'target.nii')),
                   input=FodVolume.load(os.path.join(directory, 'input.nii')),
                   fractions=TissueFractions.load_dir(directory))


def make_subject(name, dims, seed, degrade_cfg: DegradeConfig, kappa=DEFAULT_KAPPA) -> Subject:
    target, fractions = gen_phantom(dims, seed, kappa)
    # the degradation stream is decoupled from the geometry stream
    degraded = degrade(target, degrade_cfg, seed=seed + 1)
    return Subject(name=name, target=target, input=degraded, fractions=fractions)


def split_counts(n_subjects, proportions: Sequence[int]) -> List[int]:
    """Largest-remainder allocation of subjects to train/val/test, train first."""
    proportions = np.asarray(proportions, dtype=np.float64)
    if len(proportions) != 3 or np.any(proportions < 0) or proportions.sum() <= 0:
        raise ValueError(f"split must be three non-negative proportions, got {proportions.tolist()}")
    exact = n_subjects * proportions / proportions.sum()
    counts = np.floor(exact).astype(int)
    for idx in np.argsort(-(exact - counts), kind='stable')[:n_subjects - counts.sum()]:
        counts[idx] += 1
    if counts[0] == 0:
        donor = int(np.argmax(counts))
        counts[donor] -= 1
        counts[0] += 1
    return counts.tolist()


def gen_cohort(n_subjects, dims, seed, degrade_cfg: DegradeConfig, split=(3, 1, 2), kappa=DEFAULT_KAPPA):
    """Independently seeded phantom subjects and their train/val/test assignment.

    Returns:
        (list of Subject, dict split name -> list of subject names)
    """
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_subjects)]
    subjects = [make_subject(f'sub-{i:02d}', dims, s, degrade_cfg, kappa)
                for i, s in enumerate(tqdm(seeds, desc="Phantom subjects"))]
    n_train, n_val, _ = split_counts(n_subjects, split)
    names = [s.name for s in subjects]
    assignment = {'train': names[:n_train],
                  'val': names[n_train:n_train + n_val],
                  'test': names[n_train + n_val:]}
    return subjects, assignment


def save_split(assignment, directory):
    with open(os.path.join(directory, 'split.yaml'), 'w', encoding='utf-8') as f:
        yaml.safe_dump(assignment, f, sort_keys=False)
