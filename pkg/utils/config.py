import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import yaml

from utils.errors import ConfigError

Triple = Tuple[int, int, int]
LOSSES = ('mse', 'normalized_mse')


def as_triple(value, name='value') -> Triple:
    """Accept an int (isotropic) or a 3-sequence of ints."""
    if isinstance(value, int):
        return (value, value, value)
    try:
        triple = tuple(int(v) for v in value)
    except TypeError:
        raise ConfigError(f"{name} must be an int or 3 ints, got {value!r}")
    if len(triple) != 3:
        raise ConfigError(f"{name} must have 3 entries, got {value!r}")
    return triple


class ConfigSection:
    """Dataclass mixin: YAML-friendly dict conversion with strict keys."""

    _triples: Tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, values: Optional[Dict[str, Any]] = None):
        values = dict(values or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
        for name in cls._triples:
            if name in values and values[name] is not None:
                values[name] = as_triple(values[name], name)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def replace(self, **changes):
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self):
        pass


@dataclass
class PhantomConfig(ConfigSection):
    dims: Triple = (48, 48, 48)
    seed: int = 7
    kappa: float = 50.0
    subjects: int = 1
    # train/val/test proportions for cohort generation
    split: List[int] = field(default_factory=lambda: [3, 1, 2])

    _triples = ('dims',)

    def validate(self):
        if min(self.dims) < 8:
            raise ConfigError(f"phantom dims must be >= 8, got {self.dims}")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.subjects < 1:
            raise ConfigError("subjects must be >= 1")


@dataclass
class DegradeConfig(ConfigSection):
    truncate_lmax: int = 4
    coeff_noise_sigma: float = 0.01
    amplitude_damping: float = 0.8

    def validate(self):
        if self.truncate_lmax not in (2, 4, 6, 8):
            raise ConfigError(f"truncate_lmax must be one of 2,4,6,8, got {self.truncate_lmax}")
        if self.coeff_noise_sigma < 0:
            raise ConfigError("coeff_noise_sigma must be non-negative")
        if not 0 < self.amplitude_damping <= 1:
            raise ConfigError("amplitude_damping must be in (0, 1]")


@dataclass
class ModelConfig(ConfigSection):
    patch_size: Triple = (16, 16, 16)
    in_channels: int = 45
    out_channels: int = 45
    embed_dim: int = 24
    window_size: Triple = (4, 4, 4)
    depths: List[int] = field(default_factory=lambda: [2, 2])
    num_heads: List[int] = field(default_factory=lambda: [3, 6])
    shift: bool = True
    mlp_ratio: float = 4.0
    residual: bool = False
    zero_head: bool = False

    _triples = ('patch_size', 'window_size')

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def stage_resolutions(self) -> List[Triple]:
        """Token grid of every encoder stage (the patch embedding halves the input)."""
        return [tuple(p // 2 ** (k + 1) for p in self.patch_size) for k in range(self.num_stages)]

    def stage_windows(self) -> List[Triple]:
        """Window per stage, clipped to the stage resolution."""
        return [tuple(min(w, r) for w, r in zip(self.window_size, res))
                for res in self.stage_resolutions()]

    def stage_shifts(self) -> List[Triple]:
        """Shift used by odd blocks of each stage; zero along axes held by one window."""
        shifts = []
        for res, win in zip(self.stage_resolutions(), self.stage_windows()):
            if not self.shift:
                shifts.append((0, 0, 0))
            else:
                shifts.append(tuple(w // 2 if w < r else 0 for w, r in zip(win, res)))
        return shifts

    def validate(self):
        if not 1 <= len(self.depths) <= 4:
            raise ConfigError(f"1 to 4 stages supported, got {len(self.depths)}")
        if len(self.depths) != len(self.num_heads):
            raise ConfigError("depths and num_heads must have the same length")
        if any(d < 1 for d in self.depths):
            raise ConfigError("every stage needs at least one block")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        for heads in self.num_heads:
            if heads < 1 or self.embed_dim % heads:
                raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {heads}")
        if self.residual and self.in_channels != self.out_channels:
            raise ConfigError("residual mode needs in_channels == out_channels")
        factor = 2 ** self.num_stages
        for p in self.patch_size:
            if p % factor:
                raise ConfigError(
                    f"patch_size {self.patch_size} must be divisible by {factor} for {self.num_stages} stages")
        for k, (res, win) in enumerate(zip(self.stage_resolutions(), self.stage_windows())):
            for r, w in zip(res, win):
                if w < 1 or r % w:
                    raise ConfigError(
                        f"stage {k} resolution {res} not divisible by window {self.window_size}")


@dataclass
class TrainConfig(ConfigSection):
    learning_rate: float = 0.0005
    batch_size: int = 2
    max_epochs: int = 80
    patches_per_epoch: int = 32
    val_patches: int = 8
    min_tissue_frac: float = 0.2
    seed: int = 0
    val_seed: int = 1009
    patience: int = 15
    max_attempts: int = 1000
    dtype: str = 'float32'
    # normalized_mse weighs every SH channel by the model's output std
    loss: str = 'normalized_mse'
    checkpoint_dir: str = 'checkpoints'
    use_wandb: bool = False
    wandb_project: str = 'fod-swin'

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patches_per_epoch < 1 or self.val_patches < 1:
            raise ConfigError("patches_per_epoch and val_patches must be >= 1")
        if not 0 <= self.min_tissue_frac <= 1:
            raise ConfigError("min_tissue_frac must be in [0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss}")
        if self.dtype not in ('float32', 'float64'):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


@dataclass
class InferenceConfig(ConfigSection):
    overlap: float = 0.25
    blend: str = 'uniform'
    batch_size: int = 2

    def validate(self):
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must be in [0, 1)")
        if self.blend not in ('uniform', 'cosine'):
            raise ConfigError(f"blend must be uniform or cosine, got {self.blend}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class EvaluationConfig(ConfigSection):
    regions: List[str] = field(default_factory=lambda: ['WM', 'WM_CGM', 'WM_SGM'])
    heatmap_axis: str = 'z'
    heatmap_index: Optional[int] = None
    per_volume: bool = False

    def validate(self):
        if self.heatmap_axis not in ('x', 'y', 'z'):
            raise ConfigError("heatmap_axis must be x, y or z")


SECTIONS = {
    'phantom': PhantomConfig,
    'degrade': DegradeConfig,
    'model': ModelConfig,
    'training': TrainConfig,
    'inference': InferenceConfig,
    'evaluation': EvaluationConfig,
}


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """Load a YAML config; missing sections are filled with defaults.

    Returns a dict of section name -> raw dict, so flag overrides can be merged
    before the typed sections are built with `build_sections`.
    """
    raw: Dict[str, Any] = {}
    if config_path:
        with open(config_path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{config_path}: top level must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS) - {'logging'})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return raw


def build_sections(raw: Dict[str, Any], overrides: Optional[Dict[str, Dict[str, Any]]] = None):
    """Typed sections with precedence overrides > raw file values > defaults."""
    overrides = overrides or {}
    built = {}
    for name, cls in SECTIONS.items():
        values = dict(raw.get(name) or {})
        values.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        built[name] = cls.from_dict(values)
    return built


def dump_config(sections: Dict[str, ConfigSection]) -> str:
    return yaml.safe_dump({name: cfg.to_dict() for name, cfg in sections.items()}, sort_keys=False)
