import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from data.nifti_io import write_nifti
from data.volumes import FodVolume, TissueFractions
from utils.errors import EmptySelectionError
from utils.logger import get_logger
from utils.sh import acc_values

logger = get_logger('metrics')

REPORT_COLUMNS = ['Method', 'Region', 'Volume', 'Min', 'Max', 'Mean', 'STD', 'LQ', 'UQ', 'N', 'N_undefined']
POOLED = 'pooled'


@dataclass
class AccMap:
    """Voxel-wise ACC in [-1, 1]; NaN marks undefined voxels.

    `evaluated` is the mask the map was computed over (None: every voxel).
    Voxels outside it are also NaN in `values` but are never selected, so they
    do not count as undefined.
    """
    values: np.ndarray
    header: object = None
    evaluated: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.evaluated is not None:
            self.evaluated = np.asarray(self.evaluated, dtype=bool)
            if self.evaluated.shape != self.values.shape:
                raise ValueError(f"evaluated mask {self.evaluated.shape} != map shape {self.values.shape}")

    @property
    def spatial_dims(self):
        return tuple(self.values.shape)

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def select(self, mask: np.ndarray) -> np.ndarray:
        """ACC values of the evaluated voxels inside `mask`."""
        if self.evaluated is not None:
            mask = mask & self.evaluated
        return self.values[mask]

    def save(self, path):
        write_nifti(self.header.with_dims(self.spatial_dims, intent='ACC'),
                    self.values.astype(np.float32), path)


def acc_volume(prediction: FodVolume, reference: FodVolume, mask: Optional[np.ndarray] = None) -> AccMap:
    """ACC between two co-registered FOD volumes, voxel by voxel, over `mask` (all voxels if None)."""
    if prediction.data.shape != reference.data.shape:
        raise ValueError(f"volume shapes differ: {prediction.data.shape} vs {reference.data.shape}")
    values = acc_values(prediction.data, reference.data)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} != volume dims {values.shape}")
        values = np.where(mask, values, np.nan)
    return AccMap(values=values, header=reference.header, evaluated=mask)


@dataclass(frozen=True)
class RegionRule:
    name: str
    # tissue -> minimum fraction, all must hold
    thresholds: Mapping[str, float]

    def __post_init__(self):
        for tissue, value in self.thresholds.items():
            if tissue not in ('wm', 'cgm', 'sgm'):
                raise ValueError(f"unknown tissue {tissue!r} in rule {self.name}")
            if not 0 <= value <= 1:
                raise ValueError(f"threshold for {tissue} must be in [0, 1], got {value}")


REGION_RULES = {
    'WM': RegionRule('WM', {'wm': 0.7}),
    'WM_CGM': RegionRule('WM_CGM', {'wm': 0.3, 'cgm': 0.3}),
    'WM_SGM': RegionRule('WM_SGM', {'wm': 0.3, 'sgm': 0.3}),
}


def get_rules(names: Optional[Sequence[Union[str, RegionRule]]] = None) -> List[RegionRule]:
    if names is None:
        return list(REGION_RULES.values())
    rules = []
    for name in names:
        if isinstance(name, RegionRule):
            rules.append(name)
        elif name in REGION_RULES:
            rules.append(REGION_RULES[name])
        else:
            raise ValueError(f"unknown region {name!r}, expected one of {list(REGION_RULES)}")
    return rules


def region_mask(fractions: TissueFractions, rule: Union[str, RegionRule]) -> np.ndarray:
    rule = get_rules([rule])[0]
    mask = np.ones(fractions.spatial_dims, dtype=bool)
    for tissue, threshold in rule.thresholds.items():
        mask &= getattr(fractions, tissue) >= threshold
    return mask


@dataclass
class AccStats:
    min: float
    max: float
    mean: float
    std: float
    lower_quartile: float
    upper_quartile: float
    n_voxels: int
    n_undefined: int

    def as_row(self) -> Dict[str, float]:
        return {'Min': self.min, 'Max': self.max, 'Mean': self.mean, 'STD': self.std,
                'LQ': self.lower_quartile, 'UQ': self.upper_quartile,
                'N': self.n_voxels, 'N_undefined': self.n_undefined}


def stats_from_values(values: np.ndarray) -> AccStats:
    """Statistics of selected ACC values (NaN = undefined); quartiles are type-7."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptySelectionError('no voxels')
    defined = values[~np.isnan(values)]
    if defined.size == 0:
        raise EmptySelectionError('all undefined', f"all {values.size} selected voxels have undefined ACC")
    lq, uq = np.percentile(defined, [25, 75], method='linear')
    return AccStats(min=float(defined.min()), max=float(defined.max()), mean=float(defined.mean()),
                    std=float(defined.std()), lower_quartile=float(lq), upper_quartile=float(uq),
                    n_voxels=int(defined.size), n_undefined=int(values.size - defined.size))


def acc_stats(acc_map: AccMap, mask: np.ndarray) -> AccStats:
    """Statistics over the defined ACC values inside `mask`.

    Raises:
        EmptySelectionError: reason "no voxels" or "all undefined"
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != acc_map.spatial_dims:
        raise ValueError(f"mask shape {mask.shape} != map shape {acc_map.spatial_dims}")
    return stats_from_values(acc_map.select(mask))


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _selected(maps, fractions, rules):
    """Yield (method, rule, volume index, selected values) after geometry checks."""
    fractions = _as_list(fractions)
    for method, method_maps in maps.items():
        method_maps = _as_list(method_maps)
        if len(method_maps) != len(fractions):
            raise ValueError(f"{method}: {len(method_maps)} maps for {len(fractions)} tissue volumes")
        for acc_map, frac in zip(method_maps, fractions):
            if acc_map.spatial_dims != frac.spatial_dims:
                raise ValueError(f"{method}: map geometry {acc_map.spatial_dims} != tissue geometry "
                                 f"{frac.spatial_dims}")
    masks = [{rule.name: region_mask(frac, rule) for rule in rules} for frac in fractions]
    for method, method_maps in maps.items():
        for rule in rules:
            for v, acc_map in enumerate(_as_list(method_maps)):
                yield method, rule, v, acc_map.select(masks[v][rule.name])


def _row(method, region, volume, values) -> Dict[str, object]:
    row = {'Method': method, 'Region': region, 'Volume': volume}
    try:
        row.update(stats_from_values(values).as_row())
    except EmptySelectionError as e:
        logger.warning(f"{method}/{region}/{volume}: {e}")
        row.update({c: math.nan for c in REPORT_COLUMNS[3:9]})
        row.update({'N': 0, 'N_undefined': int(np.isnan(values).sum())})
    return row


def compare_methods(maps: Mapping[str, Union[AccMap, Sequence[AccMap]]],
                    fractions: Union[TissueFractions, Sequence[TissueFractions]],
                    rules: Optional[Sequence[Union[str, RegionRule]]] = None,
                    per_volume=False) -> pd.DataFrame:
    """One statistics row per (method, region), pooled over all volumes.

    `maps` holds one AccMap per method, or one per volume aligned with
    `fractions`. With `per_volume` extra rows (Volume = index) follow the
    pooled ones. Regions without defined voxels get NaN statistics.
    """
    rules = get_rules(rules)
    pooled: Dict[tuple, List[np.ndarray]] = {}
    per_rows = []
    for method, rule, v, values in _selected(maps, fractions, rules):
        pooled.setdefault((method, rule.name), []).append(values)
        if per_volume:
            per_rows.append(_row(method, rule.name, str(v), values))
    rows = [_row(method, region, POOLED, np.concatenate(parts)) for (method, region), parts in pooled.items()]
    return pd.DataFrame(rows + per_rows, columns=REPORT_COLUMNS)


def format_report(report: pd.DataFrame) -> str:
    """Aligned text table of a compare_methods report."""
    return report.to_string(index=False, float_format=lambda x: f'{x:.4f}')


def write_report(report: pd.DataFrame, csv_path, text_path=None):
    report.to_csv(csv_path, index=False, float_format='%.10g')
    if text_path:
        with open(text_path, 'w', encoding='utf-8') as f:
            f.write(format_report(report) + '\n')


def acc_gain(report: pd.DataFrame, baseline: str) -> pd.DataFrame:
    """Mean-ACC difference of every method against `baseline`, per region (pooled rows)."""
    pooled = report[report['Volume'] == POOLED]
    if baseline not in set(pooled['Method']):
        raise ValueError(f"baseline {baseline!r} not in report methods {sorted(set(pooled['Method']))}")
    base = pooled[pooled['Method'] == baseline].set_index('Region')['Mean']
    others = pooled[pooled['Method'] != baseline][['Method', 'Region', 'Mean']].copy()
    others['Baseline'] = others['Region'].map(base)
    others['Gain'] = others['Mean'] - others['Baseline']
    return others.reset_index(drop=True)


def export_region_values(maps, fractions, rules=None, path=None) -> pd.DataFrame:
    """Long-format (method, region, value) table of defined ACC values for distribution plots."""
    frames = []
    for method, rule, _, values in _selected(maps, fractions, get_rules(rules)):
        values = values[~np.isnan(values)]
        frames.append(pd.DataFrame({'method': method, 'region': rule.name, 'value': values}))
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['method', 'region', 'value'])
    if path:
        table.to_csv(path, index=False, float_format='%.10g')
    return table
