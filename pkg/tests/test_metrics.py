import math

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from data.nifti_io import VolumeHeader, read_nifti
from data.volumes import TissueFractions
from utils.errors import EmptySelectionError
from utils.metrics import (POOLED, REPORT_COLUMNS, AccMap, RegionRule, acc_gain, acc_stats, acc_volume,
                           compare_methods, export_region_values, format_report, region_mask, write_report)
from utils.visualization import acc_to_gray, export_heatmap_slice, take_slice


def _fractions(wm, cgm, sgm):
    arrays = [np.asarray(a, dtype=np.float32).reshape(-1, 1, 1) for a in (wm, cgm, sgm)]
    return TissueFractions(*arrays, header=VolumeHeader(dims=arrays[0].shape))


@pytest.fixture
def fractions():
    # voxel 0: pure WM, 1: WM/CGM boundary, 2: WM/SGM boundary, 3: background
    return _fractions([0.9, 0.4, 0.35, 0.0], [0.05, 0.5, 0.0, 0.0], [0.0, 0.0, 0.6, 0.0])


def _map(values):
    return AccMap(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1), VolumeHeader(dims=(len(values), 1, 1)))


def test_region_rules(fractions):
    assert region_mask(fractions, 'WM').ravel().tolist() == [True, False, False, False]
    assert region_mask(fractions, 'WM_CGM').ravel().tolist() == [False, True, False, False]
    assert region_mask(fractions, 'WM_SGM').ravel().tolist() == [False, False, True, False]
    custom = RegionRule('ANY_WM', {'wm': 0.3})
    assert region_mask(fractions, custom).ravel().tolist() == [True, True, True, False]
    with pytest.raises(ValueError):
        region_mask(fractions, 'GM')
    with pytest.raises(ValueError):
        RegionRule('bad', {'csf': 0.5})


def test_stats_of_constant_values():
    stats = acc_stats(_map([0.5] * 4), np.ones((4, 1, 1), dtype=bool))
    assert (stats.min, stats.max, stats.mean, stats.std) == (0.5, 0.5, 0.5, 0.0)
    assert (stats.lower_quartile, stats.upper_quartile) == (0.5, 0.5)
    assert stats.n_voxels == 4 and stats.n_undefined == 0


def test_stats_of_three_values():
    stats = acc_stats(_map([-1.0, 0.0, 1.0]), np.ones((3, 1, 1), dtype=bool))
    assert stats.mean == 0.0
    assert stats.std == pytest.approx(math.sqrt(2 / 3))
    assert stats.lower_quartile == pytest.approx(-0.5)
    assert stats.upper_quartile == pytest.approx(0.5)


def _type7(values, p):
    s = np.sort(values)
    h = (len(s) - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def test_quartiles_match_linear_interpolation():
    values = np.random.default_rng(0).uniform(-1, 1, 10000)
    values[::97] = np.nan
    stats = acc_stats(_map(values), np.ones((10000, 1, 1), dtype=bool))
    defined = values[~np.isnan(values)]
    assert stats.lower_quartile == pytest.approx(_type7(defined, 0.25), abs=1e-12)
    assert stats.upper_quartile == pytest.approx(_type7(defined, 0.75), abs=1e-12)
    assert stats.n_undefined == int(np.isnan(values).sum())
    assert stats.std == pytest.approx(np.std(defined))


def test_empty_selections():
    with pytest.raises(EmptySelectionError) as exc:
        acc_stats(_map([0.1, 0.2]), np.zeros((2, 1, 1), dtype=bool))
    assert exc.value.reason == 'no voxels'
    with pytest.raises(EmptySelectionError) as exc:
        acc_stats(_map([np.nan, 0.2]), np.array([True, False]).reshape(2, 1, 1))
    assert exc.value.reason == 'all undefined'


def test_acc_volume_mask_and_save(small_subject, tmp_path):
    mask = region_mask(small_subject.fractions, 'WM')
    acc_map = acc_volume(small_subject.input, small_subject.target, mask=mask)
    assert acc_map.spatial_dims == (24, 24, 24)
    assert np.all(np.isnan(acc_map.values[~mask]))
    assert np.all(acc_map.defined[mask])
    acc_map.save(str(tmp_path / 'acc.nii'))
    header, values = read_nifti(str(tmp_path / 'acc.nii'))
    assert header.dims == (24, 24, 24)
    np.testing.assert_array_equal(np.isnan(values), ~mask)


def test_compare_methods_report(small_subject, tmp_path):
    maps = {'input': acc_volume(small_subject.input, small_subject.target),
            'target': acc_volume(small_subject.target, small_subject.target)}
    report = compare_methods(maps, small_subject.fractions)
    assert list(report.columns) == REPORT_COLUMNS
    assert len(report) == 6
    assert set(report['Volume']) == {POOLED}
    target_rows = report[report['Method'] == 'target']
    np.testing.assert_allclose(target_rows['Mean'], 1.0, atol=1e-6)
    assert report[report['Method'] == 'input']['Mean'].lt(1.0).all()

    gain = acc_gain(report, 'input')
    assert list(gain['Method']) == ['target'] * 3
    np.testing.assert_allclose(gain['Gain'], gain['Mean'] - gain['Baseline'])
    with pytest.raises(ValueError):
        acc_gain(report, 'missing')

    write_report(report, str(tmp_path / 'report.csv'), str(tmp_path / 'report.txt'))
    back = pd.read_csv(tmp_path / 'report.csv')
    assert list(back['Region']) == list(report['Region'])
    assert 'WM_SGM' in (tmp_path / 'report.txt').read_text()
    assert 'Mean' in format_report(report)


def test_per_volume_rows_and_pooling(fractions):
    maps = {'m': [_map([0.2, 0.4, 0.6, np.nan]), _map([0.8, 0.0, 0.0, 0.0])]}
    report = compare_methods(maps, [fractions, fractions], rules=['WM'], per_volume=True)
    assert list(report['Volume']) == [POOLED, '0', '1']
    assert report['Mean'].tolist() == pytest.approx([0.5, 0.2, 0.8])
    assert report['N'].tolist() == [2, 1, 1]


def test_empty_region_gives_nan_row(fractions):
    report = compare_methods({'m': _map([0.5, np.nan, 0.5, 0.5])}, fractions, rules=['WM_CGM'])
    row = report.iloc[0]
    assert math.isnan(row['Mean'])
    assert row['N'] == 0 and row['N_undefined'] == 1


def test_geometry_mismatch_rejected(fractions):
    with pytest.raises(ValueError):
        compare_methods({'m': _map([0.5] * 5)}, fractions)
    with pytest.raises(ValueError):
        compare_methods({'m': [_map([0.5] * 4)] * 2}, fractions)


def test_export_region_values(fractions, tmp_path):
    maps = {'a': _map([0.1, 0.2, np.nan, 0.4]), 'b': _map([0.5, 0.6, 0.7, 0.8])}
    table = export_region_values(maps, fractions, path=str(tmp_path / 'values.csv'))
    assert list(table.columns) == ['method', 'region', 'value']
    counts = table.groupby(['method', 'region']).size().to_dict()
    assert counts == {('a', 'WM'): 1, ('a', 'WM_CGM'): 1, ('b', 'WM'): 1, ('b', 'WM_CGM'): 1, ('b', 'WM_SGM'): 1}
    assert len(pd.read_csv(tmp_path / 'values.csv')) == 5


def test_gray_mapping():
    gray = acc_to_gray(np.array([-1.0, 0.0, 1.0, np.nan, 2.0]))
    assert gray.tolist() == [0, 128, 255, 0, 255]


def test_heatmap_slice_files(tmp_path):
    values = np.full((4, 5, 6), 0.5)
    values[0, 0, :] = np.nan
    acc_map = AccMap(values)
    paths = export_heatmap_slice(acc_map, 'x', 0, str(tmp_path / 'heat' / 'm_acc.pgm'))

    image = np.array(Image.open(paths['image']))
    mask = np.array(Image.open(paths['mask']))
    assert image.shape == (5, 6)
    assert mask[0].tolist() == [0] * 6
    assert np.all(mask[1:] == 255)
    assert np.all(image[1:] == 191)

    back = pd.read_csv(paths['csv'], header=None).to_numpy()
    np.testing.assert_array_equal(back, take_slice(acc_map, 'x', 0))


def test_heatmap_region_and_index_checks(tmp_path):
    acc_map = AccMap(np.zeros((4, 4, 4)))
    region = np.zeros((4, 4, 4), dtype=bool)
    region[:, :2] = True
    paths = export_heatmap_slice(acc_map, 'z', None, str(tmp_path / 'r.pgm'), region_mask=region)
    mask = np.array(Image.open(paths['mask']))
    assert np.all(mask[:, :2] == 255) and np.all(mask[:, 2:] == 0)
    with pytest.raises(ValueError):
        take_slice(acc_map, 'z', 4)
    with pytest.raises(ValueError):
        take_slice(acc_map, 'w', 0)


def test_voxels_outside_evaluated_mask_are_not_undefined(small_subject):
    wm = region_mask(small_subject.fractions, 'WM')
    acc_map = acc_volume(small_subject.input, small_subject.target, mask=wm)
    everything = np.ones(acc_map.spatial_dims, dtype=bool)
    stats = acc_stats(acc_map, everything)
    assert stats.n_voxels + stats.n_undefined == int(wm.sum())
    assert stats.n_undefined == 0

    empty = acc_volume(small_subject.input, small_subject.target, mask=np.zeros_like(wm))
    assert empty.select(everything).size == 0
    with pytest.raises(EmptySelectionError) as exc:
        acc_stats(empty, everything)
    assert exc.value.reason == 'no voxels'
    with pytest.raises(ValueError):
        AccMap(np.zeros((2, 2, 2)), evaluated=np.ones((2, 2), dtype=bool))
