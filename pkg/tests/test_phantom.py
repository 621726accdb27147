import numpy as np
import pytest

from data.phantom import (FiberConfig, Subject, degrade, gen_cohort, gen_phantom, make_fiber_fod, save_split,
                          split_counts)
from utils.config import DegradeConfig
from utils.metrics import REGION_RULES, region_mask
from utils.sh import acc_values, amplitude, amplitudes, fibonacci_sphere, sh_degrees


def test_single_fiber_peak_along_axis():
    c = make_fiber_fod(FiberConfig([[0.0, 0.0, 1.0]], [1.0], 50.0))
    dirs = fibonacci_sphere(10000)
    peak = dirs[np.argmax(amplitudes(c, dirs))]
    angle = np.degrees(np.arccos(min(1.0, abs(peak[2]))))
    assert angle < 3.0


def test_orthogonal_equal_fibers_are_symmetric():
    c = make_fiber_fod(FiberConfig([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.45, 0.45]))
    assert amplitude(c, [1.0, 0.0, 0.0]) == pytest.approx(amplitude(c, [0.0, 1.0, 0.0]), abs=1e-6)


def test_heavier_fiber_has_larger_amplitude():
    c = make_fiber_fod(FiberConfig([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [0.7, 0.3]))
    assert amplitude(c, [1.0, 0.0, 0.0]) > amplitude(c, [0.0, 1.0, 0.0])


@pytest.mark.parametrize('kwargs', [
    {'directions': [[1.0, 1.0, 0.0]], 'weights': [1.0]},
    {'directions': [[1.0, 0.0, 0.0]], 'weights': [1.2]},
    {'directions': [[1.0, 0.0, 0.0]] * 4, 'weights': [0.2] * 4},
    {'directions': [[1.0, 0.0, 0.0]], 'weights': [1.0], 'kernel_sharpness': 0.0},
])
def test_invalid_fiber_config(kwargs):
    with pytest.raises(ValueError):
        FiberConfig(**kwargs)


def test_gen_phantom_is_deterministic():
    a, fa = gen_phantom((16, 16, 16), seed=5)
    b, fb = gen_phantom((16, 16, 16), seed=5)
    assert a.data.tobytes() == b.data.tobytes()
    assert fa.wm.tobytes() == fb.wm.tobytes()
    c, _ = gen_phantom((16, 16, 16), seed=6)
    assert c.data.tobytes() != a.data.tobytes()


def test_phantom_background_and_fraction_bounds(small_subject):
    target, fractions = small_subject.target, small_subject.fractions
    assert target.data.shape == (24, 24, 24, 45)
    assert np.all(np.isfinite(target.data))
    total = fractions.total()
    assert np.all(total <= 1.0 + 1e-6)
    for tissue in (fractions.wm, fractions.cgm, fractions.sgm):
        assert tissue.min() >= 0.0
    background = total == 0
    assert background[0, 0, 0]
    assert np.all(target.data[background] == 0.0)
    for name in REGION_RULES:
        assert region_mask(fractions, name).any(), name


def test_phantom_rejects_tiny_dims():
    with pytest.raises(ValueError):
        gen_phantom((4, 16, 16))


def test_degrade_identity_settings(small_subject):
    out = degrade(small_subject.target, DegradeConfig(truncate_lmax=8, coeff_noise_sigma=0.0,
                                                      amplitude_damping=1.0))
    assert out.data.tobytes() == small_subject.target.data.tobytes()


def test_degrade_truncates_high_degrees(small_subject):
    degrees = sh_degrees()
    high = small_subject.input.data[..., degrees > 4]
    assert np.all(high == 0.0)


def test_degrade_without_noise_never_adds_energy(small_subject):
    out = degrade(small_subject.target, DegradeConfig(coeff_noise_sigma=0.0))
    before = np.sum(small_subject.target.data[..., 1:].astype(np.float64) ** 2, axis=-1)
    after = np.sum(out.data[..., 1:].astype(np.float64) ** 2, axis=-1)
    assert np.all(after <= before + 1e-9)


def test_degraded_acc_in_expected_band(small_subject):
    wm = region_mask(small_subject.fractions, 'WM')
    acc = acc_values(small_subject.input.data, small_subject.target.data)[wm]
    mean = np.nanmean(acc)
    assert 0.5 < mean < 1.0


def test_acc_drops_with_more_noise(small_subject):
    wm = region_mask(small_subject.fractions, 'WM')
    means = []
    for sigma in (0.0, 0.01, 0.05):
        out = degrade(small_subject.target, DegradeConfig(coeff_noise_sigma=sigma), seed=11)
        means.append(np.nanmean(acc_values(out.data, small_subject.target.data)[wm]))
    assert means[0] >= means[1] >= means[2]


def test_degrade_is_seeded(small_subject):
    cfg = DegradeConfig()
    a = degrade(small_subject.target, cfg, seed=1)
    b = degrade(small_subject.target, cfg, seed=1)
    c = degrade(small_subject.target, cfg, seed=2)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != c.data.tobytes()


@pytest.mark.parametrize('n, expected', [(6, [3, 1, 2]), (1, [1, 0, 0]), (3, [2, 0, 1]), (12, [6, 2, 4])])
def test_split_counts(n, expected):
    counts = split_counts(n, [3, 1, 2])
    assert counts == expected
    assert sum(counts) == n


def test_cohort_and_subject_roundtrip(tmp_path):
    subjects, assignment = gen_cohort(3, (12, 12, 12), seed=4, degrade_cfg=DegradeConfig())
    assert [s.name for s in subjects] == ['sub-00', 'sub-01', 'sub-02']
    assert sum(len(v) for v in assignment.values()) == 3
    assert subjects[0].target.data.tobytes() != subjects[1].target.data.tobytes()

    for subject in subjects:
        subject.save(str(tmp_path / subject.name))
    save_split(assignment, str(tmp_path))
    assert (tmp_path / 'split.yaml').exists()
    for name in ('target.nii', 'input.nii', 'wm.nii', 'cgm.nii', 'sgm.nii'):
        assert (tmp_path / 'sub-00' / name).exists()
    loaded = Subject.load(str(tmp_path / 'sub-01'))
    assert loaded.name == 'sub-01'
    assert loaded.input.data.tobytes() == subjects[1].input.data.tobytes()
