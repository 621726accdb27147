import pandas as pd
import pytest
import yaml

from cli import build_parser, collect_overrides, run


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """Phantom plus identity checkpoint written through the command line."""
    root = tmp_path_factory.mktemp('cli')
    assert run(['phantom-gen', '--dims', '24', '--seed', '2', '--out', str(root / 'phantom')]) == 0
    assert run(['identity-ckpt', '--patch-size', '16', '--out', str(root / 'identity.ckpt')]) == 0
    return root


def test_phantom_gen_writes_subject(workspace):
    for name in ('target.nii', 'input.nii', 'wm.nii', 'cgm.nii', 'sgm.nii'):
        assert (workspace / 'phantom' / name).exists()


def test_phantom_gen_cohort(tmp_path):
    assert run(['phantom-gen', '--dims', '12', '--subjects', '3', '--out', str(tmp_path)]) == 0
    split = yaml.safe_load((tmp_path / 'split.yaml').read_text())
    assert split == {'train': ['sub-00', 'sub-01'], 'val': [], 'test': ['sub-02']}


def test_infer_and_eval_identity(workspace, capsys):
    phantom = workspace / 'phantom'
    out = workspace / 'sr.nii'
    assert run(['infer', '--in', str(phantom / 'input.nii'), '--ckpt', str(workspace / 'identity.ckpt'),
                '--out', str(out), '--overlap', '0.5']) == 0
    assert 'forward passes: 8' in capsys.readouterr().out

    report_path = workspace / 'report.csv'
    assert run(['eval', '--pred', f'identity={out}', f'input={phantom / "input.nii"}',
                '--ref', str(phantom / 'target.nii'), '--masks', str(phantom), '--out', str(report_path),
                '--baseline', 'input', '--values', str(workspace / 'values.csv'),
                '--heatmap', str(workspace / 'heat')]) == 0
    report = pd.read_csv(report_path)
    assert len(report) == 6
    assert set(report['Region']) == {'WM', 'WM_CGM', 'WM_SGM'}
    identity = report[report['Method'] == 'identity'].set_index('Region')['Mean']
    baseline = report[report['Method'] == 'input'].set_index('Region')['Mean']
    pd.testing.assert_series_equal(identity, baseline, check_names=False, atol=1e-6)
    assert (workspace / 'report.txt').exists()
    assert (workspace / 'report_gain.csv').exists()
    assert (workspace / 'heat' / 'identity_acc.pgm').exists()
    assert (workspace / 'heat' / 'input_acc_mask.pgm').exists()


def test_acc_map_command(workspace):
    phantom = workspace / 'phantom'
    out = workspace / 'acc.nii'
    assert run(['acc-map', '--pred', str(phantom / 'input.nii'), '--ref', str(phantom / 'target.nii'),
                '--out', str(out)]) == 0
    assert out.exists()


def test_flags_override_config_file(tmp_path, capsys):
    config = tmp_path / 'config.yaml'
    config.write_text(yaml.safe_dump({'phantom': {'dims': [10, 10, 10], 'seed': 4},
                                      'degrade': {'coeff_noise_sigma': 0.0},
                                      'logging': {'level': 'WARNING'}}))
    assert run(['phantom-gen', '--config', str(config), '--seed', '9', '--out', str(tmp_path / 'p')]) == 0
    printed = yaml.safe_load(capsys.readouterr().out.split('Wrote')[0])
    assert printed['phantom']['dims'] == [10, 10, 10]
    assert printed['phantom']['seed'] == 9
    assert printed['degrade']['coeff_noise_sigma'] == 0.0
    assert printed['degrade']['truncate_lmax'] == 4


def test_collect_overrides_skips_unset_flags():
    args = build_parser().parse_args(['train', '--data', 'x', '--lr', '0.001', '--window', '2'])
    assert collect_overrides(args) == {'training': {'learning_rate': 0.001}, 'model': {'window_size': 2}}


def test_unknown_flag_is_usage_error():
    assert run(['infer', '--bogus']) == 2
    assert run([]) == 2


def test_help_exits_cleanly(capsys):
    assert run(['train', '--help']) == 0
    help_text = ' '.join(capsys.readouterr().out.split())
    assert 'default: 0.0005' in help_text


def test_runtime_failure_returns_one(tmp_path):
    assert run(['acc-map', '--pred', str(tmp_path / 'missing.nii'), '--ref', str(tmp_path / 'missing.nii'),
                '--out', str(tmp_path / 'acc.nii')]) == 1
    bad = tmp_path / 'bad.yaml'
    bad.write_text('unknown_section: {}\n')
    assert run(['identity-ckpt', '--config', str(bad), '--out', str(tmp_path / 'x.ckpt')]) == 1


def _run_pipeline(workspace, out):
    phantom = out / 'phantom'
    assert run(['phantom-gen', '--dims', '24', '--seed', '5', '--out', str(phantom)]) == 0
    assert run(['infer', '--in', str(phantom / 'input.nii'), '--ckpt', str(workspace / 'identity.ckpt'),
                '--out', str(out / 'sr.nii'), '--blend', 'cosine']) == 0
    assert run(['eval', '--pred', f'sr={out / "sr.nii"}', f'input={phantom / "input.nii"}',
                '--ref', str(phantom / 'target.nii'), '--masks', str(phantom), '--out', str(out / 'report.csv'),
                '--baseline', 'input', '--values', str(out / 'values.csv')]) == 0
    assert run(['train', '--data', str(phantom), '--out', str(out / 'run'), '--epochs', '2',
                '--patches-per-epoch', '2', '--val-patches', '2', '--patch-size', '8', '--embed-dim', '12',
                '--window', '2', '--depths', '2', '2', '--heads', '2', '4']) == 0


def test_reruns_are_byte_identical(workspace, tmp_path):
    _run_pipeline(workspace, tmp_path / 'a')
    _run_pipeline(workspace, tmp_path / 'b')
    names = ['phantom/target.nii', 'phantom/input.nii', 'phantom/wm.nii', 'phantom/cgm.nii', 'phantom/sgm.nii',
             'sr.nii', 'report.csv', 'report.txt', 'report_gain.csv', 'values.csv',
             'run/metrics.jsonl', 'run/config.json']
    for name in names:
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name
    history_a = pd.read_csv(tmp_path / 'a' / 'run' / 'history.csv')
    history_b = pd.read_csv(tmp_path / 'b' / 'run' / 'history.csv')
    pd.testing.assert_frame_equal(history_a.drop(columns='seconds'), history_b.drop(columns='seconds'))
