"""Command-line entry point: phantom-gen, train, infer, acc-map, eval, identity-ckpt."""
import argparse
import logging
import os
import sys
import traceback

from utils.config import SECTIONS, build_sections, dump_config, load_config
from utils.logger import LOGGER_NAME, get_logger, setup_logging

logger = get_logger('cli')

DEFAULTS = {name: cls().to_dict() for name, cls in SECTIONS.items()}


def _option(parser, flags, section, key, help, **kwargs):
    """Flag overriding `<section>.<key>`; left unset it defers to the config file."""
    default = DEFAULTS[section][key]
    parser.add_argument(*flags, dest=f'{section}.{key}', default=None,
                        help=f"{help} [{section}.{key}, default: {default}]", **kwargs)


def _triple(values):
    return values[0] if len(values) == 1 else values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='YAML config file')
    common.add_argument('--log-file', default=None, help='also write logs to this file')
    common.add_argument('--threads', type=int, default=None, help='cap torch intra-op threads')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='fodswin', description='FOD angular super-resolution toolkit')
    sub = parser.add_subparsers(dest='command', required=True, metavar='command')

    p = sub.add_parser('phantom-gen', parents=[common],
                       help='generate synthetic target/input FOD phantoms')
    _option(p, ['--dims'], 'phantom', 'dims', 'volume size (1 or 3 ints)', type=int, nargs='+')
    _option(p, ['--seed'], 'phantom', 'seed', 'phantom seed', type=int)
    _option(p, ['--kappa'], 'phantom', 'kappa', 'fiber kernel sharpness', type=float)
    _option(p, ['--subjects'], 'phantom', 'subjects', 'number of subjects (>1 writes a cohort)', type=int)
    _option(p, ['--split'], 'phantom', 'split', 'train/val/test proportions', type=int, nargs=3)
    _option(p, ['--truncate-lmax'], 'degrade', 'truncate_lmax', 'highest degree kept in the input', type=int)
    _option(p, ['--noise-sigma'], 'degrade', 'coeff_noise_sigma', 'coefficient noise std', type=float)
    _option(p, ['--damping'], 'degrade', 'amplitude_damping', 'l>=2 amplitude factor', type=float)
    p.add_argument('--out', required=True, help='output directory')

    p = sub.add_parser('train', parents=[common], help='train the model on phantom data')
    p.add_argument('--data', required=True, help='subject or cohort directory')
    p.add_argument('--out', default=None, help='output directory (default: training.checkpoint_dir)')
    _option(p, ['--epochs'], 'training', 'max_epochs', 'maximum epochs', type=int)
    _option(p, ['--lr'], 'training', 'learning_rate', 'Adam learning rate', type=float)
    _option(p, ['--batch'], 'training', 'batch_size', 'patches per minibatch', type=int)
    _option(p, ['--patches-per-epoch'], 'training', 'patches_per_epoch', 'training patches per epoch', type=int)
    _option(p, ['--val-patches'], 'training', 'val_patches', 'frozen validation patches', type=int)
    _option(p, ['--min-tissue'], 'training', 'min_tissue_frac', 'minimum tissue share of a patch', type=float)
    _option(p, ['--seed'], 'training', 'seed', 'training seed', type=int)
    _option(p, ['--val-seed'], 'training', 'val_seed', 'validation patch seed', type=int)
    _option(p, ['--patience'], 'training', 'patience', 'epochs without improvement before stopping', type=int)
    _option(p, ['--dtype'], 'training', 'dtype', 'float precision', choices=['float32', 'float64'])
    _option(p, ['--loss'], 'training', 'loss', 'training criterion', choices=['mse', 'normalized_mse'])
    _option(p, ['--wandb'], 'training', 'use_wandb', 'mirror metrics to wandb', action='store_const', const=True)
    _option(p, ['--patch-size'], 'model', 'patch_size', 'input patch size (1 or 3 ints)', type=int, nargs='+')
    _option(p, ['--embed-dim'], 'model', 'embed_dim', 'embedding width', type=int)
    _option(p, ['--window'], 'model', 'window_size', 'attention window (1 or 3 ints)', type=int, nargs='+')
    _option(p, ['--depths'], 'model', 'depths', 'blocks per stage', type=int, nargs='+')
    _option(p, ['--heads'], 'model', 'num_heads', 'heads per stage', type=int, nargs='+')
    _option(p, ['--no-shift'], 'model', 'shift', 'disable shifted windows', action='store_const', const=False)
    _option(p, ['--residual'], 'model', 'residual', 'predict a correction added to the input',
            action='store_const', const=True)

    p = sub.add_parser('infer', parents=[common], help='sliding-window super-resolution')
    p.add_argument('--in', dest='input', required=True, help='input FOD NIfTI')
    p.add_argument('--ckpt', required=True, help='model checkpoint')
    p.add_argument('--out', required=True, help='output FOD NIfTI')
    p.add_argument('--mask', default=None, help='optional brain mask NIfTI; outside voxels pass through')
    _option(p, ['--overlap'], 'inference', 'overlap', 'tile overlap fraction', type=float)
    _option(p, ['--blend'], 'inference', 'blend', 'tile blending window', choices=['uniform', 'cosine'])
    _option(p, ['--batch'], 'inference', 'batch_size', 'tiles per forward pass', type=int)

    p = sub.add_parser('acc-map', parents=[common], help='voxel-wise ACC volume')
    p.add_argument('--pred', required=True, help='FOD NIfTI to score')
    p.add_argument('--ref', required=True, help='reference FOD NIfTI')
    p.add_argument('--out', required=True, help='output ACC NIfTI (NaN = undefined)')

    p = sub.add_parser('eval', parents=[common], help='tissue-stratified ACC report')
    p.add_argument('--pred', required=True, nargs='+', help='FOD NIfTI per method, as NAME=PATH or PATH')
    p.add_argument('--ref', required=True, help='reference FOD NIfTI')
    p.add_argument('--masks', required=True, help='directory with wm.nii, cgm.nii, sgm.nii')
    p.add_argument('--out', default='report.csv',
                   help='report CSV, a .txt table is written alongside (default: report.csv)')
    p.add_argument('--baseline', default=None, help='method name to compute ACC gains against')
    p.add_argument('--values', default=None, help='long-format CSV of per-voxel ACC values')
    p.add_argument('--heatmap', default=None, help='directory for per-method heatmap slices')
    p.add_argument('--heatmap-region', default=None, help='only show voxels of this region in heatmaps')
    _option(p, ['--regions'], 'evaluation', 'regions', 'regions to report', nargs='+')
    _option(p, ['--heatmap-axis'], 'evaluation', 'heatmap_axis', 'heatmap slice axis', choices=['x', 'y', 'z'])
    _option(p, ['--heatmap-index'], 'evaluation', 'heatmap_index', 'heatmap slice index (middle if unset)',
            type=int)
    _option(p, ['--per-volume'], 'evaluation', 'per_volume', 'also report per-volume rows',
            action='store_const', const=True)

    p = sub.add_parser('identity-ckpt', parents=[common],
                       help='diagnostic checkpoint whose forward pass is the identity')
    _option(p, ['--patch-size'], 'model', 'patch_size', 'patch size (1 or 3 ints)', type=int, nargs='+')
    _option(p, ['--channels'], 'model', 'in_channels', 'SH coefficients per voxel', type=int)
    p.add_argument('--out', required=True, help='checkpoint path')
    return parser


def collect_overrides(args):
    overrides = {}
    for dest, value in vars(args).items():
        if '.' not in dest or value is None:
            continue
        section, key = dest.split('.', 1)
        if key in ('dims', 'patch_size', 'window_size'):
            value = _triple(value)
        overrides.setdefault(section, {})[key] = value
    return overrides


def _cmd_phantom_gen(args, sections):
    from data.phantom import gen_cohort, make_subject, save_split

    pcfg, dcfg = sections['phantom'], sections['degrade']
    if pcfg.subjects == 1:
        subject = make_subject('phantom', pcfg.dims, pcfg.seed, dcfg, pcfg.kappa)
        subject.save(args.out)
        print(f"Wrote phantom {pcfg.dims} to {args.out}")
        return
    subjects, assignment = gen_cohort(pcfg.subjects, pcfg.dims, pcfg.seed, dcfg, pcfg.split, pcfg.kappa)
    for subject in subjects:
        subject.save(os.path.join(args.out, subject.name))
    save_split(assignment, args.out)
    print(f"Wrote {len(subjects)} subjects to {args.out}: " +
          ", ".join(f"{k}={len(v)}" for k, v in assignment.items()))


def _cmd_train(args, sections):
    from train import train_model

    checkpoint, history = train_model(data_dir=args.data, output_dir=args.out, sections=sections)
    print(f"Best epoch {history.best_epoch}: val_mse={history.best_val_mse:.6g}; checkpoint {checkpoint}")


def _cmd_infer(args, sections):
    from data.nifti_io import read_nifti
    from data.volumes import FodVolume
    from inference import super_resolve

    icfg = sections['inference']
    volume = FodVolume.load(args.input)
    mask = None
    if args.mask:
        _, mask_data = read_nifti(args.mask)
        mask = mask_data.reshape(volume.spatial_dims) > 0.5
    result = super_resolve(args.ckpt, volume, overlap=icfg.overlap, blend=icfg.blend,
                           batch_size=icfg.batch_size, mask=mask)
    result.volume.save(args.out)
    print(f"forward passes: {result.forward_passes} (voxel-wise equivalent {result.voxelwise_passes}, "
          f"ratio {result.cost_ratio:.2e}); wall time {result.seconds:.2f}s")


def _cmd_acc_map(args, sections):
    from data.volumes import FodVolume
    from utils.metrics import acc_volume

    acc_map = acc_volume(FodVolume.load(args.pred), FodVolume.load(args.ref))
    acc_map.save(args.out)
    print(f"ACC map written to {args.out} ({int((~acc_map.defined).sum())} undefined voxels)")


def _parse_pred(entry):
    if '=' in entry:
        name, path = entry.split('=', 1)
        return name, path
    return os.path.splitext(os.path.basename(entry))[0], entry


def _cmd_eval(args, sections):
    from data.volumes import FodVolume, TissueFractions
    from utils.metrics import (acc_gain, acc_volume, compare_methods, export_region_values,
                               format_report, region_mask, write_report)
    from utils.visualization import export_heatmap_slice

    ecfg = sections['evaluation']
    reference = FodVolume.load(args.ref)
    fractions = TissueFractions.load_dir(args.masks)
    maps = {}
    for entry in args.pred:
        name, path = _parse_pred(entry)
        if name in maps:
            raise ValueError(f"duplicate method name {name!r}")
        maps[name] = acc_volume(FodVolume.load(path), reference)

    report = compare_methods(maps, fractions, ecfg.regions, per_volume=ecfg.per_volume)
    write_report(report, args.out, os.path.splitext(args.out)[0] + '.txt')
    print(format_report(report))
    if args.baseline:
        gain = acc_gain(report, args.baseline)
        gain.to_csv(os.path.splitext(args.out)[0] + '_gain.csv', index=False, float_format='%.10g')
        print(gain.to_string(index=False, float_format=lambda x: f'{x:.4f}'))
    if args.values:
        export_region_values(maps, fractions, ecfg.regions, args.values)
    if args.heatmap:
        region = region_mask(fractions, args.heatmap_region) if args.heatmap_region else None
        for name, acc_map in maps.items():
            export_heatmap_slice(acc_map, ecfg.heatmap_axis, ecfg.heatmap_index,
                                 os.path.join(args.heatmap, f'{name}_acc.pgm'), region_mask=region)


def _cmd_identity_ckpt(args, sections):
    from models.swin_fod import identity_model

    mcfg = sections['model']
    model = identity_model(patch_size=mcfg.patch_size, in_channels=mcfg.in_channels)
    model.save_pretrained(args.out, identity=True)
    print(f"Identity checkpoint written to {args.out}")


COMMANDS = {
    'phantom-gen': _cmd_phantom_gen,
    'train': _cmd_train,
    'infer': _cmd_infer,
    'acc-map': _cmd_acc_map,
    'eval': _cmd_eval,
    'identity-ckpt': _cmd_identity_ckpt,
}


def run(argv=None) -> int:
    """Run one command; returns 0 on success, 1 on failure, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    setup_logging(args.log_file, logging.DEBUG if args.verbose else logging.INFO)
    if args.threads:
        import torch
        torch.set_num_threads(args.threads)
    try:
        raw = load_config(args.config)
        if not args.verbose:
            level = str((raw.get('logging') or {}).get('level', 'INFO')).upper()
            logging.getLogger(LOGGER_NAME).setLevel(getattr(logging, level, logging.INFO))
        sections = build_sections(raw, collect_overrides(args))
        print(dump_config(sections), end='')
        COMMANDS[args.command](args, sections)
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug(traceback.format_exc())
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
