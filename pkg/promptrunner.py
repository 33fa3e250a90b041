#!/usr/bin/env python3
"""
Command-line entry point: python3 promptrunner.py <command> [options]

    anchors     build an anchor grid and write it as JSON
    interp      interpolation weights for one gaze direction
    train       train on the source domain, write manifest, metrics and checkpoint
    eval        evaluate a checkpoint on one or all synthetic domains
    ablate      train every variant of an ablation axis over several seeds
    gradcheck   finite-difference suite over all hand-written gradients
    negatives   dump the global negative bank as plot-ready CSV

Exit codes: 0 ok, 2 config error, 3 numerical singularity, 4 gradient-check failure,
1 anything else.
"""
import argparse
import json
import os
import sys
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from anchors import AnchorSet, build_anchor_grid, get_interpolator, INTERPOLATORS
from constants import VERSION, default_config_path, runs_path, seed_env_var
from encoders import init_parameters
from errors import GazePromptError, ConfigError
from geometry import YawPitch, yawpitch_to_vec, angular_error, normalize, vec_to_yawpitch
from gradcheck import TARGETS, run_gradcheck
from harness import (TrainConfig, ABLATION_AXES, DOMAIN_PRESETS, domain_dataset, train, evaluate_domains,
                     evaluate_text_matching, run_ablation, save_checkpoint, load_checkpoint)
from losses import build_negative_bank


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: Dict[str, int]
    outputs: Dict[str, str] = field(default_factory=dict)
    seed_override: Optional[int] = None
    version: str = VERSION

    @classmethod
    def for_config(cls, command, config: TrainConfig, seed_override=None, **outputs):
        return cls(command, config.to_dict(), config.seeds, {k: str(v) for k, v in outputs.items()}, seed_override)

    def write(self, path):
        with open(path, 'w') as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write('\n')


def seed_override() -> Optional[int]:
    value = os.environ.get(seed_env_var())
    if value is None or value == '':
        return None
    try:
        return int(value)
    except ValueError as e:
        raise ConfigError(f'expected an integer seed, got {value!r}', key_path=seed_env_var()) from e


def load_config(path=None, **overrides) -> TrainConfig:
    """JSON config file (the shipped default when path is None) with flag overrides on top."""
    path = Path(path) if path else default_config_path()
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f'cannot read {path}: {e.strerror}', key_path='config') from e
    config = TrainConfig.from_json(text)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        config = config.replace(**overrides)
    override = seed_override()
    if override is not None:
        config = config.with_seed(override)
    return config


def config_overrides(args) -> dict:
    return {
        'epochs': args.epochs,
        'batch_size': args.batch_size,
        'lr': args.lr,
        'num_negatives': args.num_negatives,
        'interpolation': args.interpolation,
        'scheme': args.scheme,
        'n_source': args.n_source,
        'n_target': args.n_target,
        'workers': args.workers,
    }


def cmd_anchors(args):
    anchor_set = build_anchor_grid(args.yaw_step, args.pitch_step, args.token_dim, args.seed)
    if args.out:
        Path(args.out).write_text(anchor_set.to_json())
        print(f'N={anchor_set.n}')
    else:
        print(f'N={anchor_set.n}', file=sys.stderr)
        print(anchor_set.to_json())


def cmd_interp(args):
    if args.anchors:
        anchor_set = AnchorSet.from_json(Path(args.anchors).read_text())
    else:
        anchor_set = build_anchor_grid(30.0, 30.0, 16, 0)
    target = YawPitch(args.yaw, args.pitch).check()
    w = get_interpolator(args.scheme).weights(target, anchor_set)
    print(f'{"anchor":>6}  {"yaw":>7}  {"pitch":>6}  weight')
    for index, weight in w.entries():
        a = anchor_set.anchor(index)
        print(f'{index:6d}  {a.yp.yaw:7.1f}  {a.yp.pitch:6.1f}  {weight:.6f}')
    reconstructed = normalize(w.weights @ anchor_set.gazes[w.indices], 'reconstructed gaze')
    print(f'reconstruction error: {angular_error(reconstructed, yawpitch_to_vec(target)):.6f} deg')


def cmd_train(args):
    config = load_config(args.config, **config_overrides(args))
    out_dir = Path(args.out_dir) if args.out_dir else runs_path() / 'train'
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {'metrics': out_dir / 'metrics.csv', 'checkpoint': out_dir / 'checkpoint.json'}
    RunManifest.for_config('train', config, seed_override(), **outputs).write(out_dir / 'manifest.json')
    print(f'Training {config.epochs} epochs on {config.n_source} {config.source_domain} samples, '
          f'evaluating on {config.target_domain}')
    source = domain_dataset(config, config.source_domain)
    target = domain_dataset(config, config.target_domain)
    params, log = train(config, source, target, progress=not args.quiet)
    log.to_csv(outputs['metrics'])
    save_checkpoint(outputs['checkpoint'], params, config)
    last = log.rows[-1]
    print(f'Final source error {last.src_err_deg:.3f} deg, target error {last.tgt_err_deg:.3f} deg')
    print(f'Wrote {outputs["metrics"]} and {outputs["checkpoint"]}')


def cmd_eval(args):
    params, config = load_checkpoint(args.ckpt)
    if config is None:
        config = load_config()
    if args.data_seed is not None:
        config = config.replace(data_seed=args.data_seed)
    domains = list(DOMAIN_PRESETS) if args.domain == 'all' else [args.domain]
    table = evaluate_domains(params, config, domains, args.workers)
    if args.text_matching:
        table['text_match_err_deg'] = [evaluate_text_matching(params, config, domain_dataset(config, d))
                                       for d in domains] + [np.nan]
    print(table.to_string(index=False))


def cmd_ablate(args):
    config = load_config(args.config, **config_overrides(args))
    out = Path(args.out) if args.out else runs_path() / f'ablation_{args.axis}.csv'
    out.parent.mkdir(parents=True, exist_ok=True)
    RunManifest.for_config('ablate', config, seed_override(), table=out).write(out.with_suffix('.manifest.json'))
    table = run_ablation(args.axis, config, range(args.seeds), args.values)
    table.to_csv(out, index=False)
    print(table.to_string(index=False))
    print(f'Wrote {out}')


def cmd_gradcheck(args):
    report = run_gradcheck(args.target, args.configs, args.seed, progress=not args.quiet)
    for line in report.lines():
        print(line)
    print(f'worst relative error {report.worst_overall:.3e} over {report.configs} configurations per check')
    report.raise_on_failure()


def cmd_negatives(args):
    if args.ckpt:
        params, config = load_checkpoint(args.ckpt)
        config = config or load_config()
    else:
        config = load_config(args.config)
        params = init_parameters(config)
    grid = build_anchor_grid(config.yaw_step, config.pitch_step, config.token_dim, config.init_seed)
    bank = build_negative_bank(args.k, grid, params, config.interpolation)
    angles = [vec_to_yawpitch(g) for g in bank.gazes]
    table = pd.DataFrame({'x': bank.gazes[:, 0], 'y': bank.gazes[:, 1], 'z': bank.gazes[:, 2],
                          'yaw': [a.yaw for a in angles], 'pitch': [a.pitch for a in angles]})
    features = pd.DataFrame(bank.features, columns=[f'f{i}' for i in range(bank.features.shape[1])])
    table = pd.concat([table, features], axis=1)
    if args.out:
        table.to_csv(args.out, index_label='index')
        print(f'Wrote {bank.k} negatives to {args.out}')
    else:
        print(table.to_csv(index_label='index'), end='')


def add_config_flags(p):
    p.add_argument('--config', help='JSON training config; the shipped default when omitted')
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--num-negatives', type=int)
    p.add_argument('--interpolation', choices=sorted(INTERPOLATORS))
    p.add_argument('--scheme', choices=['literal-cos', 'clamped-cos', 'distance', 'uniform'])
    p.add_argument('--n-source', type=int)
    p.add_argument('--n-target', type=int)
    p.add_argument('--workers', type=int)
    p.add_argument('--quiet', action='store_true')


def build_parser():
    parser = argparse.ArgumentParser(
        prog='PromptRunner',
        description='Gaze prompt interpolation and contrastive regression experiments.',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('anchors', help='build and serialize an anchor grid')
    p.add_argument('--yaw-step', type=float, default=30.0)
    p.add_argument('--pitch-step', type=float, default=30.0)
    p.add_argument('--token-dim', type=int, default=16)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser('interp', help='interpolation weights for one direction')
    p.add_argument('--yaw', type=float, required=True)
    p.add_argument('--pitch', type=float, required=True)
    p.add_argument('--scheme', choices=sorted(INTERPOLATORS), default='spherical')
    p.add_argument('--anchors', help='anchor set JSON; the default 30 degree grid when omitted')
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser('train', help='train and write metrics.csv / checkpoint.json')
    add_config_flags(p)
    p.add_argument('--out-dir')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--data-seed', type=int)
    p.add_argument('--domain', choices=sorted(DOMAIN_PRESETS) + ['all'], default='target')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--text-matching', action='store_true')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('ablate', help='run an ablation axis over several seeds')
    p.add_argument('--axis', choices=ABLATION_AXES, required=True)
    p.add_argument('--seeds', type=int, default=5)
    p.add_argument('--values', type=float, nargs='+', help='K values or mcr loss weights')
    p.add_argument('--out')
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('gradcheck', help='finite-difference gradient suite')
    p.add_argument('--target', choices=TARGETS, default='all')
    p.add_argument('--configs', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--quiet', action='store_true')
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('negatives', help='dump the global negative bank as CSV')
    p.add_argument('--k', type=int, default=256)
    p.add_argument('--ckpt')
    p.add_argument('--config')
    p.add_argument('--out')
    p.set_defaults(func=cmd_negatives)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GazePromptError as e:
        print(f'{type(e).__name__}: {e}', file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
