#!/usr/bin/env python3
"""
Command-line entry points: synth, labelgen, train, eval and pilot.

Every command resolves a RunConfig (profile, then --config file, then flags),
writes it to ``resolved_config.env`` in its output directory, and exits with
the code of any BshError it hits (2 config, 3 data, 4 numeric).
"""
import csv
import functools
import logging
import os
import sys

import click
from dotenv import load_dotenv

import bank_db
from config import RESOLVED_FILENAME, RunConfig, load_config, resolve_threads, with_overrides, write_resolved
from data_io import KittiDataset, read_labels, save_frame, synth_scene, write_labels, write_split
from errors import BshError, DataError
from kitti_eval import evaluate, format_ap_table, write_reports
from shape_labels import write_heatmap
from train_manager import (TrainingManager, evaluate_model, load_model, pilot_configs,
                           shape_label)

logger = logging.getLogger(__name__)


def setup_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, os.getenv('BSH_LOG_LEVEL', 'INFO').upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logging.getLogger().setLevel(level)


def common_options(func):
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='key=value config file')
    @click.option('--profile', type=click.Choice(['desk', 'kitti']), default=None, help='Default profile')
    @click.option('--seed', type=int, default=None, help='Random seed')
    @click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None, help='Output directory')
    @click.option('--verbose', '-v', is_flag=True, help='Debug logging')
    @functools.wraps(func)
    def wrapper(config_path, profile, seed, out_dir, verbose, **kwargs):
        setup_logging(verbose)
        try:
            cfg = load_config(config_path, profile, {'seed': seed, 'out_dir': out_dir})
            return func(cfg, **kwargs)
        except BshError as e:
            logger.error(f"{type(e).__name__}: {e}", exc_info=verbose)
            sys.exit(e.exit_code)
    return wrapper


def _dataset(path: str, split: str) -> KittiDataset:
    if not os.path.isdir(path):
        raise DataError(f"Dataset directory not found: {path}")
    return KittiDataset(path, split)


def _bank(data_dir: str):
    path = bank_db.default_path(data_dir)
    if not os.path.exists(path):
        logger.warning(f"No shape bank at {path}; labels use observed points only")
        return None
    return bank_db.load_bank(path)


@click.group()
def cli():
    """Shape-aware pillar detector pipeline."""
    load_dotenv()


@cli.command()
@common_options
def synth(cfg: RunConfig):
    """Generate a synthetic occlusion dataset in KITTI layout."""
    root = cfg.out_dir if cfg.out_dir != RunConfig.out_dir else cfg.data_dir
    bank_path = bank_db.default_path(root)
    if os.path.exists(bank_path):
        backup = bank_db.backup_database(bank_path)
        logger.info(f"Replacing existing shape bank (backup: {backup})")
        os.remove(bank_path)
    n_val = max(1, int(round(cfg.frames * cfg.val_fraction)))
    frame_ids = [f'{i:06d}' for i in range(cfg.frames)]
    train_ids, val_ids = frame_ids[:-n_val], frame_ids[-n_val:]
    for i, frame_id in enumerate(frame_ids):
        frame, entries = synth_scene(cfg.scene_cfg(cfg.seed * 1_000_003 + i), frame_id)
        save_frame(root, frame)
        bank_db.save_entries(bank_path, entries, 'train' if frame_id in train_ids else 'val')
        if (i + 1) % 50 == 0 or i + 1 == cfg.frames:
            logger.info(f"Generated {i + 1}/{cfg.frames} frames")
    write_split(root, 'train', train_ids)
    write_split(root, 'val', val_ids)
    write_resolved(with_overrides(cfg, data_dir=root, out_dir=root), root)
    click.echo(f"Wrote {cfg.frames} frames ({len(train_ids)} train / {len(val_ids)} val) to {root}")


@cli.command()
@common_options
@click.option('--data', 'data_dir', type=click.Path(), default=None, help='Dataset root')
@click.option('--split', default='train', show_default=True)
def labelgen(cfg: RunConfig, data_dir, split):
    """Render shape heatmaps for every frame of a split."""
    data_dir = data_dir or cfg.data_dir
    dataset = _dataset(data_dir, split)
    bank = _bank(data_dir)
    out = os.path.join(cfg.out_dir, 'heatmaps')
    grid = cfg.grid()
    os.makedirs(out, exist_ok=True)
    for frame in dataset:
        write_heatmap(os.path.join(out, f'{frame.frame_id}.bin'), shape_label(frame, bank, cfg), grid)
    write_resolved(with_overrides(cfg, data_dir=data_dir), cfg.out_dir)
    click.echo(f"Wrote {len(dataset)} heatmaps to {out}")


@cli.command()
@common_options
@click.option('--data', 'data_dir', type=click.Path(), default=None, help='Dataset root')
def train(cfg: RunConfig, data_dir):
    """Train a model and write checkpoint.npz and loss.csv."""
    data_dir = data_dir or cfg.data_dir
    cfg = with_overrides(cfg, data_dir=data_dir)
    frames = list(_dataset(data_dir, 'train'))
    manager = TrainingManager(cfg, frames, _bank(data_dir))
    manager.train()
    paths = manager.save(cfg.out_dir)
    write_resolved(cfg, cfg.out_dir)
    click.echo(f"Checkpoint: {paths['checkpoint']}\nLoss curve: {paths['loss_csv']}")


@cli.command(name='eval')
@common_options
@click.option('--data', 'data_dir', type=click.Path(), default=None, help='Dataset root')
@click.option('--split', default='val', show_default=True)
@click.option('--checkpoint', type=click.Path(dir_okay=False), default=None, help='Model checkpoint')
@click.option('--detections', type=click.Path(file_okay=False), default=None,
              help='Directory of KITTI result files to score instead of running a model')
def eval_cmd(cfg: RunConfig, data_dir, split, checkpoint, detections):
    """Compute AP_R40 tables, PR curves and the recall-interval breakdown."""
    if bool(checkpoint) == bool(detections):
        raise click.UsageError('Pass exactly one of --checkpoint or --detections')
    data_dir = data_dir or cfg.data_dir
    dataset = _dataset(data_dir, split)
    frames = list(dataset)
    threads = resolve_threads()
    if checkpoint:
        if not os.path.exists(checkpoint):
            raise DataError(f"Checkpoint not found: {checkpoint}")
        trained = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), RESOLVED_FILENAME)
        if os.path.exists(trained):
            cfg = with_overrides(load_config(trained), out_dir=cfg.out_dir)
        model = load_model(cfg, checkpoint)
        result, dets = evaluate_model(model, frames, cfg, threads, _bank(data_dir))
        for frame in frames:
            write_labels(os.path.join(cfg.out_dir, 'results', f'{frame.frame_id}.txt'),
                         dets[frame.frame_id], frame.calib)
    else:
        det_map = {}
        for frame in frames:
            path = os.path.join(detections, f'{frame.frame_id}.txt')
            det_map[frame.frame_id] = read_labels(path, frame.calib, result=True)[0] if os.path.exists(path) else []
        ground_truth = {f.frame_id: (f.objects, f.dontcare) for f in frames}
        result = evaluate(ground_truth, det_map, cfg.class_names, cfg.eval_cfg(), threads=threads)
    write_reports(cfg.out_dir, result)
    write_resolved(with_overrides(cfg, data_dir=data_dir), cfg.out_dir)
    click.echo(format_ap_table(result.rows), nl=False)


@cli.command()
@common_options
@click.option('--data', 'data_dir', type=click.Path(), default=None, help='Dataset root')
def pilot(cfg: RunConfig, data_dir):
    """Paired runs with and without ground-truth heatmap concatenation."""
    data_dir = data_dir or cfg.data_dir
    cfg = with_overrides(cfg, data_dir=data_dir)
    train_frames = list(_dataset(data_dir, 'train'))
    val_frames = list(_dataset(data_dir, 'val'))
    bank = _bank(data_dir)
    threads = resolve_threads()
    rows = []
    for seed in cfg.pilot_seeds:
        aps = {}
        for variant, run_cfg in pilot_configs(cfg, seed).items():
            logger.info(f"Pilot seed {seed}: training {variant}")
            manager = TrainingManager(run_cfg, train_frames, bank)
            manager.train()
            result, _ = evaluate_model(manager.model, val_frames, run_cfg, threads, bank)
            aps[variant] = result.ap(cfg.class_names[0], 'moderate', '3d')
        rows.append({'seed': seed, 'baseline_ap': aps['baseline'], 'gt_heatmap_ap': aps['gt_heatmap'],
                     'delta': aps['gt_heatmap'] - aps['baseline']})
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, 'pilot.csv'), 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=['seed', 'baseline_ap', 'gt_heatmap_ap', 'delta'])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f'{v:.4f}' if isinstance(v, float) else v) for k, v in row.items()})
    lines = [f"{'seed':>6}{'baseline':>12}{'gt_heatmap':>12}{'delta':>10}"]
    lines += [f"{r['seed']:>6}{r['baseline_ap']:>12.2f}{r['gt_heatmap_ap']:>12.2f}{r['delta']:>10.2f}"
              for r in rows]
    text = '\n'.join(lines) + '\n'
    with open(os.path.join(cfg.out_dir, 'pilot.txt'), 'w') as fh:
        fh.write(text)
    write_resolved(cfg, cfg.out_dir)
    click.echo(text, nl=False)


if __name__ == '__main__':
    cli()
