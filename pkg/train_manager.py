"""
Training manager: batches frames, renders shape labels, runs the optimiser
and records the loss curve. Also hosts inference over a list of frames.
"""
import csv
import logging
import os
from dataclasses import replace
from datetime import datetime
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from config import RunConfig
from data_io import Calibration, Frame, ObjectLabel, augment, detection_to_label, in_range_objects
from geometry import ScoredBox
from kitti_eval import EvalResult, evaluate
from model import BshDet3D
from optim import adam_step, cosine_lr, load_checkpoint, save_checkpoint
from shape_labels import ShapeBank, make_shape_label

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ('step', 'lr', 'total', 'shape', 'rpn', 'rcnn')
CHECKPOINT_FILENAME = 'checkpoint.npz'
LOSS_FILENAME = 'loss.csv'


def bank_without_frame(bank: Optional[ShapeBank], frame_id: str) -> Optional[ShapeBank]:
    """The bank minus entries harvested from ``frame_id``."""
    if bank is None:
        return None
    prefix = f'{frame_id}:'
    return ShapeBank([e for e in bank.entries if not e.source.startswith(prefix)])


def shape_label(frame: Frame, bank: Optional[ShapeBank], cfg: RunConfig) -> np.ndarray:
    heat, stats = make_shape_label(frame.points, frame.objects, bank_without_frame(bank, frame.frame_id),
                                   cfg.grid(), cfg.class_names, cfg.retrieval_k, cfg.use_gaussian)
    if stats.short_retrievals:
        logger.debug(f"Frame {frame.frame_id}: {stats.short_retrievals} retrievals returned fewer than "
                     f"{cfg.retrieval_k} donors")
    return heat.astype(T.default_dtype())


class TrainingManager:
    """Owns the model, the data and the optimiser state of one training run."""

    def __init__(self, cfg: RunConfig, frames: Sequence[Frame], bank: Optional[ShapeBank] = None):
        if not frames:
            raise ValueError("Training needs at least one frame")
        self.cfg = cfg
        self.frames = list(frames)
        self.bank = bank
        with T.precision(cfg.precision):
            self.model = BshDet3D(cfg.model_cfg(), seed=cfg.seed)
        if cfg.freeze_psc and self.model.psc is not None:
            frozen = self.model.store.freeze('psc.')
            logger.info(f"Froze {frozen} shape-completion parameters")
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.needs_labels = self.model.psc is not None or self.model.cfg.heatmap_source == 'gt'
        self._label_cache: Dict[str, np.ndarray] = {}
        self.history: List[dict] = []
        self.progress = {
            'training': False,
            'current_phase': '',
            'step': 0,
            'total_steps': cfg.steps,
            'last_loss': None,
            'start_time': None,
        }

    def _prepare(self, frame: Frame) -> Frame:
        if self.cfg.augment:
            grid = self.model.cfg.grid
            frame = augment(frame, self.rng, self.bank, self.cfg.augment_cfg(), grid.x_range, grid.y_range)
            frame = in_range_objects(frame, grid.x_range, grid.y_range)
        return frame

    def _label(self, frame: Frame) -> Optional[np.ndarray]:
        if not self.needs_labels:
            return None
        if self.cfg.augment:
            return shape_label(frame, self.bank, self.cfg)
        if frame.frame_id not in self._label_cache:
            self._label_cache[frame.frame_id] = shape_label(frame, self.bank, self.cfg)
        return self._label_cache[frame.frame_id]

    def sample_batch(self) -> List[Frame]:
        size = min(self.cfg.batch_size, len(self.frames))
        idx = self.rng.choice(len(self.frames), size=size, replace=False)
        return [self._prepare(self.frames[i]) for i in idx]

    def train_step(self, step: int) -> dict:
        """One optimiser step over a batch; returns the logged row."""
        cfg = self.cfg
        class_names = self.model.cfg.class_names
        lr = cosine_lr(cfg.lr, step, cfg.steps, cfg.min_lr) if cfg.cosine else cfg.lr
        self.model.store.zero_grad()
        terms = {k: 0.0 for k in LOSS_COLUMNS[2:]}
        batch_total = None
        batch = self.sample_batch()
        for frame in batch:
            target = self._label(frame)
            out = self.model.forward(frame.points, target, training=True)
            losses = self.model.losses(out, frame.boxes(class_names), frame.class_ids(class_names),
                                       target, self.rng)
            batch_total = losses['total'] if batch_total is None else batch_total + losses['total']
            for key in terms:
                terms[key] += float(losses[key].data) / len(batch)
        T.mul(batch_total, 1.0 / len(batch)).backward()
        adam_step(self.model.store, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        row = {'step': step, 'lr': lr, **terms}
        self.history.append(row)
        return row

    def train(self, loss_csv: Optional[str] = None) -> List[dict]:
        self.progress.update({'training': True, 'current_phase': 'Training', 'step': 0,
                              'start_time': datetime.now()})
        logger.info(f"Training for {self.cfg.steps} steps on {len(self.frames)} frames "
                    f"(batch {self.cfg.batch_size}, lr {self.cfg.lr})")
        try:
            with T.precision(self.cfg.precision):
                for step in range(self.cfg.steps):
                    row = self.train_step(step)
                    self.progress['step'] = step + 1
                    self.progress['last_loss'] = row['total']
                    if step % self.cfg.log_every == 0 or step == self.cfg.steps - 1:
                        logger.info(f"step {step + 1}/{self.cfg.steps} lr={row['lr']:.5f} "
                                    f"total={row['total']:.4f} shape={row['shape']:.4f} "
                                    f"rpn={row['rpn']:.4f} rcnn={row['rcnn']:.4f}")
        except Exception as e:
            logger.error(f"Training stopped at step {self.progress['step']}: {e}", exc_info=True)
            raise
        finally:
            self.progress['training'] = False
            self.progress['current_phase'] = 'Finished'
        if loss_csv:
            write_loss_csv(loss_csv, self.history)
        return self.history

    def save(self, out_dir: str) -> Dict[str, str]:
        paths = {'checkpoint': save_checkpoint(self.model.store, os.path.join(out_dir, CHECKPOINT_FILENAME)),
                 'loss_csv': write_loss_csv(os.path.join(out_dir, LOSS_FILENAME), self.history)}
        return paths


def write_loss_csv(path: str, rows: Sequence[dict]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for row in rows:
            writer.writerow([row['step']] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])
    return path


def read_loss_csv(path: str) -> List[dict]:
    with open(path, newline='') as fh:
        return [{k: (int(v) if k == 'step' else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def load_model(cfg: RunConfig, checkpoint: str) -> BshDet3D:
    with T.precision(cfg.precision):
        model = BshDet3D(cfg.model_cfg(), seed=cfg.seed)
    load_checkpoint(model.store, checkpoint)
    return model


def detect_frames(model: BshDet3D, frames: Sequence[Frame],
                  gt_heatmaps: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, List[ObjectLabel]]:
    """Detections per frame id as result labels (LiDAR-frame boxes with scores)."""
    class_names = model.cfg.class_names
    results = {}
    for frame in frames:
        heat = gt_heatmaps.get(frame.frame_id) if gt_heatmaps else None
        dets: List[ScoredBox] = model.predict(frame.points, heat)
        calib = frame.calib or Calibration.canonical()
        results[frame.frame_id] = [detection_to_label(d, class_names, calib) for d in dets]
    logger.info(f"Ran inference on {len(frames)} frames")
    return results


def evaluate_model(model: BshDet3D, frames: Sequence[Frame], cfg: RunConfig, threads: int = 1,
                   bank: Optional[ShapeBank] = None) -> Tuple[EvalResult, Dict[str, List[ObjectLabel]]]:
    """AP table for the model on ``frames`` and the detections it was computed from."""
    gt_heatmaps = None
    if model.cfg.heatmap_source == 'gt':
        with T.precision(cfg.precision):
            gt_heatmaps = {f.frame_id: shape_label(f, bank, cfg) for f in frames}
    with T.precision(cfg.precision):
        detections = detect_frames(model, frames, gt_heatmaps)
    ground_truth = {f.frame_id: (f.objects, f.dontcare) for f in frames}
    result = evaluate(ground_truth, detections, model.cfg.class_names, cfg.eval_cfg(), threads=threads)
    return result, detections


def pilot_configs(cfg: RunConfig, seed: int) -> Dict[str, RunConfig]:
    """Detector-only baseline and the same detector fed ground-truth heatmaps."""
    base = replace(cfg, seed=seed, use_psc=False, two_stage=False)
    return {'baseline': replace(base, fusion='none', heatmap_source='psc'),
            'gt_heatmap': replace(base, fusion='concat', heatmap_source='gt')}
