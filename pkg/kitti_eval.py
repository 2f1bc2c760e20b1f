"""
KITTI-protocol evaluation: difficulty bucketing, greedy per-frame matching,
AP over 40 recall positions and the recall-interval TP/FP breakdown.
"""
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from data_io import ObjectLabel
from geometry import Box3D, ScoredBox, boxes_to_array, iou_matrix

logger = logging.getLogger(__name__)

DIFFICULTIES = ('easy', 'moderate', 'hard')
METRICS = ('3d', 'bev')
NUM_RECALL_POSITIONS = 40
RECALL_INTERVALS = 4
CLASS_IOU = {'Car': 0.7, 'Pedestrian': 0.5, 'Cyclist': 0.5}
# Ground-truth classes that are ignored rather than counted as misses.
CONFUSABLE = {'Car': ('Van',), 'Pedestrian': ('Person_sitting',), 'Cyclist': ()}
DONTCARE_OVERLAP = 0.5


@dataclass(frozen=True)
class DifficultyRule:
    min_height: float
    max_occluded: int
    max_truncated: float
    max_distance: float


KITTI_RULES = {
    'easy': DifficultyRule(40.0, 0, 0.15, math.inf),
    'moderate': DifficultyRule(25.0, 1, 0.30, math.inf),
    'hard': DifficultyRule(25.0, 2, 0.50, math.inf),
}

# Synthetic frames carry no image boxes; range and the occlusion level stand in.
SYNTH_RULES = {
    'easy': DifficultyRule(0.0, 0, 1.0, 30.0),
    'moderate': DifficultyRule(0.0, 1, 1.0, 50.0),
    'hard': DifficultyRule(0.0, 2, 1.0, math.inf),
}


@dataclass
class EvalConfig:
    class_ious: Dict[str, float] = field(default_factory=lambda: dict(CLASS_IOU))
    metric: str = '3d'
    kitti_rules: Dict[str, DifficultyRule] = field(default_factory=lambda: dict(KITTI_RULES))
    synth_rules: Dict[str, DifficultyRule] = field(default_factory=lambda: dict(SYNTH_RULES))

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got '{self.metric}'")
        for name, thresh in self.class_ious.items():
            if not 0.0 < thresh <= 1.0:
                raise ValueError(f"IoU threshold for {name} must lie in (0, 1], got {thresh}")

    @property
    def recall_positions(self) -> np.ndarray:
        return np.arange(1, NUM_RECALL_POSITIONS + 1) / NUM_RECALL_POSITIONS

    def threshold(self, class_name: str) -> float:
        return self.class_ious.get(class_name, 0.5)

    def with_metric(self, metric: str) -> 'EvalConfig':
        return EvalConfig(dict(self.class_ious), metric, dict(self.kitti_rules), dict(self.synth_rules))


def meets_difficulty(label: ObjectLabel, difficulty: str, cfg: EvalConfig) -> bool:
    if label.is_synthetic:
        rule = cfg.synth_rules[difficulty]
        return label.distance < rule.max_distance and label.occluded <= rule.max_occluded
    rule = cfg.kitti_rules[difficulty]
    return (label.bbox_height >= rule.min_height and label.occluded <= rule.max_occluded
            and label.truncated <= rule.max_truncated)


def difficulty_of(label: ObjectLabel, cfg: EvalConfig = None) -> Optional[str]:
    """Easiest level the label qualifies for, or None."""
    cfg = cfg or EvalConfig()
    for level in DIFFICULTIES:
        if meets_difficulty(label, level, cfg):
            return level
    return None


@dataclass
class MatchRecord:
    scores: np.ndarray
    tp: np.ndarray
    ignored: np.ndarray
    matched_gt: np.ndarray
    gt_matched: np.ndarray
    gt_ignored: np.ndarray

    @property
    def num_gt(self) -> int:
        return int(np.sum(~self.gt_ignored))

    @property
    def counted(self) -> np.ndarray:
        return ~self.ignored

    @property
    def num_tp(self) -> int:
        return int(np.sum(self.tp & self.counted))

    @property
    def num_fp(self) -> int:
        return int(np.sum(~self.tp & self.counted))


def match_frame(dets: Sequence[ScoredBox], gts: Sequence[Box3D], cfg: EvalConfig = None,
                class_name: str = 'Car', gt_ignored: Optional[Sequence[bool]] = None,
                det_ignored: Optional[Sequence[bool]] = None) -> MatchRecord:
    """Greedy matching of one frame and one class in descending score order.

    A detection is TP when its best unmatched counted ground truth reaches the
    class threshold. Otherwise, a detection overlapping an ignored ground truth
    (or flagged in ``det_ignored``) is neither TP nor FP.
    """
    cfg = cfg or EvalConfig()
    thresh = cfg.threshold(class_name)
    n_det, n_gt = len(dets), len(gts)
    gt_ign = np.zeros(n_gt, dtype=bool) if gt_ignored is None else np.asarray(gt_ignored, dtype=bool)
    pre_ign = np.zeros(n_det, dtype=bool) if det_ignored is None else np.asarray(det_ignored, dtype=bool)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros(n_det, dtype=bool)
    ignored = np.zeros(n_det, dtype=bool)
    matched_gt = np.full(n_det, -1, dtype=np.int64)
    gt_matched = np.zeros(n_gt, dtype=bool)
    if n_det and n_gt:
        ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(list(gts)), cfg.metric)
    else:
        ious = np.zeros((n_det, n_gt))
    for i in np.argsort(-scores, kind='stable'):
        free = (~gt_matched) & (~gt_ign) & (ious[i] >= thresh)
        if free.any():
            j = int(np.argmax(np.where(free, ious[i], -1.0)))
            gt_matched[j] = True
            matched_gt[i] = j
            tp[i] = True
        elif pre_ign[i] or np.any(gt_ign & (ious[i] >= thresh)):
            ignored[i] = True
    return MatchRecord(scores, tp, ignored, matched_gt, gt_matched, gt_ign)


def _counted(records: Sequence[MatchRecord]) -> Tuple[np.ndarray, np.ndarray, int]:
    scores = np.concatenate([r.scores[r.counted] for r in records]) if records else np.zeros(0)
    tp = np.concatenate([r.tp[r.counted] for r in records]) if records else np.zeros(0, dtype=bool)
    num_gt = sum(r.num_gt for r in records)
    return scores, tp, num_gt


def pr_curve(records: Sequence[MatchRecord]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, recall, precision), one point per distinct score, highest first."""
    scores, tp, num_gt = _counted(records)
    if not len(scores) or num_gt == 0:
        return np.zeros(0), np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind='stable')
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # Last index of every tie group, so equal scores form one threshold.
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    return scores[ends], ctp[ends] / num_gt, ctp[ends] / (ctp[ends] + cfp[ends])


def ap_r40(records: Sequence[MatchRecord]) -> float:
    """AP in percent from interpolated precision at recall i/40, i = 1..40.

    Returns NaN (and logs a warning) when there are no counted ground truths.
    """
    _, _, num_gt = _counted(records)
    if num_gt == 0:
        logger.warning("AP requested with zero ground truths; result is undefined")
        return float('nan')
    _, recall, precision = pr_curve(records)
    total = 0.0
    for r in EvalConfig().recall_positions:
        reach = recall >= r
        total += float(precision[reach].max()) if reach.any() else 0.0
    return 100.0 * total / NUM_RECALL_POSITIONS


def recall_interval_analysis(records: Sequence[MatchRecord],
                             intervals: int = RECALL_INTERVALS) -> List[dict]:
    """TP/FP counts per slice of the 40 recall positions (R1-10, R11-20, ...).

    Each detection falls into the slice holding the recall position reached
    after it is processed; recall 0 counts as position 1.
    """
    scores, tp, num_gt = _counted(records)
    per = NUM_RECALL_POSITIONS // intervals
    counts = np.zeros((intervals, 2), dtype=np.int64)
    if len(scores) and num_gt:
        order = np.argsort(-scores, kind='stable')
        ctp = np.cumsum(tp[order])
        position = np.maximum(-(-ctp * NUM_RECALL_POSITIONS // num_gt), 1)
        bucket = np.minimum((position - 1) // per, intervals - 1)
        np.add.at(counts, (bucket, np.where(tp[order], 0, 1)), 1)
    rows = []
    for b in range(intervals):
        n_tp, n_fp = int(counts[b, 0]), int(counts[b, 1])
        rows.append({'interval': f'R{b * per + 1}-{(b + 1) * per}', 'tp': n_tp, 'fp': n_fp,
                     'tp_ratio': 100.0 * n_tp / (n_tp + n_fp) if n_tp + n_fp else float('nan')})
    return rows


# ---------------------------
# Dataset-level evaluation
# ---------------------------

def _bbox_overlap_ratio(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over the area of ``a`` (image boxes)."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area = (a[2] - a[0]) * (a[3] - a[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


def frame_record(dets: Sequence[ObjectLabel], gts: Sequence[ObjectLabel], dontcare: Sequence[ObjectLabel],
                 class_name: str, difficulty: str, cfg: EvalConfig) -> MatchRecord:
    """Filter one frame's labels to a class and difficulty, then match."""
    gt_rows = [g for g in gts if g.class_name == class_name or g.class_name in CONFUSABLE.get(class_name, ())]
    gt_ignored = [g.class_name != class_name or not meets_difficulty(g, difficulty, cfg) for g in gt_rows]
    det_rows = [d for d in dets if d.class_name == class_name]
    rule = cfg.kitti_rules[difficulty]
    det_ignored = []
    for d in det_rows:
        skip = not d.is_synthetic and d.bbox_height < rule.min_height
        if not d.is_synthetic and not skip:
            skip = any(_bbox_overlap_ratio(d.bbox, dc.bbox) >= DONTCARE_OVERLAP for dc in dontcare)
        det_ignored.append(skip)
    scored = [ScoredBox(d.box, float(min(max(d.score if d.score is not None else 1.0, 0.0), 1.0)))
              for d in det_rows]
    return match_frame(scored, [g.box for g in gt_rows], cfg, class_name, gt_ignored, det_ignored)


@dataclass
class EvalResult:
    rows: List[dict]
    curves: Dict[Tuple[str, str, str], Tuple[np.ndarray, np.ndarray, np.ndarray]]
    intervals: Dict[Tuple[str, str, str], List[dict]]

    def ap(self, class_name: str, difficulty: str = 'moderate', metric: str = '3d') -> float:
        for row in self.rows:
            if (row['class'], row['difficulty'], row['metric']) == (class_name, difficulty, metric):
                return row['ap']
        raise KeyError((class_name, difficulty, metric))


def evaluate(ground_truth: Mapping[str, Tuple[Sequence[ObjectLabel], Sequence[ObjectLabel]]],
             detections: Mapping[str, Sequence[ObjectLabel]], class_names: Sequence[str] = ('Car',),
             cfg: EvalConfig = None, metrics: Sequence[str] = METRICS, threads: int = 1) -> EvalResult:
    """AP table over every class, difficulty and metric.

    ``ground_truth`` maps frame id to (objects, dontcare). Frames are matched in
    a thread pool and merged in frame-id order.
    """
    cfg = cfg or EvalConfig()
    frame_ids = sorted(ground_truth)
    missing = [fid for fid in detections if fid not in ground_truth]
    if missing:
        logger.warning(f"{len(missing)} detection frames have no ground truth and are skipped")
    rows, curves, intervals = [], {}, {}
    with ThreadPoolExecutor(max_workers=max(int(threads), 1)) as pool:
        for metric in metrics:
            mcfg = cfg.with_metric(metric)
            for class_name in class_names:
                for difficulty in DIFFICULTIES:
                    def one(fid, class_name=class_name, difficulty=difficulty, mcfg=mcfg):
                        objects, dontcare = ground_truth[fid]
                        return frame_record(detections.get(fid, []), objects, dontcare,
                                            class_name, difficulty, mcfg)
                    records = list(pool.map(one, frame_ids))
                    key = (class_name, difficulty, metric)
                    ap = ap_r40(records)
                    _, _, num_gt = _counted(records)
                    rows.append({'class': class_name, 'difficulty': difficulty, 'metric': metric,
                                 'ap': ap, 'num_gt': num_gt,
                                 'num_det': int(sum(len(r.scores) - int(r.ignored.sum()) for r in records))})
                    curves[key] = pr_curve(records)
                    intervals[key] = recall_interval_analysis(records)
                    logger.info(f"{class_name} {difficulty} {metric.upper()} AP_R40 = {ap:.2f} ({num_gt} gts)")
    return EvalResult(rows, curves, intervals)


# ---------------------------
# Reports
# ---------------------------

def write_ap_csv(path: str, rows: Sequence[dict]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=['class', 'difficulty', 'metric', 'ap', 'num_gt', 'num_det'])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, 'ap': f"{row['ap']:.4f}"})
    return path


def write_interval_csv(path: str, intervals: Mapping[Tuple[str, str, str], List[dict]]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['class', 'difficulty', 'metric', 'interval', 'tp', 'fp', 'tp_ratio'])
        for (class_name, difficulty, metric), buckets in intervals.items():
            for b in buckets:
                writer.writerow([class_name, difficulty, metric, b['interval'], b['tp'], b['fp'],
                                 f"{b['tp_ratio']:.4f}"])
    return path


def write_pr_curve(path: str, curve: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> str:
    """Whitespace-separated ``recall precision score`` columns for gnuplot."""
    thresholds, recall, precision = curve
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as fh:
        fh.write('# recall precision score\n')
        for r, p, s in zip(recall, precision, thresholds):
            fh.write(f'{r:.6f} {p:.6f} {s:.6f}\n')
    return path


def format_ap_table(rows: Sequence[dict]) -> str:
    """Plain-text AP table with one line per class and metric."""
    lines = [f"{'class':<12}{'metric':<8}" + ''.join(f'{d:>10}' for d in DIFFICULTIES)]
    seen = []
    for row in rows:
        key = (row['class'], row['metric'])
        if key in seen:
            continue
        seen.append(key)
        values = {r['difficulty']: r['ap'] for r in rows if (r['class'], r['metric']) == key}
        lines.append(f'{key[0]:<12}{key[1].upper():<8}' + ''.join(f'{values.get(d, float("nan")):>10.2f}'
                                                                  for d in DIFFICULTIES))
    return '\n'.join(lines) + '\n'


def write_reports(out_dir: str, result: EvalResult) -> Dict[str, str]:
    paths = {'ap_csv': write_ap_csv(os.path.join(out_dir, 'ap.csv'), result.rows),
             'intervals_csv': write_interval_csv(os.path.join(out_dir, 'recall_intervals.csv'), result.intervals)}
    table = os.path.join(out_dir, 'ap.txt')
    with open(table, 'w') as fh:
        fh.write(format_ap_table(result.rows))
    paths['ap_txt'] = table
    for (class_name, difficulty, metric), curve in result.curves.items():
        write_pr_curve(os.path.join(out_dir, 'pr', f'{class_name}_{difficulty}_{metric}.dat'), curve)
    return paths
