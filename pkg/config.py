"""
Run configuration: profile defaults, dotenv-format key=value files, CLI
overrides and the resolved copy written next to every command's outputs.
"""
import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple, get_type_hints

from dotenv import dotenv_values

from bev_grid import BevGrid
from data_io import AugmentCfg, SynthSceneCfg
from detect import AssignCfg
from errors import ConfigError
from kitti_eval import EvalConfig
from model import FUSION_MODES, HEATMAP_SOURCES, ModelCfg
from psc import ShapeLossCfg

logger = logging.getLogger(__name__)

PROFILES = ('desk', 'kitti')
RESOLVED_FILENAME = 'resolved_config.env'
DEFAULT_THREADS = 1


@dataclass
class RunConfig:
    profile: str = 'desk'
    seed: int = 0
    data_dir: str = 'data/synth'
    out_dir: str = 'runs/default'
    precision: str = 'float32'

    # grid
    x_min: float = 0.0
    x_max: float = 20.48
    y_min: float = -10.24
    y_max: float = 10.24
    z_min: float = -3.0
    z_max: float = 1.0
    cell: float = 0.32
    class_names: Tuple[str, ...] = ('Car',)

    # synthetic data
    frames: int = 200
    val_fraction: float = 0.25
    objects_min: int = 3
    objects_max: int = 8
    occluder_policy: str = 'between'
    occluder_prob: float = 0.6
    azimuth_res_deg: float = 0.2
    rings: int = 26

    # network
    max_points: int = 32
    pfn_channels: int = 16
    psc_widths: Tuple[int, ...] = (16, 32, 64)
    psc_up_width: int = 16
    psc_head_width: int = 16
    det_widths: Tuple[int, ...] = (16, 32, 64)
    det_up_width: int = 16
    det_stride: int = 2
    adf_channels: int = 32
    adf_reduction: int = 8
    rcnn_point_width: int = 8

    # switches
    use_psc: bool = True
    fusion: str = 'adf'
    heatmap_source: str = 'psc'
    use_gaussian: bool = True
    two_stage: bool = False
    freeze_psc: bool = False

    # labels and losses
    retrieval_k: int = 3
    lam: float = 6.0
    focal_alpha: float = 2.0
    focal_beta: float = 4.0

    # optimisation
    lr: float = 2e-3
    min_lr: float = 0.0
    cosine: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    batch_size: int = 2
    augment: bool = True
    gt_samples: int = 3
    log_every: int = 10

    # inference and evaluation
    score_thresh: float = 0.05
    nms_thresh: float = 0.7
    post_nms_thresh: float = 0.1
    proposals: int = 100
    pilot_seeds: Tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.profile in PROFILES, f"profile must be one of {PROFILES}"),
            (self.fusion in FUSION_MODES, f"fusion must be one of {FUSION_MODES}"),
            (self.heatmap_source in HEATMAP_SOURCES, f"heatmap_source must be one of {HEATMAP_SOURCES}"),
            (self.precision in ('float32', 'float64'), "precision must be float32 or float64"),
            (self.lr > 0, "lr must be positive"),
            (self.steps >= 1 and self.batch_size >= 1, "steps and batch_size must be at least 1"),
            (self.frames >= 2, "frames must be at least 2"),
            (0.0 < self.val_fraction < 1.0, "val_fraction must lie in (0, 1)"),
            (1 <= self.objects_min <= self.objects_max, "need 1 <= objects_min <= objects_max"),
            (self.lam >= 0, "lam must be non-negative"),
            (len(self.class_names) >= 1, "class_names must not be empty"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def grid(self) -> BevGrid:
        try:
            return BevGrid((self.x_min, self.x_max), (self.y_min, self.y_max), (self.z_min, self.z_max),
                           (self.cell, self.cell, self.z_max - self.z_min))
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def model_cfg(self) -> ModelCfg:
        try:
            return ModelCfg(
                grid=self.grid(), class_names=tuple(self.class_names), max_points=self.max_points,
                pfn_channels=self.pfn_channels, use_psc=self.use_psc, psc_widths=tuple(self.psc_widths),
                psc_up_width=self.psc_up_width, psc_head_width=self.psc_head_width,
                det_widths=tuple(self.det_widths), det_up_width=self.det_up_width, det_stride=self.det_stride,
                fusion=self.fusion, heatmap_source=self.heatmap_source, adf_channels=self.adf_channels,
                adf_reduction=self.adf_reduction, two_stage=self.two_stage,
                rcnn_point_width=self.rcnn_point_width, nms_thresh=self.nms_thresh, proposals=self.proposals,
                post_nms_thresh=self.post_nms_thresh, score_thresh=self.score_thresh,
                shape_loss=ShapeLossCfg(self.focal_alpha, self.focal_beta, self.lam), assign=AssignCfg())
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def scene_cfg(self, seed: int) -> SynthSceneCfg:
        try:
            return SynthSceneCfg(seed=seed, class_name=self.class_names[0],
                                 num_objects=(self.objects_min, self.objects_max),
                                 x_range=(self.x_min, self.x_max), y_range=(self.y_min, self.y_max),
                                 azimuth_res_deg=self.azimuth_res_deg, rings=self.rings,
                                 occluder_policy=self.occluder_policy, occluder_prob=self.occluder_prob)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def augment_cfg(self) -> AugmentCfg:
        return AugmentCfg(gt_samples=self.gt_samples)

    def eval_cfg(self) -> EvalConfig:
        return EvalConfig()


PROFILE_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'desk': {},
    'kitti': {
        'data_dir': 'data/kitti', 'x_min': 0.0, 'x_max': 69.12, 'y_min': -39.68, 'y_max': 39.68,
        'cell': 0.16, 'class_names': ('Car', 'Pedestrian', 'Cyclist'), 'max_points': 32,
        'pfn_channels': 64, 'psc_widths': (64, 128, 256), 'psc_up_width': 128, 'psc_head_width': 64,
        'det_widths': (64, 128, 256), 'det_up_width': 128, 'adf_channels': 256, 'rcnn_point_width': 32,
        'two_stage': True, 'lr': 0.01, 'steps': 37000, 'batch_size': 8, 'gt_samples': 15,
        'proposals': 512, 'log_every': 50,
    },
}


def _coerce(name: str, raw: str, kind) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        inner = kind.__args__[0]
        parts = [p.strip() for p in text.split(',') if p.strip()]
        return tuple(inner(p) for p in parts)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"Invalid value for '{name}': {e}") from e


def _types() -> Dict[str, Any]:
    return get_type_hints(RunConfig)


def parse_values(values: Dict[str, Optional[str]], source: str = '<values>') -> Dict[str, Any]:
    """Typed overrides from raw strings; unknown or upper-case keys raise ConfigError."""
    types = _types()
    parsed = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"{source}: unknown config key '{key}'")
        if raw is None:
            raise ConfigError(f"{source}: key '{key}' has no value")
        parsed[key] = _coerce(key, raw, types[key])
    return parsed


def load_config(path: Optional[str] = None, profile: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Profile defaults, then the file, then ``overrides`` (already typed)."""
    file_values: Dict[str, Any] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        file_values = parse_values(dict(dotenv_values(path)), path)
    chosen = profile or file_values.get('profile') or 'desk'
    if chosen not in PROFILES:
        raise ConfigError(f"Unknown profile '{chosen}', expected one of {PROFILES}")
    values = {k: v for k, v in PROFILE_DEFAULTS[chosen].items() if k in _types()}
    values.update(file_values)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values['profile'] = chosen
    unknown = set(values) - set(_types())
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**values)
    logger.debug(f"Resolved config (profile={chosen}, file={path})")
    return cfg


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def write_resolved(cfg: RunConfig, out_dir: str) -> str:
    """Write every field as key=value; the file loads back through ``load_config``."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_FILENAME)
    with open(path, 'w') as fh:
        for f in fields(cfg):
            fh.write(f'{f.name}={_format(getattr(cfg, f.name))}\n')
    return path


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    try:
        return replace(cfg, **changes)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def resolve_threads() -> int:
    """BSH_THREADS from the environment, at least 1."""
    raw = os.getenv('BSH_THREADS')
    if raw is None or not raw.strip():
        return DEFAULT_THREADS
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"BSH_THREADS must be an integer, got '{raw}'") from e
    if threads < 1:
        raise ConfigError(f"BSH_THREADS must be at least 1, got {threads}")
    return threads
