import pytest
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

import tensor as T
from bev_grid import BevGrid
from config import RunConfig
from data_io import ObjectLabel, SynthSceneCfg, save_frame, synth_scene, write_split
from geometry import Box3D


def pytest_addoption(parser):
    parser.addoption('--slow', action='store_true', default=False,
                     help='run desk-scale training experiments')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def f64():
    """Run the test body in 64-bit precision."""
    with T.precision('float64'):
        yield


@pytest.fixture
def desk_grid():
    return BevGrid.desk()


@pytest.fixture
def micro_grid():
    """16×16 cells of 0.32 m."""
    return BevGrid((0.0, 5.12), (-2.56, 2.56), (-3.0, 1.0), (0.32, 0.32, 4.0))


@pytest.fixture
def car_box():
    return Box3D(10.0, 0.0, -0.95, 3.9, 1.6, 1.56, 0.3)


@pytest.fixture
def car_label(car_box):
    return ObjectLabel('Car', car_box)


@pytest.fixture
def micro_run_cfg(tmp_path):
    """Smallest configuration that exercises every stage of training."""
    return RunConfig(
        seed=3, data_dir=str(tmp_path / 'data'), out_dir=str(tmp_path / 'run'), precision='float64',
        x_min=0.0, x_max=10.24, y_min=-5.12, y_max=5.12, cell=0.32,
        frames=4, objects_min=1, objects_max=2, azimuth_res_deg=1.0, rings=10,
        pfn_channels=4, psc_widths=(4, 8), psc_up_width=4, psc_head_width=4,
        det_widths=(4, 8), det_up_width=4, adf_channels=8, adf_reduction=4,
        steps=2, batch_size=2, log_every=1, gt_samples=1, proposals=20)


@pytest.fixture
def fast_scene_cfg():
    """Coarse ray model over the desk area."""
    return SynthSceneCfg(seed=11, num_objects=(2, 3), azimuth_res_deg=0.5, rings=16)


@pytest.fixture
def synth_dataset(tmp_path, micro_run_cfg):
    """Four coarse synthetic frames on disk: three train, one val."""
    root = tmp_path / 'data'
    ids = []
    for i in range(4):
        frame, _ = synth_scene(micro_run_cfg.scene_cfg(100 + i), f'{i:06d}')
        save_frame(str(root), frame)
        ids.append(frame.frame_id)
    write_split(str(root), 'train', ids[:3])
    write_split(str(root), 'val', ids[3:])
    return str(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
