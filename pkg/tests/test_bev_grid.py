import numpy as np
import pytest

import tensor as T
from bev_grid import BevGrid, PillarFeatureNet, augment_points, feature_stride_for, pillarize
from optim import ParamStore


def test_named_grids():
    assert BevGrid.desk().shape == (64, 64)
    assert BevGrid.kitti().shape == (432, 496)
    assert BevGrid.desk().downsample(2).shape == (32, 32)


def test_rejects_partial_cells():
    with pytest.raises(ValueError):
        BevGrid((0.0, 10.0), (-5.0, 5.0), (-3.0, 1.0), (0.32, 0.32, 4.0))
    with pytest.raises(ValueError):
        BevGrid((0.0, 5.12), (-2.56, 2.56), (-3.0, 1.0), (0.0, 0.32, 4.0))
    with pytest.raises(ValueError):
        BevGrid.desk().downsample(3)


def test_in_range_is_half_open(micro_grid):
    pts = np.array([[0.0, 0.0, 0.0, 0], [5.12, 0.0, 0.0, 0], [1.0, -2.56, -3.0, 0], [1.0, 0.0, 1.0, 0]])
    assert micro_grid.in_range(pts).tolist() == [True, False, True, False]


def test_cell_centres_map_to_integer_uv(micro_grid):
    cx, cy = micro_grid.cell_centers(np.array([3]), np.array([9]))
    assert micro_grid.cell_index(np.column_stack([cx, cy])).tolist() == [[3, 9]]
    assert np.allclose(micro_grid.to_uv(np.column_stack([cx, cy])), [[3.0, 9.0]])
    assert np.allclose(micro_grid.to_uv(np.column_stack([cx, cy]), stride=2), [[1.25, 4.25]])


class TestPillarize:
    def test_groups_points_by_cell(self, micro_grid):
        pts = np.array([
            [0.1, -2.5, 0.0, 0.5],
            [4.0, 2.0, 0.0, 0.1],
            [0.2, -2.4, -1.0, 0.7],
            [9.0, 0.0, 0.0, 0.2],
        ])
        batch = pillarize(pts, micro_grid)
        assert batch.num_pillars == 2
        assert batch.coords.tolist() == [[0, 0], [12, 14]]
        assert batch.counts.tolist() == [2, 1]
        assert np.allclose(batch.points[0, :2], pts[[0, 2]])
        assert batch.mask[0].sum() == 2

    def test_caps_points_per_pillar_in_input_order(self, micro_grid):
        pts = np.column_stack([np.full(10, 0.1), np.full(10, 0.1), np.arange(10) * 0.1 - 2.0, np.zeros(10)])
        batch = pillarize(pts, micro_grid, max_points=4)
        assert batch.counts.tolist() == [4]
        assert np.allclose(batch.points[0, :, 2], pts[:4, 2])

    def test_empty_cloud(self, micro_grid):
        batch = pillarize(np.zeros((0, 4)), micro_grid)
        assert batch.num_pillars == 0
        assert batch.points.shape == (0, 32, 4)

    def test_augmented_offsets(self, micro_grid):
        pts = np.array([[0.1, 0.1, 0.0, 0.5], [0.3, 0.2, -1.0, 0.3]])
        batch = pillarize(pts, micro_grid, max_points=3)
        feats = augment_points(batch)
        assert feats.shape == (1, 3, 9)
        assert np.allclose(feats[0, 0, 4:7], pts[0, :3] - pts[:, :3].mean(axis=0))
        cx, cy = micro_grid.cell_centers(batch.coords[:, 0], batch.coords[:, 1])
        assert feats[0, 1, 7] == pytest.approx(0.3 - cx[0])
        assert feats[0, 1, 8] == pytest.approx(0.2 - cy[0])
        assert np.all(feats[0, 2] == 0.0)


class TestPillarFeatureNet:
    def test_pseudo_image_layout(self, micro_grid, rng, f64):
        pts = np.column_stack([rng.uniform(0, 5.12, 200), rng.uniform(-2.56, 2.56, 200),
                               rng.uniform(-2, 0, 200), rng.uniform(0, 1, 200)])
        store = ParamStore(seed=1)
        net = PillarFeatureNet(store, channels=6)
        batch = pillarize(pts, micro_grid)
        image = net(batch)
        assert image.shape == (6, 16, 16)
        occupied = np.zeros((16, 16), dtype=bool)
        occupied[batch.coords[:, 0], batch.coords[:, 1]] = True
        assert np.all(image.data[:, ~occupied] == 0.0)
        assert np.all(image.data >= 0.0)

    def test_gradients(self, micro_grid, rng, f64):
        pts = np.column_stack([rng.uniform(0, 1.5, 12), rng.uniform(-0.5, 0.5, 12),
                               rng.uniform(-2, 0, 12), rng.uniform(0, 1, 12)])
        store = ParamStore(seed=2)
        net = PillarFeatureNet(store, channels=3)
        batch = pillarize(pts, micro_grid)
        w = rng.normal(size=(3, 16, 16))
        params = list(store.params.values())
        assert T.gradcheck(lambda: T.tensor_sum(T.mul(net(batch), w)), params) < 1e-4


def test_feature_stride(desk_grid):
    assert feature_stride_for(desk_grid, (32, 32)) == 2
    with pytest.raises(ValueError):
        feature_stride_for(desk_grid, (30, 30))
