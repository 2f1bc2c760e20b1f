import numpy as np
import pytest

import tensor as T
from bev_grid import PillarFeatureNet, pillarize
from config import RunConfig
from data_io import synth_scene
from errors import NumericError
from optim import ParamStore, adam_step
from psc import (OccupancyNet, ShapeLossCfg, TopDownBackbone, mask_iou, shape_focal_loss,
                 threshold_heatmap)
from shape_labels import ShapeBank, make_shape_label
from tensor import Tensor
from train_manager import bank_without_frame


class TestShapeFocalLoss:
    def test_positive_cell_value(self):
        loss = shape_focal_loss(Tensor(np.full((1, 1, 1), 0.5)), np.ones((1, 1, 1)))
        assert loss.item() == pytest.approx(0.1733, abs=1e-4)

    def test_penalty_reduced_negative_cell_value(self):
        loss = shape_focal_loss(Tensor(np.full((1, 1, 1), 0.5)), np.full((1, 1, 1), 0.5))
        assert loss.item() == pytest.approx(0.0108304, abs=1e-7)

    def test_normalised_by_positive_count(self):
        pred = Tensor(np.full((1, 2, 2), 0.5))
        target = np.array([[[1.0, 1.0], [0.0, 0.0]]])
        # Two positives at 0.1733 each and two plain negatives at 0.25·ln 2 each, divided by 2.
        expected = (2 * 0.25 * np.log(2.0) + 2 * 0.25 * np.log(2.0)) / 2.0
        assert shape_focal_loss(pred, target).item() == pytest.approx(expected)

    def test_confident_correct_prediction_is_near_zero(self):
        pred = Tensor(np.array([[[0.999, 0.001]]]))
        assert shape_focal_loss(pred, np.array([[[1.0, 0.0]]])).item() < 1e-5

    def test_gradients(self, f64, rng):
        pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 3)), requires_grad=True)
        target = rng.uniform(0.0, 0.9, size=(2, 3, 3))
        target[0, 1, 1] = target[1, 2, 0] = 1.0
        cfg = ShapeLossCfg(alpha=2.0, beta=4.0)
        assert T.gradcheck(lambda: shape_focal_loss(pred, target, cfg), [pred]) < 1e-5

    def test_shape_mismatch_and_nan(self):
        with pytest.raises(ValueError):
            shape_focal_loss(Tensor(np.full((1, 2, 2), 0.5)), np.ones((1, 2, 3)))
        with pytest.raises(NumericError):
            shape_focal_loss(Tensor(np.full((1, 1, 1), np.nan)), np.ones((1, 1, 1)))

    def test_negative_exponent_rejected(self):
        with pytest.raises(ValueError):
            ShapeLossCfg(alpha=-1.0)


class TestThreshold:
    def test_zeroes_below_half_and_keeps_the_rest(self):
        out = threshold_heatmap(np.array([[[0.2, 0.5, 0.9]]]))
        assert out.data.tolist() == [[[0.0, 0.5, 0.9]]]

    def test_gradient_flows_only_through_kept_cells(self, f64):
        pred = Tensor(np.array([[[0.2, 0.7]]]), requires_grad=True)
        T.tensor_sum(threshold_heatmap(pred)).backward()
        assert pred.grad.tolist() == [[[0.0, 1.0]]]

    def test_mask_iou(self):
        a = np.array([[0.9, 0.1], [0.6, 0.0]])
        b = np.array([[1.0, 0.0], [0.0, 0.7]])
        assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)
        assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


class TestOccupancyNet:
    def test_output_is_probability_map_on_pillar_grid(self, micro_grid, rng, f64):
        store = ParamStore(seed=0)
        pfn = PillarFeatureNet(store, 4)
        net = OccupancyNet(store, 4, num_classes=2, widths=(4, 8), up_width=4, head_width=4,
                           grid_shape=micro_grid.shape)
        pts = np.column_stack([rng.uniform(0, 5.12, 300), rng.uniform(-2.56, 2.56, 300),
                               rng.uniform(-2, 0, 300), rng.uniform(0, 1, 300)])
        y_hat = net(pfn(pillarize(pts, micro_grid)))
        assert y_hat.shape == (2, 16, 16)
        assert np.all((y_hat.data > 0) & (y_hat.data < 1))
        assert y_hat.data.mean() < 0.2

    def test_rejects_grid_mismatch(self, micro_grid, f64):
        store = ParamStore(seed=0)
        net = OccupancyNet(store, 4, widths=(4, 8), up_width=4, head_width=4, grid_shape=micro_grid.shape)
        with pytest.raises(ValueError):
            net(Tensor(np.zeros((4, 8, 8))))

    def test_backbone_strides(self, f64):
        store = ParamStore(seed=0)
        full = TopDownBackbone(store, 'a', 3, widths=(4, 4, 4), up_width=2)
        half = TopDownBackbone(store, 'b', 3, widths=(4, 4, 4), up_width=2, out_stride=2)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 16, 16)))
        assert full(x).shape == (6, 16, 16)
        assert half(x).shape == (6, 8, 8)
        with pytest.raises(ValueError):
            TopDownBackbone(store, 'c', 3, widths=(4, 4), up_width=2, out_stride=3)


@pytest.mark.slow
def test_completion_overfits_eight_desk_scenes(desk_grid, f64):
    cfg = RunConfig()
    scenes, bank = [], ShapeBank()
    for i in range(8):
        frame, entries = synth_scene(cfg.scene_cfg(seed=100 + i), f'{i:06d}')
        scenes.append(frame)
        bank.extend(entries)
    labels = [make_shape_label(f.points, f.objects, bank_without_frame(bank, f.frame_id), desk_grid)[0]
              for f in scenes]
    batches = [pillarize(f.points, desk_grid, cfg.max_points) for f in scenes]

    store = ParamStore(seed=4)
    pfn = PillarFeatureNet(store, cfg.pfn_channels)
    net = OccupancyNet(store, cfg.pfn_channels, 1, cfg.psc_widths, cfg.psc_up_width, cfg.psc_head_width,
                       grid_shape=desk_grid.shape)

    def mean_loss():
        return np.mean([shape_focal_loss(net(pfn(b)), s).item() for b, s in zip(batches, labels)])

    initial = mean_loss()
    for step in range(500):
        i = step % len(scenes)
        store.zero_grad()
        shape_focal_loss(net(pfn(batches[i])), labels[i]).backward()
        adam_step(store, lr=1e-3)
    assert mean_loss() <= 0.1 * initial
    ious = [mask_iou(net(pfn(b)).data, s) for b, s in zip(batches, labels)]
    assert np.mean(ious) >= 0.7
