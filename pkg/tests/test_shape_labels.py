import math

import numpy as np
import pytest

from data_io import ObjectLabel, sample_box_surface
from errors import DataError
from geometry import Box3D, from_box_frame, points_in_box
from shape_labels import (HEATMAP_HEADER, ShapeBank, ShapeBankEntry, assemble_shape, canonicalize,
                          compress_to_bev, footprint_cells, gaussian_radius, make_shape_label, mirror_local,
                          read_heatmap, retrieval_cost, retrieve_similar, sigma_for_box, splat_cells,
                          write_heatmap)


def half_visible_car(box, rng, count=300):
    """Surface samples of the sensor-facing half (local y < 0) of ``box``."""
    local = sample_box_surface((box.l, box.w, box.h), count, rng)
    local = local[local[:, 1] < 0]
    world = from_box_frame(local, box.as_array())
    return np.column_stack([world, np.full(len(world), 0.6)])


def bank_of(sizes, rng, count=200):
    return ShapeBank([ShapeBankEntry('Car', size, sample_box_surface(size, count, rng), source=f'00000{i}:0')
                      for i, size in enumerate(sizes)])


class TestCompletion:
    def test_mirror_reflects_lateral_axis(self):
        local = np.array([[1.0, -0.5, 0.2]])
        assert mirror_local(local).tolist() == [[1.0, 0.5, 0.2]]

    def test_canonicalize_keeps_inside_points(self, car_box, rng):
        pts = half_visible_car(car_box, rng)
        outside = np.array([[0.0, 0.0, 0.0, 0.1]])
        local = canonicalize(np.vstack([pts, outside]), car_box)
        assert len(local) == len(pts)
        assert np.all(np.abs(local) <= np.array([car_box.l, car_box.w, car_box.h]) / 2 + 1e-6)

    def test_retrieval_cost_zero_for_perfect_match(self):
        entry = ShapeBankEntry('Car', (4.0, 1.6, 1.5), np.zeros((10, 3)))
        assert retrieval_cost(entry, np.array([4.0, 1.6, 1.5]), 10) == 0.0
        assert retrieval_cost(entry, np.array([4.0, 1.6, 1.5]), 20) == pytest.approx(0.25)

    def test_retrieve_orders_by_size_similarity(self, car_box, rng):
        bank = bank_of([(6.0, 2.5, 2.0), (3.9, 1.6, 1.56), (4.2, 1.7, 1.6)], rng)
        donors, short = retrieve_similar(half_visible_car(car_box, rng), car_box, bank, k=2)
        assert [d.source for d in donors] == ['000001:0', '000002:0']
        assert not short

    def test_retrieve_flags_short_bank(self, car_box, rng):
        bank = bank_of([(3.9, 1.6, 1.56)], rng)
        donors, short = retrieve_similar(half_visible_car(car_box, rng), car_box, bank, k=3)
        assert len(donors) == 1 and short
        with pytest.raises(ValueError):
            retrieve_similar(np.zeros((0, 4)), car_box, ShapeBank(), k=3)

    def test_assembled_shape_covers_hidden_side(self, car_box, rng):
        pts = half_visible_car(car_box, rng)
        shape = assemble_shape(pts, car_box, [])
        local = canonicalize(np.column_stack([shape, np.zeros(len(shape))]), car_box)
        assert np.any(local[:, 1] > 0.5)
        assert len(shape) == 2 * len(pts)

    def test_donors_are_rescaled_into_the_box(self, car_box, rng):
        big = ShapeBankEntry('Car', (8.0, 3.2, 3.12), sample_box_surface((8.0, 3.2, 3.12), 100, rng))
        shape = assemble_shape(np.zeros((0, 4)), car_box, [big])
        assert len(shape) == 100
        assert points_in_box(shape, car_box, margin=0.05).all()


class TestRendering:
    def test_compress_is_binary(self, micro_grid):
        pts = np.array([[0.1, -2.5, 0.0], [0.15, -2.45, 0.5], [4.0, 2.0, 0.0], [20.0, 0.0, 0.0]])
        occ = compress_to_bev(pts, micro_grid)
        assert occ.shape == (1, 16, 16)
        assert occ.sum() == 2.0
        assert occ[0, 0, 0] == 1.0

    def test_gaussian_radius_square(self):
        assert gaussian_radius((10.0, 10.0), 0.7) == pytest.approx((math.sqrt(1120.0) - 28.0) / 2.0)

    def test_gaussian_radius_grows_with_size(self):
        assert gaussian_radius((20.0, 8.0)) > gaussian_radius((10.0, 4.0))
        assert gaussian_radius((10.0, 4.0), 0.5) > gaussian_radius((10.0, 4.0), 0.9)

    def test_sigma_floor(self, micro_grid):
        assert sigma_for_box(Box3D(1, 0, 0, 0.3, 0.3, 1.0), micro_grid) == 1.0

    def test_splat_profile(self):
        channel = np.zeros((15, 15))
        splat_cells(channel, np.array([[7, 7]]), 1.5)
        assert channel[7, 7] == pytest.approx(1.0)
        assert channel[8, 7] == pytest.approx(math.exp(-1.0 / (2 * 1.5 ** 2)))
        assert channel[7, 12] == 0.0
        assert channel[7, 11] > 0.0

    def test_splat_takes_max_not_sum(self):
        channel = np.zeros((9, 9))
        splat_cells(channel, np.array([[4, 3], [4, 5]]), 2.0)
        assert channel.max() == pytest.approx(1.0)
        assert channel[4, 4] == pytest.approx(math.exp(-1.0 / 8.0))

    def test_footprint_cells(self, micro_grid):
        box = Box3D(1.6, 0.0, -1.0, 0.64, 0.64, 1.0)
        assert len(footprint_cells(box, micro_grid)) == 4
        assert len(footprint_cells(Box3D(50.0, 0.0, -1.0, 1.0, 1.0, 1.0), micro_grid)) == 0


class TestShapeLabel:
    def test_heatmap_range_and_peaks(self, desk_grid, car_box, car_label, rng):
        pts = half_visible_car(car_box, rng)
        heat, stats = make_shape_label(pts, [car_label], None, desk_grid)
        assert heat.shape == (1, 64, 64)
        assert heat.min() >= 0.0 and heat.max() == pytest.approx(1.0)
        assert stats.objects == 1 and stats.empty_objects == 0
        ix, iy = desk_grid.cell_index(np.array([[car_box.x, car_box.y]]))[0]
        assert heat[0, ix - 1:ix + 2, iy - 1:iy + 2].max() == pytest.approx(1.0)
        assert heat[0, 5, 5] == 0.0

    def test_binary_variant(self, desk_grid, car_box, car_label, rng):
        pts = half_visible_car(car_box, rng)
        heat, _ = make_shape_label(pts, [car_label], None, desk_grid, use_gaussian=False)
        assert set(np.unique(heat)) <= {0.0, 1.0}

    def test_bank_donors_only_add_occupancy(self, desk_grid, car_box, car_label, rng):
        pts = half_visible_car(car_box, rng)
        bank = bank_of([(3.9, 1.6, 1.56), (4.1, 1.7, 1.5)], rng)
        plain, _ = make_shape_label(pts, [car_label], None, desk_grid, use_gaussian=False)
        completed, stats = make_shape_label(pts, [car_label], bank, desk_grid, use_gaussian=False)
        assert np.all(completed >= plain)
        assert completed.sum() >= plain.sum()
        assert stats.short_retrievals == 1

    def test_empty_object_renders_footprint(self, desk_grid, car_box, car_label):
        heat, stats = make_shape_label(np.zeros((0, 4)), [car_label], None, desk_grid, use_gaussian=False)
        assert stats.empty_objects == 1
        assert heat.sum() == len(footprint_cells(car_box, desk_grid))

    def test_other_classes_are_skipped(self, desk_grid, car_box):
        ped = ObjectLabel('Pedestrian', Box3D(8.0, 2.0, -0.9, 0.8, 0.6, 1.73))
        heat, stats = make_shape_label(np.zeros((0, 4)), [ped], None, desk_grid)
        assert stats.objects == 0 and heat.sum() == 0.0
        heat, _ = make_shape_label(np.zeros((0, 4)), [ped], None, desk_grid, class_names=('Car', 'Pedestrian'))
        assert heat[0].sum() == 0.0 and heat[1].sum() > 0.0


class TestHeatmapFile:
    def test_round_trip(self, tmp_path, micro_grid, rng):
        heat = rng.uniform(size=(2, 16, 16)).astype(np.float32)
        path = write_heatmap(str(tmp_path / '000001.bin'), heat, micro_grid)
        data, meta = read_heatmap(path)
        assert np.array_equal(data, heat)
        assert meta['dx'] == pytest.approx(0.32)
        assert meta['y0'] == pytest.approx(-2.56)

    def test_header_layout(self, tmp_path, micro_grid):
        path = write_heatmap(str(tmp_path / 'h.bin'), np.zeros((1, 16, 16)), micro_grid)
        raw = open(path, 'rb').read()
        assert HEATMAP_HEADER.size == 32
        assert raw[:4] == b'BSH1'
        assert len(raw) == 32 + 4 * 256

    def test_truncated_file(self, tmp_path, micro_grid):
        path = write_heatmap(str(tmp_path / 'h.bin'), np.ones((1, 16, 16)), micro_grid)
        raw = open(path, 'rb').read()
        with open(path, 'wb') as fh:
            fh.write(raw[:-6])
        with pytest.raises(DataError, match='byte'):
            read_heatmap(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.bin'
        path.write_bytes(b'XXXX' + bytes(28))
        with pytest.raises(DataError):
            read_heatmap(str(path))

    def test_rejects_wrong_rank(self, tmp_path, micro_grid):
        with pytest.raises(ValueError):
            write_heatmap(str(tmp_path / 'h.bin'), np.zeros((16, 16)), micro_grid)
