import math

import numpy as np
import pytest

import tensor as T
from optim import ParamStore, adam_step, cosine_lr, load_checkpoint, save_checkpoint


def test_init_is_independent_of_creation_order():
    a = ParamStore(seed=5)
    a.create('head.w', (3, 4), init='kaiming')
    a.create('backbone.w', (2, 2), init='kaiming')
    b = ParamStore(seed=5)
    b.create('backbone.w', (2, 2), init='kaiming')
    b.create('head.w', (3, 4), init='kaiming')
    assert np.array_equal(a['head.w'].data, b['head.w'].data)
    assert np.array_equal(a['backbone.w'].data, b['backbone.w'].data)


def test_seed_changes_init():
    a, b = ParamStore(seed=0), ParamStore(seed=1)
    assert not np.array_equal(a.create('w', (4,), init='kaiming').data, b.create('w', (4,), init='kaiming').data)


def test_kaiming_bound_and_constant_init():
    store = ParamStore()
    w = store.create('w', (8, 6), init='kaiming')
    assert np.abs(w.data).max() <= math.sqrt(6.0 / 6)
    assert np.all(store.create('b', (3,), init='constant', value=-2.19).data == -2.19)
    with pytest.raises(ValueError):
        store.create('w', (1,))
    with pytest.raises(ValueError):
        store.create('x', (1,), init='orthogonal')


def test_adam_first_step_moves_by_lr_times_sign(f64):
    store = ParamStore()
    w = store.create('w', (3,), init='constant', value=1.0)
    w.grad = np.array([0.5, -2.0, 0.0])
    adam_step(store, lr=0.1)
    assert np.allclose(w.data, [0.9, 1.1, 1.0], atol=1e-6)
    assert store.step == 1


def test_adam_skips_frozen_and_gradless(f64):
    store = ParamStore()
    a = store.create('psc.w', (2,), init='ones')
    b = store.create('det.w', (2,), init='ones')
    c = store.create('det.b', (2,), init='ones')
    assert store.freeze('psc.') == 1
    a.grad = np.ones(2)
    b.grad = np.ones(2)
    adam_step(store, lr=0.5)
    assert np.array_equal(a.data, np.ones(2))
    assert np.all(b.data < 1.0)
    assert np.array_equal(c.data, np.ones(2))


def test_adam_minimises_quadratic(f64):
    store = ParamStore()
    w = store.create('w', (2,), init='constant', value=3.0)
    for _ in range(1000):
        store.zero_grad()
        T.tensor_sum(T.power(w - np.array([1.0, -2.0]), 2)).backward()
        adam_step(store, lr=0.05)
    assert np.allclose(w.data, [1.0, -2.0], atol=1e-2)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.01, 0, 100) == pytest.approx(0.01)
    assert cosine_lr(0.01, 50, 100) == pytest.approx(0.005)
    assert cosine_lr(0.01, 100, 100, min_lr=1e-4) == pytest.approx(1e-4)
    assert cosine_lr(0.01, 5, 0) == 0.01


def test_checkpoint_round_trip_is_bit_exact(tmp_path, f64):
    store = ParamStore(seed=9)
    w = store.create('conv.w', (2, 3, 3, 3), init='kaiming')
    store.create_buffer('bn.mean', np.arange(2.0))
    w.grad = np.full(w.shape, 0.25)
    adam_step(store, lr=0.01)
    path = save_checkpoint(store, str(tmp_path / 'ckpt' / 'checkpoint.npz'))

    fresh = ParamStore(seed=0)
    fresh.create('conv.w', (2, 3, 3, 3))
    fresh.create_buffer('bn.mean', np.zeros(2))
    load_checkpoint(fresh, path)
    assert np.array_equal(fresh['conv.w'].data, w.data)
    assert np.array_equal(fresh.m['conv.w'], store.m['conv.w'])
    assert np.array_equal(fresh.v['conv.w'], store.v['conv.w'])
    assert np.array_equal(fresh.buffers['bn.mean'], [0.0, 1.0])
    assert fresh.step == 1


def test_checkpoint_strict_and_shape_checks(tmp_path):
    store = ParamStore()
    store.create('w', (2,))
    path = save_checkpoint(store, str(tmp_path / 'a.npz'))

    missing = ParamStore()
    missing.create('w', (2,))
    missing.create('extra', (1,))
    with pytest.raises(KeyError):
        load_checkpoint(missing, path)
    load_checkpoint(missing, path, strict=False)

    wrong = ParamStore()
    wrong.create('w', (3,))
    with pytest.raises(ValueError):
        load_checkpoint(wrong, path)


def test_num_parameters_and_names():
    store = ParamStore()
    store.create('psc.a', (2, 3))
    store.create('det.b', (4,))
    assert store.num_parameters() == 10
    assert store.names('psc.') == ['psc.a']
