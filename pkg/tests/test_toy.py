import numpy as np

from rul_uq.toy import as_training_data, gap_data, sine_data, true_sigma


def test_true_sigma_examples():
    np.testing.assert_allclose(true_sigma([0.0, 1.0, -2.5]), [0.1, 0.3, 0.6], rtol=1e-15)


def test_sine_data_shapes_range_and_noise_level():
    x, y = sine_data(20_000, np.random.default_rng(0))
    assert x.shape == (20_000, 1) and y.shape == (20_000,)
    assert x.min() >= -3 and x.max() <= 3
    z = (y - np.sin(x[:, 0])) / true_sigma(x[:, 0])
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.02


def test_gap_data_leaves_the_gap_empty_and_splits_evenly():
    x, y = gap_data(1001, np.random.default_rng(1), gap=(-1.0, 1.0), span=(-4.0, 4.0))
    x = x[:, 0]
    assert not np.any((x > -1.0) & (x < 1.0))
    assert (x < 0).sum() == 500 and (x > 0).sum() == 501
    assert x.min() >= -4 and x.max() <= 4


def test_training_data_split_is_disjoint_and_seeded():
    x, y = sine_data(100, np.random.default_rng(2))
    a = as_training_data(x, y, 0.2, seed=5)
    b = as_training_data(x, y, 0.2, seed=5)
    xa, _ = a.split("valid")
    xb, _ = b.split("valid")
    np.testing.assert_array_equal(xa, xb)
    xt, _ = a.split("train")
    assert len(xa) == 20 and len(xt) == 80
    assert not set(xa[:, 0]) & set(xt[:, 0])
