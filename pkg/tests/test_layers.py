import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mc_helpers import (
    MOMENT_INPUT,
    analytic_moments,
    cross_row_covariance,
    mean_and_se,
    moment_layer,
    radial_standardized_draws,
    sampled_outputs,
    variance_and_se,
    within_three_se,
)
from rul_uq.autodiff import Tensor
from rul_uq.layers import (
    SAMPLERS,
    Checkpoint,
    Dropout,
    Linear,
    ModelSpec,
    VariationalLinear,
    build_model,
    forward_dropout,
    forward_flipout,
    forward_lrt,
    forward_naive,
    forward_radial,
    inverse_softplus,
    load_checkpoint,
    model_forward,
    radial_direction,
    save_checkpoint,
    softplus_scale,
)

N_DRAWS = 20_000


# --- softplus scale ---------------------------------------------------------------


def test_softplus_scale_at_zero_is_log2():
    assert softplus_scale(np.array(0.0)) == pytest.approx(math.log(2.0), abs=1e-15)


def test_softplus_scale_asymptotes():
    assert softplus_scale(np.array(50.0)) == pytest.approx(50.0)
    tiny = float(softplus_scale(np.array(-50.0)))
    assert 0.0 < tiny == pytest.approx(math.exp(-50.0), rel=1e-12)


@given(st.floats(1e-6, 30.0))
def test_inverse_softplus_round_trip(sigma):
    assert float(softplus_scale(inverse_softplus(sigma))) == pytest.approx(sigma, rel=1e-10)


def test_inverse_softplus_rejects_non_positive():
    with pytest.raises(ValueError):
        inverse_softplus(0.0)


# --- deterministic limits of the samplers -------------------------------------------


def _mean_output(layer, x):
    return x @ layer.mu_W.data + layer.mu_b.data


@pytest.mark.parametrize("sampler", SAMPLERS)
def test_zero_noise_gives_mean_layer_output(sampler, rng):
    layer = VariationalLinear(4, 3, sampler, q_scale=0.3, rng=rng)
    x = rng.normal(size=(5, 4))
    noise = {key: np.zeros_like(val) if key not in ("sign_in", "sign_out") else val
             for key, val in layer.draw_noise(rng, 5).items()}
    if sampler == "radial":
        # a zero direction is not allowed; a zero radius is the zero-noise case
        noise = layer.draw_noise(rng, 5)
        noise["r"] = 0.0
    out = layer.forward(Tensor(x), noise).data
    np.testing.assert_allclose(out, _mean_output(layer, x), rtol=0, atol=1e-12)


@pytest.mark.parametrize("sampler", SAMPLERS)
def test_collapsed_posterior_gives_mean_layer_output(sampler, rng):
    layer = VariationalLinear(4, 3, sampler, q_scale=0.3, rng=rng)
    layer.rho_W.data[...] = -40.0
    layer.rho_b.data[...] = -40.0
    x = rng.normal(size=(5, 4))
    out = layer.forward(Tensor(x), layer.draw_noise(rng, 5)).data
    # the LRT radicand carries a 1e-16 jitter, i.e. a 1e-8 scale floor
    atol = 1e-7 if sampler == "lrt" else 1e-12
    np.testing.assert_allclose(out, _mean_output(layer, x), rtol=0, atol=atol)


def test_lrt_zero_input_gives_mean_bias(rng):
    layer = VariationalLinear(4, 3, "lrt", q_scale=0.3, rng=rng)
    layer.rho_b.data[...] = -60.0  # bias variance effectively zero
    out = forward_lrt(layer, Tensor(np.zeros((6, 4))), rng.normal(size=(6, 3))).data
    # only the 1e-8 scale floor from the radicand jitter remains
    np.testing.assert_allclose(out, np.broadcast_to(layer.mu_b.data, (6, 3)), rtol=0, atol=1e-7)


def test_radial_unit_direction_and_unit_radius_is_plain_perturbation():
    layer = VariationalLinear(2, 2, "radial", q_scale=0.4)
    eps_w = np.array([[0.6, 0.0], [0.0, 0.0]])
    eps_b = np.array([0.0, 0.8])
    w, b = layer.sample_weights({"eps_W": eps_w, "eps_b": eps_b, "r": 1.0})
    sigma_w, sigma_b = (s.data for s in layer.sigmas())
    np.testing.assert_array_equal(w.data, layer.mu_W.data + sigma_w * eps_w)
    np.testing.assert_array_equal(b.data, layer.mu_b.data + sigma_b * eps_b)


def test_radial_direction_rejects_zero_noise():
    with pytest.raises(ValueError, match="zero norm"):
        radial_direction(np.zeros((2, 2)), np.zeros(2), 1.0)


# --- error handling -----------------------------------------------------------------


def test_flipout_rejects_non_sign_entries(rng):
    layer = VariationalLinear(3, 2, "flipout", rng=rng)
    noise = layer.draw_noise(rng, 4)
    noise["sign_in"][0, 0] = 0.5
    with pytest.raises(ValueError, match="-1 and \\+1"):
        layer.forward(Tensor(rng.normal(size=(4, 3))), noise)


@pytest.mark.parametrize("fn,args", [
    (forward_naive, lambda r: (np.zeros((2, 2)), np.zeros(2))),
    (forward_lrt, lambda r: (np.zeros((5, 2)),)),
    (forward_radial, lambda r: (np.ones((3, 3)), np.ones(2), 1.0)),
])
def test_samplers_reject_misshapen_noise(fn, args, rng):
    sampler = {forward_naive: "naive", forward_lrt: "lrt", forward_radial: "radial"}[fn]
    layer = VariationalLinear(3, 2, sampler, rng=rng)
    with pytest.raises(ValueError, match="shape"):
        fn(layer, Tensor(rng.normal(size=(4, 3))), *args(rng))


def test_flipout_rejects_misshapen_noise(rng):
    layer = VariationalLinear(3, 2, "flipout", rng=rng)
    noise = layer.draw_noise(rng, 4)
    with pytest.raises(ValueError, match="shape"):
        forward_flipout(layer, Tensor(rng.normal(size=(5, 3))), noise["dW"], noise["sign_out"],
                        noise["sign_in"], noise["eps_b"])


def test_variational_layer_validates_configuration():
    with pytest.raises(ValueError, match="sampler"):
        VariationalLinear(2, 2, "gibbs")
    with pytest.raises(ValueError):
        VariationalLinear(2, 2, "lrt", prior_scale=0.0)


def test_linear_rejects_wrong_input_width(rng):
    from rul_uq.autodiff import ShapeError

    with pytest.raises(ShapeError):
        Linear(3, 2, rng=rng).forward(Tensor(np.ones((4, 5))))


# --- sampler distributions ------------------------------------------------------------


@pytest.mark.parametrize("sampler", ["naive", "lrt", "flipout"])
def test_sampler_moments_match_analytic_gaussian(sampler):
    layer = moment_layer(sampler)
    x = MOMENT_INPUT[:1]
    mean, var = analytic_moments(layer, x[0])
    out = sampled_outputs(layer, x, N_DRAWS, seed=5)[:, 0, :]
    m_hat, m_se = mean_and_se(out)
    v_hat, v_se = variance_and_se(out)
    assert within_three_se(m_hat, m_se, mean)
    assert within_three_se(v_hat, v_se, var)


def test_lrt_matches_naive_moments():
    naive = sampled_outputs(moment_layer("naive"), MOMENT_INPUT[:1], N_DRAWS, seed=6)[:, 0, :]
    lrt = sampled_outputs(moment_layer("lrt"), MOMENT_INPUT[:1], N_DRAWS, seed=7)[:, 0, :]
    (mn, sn), (ml, sl) = mean_and_se(naive), mean_and_se(lrt)
    (vn, svn), (vl, svl) = variance_and_se(naive), variance_and_se(lrt)
    assert np.all(np.abs(mn - ml) <= 3 * np.hypot(sn, sl))
    assert np.all(np.abs(vn - vl) <= 3 * np.hypot(svn, svl))


def test_flipout_rows_are_decorrelated_while_naive_rows_are_not():
    mean_rows = np.stack([analytic_moments(moment_layer("naive"), row)[0] for row in MOMENT_INPUT])
    flip = sampled_outputs(moment_layer("flipout"), MOMENT_INPUT, N_DRAWS, seed=8)
    cov_f, se_f = cross_row_covariance(flip, mean_rows)
    assert np.all(np.abs(cov_f) < 3 * se_f)

    naive = sampled_outputs(moment_layer("naive"), MOMENT_INPUT, N_DRAWS, seed=9)
    cov_n, se_n = cross_row_covariance(naive, mean_rows)
    assert np.all(cov_n > 3 * se_n)


def test_lrt_gives_each_row_its_own_noise(rng):
    layer = moment_layer("lrt")
    x = np.repeat(MOMENT_INPUT[:1], 2, axis=0)
    out = layer.forward(Tensor(x), layer.draw_noise(rng, 2)).data
    assert not np.array_equal(out[0], out[1])


@pytest.mark.parametrize("sampler", ["naive", "radial"])
def test_weight_draw_is_shared_across_the_batch(sampler, rng):
    layer = moment_layer(sampler)
    x = np.repeat(MOMENT_INPUT[:1], 3, axis=0)
    out = layer.forward(Tensor(x), layer.draw_noise(rng, 3)).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_radial_radius_is_half_normal_and_direction_is_symmetric():
    z = radial_standardized_draws(10_000, seed=21)
    radius = np.linalg.norm(z, axis=1)
    assert stats.kstest(radius, stats.halfnorm.cdf).pvalue > 0.01
    unit = z / radius[:, None]
    m, se = mean_and_se(unit)
    assert within_three_se(m, se, 0.0)
    np.testing.assert_allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-12)


# --- dropout ---------------------------------------------------------------------------


def test_dropout_with_zero_rate_is_identity(rng):
    x = rng.normal(size=(4, 3))
    layer = Dropout(0.0, 3)
    out = layer.forward(Tensor(x), layer.draw_noise(rng, 4)).data
    np.testing.assert_array_equal(out, x)


def test_dropout_all_ones_mask_rescales(rng):
    x = rng.normal(size=(4, 3))
    out = forward_dropout(Dropout(0.25, 3), Tensor(x), np.ones((4, 3))).data
    np.testing.assert_allclose(out, x / 0.75, rtol=1e-15)


def test_dropout_is_unbiased():
    p, n = 0.3, 100_000
    x = np.array([[1.5, -0.4, 2.0]])
    layer = Dropout(p, 3)
    rows = np.repeat(x, n, axis=0)
    out = layer.forward(Tensor(rows), layer.draw_noise(np.random.default_rng(2), n)).data
    m, se = mean_and_se(out)
    assert within_three_se(m, se, x[0])


def test_dropout_keep_rate_and_fresh_masks(rng):
    layer = Dropout(0.3, 50)
    a, b = layer.draw_noise(rng, 200)["mask"], layer.draw_noise(rng, 200)["mask"]
    assert abs(a.mean() - 0.7) < 0.02
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("p", [1.0, 1.5, -0.1])
def test_dropout_rejects_bad_rate(p):
    with pytest.raises(ValueError):
        Dropout(p, 3)


def test_dropout_mask_shape_mismatch(rng):
    with pytest.raises(ValueError, match="mask shape"):
        forward_dropout(Dropout(0.2, 3), Tensor(np.ones((4, 3))), np.ones((3, 3)))


# --- the two-headed model -----------------------------------------------------------------


METHOD_TAGS = ["hnn", "de", "mcd", "bnn-naive", "bnn-lrt", "bnn-fo", "bnn-rad"]


@pytest.mark.parametrize("method", METHOD_TAGS)
def test_model_outputs_have_batch_shape_and_positive_variance(method, rng):
    model = build_model(ModelSpec(method, 6, hidden=(8, 4), dropout_p=0.2, q_scale=0.1), rng)
    x = rng.normal(size=(7, 6)) * 5
    mu, var = model_forward(model, x, model.draw_noise(rng, 7))
    assert mu.shape == (7,) and var.shape == (7,)
    assert np.all(var.data > 0)


def test_bias_only_model_output():
    model = build_model(ModelSpec("hnn", 3, hidden=(4,)))
    for _, t in model.named_parameters():
        t.data[...] = 0.0
    mu_b, rho_b = model.output_biases()
    mu_b.data[...] = 5.0
    mu, var = model_forward(model, np.random.default_rng(0).normal(size=(3, 3)))
    np.testing.assert_array_equal(mu.data, 5.0)
    np.testing.assert_allclose(var.data, math.log(2.0) ** 2, rtol=1e-15)


def test_deterministic_model_is_a_pure_function(rng):
    model = build_model(ModelSpec("hnn", 5), rng)
    x = rng.normal(size=(9, 5))
    a, b = model_forward(model, x), model_forward(model, x)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


@pytest.mark.parametrize("method", ["mcd", "bnn-lrt"])
def test_missing_noise_is_an_error(method, rng):
    model = build_model(ModelSpec(method, 5, dropout_p=0.2), rng)
    with pytest.raises(KeyError, match="noise bundle"):
        model_forward(model, rng.normal(size=(2, 5)))


@pytest.mark.parametrize("method", ["bnn-naive", "bnn-lrt", "bnn-fo", "bnn-rad"])
def test_rho_at_minus_twenty_collapses_to_mean_model(method, rng):
    model = build_model(ModelSpec(method, 5, hidden=(16, 8), q_scale=0.2), rng)
    for name, t in model.named_parameters():
        if "rho" in name:
            t.data[...] = -20.0
    x = rng.normal(size=(10, 5))
    mu_ref, var_ref = model_forward(model.mean_model(), x)
    for _ in range(5):
        mu, var = model_forward(model, x, model.draw_noise(rng, 10))
        np.testing.assert_allclose(mu.data, mu_ref.data, rtol=0, atol=1e-6)
        np.testing.assert_allclose(var.data, var_ref.data, rtol=0, atol=1e-6)


def test_mean_model_and_load_means_round_trip(rng):
    model = build_model(ModelSpec("bnn-lrt", 4, hidden=(6,)), rng)
    twin = model.mean_model()
    for t in twin.parameters():
        t.data[...] = rng.normal(size=t.shape)
    rho_before = [t.data.copy() for n, t in model.named_parameters() if "rho" in n]
    model.load_means_from(twin)
    np.testing.assert_array_equal(model.mean_model().get_state()["0.W"], twin.get_state()["0.W"])
    rho_after = [t.data for n, t in model.named_parameters() if "rho" in n]
    for a, b in zip(rho_before, rho_after):
        np.testing.assert_array_equal(a, b)


def test_set_state_rejects_wrong_shape(rng):
    model = build_model(ModelSpec("hnn", 4), rng)
    state = model.get_state()
    state["0.W"] = np.zeros((3, 3))
    with pytest.raises(ValueError, match="shape"):
        model.set_state(state)


def test_build_model_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        build_model(ModelSpec("gp", 3))


# --- checkpoints ------------------------------------------------------------------------------


@pytest.mark.parametrize("method", METHOD_TAGS)
def test_checkpoint_round_trip_is_bit_exact(method, tmp_path, rng):
    models = [build_model(ModelSpec(method, 5, hidden=(7, 3), dropout_p=0.1, q_scale=0.05), rng)
              for _ in range(2 if method == "de" else 1)]
    for m in models:
        for t in m.parameters():
            t.data[...] = rng.normal(size=t.shape) * 1e3 ** rng.uniform(-1, 1)
    path = tmp_path / "m.ckpt.json"
    save_checkpoint(path, Checkpoint(method, models, seeds=[3, 4][: len(models)],
                                     dataset_fingerprint="abc", extra={"note": 1}))
    loaded = load_checkpoint(path)
    assert loaded.method == method and loaded.dataset_fingerprint == "abc"
    assert loaded.seeds == [3, 4][: len(models)] and loaded.extra == {"note": 1}
    for a, b in zip(models, loaded.models):
        sa, sb = a.get_state(), b.get_state()
        assert sa.keys() == sb.keys()
        for key in sa:
            assert sa[key].tobytes() == sb[key].tobytes()
    save_checkpoint(tmp_path / "again.ckpt.json", loaded)
    assert (tmp_path / "again.ckpt.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_unknown_version(tmp_path, rng):
    path = tmp_path / "m.ckpt.json"
    save_checkpoint(path, Checkpoint("hnn", [build_model(ModelSpec("hnn", 3), rng)]))
    path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError, match="format_version"):
        load_checkpoint(path)
