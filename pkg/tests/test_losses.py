import numpy as np
import pytest
from scipy.special import logsumexp

from anchors import build_anchor_grid, interpolable
from encoders import init_parameters
from errors import ConfigError, SingularConfigurationError
from geometry import random_unit_vectors, uniform_patch
from gradcheck import check_mcr_t2i, check_mcr_i2t, check_gaze, check_total, check_geo
from losses import (SCHEMES, neg_weight, mcr_t2i_loss, mcr_i2t_loss, mcr_total, gaze_loss, gaze_loss_batch,
                    total_objective, Lambdas, GlobalNegativeBank, build_negative_bank)

X = np.array([1.0, 0.0, 0.0])
Z = np.array([0.0, 0.0, 1.0])


def test_neg_weight_examples():
    assert neg_weight(Z, Z, 'literal-cos') == pytest.approx(1.0)
    assert neg_weight(Z, X, 'literal-cos') == pytest.approx(0.0)
    assert neg_weight(Z, X, 'clamped-cos') == pytest.approx(0.0)
    assert neg_weight(Z, X, 'distance') == pytest.approx(0.5)
    assert neg_weight(Z, -Z, 'literal-cos') == pytest.approx(-1.0)
    assert neg_weight(Z, -Z, 'clamped-cos') == 0.0
    assert neg_weight(Z, -Z, 'distance') == pytest.approx(1.0)
    assert neg_weight(Z, -Z, 'uniform') == 1.0


def test_unknown_scheme():
    with pytest.raises(ConfigError):
        neg_weight(Z, X, 'softmax')


def test_t2i_single_sample(rng):
    loss, _ = mcr_t2i_loss(rng.standard_normal((1, 5)), rng.standard_normal((1, 5)), Z[None, :])
    assert loss == 0.0


def test_t2i_orthogonal_labels_literal(rng):
    loss, _ = mcr_t2i_loss(rng.standard_normal((2, 5)), rng.standard_normal((2, 5)), np.stack([Z, X]),
                           'literal-cos')
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_t2i_log_two():
    f = np.tile([1.0, 2.0, 0.5], (2, 1))
    loss, _ = mcr_t2i_loss(f, f, np.stack([Z, Z]), 'clamped-cos', 1.0)
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_i2t_without_bank_matches_t2i(rng):
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
    labels = uniform_patch(rng, 6)
    assert mcr_i2t_loss(a, b, labels)[0] == pytest.approx(mcr_t2i_loss(a, b, labels)[0], abs=1e-15)
    empty = GlobalNegativeBank(np.zeros((0, 3)), np.zeros((0, 5)))
    assert mcr_i2t_loss(a, b, labels, empty)[0] == pytest.approx(mcr_t2i_loss(a, b, labels)[0], abs=1e-15)


def test_i2t_orthogonal_bank_literal(rng):
    f = rng.standard_normal((1, 5))
    bank = GlobalNegativeBank(X[None, :], rng.standard_normal((1, 5)))
    loss, grads = mcr_i2t_loss(f, f, Z[None, :], bank, 'literal-cos')
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert grads['bank'].shape == (1, 5)


def test_i2t_log_three():
    f = np.array([[0.3, -1.0, 2.0]])
    bank = GlobalNegativeBank(np.stack([Z, Z]), np.vstack([f, f]))
    loss, _ = mcr_i2t_loss(f, f, Z[None, :], bank, 'clamped-cos')
    assert loss == pytest.approx(np.log(3.0), abs=1e-12)


def test_uniform_scheme_is_infonce(rng):
    for _ in range(5):
        f_t, f_g = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
        labels = random_unit_vectors(rng, 8)
        loss, _ = mcr_t2i_loss(f_t, f_g, labels, 'uniform', 1.0)
        t = f_t / np.linalg.norm(f_t, axis=1, keepdims=True)
        g = f_g / np.linalg.norm(f_g, axis=1, keepdims=True)
        logits = t @ g.T
        reference = np.mean(logsumexp(logits, axis=1) - np.diag(logits))
        assert loss == pytest.approx(reference, abs=1e-12)


def test_literal_cos_singular():
    # antipodal labels give a -1 weight on a negative as similar as the positive
    f = np.tile([1.0, 0.0], (2, 1))
    with pytest.raises(SingularConfigurationError, match='sample 0'):
        mcr_t2i_loss(f, f, np.stack([Z, -Z]), 'literal-cos')


@pytest.mark.parametrize('scheme', ['clamped-cos', 'distance', 'uniform'])
def test_non_negative(rng, scheme):
    for _ in range(20):
        labels = uniform_patch(rng, 5)
        bank = GlobalNegativeBank(random_unit_vectors(rng, 3), rng.standard_normal((3, 4)))
        assert mcr_t2i_loss(rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), labels, scheme)[0] >= 0.0
        assert mcr_i2t_loss(rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), labels, bank, scheme)[0] >= 0.0


def test_scale_invariance(rng):
    f_t, f_g = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    labels = uniform_patch(rng, 4)
    base = mcr_t2i_loss(f_t, f_g, labels)[0]
    scaled = f_g.copy()
    scaled[2] *= 3.7
    assert mcr_t2i_loss(f_t, scaled, labels)[0] == pytest.approx(base, abs=1e-12)


def test_monotone_in_negative_similarity():
    # sample 0's negative (index 1) moves toward the positive direction
    labels = np.stack([Z, Z])
    f_t = np.array([[1.0, 0.0], [0.0, 1.0]])

    def loss_at(angle, scheme):
        f_g = np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]])
        return mcr_t2i_loss(f_t, f_g, labels, scheme)[0]

    assert loss_at(0.5, 'clamped-cos') > loss_at(1.0, 'clamped-cos')
    orthogonal = np.stack([Z, X])

    def zero_weight(angle):
        f_g = np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]])
        return mcr_t2i_loss(f_t, f_g, orthogonal, 'clamped-cos')[0]

    assert zero_weight(0.5) == pytest.approx(zero_weight(1.0), abs=1e-15)


def test_literal_cos_negative_weight_rewards_similarity():
    # cos(g_0, g_1) = -0.8: each sample's negative enters its denominator with weight -0.8
    labels = np.array([[0.0, 0.0, 1.0], [0.0, 0.6, -0.8]])

    def loss_at(angle, scheme):
        f = np.array([[1.0, 0.0], [np.cos(angle), np.sin(angle)]])
        return mcr_t2i_loss(f, f, labels, scheme)[0]

    assert loss_at(0.5, 'literal-cos') < loss_at(1.0, 'literal-cos') < loss_at(1.5, 'literal-cos')
    assert loss_at(0.5, 'clamped-cos') == pytest.approx(loss_at(1.0, 'clamped-cos'), abs=1e-15)
    assert loss_at(0.5, 'distance') > loss_at(1.0, 'distance')


def test_mcr_total_is_sum(rng):
    f_t, f_g = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    labels = uniform_patch(rng, 4)
    total, grads = mcr_total(f_t, f_g, labels)
    t2i, g1 = mcr_t2i_loss(f_t, f_g, labels)
    i2t, g2 = mcr_i2t_loss(f_g, f_t, labels)
    assert total == pytest.approx(t2i + i2t)
    assert grads['f_t'] == pytest.approx(g1['f_t'] + g2['f_t'])


def test_gaze_loss_values():
    assert gaze_loss(Z, Z)[0] == pytest.approx(0.0, abs=1e-7)
    assert gaze_loss(Z, X)[0] == pytest.approx(np.pi / 2)


def test_gaze_loss_clamped_gradient_is_finite():
    value, grad = gaze_loss(2.0 * Z, Z)
    assert value == pytest.approx(0.0, abs=1e-7)
    assert np.all(np.isfinite(grad))


def test_gaze_loss_batch_mean(rng):
    raw = rng.standard_normal((6, 3))
    labels = random_unit_vectors(rng, 6)
    mean, _ = gaze_loss_batch(raw, labels)
    singles = [gaze_loss(r, g)[0] for r, g in zip(raw, labels)]
    assert mean == pytest.approx(np.mean(singles))


def test_total_objective_arithmetic():
    empty = {}
    breakdown, _ = total_objective((0.1, empty), (0.1, empty), (0.1, empty), (0.3, empty), Lambdas(1.0, 1.0, 1.0))
    assert breakdown.total == pytest.approx(0.6)
    baseline, _ = total_objective((0.1, empty), (0.1, empty), (0.1, empty), (0.3, empty), Lambdas(0.0, 0.0, 1.0))
    assert baseline.total == pytest.approx(0.3)


def test_total_objective_linear_in_mcr_weight(rng):
    g = {'f_t': rng.standard_normal((2, 3))}
    _, once = total_objective((0.0, {}), (0.2, g), (0.1, {}), (0.0, {}), Lambdas(1.0, 1.0, 1.0))
    _, twice = total_objective((0.0, {}), (0.2, g), (0.1, {}), (0.0, {}), Lambdas(1.0, 2.0, 1.0))
    assert np.array_equal(twice['f_t'], 2.0 * once['f_t'])


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        Lambdas(geo=-1.0)


def test_negative_bank(tiny_config):
    params = init_parameters(tiny_config)
    small = build_anchor_grid(30.0, 30.0, tiny_config.token_dim, 0).with_embeddings(params['anchors'])
    assert build_negative_bank(0, small, params).k == 0
    bank = build_negative_bank(256, small, params)
    assert bank.features.shape == (256, tiny_config.feature_dim)
    assert np.linalg.norm(bank.features, axis=1) == pytest.approx(np.ones(256), abs=1e-9)
    again = build_negative_bank(256, small, params)
    assert np.array_equal(bank.features, again.features)


def test_negative_bank_global_leaves_out_band(tiny_config):
    params = init_parameters(tiny_config)
    small = build_anchor_grid(30.0, 30.0, tiny_config.token_dim, 0).with_embeddings(params['anchors'])
    bank = build_negative_bank(64, small, params, 'global')
    assert 0 < bank.k < 64
    assert interpolable(bank.gazes, small, 'global').all()
    assert build_negative_bank(64, small, params, 'spherical').k == 64


@pytest.mark.parametrize('check', [check_geo, check_gaze, check_total])
def test_finite_differences(check):
    rng = np.random.default_rng(5)
    for _ in range(20):
        assert max(check(rng).values()) < 1e-4


@pytest.mark.parametrize('scheme', SCHEMES)
def test_contrastive_finite_differences(scheme):
    rng = np.random.default_rng(6)
    for _ in range(20):
        assert max(check_mcr_t2i(rng, scheme).values()) < 1e-4
        assert max(check_mcr_i2t(rng, scheme).values()) < 1e-4
