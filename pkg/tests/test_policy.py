import math

import numpy as np
import pytest

from pgrl.autodiff import ShapeError
from pgrl.policy import (
    CategoricalPolicy,
    GaussianPolicy,
    ValueFunction,
    entropy,
    log_prob,
    log_prob_np,
    mean_action,
    model_from_dict,
    sample_action,
    value,
)


@pytest.fixture
def gaussian():
    return GaussianPolicy.create(3, 2, (8,), np.random.default_rng(0), log_std_init=-0.3)


@pytest.fixture
def categorical():
    return CategoricalPolicy.create(3, 4, (8,), np.random.default_rng(0))


def test_gaussian_log_prob_closed_form(gaussian):
    obs = np.array([0.1, -0.2, 0.3])
    mean, log_std = gaussian.heads_np(obs)
    a = np.array([0.5, -1.0])
    sigma = np.exp(log_std)
    expected = sum(-0.5 * ((a - mean) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi))
    assert log_prob(gaussian, obs, a).item() == pytest.approx(expected, abs=1e-12)
    assert log_prob_np(gaussian, obs, a) == pytest.approx(expected, abs=1e-12)


def test_gaussian_entropy_closed_form(gaussian):
    h = entropy(gaussian, np.zeros((2, 3))).value
    expected = 2 * (-0.3 + 0.5 * math.log(2 * math.pi * math.e))
    assert np.allclose(h, expected)


def test_gaussian_samples_match_moments(gaussian):
    rng = np.random.default_rng(1)
    obs = np.array([0.2, 0.1, -0.4])
    acts = np.array([sample_action(gaussian, obs, rng)[0] for _ in range(5000)])
    mean, log_std = gaussian.heads_np(obs)
    assert np.allclose(acts.mean(axis=0), mean, atol=0.05)
    assert np.allclose(acts.std(axis=0), np.exp(log_std), atol=0.05)


def test_sampled_log_prob_matches_evaluation(gaussian, categorical):
    rng = np.random.default_rng(2)
    obs = np.array([0.3, 0.3, 0.3])
    for pol in (gaussian, categorical):
        a, lp = sample_action(pol, obs, rng)
        assert lp == pytest.approx(log_prob(pol, obs, a).item(), abs=1e-12)


def test_state_dependent_std_has_two_heads():
    pol = GaussianPolicy.create(2, 3, (4,), np.random.default_rng(0), state_dependent_std=True)
    mean, log_std = pol.heads_np(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert mean.shape == log_std.shape == (2, 3)
    assert not np.allclose(log_std[0], log_std[1])


def test_categorical_probabilities(categorical):
    p = categorical.probabilities(np.random.default_rng(0).normal(size=(5, 3)))
    assert np.allclose(p.sum(axis=1), 1.0) and np.all(p > 0)


def test_categorical_sampling_frequencies(categorical):
    rng = np.random.default_rng(3)
    obs = np.array([1.0, 0.0, -1.0])
    counts = np.bincount([sample_action(categorical, obs, rng)[0] for _ in range(5000)], minlength=4)
    p = categorical.probabilities(obs)
    se = np.sqrt(p * (1 - p) / 5000)
    assert np.all(np.abs(counts / 5000 - p) < 4 * se)


def test_categorical_entropy_matches_definition(categorical):
    obs = np.array([0.5, 0.5, 0.5])
    p = categorical.probabilities(obs)
    assert entropy(categorical, obs).item() == pytest.approx(-(p * np.log(p)).sum(), abs=1e-12)


def test_categorical_action_out_of_range(categorical):
    with pytest.raises(IndexError):
        log_prob(categorical, np.zeros(3), 4)


def test_mean_action(gaussian, categorical):
    obs = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(mean_action(gaussian, obs), gaussian.heads_np(obs)[0])
    assert mean_action(categorical, obs) == int(np.argmax(categorical.probabilities(obs)))


def test_observation_width_checked(gaussian):
    with pytest.raises(ShapeError):
        log_prob(gaussian, np.zeros(4), np.zeros(2))


def test_value_function_shapes():
    vf = ValueFunction.create(3, (5,), np.random.default_rng(0))
    assert isinstance(vf.predict(np.zeros(3)), float)
    assert vf.predict(np.zeros((4, 3))).shape == (4,)
    assert value(vf, np.zeros((4, 3))).shape == (4,)


def test_serialization_round_trip(gaussian, categorical):
    vf = ValueFunction.create(3, (5,), np.random.default_rng(0))
    for model in (gaussian, categorical, vf):
        back = model_from_dict(model.to_dict())
        assert type(back) is type(model)
        assert np.array_equal(back.params.values, model.params.values)
        assert back.to_dict() == model.to_dict()
