import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patedr.autoencoder import (
    RADIUS_SLOPE,
    AutoencoderParams,
    TrainConfig,
    ae_decode,
    ae_encode,
    ae_forward,
    ae_train,
    ball_activation,
    ball_activation_grad,
    init_params,
    load_autoencoder,
    loss_and_grad,
    save_autoencoder,
)
from patedr.mechanisms import NoiseSeed
from patedr.synthetic import SyntheticMaskSpec, gen_masks
from patedr.volume import FormatError, dice


def central_jacobian(f, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_ball_hand_example():
    np.testing.assert_allclose(ball_activation([0.0, 3.0, 4.0]), [0.42426407, 0.56568542], atol=1e-8)
    assert np.linalg.norm(ball_activation([0.0, 3.0, 4.0])) == pytest.approx(2**-0.5)


def test_ball_limits():
    assert np.linalg.norm(ball_activation([40.0, 1.0, -2.0])) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(ball_activation([-40.0, 1.0, -2.0])) < 1e-10
    assert np.linalg.norm(ball_activation([-800.0, 1.0])) == 0.0


def test_ball_zero_direction_uses_first_axis():
    np.testing.assert_allclose(ball_activation([0.0, 0.0, 0.0]), [2**-0.5, 0.0])
    assert np.all(np.isfinite(ball_activation_grad([0.3, 0.0, 0.0, 0.0])))


def test_ball_needs_direction():
    with pytest.raises(ValueError):
        ball_activation([1.0])


@settings(max_examples=200, deadline=None)
@given(
    v=st.lists(st.floats(-50, 50), min_size=2, max_size=40),
    c=st.floats(1e-3, 1e3),
)
def test_ball_range_and_equivariance(v, c):
    v = np.array(v)
    out = ball_activation(v)
    assert np.linalg.norm(out) <= 1
    if v[0] < 10:  # beyond this the logistic rounds to 1 in double precision
        assert np.linalg.norm(out) < 1
    if np.linalg.norm(v[1:]) > 1e-6:
        scaled = v.copy()
        scaled[1:] *= c
        np.testing.assert_allclose(ball_activation(scaled), out, atol=1e-12)


def test_radius_derivative_at_zero():
    # d rho / d v0 = (c / l) rho (1 - logistic(c v0)), which at v0 = 0 is c (1/l) 2^(-1/l - 1).
    for ell in (1, 2, 8):
        v = np.concatenate([[0.0], np.ones(ell)])
        radius = lambda x: np.linalg.norm(ball_activation(x))
        step = np.zeros(ell + 1)
        step[0] = 1e-6
        fd = (radius(v + step) - radius(v - step)) / 2e-6
        analytic = RADIUS_SLOPE / ell * 2 ** (-1 / ell - 1)
        assert fd == pytest.approx(analytic, rel=1e-7)
        n = v[1:] / np.linalg.norm(v[1:])
        assert n @ ball_activation_grad(v)[:, 0] == pytest.approx(analytic, rel=1e-12)


def test_direction_scaling_is_in_kernel():
    v = np.array([0.4, 1.0, -2.0, 0.5])
    jac = ball_activation_grad(v)
    np.testing.assert_allclose(jac[:, 1:] @ v[1:], 0, atol=1e-12)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    for ell in (2, 8, 32):
        for _ in range(34):
            v = rng.normal(size=ell + 1) * rng.uniform(0.2, 3)
            fd = central_jacobian(ball_activation, v)
            jac = ball_activation_grad(v)
            assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) < 1e-4


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = init_params(12, 6, 3, seed=2)
    x = (rng.random((2, 12)) < 0.4).astype(float)
    noise = 0.1 * rng.normal(size=(2, 3))
    _, grad = loss_and_grad(p, x, noise)
    theta = p.flat()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = 1e-6
        fd[i] = (loss_and_grad(p.with_flat(theta + e), x, noise)[0] - loss_and_grad(p.with_flat(theta - e), x, noise)[0]) / 2e-6
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4
    assert np.max(np.abs(grad - fd)) < 1e-4 * np.max(np.abs(fd))


def test_loss_is_mean_cross_entropy():
    p = init_params(8, 4, 2, seed=0)
    x = np.array([[1, 0, 1, 1, 0, 0, 0, 1.0]])
    _, probs = ae_forward(x, p)
    bce = -np.sum(x * np.log(probs) + (1 - x) * np.log(1 - probs))
    assert loss_and_grad(p, x)[0] == pytest.approx(bce, rel=1e-10)


def test_forward_contracts():
    rng = np.random.default_rng(3)
    p = init_params(27, 10, 4, seed=1)
    x = rng.normal(size=(1000, 27)) * 5
    z, probs = ae_forward(x, p)
    assert np.all(np.linalg.norm(z, axis=1) <= 1)
    assert np.all((probs > 0) & (probs < 1))
    z2, _ = ae_forward(x, p)
    np.testing.assert_array_equal(z, z2)
    with pytest.raises(ValueError):
        ae_forward(np.zeros(26), p)
    with pytest.raises(ValueError):
        ae_forward(x, p, noise_sigma=0.1)


def test_forward_noise_variance():
    p = init_params(8, 6, 3, seed=0)
    x = np.ones(8)
    clean = ae_encode(x, p)
    noisy = np.array([ae_forward(x, p, 0.2, NoiseSeed(5, n))[0] for n in range(20_000)])
    np.testing.assert_allclose(noisy.mean(axis=0), clean, atol=0.01)
    np.testing.assert_allclose(noisy.var(axis=0), 0.04, rtol=0.05)


def test_zero_epochs_returns_init():
    init = init_params(8, 4, 2, seed=3)
    p = ae_train([np.ones(8)] * 3, TrainConfig(epochs=0), init=init)
    np.testing.assert_array_equal(p.flat(), init.flat())


def test_training_reduces_loss_and_is_deterministic():
    masks = gen_masks(SyntheticMaskSpec(dims=(8, 8, 8), seed=3), 40)
    cfg = TrainConfig(learning_rate=0.02, epochs=15, batch_size=8, bottleneck_noise_sigma=0.05, seed=4)
    history = []
    p = ae_train(masks, cfg, latent_dim=6, hidden_dim=32, history=history)
    assert history[-1] < history[0]
    np.testing.assert_array_equal(p.flat(), ae_train(masks, cfg, latent_dim=6, hidden_dim=32).flat())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_divergence_is_reported():
    masks = gen_masks(SyntheticMaskSpec(dims=(6, 6, 6)), 8)
    with pytest.raises(FloatingPointError, match="learning rate"):
        ae_train(masks, TrainConfig(learning_rate=1e305, epochs=5), latent_dim=4, hidden_dim=16)


def test_train_config_validation():
    for kwargs in ({"learning_rate": 0}, {"epochs": -1}, {"batch_size": 0}, {"bottleneck_noise_sigma": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
    with pytest.raises(ValueError):
        ae_train([], TrainConfig())


def test_decode_of_mean_of_identical_codes():
    p = init_params(64, 16, 4, seed=5)
    m = (np.random.default_rng(0).random((4, 4, 4)) < 0.5).astype(float)
    z = ae_encode(m, p)
    assert ae_decode(np.mean([z] * 5, axis=0), p) == ae_decode(z, p)
    with pytest.raises(ValueError):
        ae_decode(np.zeros(5), p)


def test_params_shape_validation():
    p = init_params(8, 4, 2, seed=0)
    with pytest.raises(ValueError):
        AutoencoderParams(p.weights[:3], p.biases[:3])
    with pytest.raises(ValueError):
        AutoencoderParams((p.weights[0], p.weights[1], p.weights[3], p.weights[2]), p.biases)


def test_save_load(tmp_path):
    p = init_params(27, 5, 3, seed=9)
    save_autoencoder(tmp_path / "m.aenc", p)
    back = load_autoencoder(tmp_path / "m.aenc")
    np.testing.assert_array_equal(back.flat(), p.flat())
    raw = (tmp_path / "m.aenc").read_bytes()
    (tmp_path / "bad").write_bytes(b"AENX" + raw[4:])
    with pytest.raises(FormatError):
        load_autoencoder(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_autoencoder(tmp_path / "short")


@pytest.mark.slow
def test_reconstruction_dice_regression():
    masks = gen_masks(SyntheticMaskSpec(), 250)
    p = ae_train(masks[:200], TrainConfig(learning_rate=0.01, epochs=200, seed=0), latent_dim=32, hidden_dim=128)
    scores = [dice(m, ae_decode(ae_encode(m, p), p)) for m in masks[200:]]
    assert np.mean(scores) >= 0.85


@pytest.mark.slow
def test_noise_trained_model_holds_up_under_deployment_noise():
    sigma = 0.3
    masks = gen_masks(SyntheticMaskSpec(dims=(12, 12, 12), seed=1), 260)
    train, test = masks[:200], masks[200:]
    gaps = []
    for seed in range(5):
        means = []
        for train_sigma in (0.0, sigma):
            cfg = TrainConfig(learning_rate=0.02, epochs=100, bottleneck_noise_sigma=train_sigma, seed=seed)
            p = ae_train(train, cfg, latent_dim=32, hidden_dim=64)
            means.append(np.mean([
                dice(m.data.reshape(-1), ae_forward(m.data.reshape(-1), p, sigma, NoiseSeed(seed, i))[1] >= 0.5)
                for i, m in enumerate(test)
            ]))
        gaps.append(means[1] - means[0])
    assert np.mean(gaps) >= 0
    assert sum(g >= 0 for g in gaps) >= 4
