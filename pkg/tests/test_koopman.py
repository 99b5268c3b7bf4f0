"""Predictor identification tests: observable anchoring, rollout recursion,
the multi-step loss and its gradients, training contracts, and latent
correlation readout."""

import numpy as np
import pytest

from koopshed.encoders import MlpEncoder, PassthroughEncoder
from koopshed.gridsim import Trajectory
from koopshed.koopman import (
    KoopmanModel,
    TrainConfig,
    TrainingDiverged,
    holdout_mae,
    latent_correlation,
    multistep_loss_grads,
    prediction_error_profile,
    train,
)
from synthetic import planted_trajectories


def scalar_model(a=0.5, b=0.2):
    model = KoopmanModel([[a]], [[b]], PassthroughEncoder(2, 0),
                         tau=0.0, dt_embed=1.0)
    model.enc_params = np.zeros(0)
    return model


def toy_trajectory(omega, y, u, scenario_id="toy"):
    omega = np.asarray(omega, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] != omega.size:
        y = np.broadcast_to(y, (omega.size, y.shape[1])).copy()
    windows = np.hstack([omega[:, None], y])
    return Trajectory(scenario_id=scenario_id, dt_embed=1.0, dt_pred=1.0,
                      tau=0.0, t_coarse=np.arange(omega.size, dtype=float),
                      omega_coarse=omega, windows=windows, y_dim=y.shape[1],
                      nadir=float(omega.min()), ssv=float(omega[-1]),
                      collapsed=False, settled=True,
                      shed_u=np.asarray(u, dtype=float))


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def test_encode_anchors_first_coordinate():
    rng = np.random.default_rng(0)
    enc = MlpEncoder(6, (8,), 3)
    model = KoopmanModel(np.eye(4), np.zeros((4, 2)), enc, tau=0.0,
                         dt_embed=1.0)
    model.enc_params = enc.init_params(rng)
    W = rng.standard_normal((5, 6))
    om = rng.standard_normal(5)
    G = model.encode(W, om)
    assert np.array_equal(G[:, 0], om)


def test_encode_zero_weight_mlp_gives_zero_latents():
    enc = MlpEncoder(6, (8, 8), 3)
    model = KoopmanModel(np.eye(4), np.zeros((4, 2)), enc, tau=0.0,
                         dt_embed=1.0)
    model.enc_params = np.zeros(enc.n_params)
    G = model.encode(np.random.default_rng(1).standard_normal((4, 6)),
                     np.zeros(4))
    assert np.array_equal(G[:, 1:], np.zeros((4, 3)))


def test_encode_linear_layer_hand_case():
    enc = MlpEncoder(3, (), 2)
    W = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]])
    b = np.array([0.1, -0.2])
    params = np.concatenate([W.ravel(), b])
    x = np.array([0.3, -0.4, 0.2])
    out, _ = enc.forward(params, x)
    assert np.allclose(out[0], W @ x + b)


def test_encode_rejects_dimension_mismatch():
    enc = MlpEncoder(6, (8,), 3)
    model = KoopmanModel(np.eye(4), np.zeros((4, 2)), enc, tau=0.0,
                         dt_embed=1.0)
    model.enc_params = np.zeros(enc.n_params)
    with pytest.raises(ValueError):
        model.encode(np.zeros((2, 5)), np.zeros(2))
    with pytest.raises(ValueError):
        model.encode(np.zeros((2, 6)), np.zeros(3))


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def test_rollout_identity_dynamics_is_constant():
    model = KoopmanModel(np.eye(3), np.zeros((3, 2)),
                         PassthroughEncoder(3, 2), tau=0.0, dt_embed=1.0)
    g1 = np.array([0.5, -1.0, 2.0])
    out = model.rollout(g1, np.zeros(2), 6)
    assert np.array_equal(out, np.tile(g1, (6, 1)))


def test_rollout_scalar_geometric_sequence():
    model = scalar_model(a=0.5, b=1.0)
    out = model.rollout([1.0], np.zeros(1), 5)
    assert np.allclose(out[:, 0], [1.0, 0.5, 0.25, 0.125, 0.0625])


def test_rollout_matches_naive_loop():
    rng = np.random.default_rng(7)
    A = 0.5 * rng.standard_normal((4, 4))
    B = rng.standard_normal((4, 3))
    model = KoopmanModel(A, B, PassthroughEncoder(4, 3), tau=0.0,
                         dt_embed=1.0)
    g1 = rng.standard_normal(4)
    U = rng.standard_normal((4, 3))
    out = model.rollout(g1, U, 5)
    g = g1.copy()
    for k in range(4):
        g = A @ g + B @ U[k]
        assert np.allclose(out[k + 1], g)


def test_rollout_checks_input_shape():
    model = scalar_model()
    with pytest.raises(ValueError):
        model.rollout([1.0], np.zeros((3, 1)), 5)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def loss_of(trajs, A, B, cap):
    W = np.stack([t.windows for t in trajs])
    om = np.stack([t.omega_coarse for t in trajs])
    U = np.stack([t.shed_u for t in trajs])
    enc = PassthroughEncoder(W.shape[2], A.shape[0] - 1)
    loss, *_ = multistep_loss_grads(np.asarray(A, dtype=float),
                                    np.asarray(B, dtype=float), enc,
                                    np.zeros(0), W, om, U, cap,
                                    want_grads=False)
    return loss


def test_loss_zero_on_exactly_reproduced_data():
    A, B, trajs = planted_trajectories(3, p=3, q=2, n=4, T=8)
    assert loss_of(trajs, A, B, cap=7) <= 1e-22


def test_loss_single_pair_is_squared_onestep_residual():
    tr = toy_trajectory([1.0, 0.7], [[0.2], [0.1]], [0.3])
    a, b = 0.5, 0.2
    A = np.array([[a, 0.0], [0.0, 0.4]])
    B = np.array([[b], [0.1]])
    g0 = np.array([1.0, 0.2])
    g1 = np.array([0.7, 0.1])
    expect = np.sum((A @ g0 + B @ np.array([0.3]) - g1) ** 2)
    assert loss_of([tr], A, B, cap=1) == pytest.approx(expect, rel=1e-12)


def test_loss_scalar_three_step_hand_case():
    # omega (1.0, 0.7, 0.4), a = 0.5, b = 0.2, u = 0.3:
    # (0.56 - 0.7)^2 + (0.34 - 0.4)^2 + (0.41 - 0.4)^2 = 0.0233
    tr = toy_trajectory([1.0, 0.7, 0.4], np.zeros((3, 0)), [0.3])
    A, B = np.array([[0.5]]), np.array([[0.2]])
    assert loss_of([tr], A, B, cap=2) == pytest.approx(0.0233, rel=1e-12)
    assert loss_of([tr], A, B, cap=1) == pytest.approx(0.0197, rel=1e-12)


def test_loss_adds_over_batch():
    _, _, trajs = planted_trajectories(5, p=3, q=2, n=3, T=7)
    A = np.full((3, 3), 0.2)
    B = np.full((3, 2), 0.1)
    whole = loss_of(trajs, A, B, cap=6)
    parts = sum(loss_of([t], A, B, cap=6) for t in trajs)
    assert whole == pytest.approx(parts, rel=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_scalar_two_step_hand_case():
    tr = toy_trajectory([1.0, 0.7, 0.4], np.zeros((3, 0)), [0.3])
    W = tr.windows[None, :, :]
    om = tr.omega_coarse[None, :]
    U = tr.shed_u[None, :]
    enc = PassthroughEncoder(1, 0)
    loss, dA, dB, _, _ = multistep_loss_grads(
        np.array([[0.5]]), np.array([[0.2]]), enc, np.zeros(0),
        W, om, U, cap=2)
    assert loss == pytest.approx(0.0233, rel=1e-12)
    assert dA[0, 0] == pytest.approx(-0.3932, rel=1e-10)
    assert dB[0, 0] == pytest.approx(-0.132, rel=1e-10)


def test_gradient_zero_data_zero_b():
    tr = toy_trajectory(np.zeros(5), np.zeros((5, 2)), [0.4, 0.6])
    W = tr.windows[None, :, :]
    om = tr.omega_coarse[None, :]
    U = tr.shed_u[None, :]
    enc = PassthroughEncoder(3, 2)
    _, _, dB, _, _ = multistep_loss_grads(
        0.5 * np.eye(3), np.zeros((3, 2)), enc, np.zeros(0), W, om, U, cap=3)
    assert np.array_equal(dB, np.zeros((3, 2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    _, _, trajs = planted_trajectories(seed + 10, p=3, q=2, n=3, T=6)
    W = np.stack([t.windows for t in trajs])
    om = np.stack([t.omega_coarse for t in trajs])
    U = np.stack([t.shed_u for t in trajs])
    enc = MlpEncoder(3, (6,), 2)
    theta = enc.init_params(rng)
    A = 0.8 * np.eye(3) + 0.05 * rng.standard_normal((3, 3))
    B = 0.1 * rng.standard_normal((3, 2))

    loss0, dA, dB, dT, _ = multistep_loss_grads(A, B, enc, theta, W, om, U,
                                                cap=5)
    flat = np.concatenate([A.ravel(), B.ravel(), theta])
    grad = np.concatenate([dA.ravel(), dB.ravel(), dT])

    def loss_at(vec):
        nA = vec[:9].reshape(3, 3)
        nB = vec[9:15].reshape(3, 2)
        nT = vec[15:]
        val, *_ = multistep_loss_grads(nA, nB, enc, nT, W, om, U, cap=5,
                                       want_grads=False)
        return val

    h = 1e-5
    coords = rng.choice(flat.size, size=25, replace=False)
    for c in coords:
        plus, minus = flat.copy(), flat.copy()
        plus[c] += h
        minus[c] -= h
        fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h)
        denom = max(abs(fd), abs(grad[c]), 1e-8)
        assert abs(fd - grad[c]) / denom <= 1e-4, \
            f"coordinate {c}: analytic {grad[c]:.8e} vs fd {fd:.8e}"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_recovers_planted_system():
    _, _, trajs = planted_trajectories(0, p=3, q=2, n=20, T=10)
    cfg = TrainConfig(epochs=1500, lr=2e-2, rollout_cap=1, seed=0,
                      lr_schedule="halve-on-plateau", plateau_patience=100,
                      plateau_rtol=1e-12)
    result = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                   encoder="passthrough", config=cfg)
    assert holdout_mae(result.model, trajs).max() <= 1e-6
    assert result.model.meta["max_pred_error"] <= 1e-6


def test_train_zero_epochs_returns_initial_model():
    _, _, trajs = planted_trajectories(1, n=4, T=6)
    cfg = TrainConfig(epochs=0, seed=3)
    result = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                   encoder="passthrough", config=cfg)
    assert result.epochs_run == 0
    assert len(result.loss_curve) == 1
    assert result.model.meta["final_epoch_loss"] > 0.0


def test_train_same_seed_reproduces_parameters():
    _, _, trajs = planted_trajectories(2, n=4, T=6)
    out = []
    for _ in range(2):
        cfg = TrainConfig(epochs=30, lr=1e-3, rollout_cap=3, seed=11)
        res = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                    encoder="mlp", hidden=(8,), config=cfg)
        out.append(res)
    assert np.array_equal(out[0].model.A, out[1].model.A)
    assert np.array_equal(out[0].model.B, out[1].model.B)
    assert np.array_equal(out[0].model.enc_params, out[1].model.enc_params)


def test_train_flags_divergence():
    _, _, trajs = planted_trajectories(4, n=4, T=6)
    cfg = TrainConfig(epochs=400, lr=1e6, rollout_cap=5, seed=0)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingDiverged):
            train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                  encoder="mlp", hidden=(8,), config=cfg)


def test_train_warm_start_requires_consistent_dimensions():
    _, _, trajs = planted_trajectories(6, n=4, T=6)
    cfg = TrainConfig(epochs=5, rollout_cap=2)
    res = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                encoder="passthrough", config=cfg)
    again = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                  init_model=res.model, config=cfg)
    assert again.model.p == 3
    with pytest.raises(ValueError):
        train(trajs, latent_dim=4, tau=0.0, dt_embed=1.0,
              init_model=res.model, config=cfg)
    with pytest.raises(ValueError):
        train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
              encoder="passthrough", init_model=res.model, config=cfg)


def test_train_rejects_bad_inputs():
    _, _, trajs = planted_trajectories(7, n=2, T=6)
    with pytest.raises(ValueError):
        train([], latent_dim=2)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd").validate()
    bad = toy_trajectory([0.0, -0.2], np.zeros((2, 2)), [0.1, 0.1])
    bad.collapsed = True
    with pytest.raises(ValueError):
        train([bad] + trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
              encoder="passthrough")


# ---------------------------------------------------------------------------
# error profiles and model persistence
# ---------------------------------------------------------------------------

def test_holdout_mae_matches_manual_rollout():
    A, B, trajs = planted_trajectories(8, p=3, q=2, n=3, T=6)
    model = KoopmanModel(A * 0.98, B, PassthroughEncoder(3, 2), tau=0.0,
                         dt_embed=1.0)
    model.enc_params = np.zeros(0)
    maes = holdout_mae(model, trajs)
    for tr, got in zip(trajs, maes):
        g1 = np.concatenate([[tr.omega_coarse[0]], tr.windows[0, 1:]])
        pred = model.rollout(g1, tr.shed_u, tr.n_steps)[:, 0]
        assert got == pytest.approx(np.abs(pred - tr.omega_coarse).mean())


def test_prediction_error_profile_shapes_and_max():
    A, B, trajs = planted_trajectories(9, p=3, q=2, n=4, T=6)
    model = KoopmanModel(A, B, PassthroughEncoder(3, 2), tau=0.0,
                         dt_embed=1.0)
    model.enc_params = np.zeros(0)
    per_step, overall = prediction_error_profile(model, trajs)
    assert per_step.shape == (6,)
    assert overall == pytest.approx(per_step.max())
    assert overall <= 1e-12


def test_model_roundtrips_through_json(tmp_path):
    _, _, trajs = planted_trajectories(10, n=4, T=6)
    cfg = TrainConfig(epochs=20, rollout_cap=2, seed=5)
    model = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                  encoder="mlp", hidden=(8,), config=cfg).model
    path = tmp_path / "model.json"
    model.save(path)
    back = KoopmanModel.load(path)
    assert np.array_equal(back.A, model.A)
    assert np.array_equal(back.B, model.B)
    assert np.array_equal(back.enc_params, model.enc_params)
    assert back.method == model.method == "kls-ntd"
    W = np.stack([t.windows for t in trajs])
    assert np.array_equal(back.encode(W[0], trajs[0].omega_coarse),
                          model.encode(W[0], trajs[0].omega_coarse))


def test_model_load_rejects_unknown_format(tmp_path):
    _, _, trajs = planted_trajectories(11, n=2, T=5)
    model = train(trajs, latent_dim=2, tau=0.0, dt_embed=1.0,
                  encoder="passthrough",
                  config=TrainConfig(epochs=1, rollout_cap=1)).model
    path = tmp_path / "model.json"
    model.save(path)
    import json
    doc = json.loads(path.read_text())
    doc["format_version"] = 999
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        KoopmanModel.load(path)


# ---------------------------------------------------------------------------
# latent correlation
# ---------------------------------------------------------------------------

def corr_model_and_trajs(latents):
    """Trajectories whose first-window latent block equals ``latents``."""
    latents = np.asarray(latents, dtype=float)
    n, d = latents.shape
    trajs = [toy_trajectory(np.zeros(3), np.tile(latents[i], (3, 1)),
                            np.zeros(1), scenario_id=f"c{i}")
             for i in range(n)]
    model = KoopmanModel(np.eye(1 + d), np.zeros((1 + d, 1)),
                         PassthroughEncoder(1 + d, d), tau=0.0, dt_embed=1.0)
    model.enc_params = np.zeros(0)
    return model, trajs


def test_latent_correlation_perfect_and_negated():
    rng = np.random.default_rng(12)
    label = rng.uniform(0.7, 1.3, 40)
    lat = np.column_stack([label, -label, rng.standard_normal(40)])
    model, trajs = corr_model_and_trajs(lat)
    out = latent_correlation(model, trajs, {"x": label})["x"]
    assert out["r"][0] == pytest.approx(1.0)
    assert out["r"][1] == pytest.approx(-1.0)
    assert out["best_r"] == pytest.approx(1.0)


def test_latent_correlation_independent_noise_is_small():
    rng = np.random.default_rng(13)
    label = rng.uniform(0.7, 1.3, 1000)
    lat = rng.standard_normal((1000, 2))
    model, trajs = corr_model_and_trajs(lat)
    out = latent_correlation(model, trajs, {"x": label})["x"]
    assert np.abs(out["r"]).max() < 0.1


def test_latent_correlation_flags_dead_dimensions():
    rng = np.random.default_rng(14)
    label = rng.uniform(0.7, 1.3, 30)
    lat = np.column_stack([np.full(30, 0.42), label])
    model, trajs = corr_model_and_trajs(lat)
    out = latent_correlation(model, trajs, {"x": label})["x"]
    assert out["zero_variance_dims"] == [0]
    assert out["r"][0] == 0.0
    with pytest.raises(ValueError):
        latent_correlation(model, trajs, {"bad": np.ones(30)})
