"""Linear latent predictor for post-fault frequency trajectories.

The predictor advances an augmented state g = [omega, phi(window)] with a
linear map g_{t+1} = A g_t + B u_t, where phi is a learned encoder of the
short measurement window, u is the per-bus shed fraction in effect over the
step, and the frequency readout is the first coordinate of g.

Training minimizes the multi-step prediction loss: rollouts are launched
from every coarse sample of every trajectory and compared against encoded
states at all later times up to a rollout cap. Gradients are computed with
a reverse accumulation pass written directly in numpy so that exactly the
stated loss is differentiated.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .encoders import (ExtractorEncoder, MlpEncoder, PassthroughEncoder,
                       ResConvEncoder, encoder_from_spec)

MODEL_FORMAT_VERSION = 1
METHODS = ("kls", "kls-ntd", "dmdc", "edmd")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss blows up or turns non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 2e-3
    batch_traj: int = 32
    seed: int = 0
    rollout_cap: int = 20
    optimizer: str = "adam"            # "adam" or "momentum"
    lr_schedule: str = "constant"      # "constant" or "halve-on-plateau"
    plateau_patience: int = 25
    plateau_rtol: float = 1e-3
    lr_min: float = 1e-7
    tol: float = 0.0                   # stop early when epoch loss drops below
    divergence_factor: float = 50.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    log_every: int = 0                 # 0 silences progress printing

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.rollout_cap < 1:
            raise ValueError("rollout_cap must be at least 1")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "halve-on-plateau"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class KoopmanModel:
    """Trained predictor: matrices A (p,p), B (p,q) plus the encoder."""

    def __init__(self, A, B, encoder, *, tau: float, dt_embed: float,
                 dt_pred: float = 1.0, meta: dict | None = None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise ValueError("A must be square")
        if self.B.shape[0] != self.A.shape[0]:
            raise ValueError("B rows must match A")
        self.encoder = encoder
        self.enc_params = None
        self.tau = float(tau)
        self.dt_embed = float(dt_embed)
        self.dt_pred = float(dt_pred)
        self.meta = dict(meta or {})

    # -- dimensions -----------------------------------------------------
    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    @property
    def method(self) -> str:
        return self.meta.get("method", "kls" if self.tau > 0 else "kls-ntd")

    # -- encoding and rollout -------------------------------------------
    def encode(self, windows, omegas):
        """Map measurement windows to augmented states g = [omega, phi]."""
        W = np.atleast_2d(np.asarray(windows, dtype=float))
        om = np.atleast_1d(np.asarray(omegas, dtype=float))
        if W.shape[0] != om.shape[0]:
            raise ValueError("windows and omegas disagree on batch size")
        lat, _ = self.encoder.forward(self.enc_params, W, train=False)
        G = np.empty((W.shape[0], self.p))
        G[:, 0] = om
        G[:, 1:] = lat
        return G

    def rollout(self, g1, u, n_steps: int):
        """Advance g1 for n_steps coarse samples under shed sequence u.

        u may be a single vector (held constant) or (n_steps-1, q).
        Returns the predicted states, shape (n_steps, p); row 0 is g1.
        """
        g1 = np.asarray(g1, dtype=float).reshape(self.p)
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = np.broadcast_to(u, (n_steps - 1, self.q))
        if u.shape != (n_steps - 1, self.q):
            raise ValueError("u must be (q,) or (n_steps-1, q)")
        out = np.empty((n_steps, self.p))
        out[0] = g1
        for k in range(1, n_steps):
            out[k] = self.A @ out[k - 1] + self.B @ u[k - 1]
        return out

    def predict_frequency(self, window, omega, u, n_steps: int):
        """Frequency trace (pu) from one measured window and shed plan."""
        g1 = self.encode(window, [float(omega)])[0]
        return self.rollout(g1, u, n_steps)[:, 0]

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {"format_version": MODEL_FORMAT_VERSION,
                "method": self.method,
                "p": self.p, "q": self.q,
                "tau": self.tau, "dt_embed": self.dt_embed,
                "dt_pred": self.dt_pred,
                "A": self.A.tolist(), "B": self.B.tolist(),
                "encoder": self.encoder.to_spec(),
                "enc_params": None if self.enc_params is None
                else self.enc_params.tolist(),
                "meta": self.meta}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, data: dict) -> "KoopmanModel":
        if data.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format "
                             f"{data.get('format_version')!r}")
        enc = encoder_from_spec(data["encoder"])
        model = cls(np.array(data["A"]), np.array(data["B"]), enc,
                    tau=data["tau"], dt_embed=data["dt_embed"],
                    dt_pred=data.get("dt_pred", 1.0), meta=data.get("meta"))
        if data.get("enc_params") is not None:
            model.enc_params = np.array(data["enc_params"], dtype=float)
        else:
            model.enc_params = np.zeros(0)
        return model

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# loss and gradients
# ---------------------------------------------------------------------------

def _pair_index(n_traj: int, n_steps: int):
    """All rollout starts, sorted by start time so that the pairs still
    active after k steps always form a prefix."""
    S = np.repeat(np.arange(n_steps - 1), n_traj)
    I = np.tile(np.arange(n_traj), n_steps - 1)
    return I, S


def multistep_loss_grads(A, B, encoder, enc_params, W, om, U, cap,
                         *, want_grads: bool = True, train_mode: bool = False):
    """Multi-step loss and its gradients over a batch of trajectories.

    W   (n, T, L) measurement windows
    om  (n, T)    measured frequency samples (first state coordinate)
    U   (n, q)    constant per-trajectory shed input
    cap           maximum rollout length from each start

    Returns (loss, dA, dB, denc, cache). Gradients are None when
    want_grads is False; cache carries the encoder cache so callers can
    commit batch statistics for encoders that keep running estimates.
    """
    n, T, L = W.shape
    p = A.shape[0]
    K = min(cap, T - 1)
    lat, ecache = encoder.forward(enc_params, W.reshape(n * T, L),
                                  train=train_mode)
    G = np.empty((n * T, p))
    G[:, 0] = om.ravel()
    G[:, 1:] = lat
    I, S = _pair_index(n, T)
    X0 = G[I * T + S].T                        # (p, n_pairs)
    Upairs = U[I]                              # (n_pairs, q)

    xs = [X0]
    resid = []
    loss = 0.0
    X = X0
    for k in range(1, K + 1):
        na = n * (T - k)
        X = A @ X[:, :na] + B @ Upairs[:na].T
        tgt = G[I[:na] * T + S[:na] + k].T
        R = X - tgt
        loss += float(np.sum(R * R))
        xs.append(X)
        resid.append(R)
    if not want_grads:
        return loss, None, None, None, ecache

    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    dG = np.zeros_like(G)
    lam = 2.0 * resid[K - 1]
    for k in range(K, 0, -1):
        na = n * (T - k)
        dA += lam @ xs[k - 1][:, :na].T
        dB += lam @ Upairs[:na]
        np.add.at(dG, I[:na] * T + S[:na] + k, -2.0 * resid[k - 1].T)
        back = A.T @ lam
        if k > 1:
            na_prev = n * (T - k + 1)
            nxt = 2.0 * resid[k - 2].copy()
            nxt[:, :na] += back
            lam = nxt
            del nxt
        else:
            np.add.at(dG, I * T + S, back.T)
    denc = encoder.backward(ecache, dG[:, 1:]) if encoder.n_params else \
        np.zeros(0)
    return loss, dA, dB, denc, ecache


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, shapes, cfg: TrainConfig):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.cfg = cfg

    def step(self, params, grads, lr):
        c = self.cfg
        self.t += 1
        out = []
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, (x, g) in enumerate(zip(params, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            out.append(x - lr * mhat / (np.sqrt(vhat) + c.adam_eps))
        return out


class _Momentum:
    def __init__(self, shapes, cfg: TrainConfig):
        self.v = [np.zeros(s) for s in shapes]
        self.cfg = cfg

    def step(self, params, grads, lr):
        out = []
        for i, (x, g) in enumerate(zip(params, grads)):
            self.v[i] = self.cfg.momentum * self.v[i] - lr * g
            out.append(x + self.v[i])
        return out


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: KoopmanModel
    loss_curve: list = field(default_factory=list)
    epochs_run: int = 0
    wall_time_s: float = 0.0


def _training_arrays(trajectories, tau, dt_embed):
    from .dataset import window_matrix
    W = window_matrix(trajectories, tau, dt_embed)
    n, T, L = W.shape
    n_win = int(round(tau / dt_embed)) + 1
    om = W[:, :, n_win - 1]                 # measured frequency sample
    U = np.array([traj.shed_u for traj in trajectories], dtype=float)
    return W, om, U


def train(trajectories, *, latent_dim: int = 15, tau: float = 0.3,
          dt_embed: float = 0.01, encoder=None, hidden=(96, 96),
          m_dim: int = 2, config: TrainConfig | None = None,
          init_model: "KoopmanModel | None" = None) -> TrainResult:
    """Fit the linear predictor on simulated trajectories.

    tau=0 reduces the window to the current sample (the no-time-delay
    variant). ``encoder`` selects the observable map: a variant name
    ("mlp", "resconv", "extractor", "passthrough"), an encoder instance,
    or None for the default dense net. ``init_model`` warm-starts the
    optimization from a previously trained model (its encoder, scalings,
    and weights are reused; ``encoder`` must then be left unset).
    """
    cfg = config or TrainConfig()
    cfg.validate()
    if not trajectories:
        raise ValueError("no training trajectories supplied")
    for traj in trajectories:
        if traj.collapsed:
            raise ValueError(f"trajectory {traj.scenario_id} collapsed; "
                             "filter collapsed runs before training")
    W, om, U = _training_arrays(trajectories, tau, dt_embed)
    n, T, L = W.shape
    q = U.shape[1]
    p = latent_dim + 1
    rng = np.random.default_rng(cfg.seed)

    if init_model is not None:
        if encoder is not None:
            raise ValueError("pass either encoder or init_model, not both")
        if init_model.p != p or init_model.q != q:
            raise ValueError("init_model dimensions do not match this problem")
        encoder = init_model.encoder
        enc_params = init_model.enc_params.copy()
        A = init_model.A.copy()
        B = init_model.B.copy()
    else:
        if encoder is None or isinstance(encoder, str):
            name = "mlp" if encoder is None else encoder
            n_channels = trajectories[0].y_dim + 1
            if name == "mlp":
                encoder = MlpEncoder(L, tuple(hidden), latent_dim)
            elif name == "resconv":
                encoder = ResConvEncoder(L, n_channels, latent_dim)
            elif name == "extractor":
                encoder = ExtractorEncoder(L, n_channels, latent_dim,
                                           m_dim=m_dim, hidden=tuple(hidden))
            elif name == "passthrough":
                encoder = PassthroughEncoder(L, latent_dim)
            else:
                raise ValueError(f"unknown encoder variant {name!r}")
        if isinstance(encoder, (MlpEncoder, ResConvEncoder, ExtractorEncoder)):
            flat = W.reshape(n * T, L)
            shift = flat.mean(axis=0)
            scale = np.maximum(flat.std(axis=0), 1e-9)
            encoder.set_normalization(shift, scale)
        if isinstance(encoder, ExtractorEncoder):
            feats = encoder.fixed_features(W[:, 0, :])
            encoder.set_feature_normalization(
                feats.mean(axis=0), np.maximum(feats.std(axis=0), 1e-9))
        enc_params = encoder.init_params(rng)
        A = 0.99 * np.eye(p) + 1e-3 * rng.standard_normal((p, p)) / np.sqrt(p)
        B = 1e-3 * rng.standard_normal((p, q)) / np.sqrt(q)
    if encoder.input_len != L:
        raise ValueError(f"encoder input length {encoder.input_len} does not "
                         f"match window length {L}")
    if encoder.out_dim != latent_dim:
        raise ValueError("encoder output does not match latent_dim")

    shapes = [A.shape, B.shape, enc_params.shape]
    opt = _Adam(shapes, cfg) if cfg.optimizer == "adam" else \
        _Momentum(shapes, cfg)
    lr = cfg.lr
    best = np.inf
    since_best = 0
    loss_curve = []
    initial_loss = None
    t_start = time.perf_counter()
    epochs_run = 0
    train_mode = isinstance(encoder, ResConvEncoder)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_traj):
            idx = order[lo:lo + cfg.batch_traj]
            loss, dA, dB, denc, ecache = multistep_loss_grads(
                A, B, encoder, enc_params, W[idx], om[idx], U[idx],
                cfg.rollout_cap, train_mode=train_mode)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; reduce lr "
                    f"(currently {lr:g}) or rollout_cap")
            if train_mode:
                encoder.commit_batchnorm(ecache)
            A, B, enc_params = opt.step([A, B, enc_params],
                                        [dA, dB, denc], lr)
            epoch_loss += loss
        loss_curve.append(epoch_loss)
        epochs_run = epoch + 1
        if initial_loss is None:
            initial_loss = epoch_loss
        if epoch_loss > cfg.divergence_factor * initial_loss:
            raise TrainingDiverged(
                f"loss grew {epoch_loss / initial_loss:.1f}x over its "
                f"starting value at epoch {epoch}")
        if cfg.log_every and (epoch % cfg.log_every == 0
                              or epoch == cfg.epochs - 1):
            print(f"epoch {epoch:4d}  loss {epoch_loss:.6e}  lr {lr:.2e}")
        if epoch_loss < best * (1.0 - cfg.plateau_rtol):
            best = epoch_loss
            since_best = 0
        else:
            since_best += 1
            if (cfg.lr_schedule == "halve-on-plateau"
                    and since_best >= cfg.plateau_patience):
                lr = max(lr * 0.5, cfg.lr_min)
                since_best = 0
        if cfg.tol > 0 and epoch_loss < cfg.tol:
            break

    if not loss_curve:     # zero-epoch run: report the initial loss
        loss, *_ = multistep_loss_grads(A, B, encoder, enc_params, W, om, U,
                                        cfg.rollout_cap, want_grads=False,
                                        train_mode=False)
        loss_curve = [loss]
        initial_loss = loss

    wall = time.perf_counter() - t_start
    method = "kls" if tau > 0 else "kls-ntd"
    meta = {"method": method, "epochs_run": epochs_run,
            "final_epoch_loss": loss_curve[-1],
            "initial_epoch_loss": initial_loss,
            "n_train": n, "rollout_cap": cfg.rollout_cap,
            "seed": cfg.seed, "lr": cfg.lr, "lr_schedule": cfg.lr_schedule}
    model = KoopmanModel(A, B, encoder, tau=tau, dt_embed=dt_embed,
                         dt_pred=float(trajectories[0].dt_pred), meta=meta)
    model.enc_params = enc_params
    err_steps, err_max = prediction_error_profile(model, trajectories)
    model.meta["max_pred_error"] = err_max
    model.meta["per_step_pred_error"] = err_steps.tolist()
    return TrainResult(model=model, loss_curve=loss_curve,
                       epochs_run=epochs_run, wall_time_s=wall)


def prediction_error_profile(model: KoopmanModel, trajectories):
    """Worst-case |predicted - true| frequency error per horizon step.

    Rollouts start from the first coarse window of each trajectory and span
    the full horizon; errors compare against the noise-free frequency.
    Returns (per-step maxima over the set, overall max).
    """
    W, om, U = _training_arrays(trajectories, model.tau, model.dt_embed)
    n, T, L = W.shape
    G1 = model.encode(W[:, 0, :], om[:, 0])
    true = np.array([traj.omega_coarse for traj in trajectories])
    X = G1.T
    err = np.zeros((n, T))
    err[:, 0] = np.abs(X[0] - true[:, 0])
    for k in range(1, T):
        X = model.A @ X + model.B @ U.T
        err[:, k] = np.abs(X[0] - true[:, k])
    per_step = err.max(axis=0)
    return per_step, float(per_step.max())


def holdout_mae(model: KoopmanModel, trajectories):
    """Mean absolute frequency error of full-horizon rollouts, per trajectory."""
    W, om, U = _training_arrays(trajectories, model.tau, model.dt_embed)
    n, T, L = W.shape
    G1 = model.encode(W[:, 0, :], om[:, 0])
    true = np.array([traj.omega_coarse for traj in trajectories])
    X = G1.T
    pred = np.zeros((n, T))
    pred[:, 0] = X[0]
    for k in range(1, T):
        X = model.A @ X + model.B @ U.T
        pred[:, k] = X[0]
    return np.abs(pred - true).mean(axis=1)


def latent_correlation(model: KoopmanModel, trajectories, labels: dict):
    """Pearson correlation between first-window latents and scenario labels.

    Uses the encoder's bottleneck features when it exposes them (the
    scenario-parameter chart), otherwise the latent block of the state.
    labels maps name -> array of per-trajectory values. Returns
    {name: {"r": per-latent correlations, "best_dim": index of the latent
    with the largest |r|, "best_r": that correlation}}. Latents with zero
    variance across the set are flagged and given r = 0.
    """
    W, om, _ = _training_arrays(trajectories, model.tau, model.dt_embed)
    if hasattr(model.encoder, "extractor_features"):
        lat = model.encoder.extractor_features(model.enc_params, W[:, 0, :])
    else:
        G = model.encode(W[:, 0, :], om[:, 0])
        lat = G[:, 1:]
    out = {}
    lat_c = lat - lat.mean(axis=0)
    lat_sd = lat.std(axis=0)
    dead = lat_sd < 1e-12
    for name, vals in labels.items():
        v = np.asarray(vals, dtype=float)
        if v.shape[0] != lat.shape[0]:
            raise ValueError(f"label {name!r} length does not match set")
        vc = v - v.mean()
        vsd = v.std()
        if vsd < 1e-12:
            raise ValueError(f"label {name!r} has zero variance")
        r = np.zeros(lat.shape[1])
        ok = ~dead
        r[ok] = (lat_c[:, ok] * vc[:, None]).mean(axis=0) / (lat_sd[ok] * vsd)
        best = int(np.argmax(np.abs(r)))
        out[name] = {"r": r, "best_dim": best, "best_r": float(r[best]),
                     "zero_variance_dims": np.flatnonzero(dead).tolist()}
    return out
