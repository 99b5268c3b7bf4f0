"""Linear and dictionary-lifted reference identifiers.

Both baselines fit a one-step linear map z_{t+1} = A z_t + B u_t by least
squares on snapshot pairs. The plain variant ("dmd") works on the raw
measured state [omega; y]; the lifted variant ("edmd") augments the state
with Gaussian radial basis functions centered on k-means centroids of the
training snapshots and identifies the linear map in the lifted space.
Frequency predictions decode from the first (unlifted) coordinate.

Neither variant sees the time-delay window, which is the structural
weakness the windowed predictor addresses; ``snapshot_matrices`` can hand
them the full window for ablations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .koopman import MODEL_FORMAT_VERSION, KoopmanModel

DEFAULT_RBF_COUNT = 100


class ConditioningError(ValueError):
    """Raised when the snapshot matrix is rank deficient and no ridge is set."""


@dataclass
class EdmdDictionary:
    """Gaussian RBF dictionary: lift z to [z; exp(-|z - c_j|^2 / 2 bw^2)].

    An empty dictionary (no centers) is the degenerate identity lift, under
    which the lifted identification reduces to the plain one bitwise.
    """

    centers: np.ndarray          # (count, state_dim); may have zero rows
    bandwidth: float = 1.0

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if self.centers.size == 0:
            self.centers = self.centers.reshape(0, self.centers.shape[-1]
                                                if self.centers.ndim > 1 else 0)
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    @property
    def count(self) -> int:
        return self.centers.shape[0]

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d) -> "EdmdDictionary":
        return cls(np.array(d["centers"], dtype=float), d["bandwidth"])


def make_dictionary(states, count: int = DEFAULT_RBF_COUNT,
                    seed: int = 0) -> EdmdDictionary:
    """K-means centers over training snapshots, median-distance bandwidth."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return EdmdDictionary(np.zeros((0, states.shape[1])), 1.0)
    if count > states.shape[0]:
        raise ValueError(f"requested {count} centers from "
                         f"{states.shape[0]} snapshots")
    centers, _ = kmeans2(states, count, minit="++", seed=seed)
    if count > 1:
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        bw = float(np.median(dist[np.triu_indices(count, k=1)]))
        if bw <= 0:
            bw = 1.0
    else:
        bw = 1.0
    return EdmdDictionary(centers, bw)


def lift(Z, dictionary: EdmdDictionary) -> np.ndarray:
    """Append the RBF features to each state row."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if dictionary.count == 0:
        return Z
    diff = Z[:, None, :] - dictionary.centers[None, :, :]
    sq = (diff ** 2).sum(axis=2)
    return np.hstack([Z, np.exp(-sq / (2.0 * dictionary.bandwidth ** 2))])


def fit_dmdc(Z, U, Z_next, ridge: float = 0.0):
    """Least-squares (A, B) for z' = A z + B u over snapshot rows.

    With ridge = 0 the snapshot matrix [Z U] must have full column rank;
    ridge > 0 regularizes the normal equations instead (and yields the
    minimum-norm solution in the underdetermined limit).
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Z_next = np.atleast_2d(np.asarray(Z_next, dtype=float))
    if not (Z.shape[0] == U.shape[0] == Z_next.shape[0]):
        raise ValueError("snapshot matrices must have matching row counts")
    if Z.shape != Z_next.shape:
        raise ValueError("Z and Z_next must have the same state dimension")
    p, q = Z.shape[1], U.shape[1]
    M = np.hstack([Z, U])
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    if ridge == 0.0:
        theta, _, rank, _ = np.linalg.lstsq(M, Z_next, rcond=None)
        if rank < p + q:
            raise ConditioningError(
                f"snapshot matrix rank {rank} < {p + q}; collect more "
                "snapshots or pass ridge > 0")
    else:
        gram = M.T @ M + ridge * np.eye(p + q)
        theta = np.linalg.solve(gram, M.T @ Z_next)
    A = theta[:p].T
    B = theta[p:].T
    return A, B


@dataclass
class BaselineModel:
    """Identified linear map on the (optionally lifted) measured state."""

    A: np.ndarray
    B: np.ndarray
    method: str                            # "dmd" or "edmd"
    dictionary: EdmdDictionary | None = None
    state_dim: int = 0                     # unlifted state size
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.method not in ("dmd", "edmd"):
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.state_dim <= 0:
            self.state_dim = self.A.shape[0] - \
                (self.dictionary.count if self.dictionary else 0)

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.B.shape[1]

    def encode(self, Z) -> np.ndarray:
        """Initial (lifted) state rows from raw measured states."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.state_dim:
            raise ValueError(f"expected state dimension {self.state_dim}, "
                             f"got {Z.shape[1]}")
        if self.method == "edmd" and self.dictionary is not None:
            return lift(Z, self.dictionary)
        return Z

    def rollout(self, z1, u, n_steps: int) -> np.ndarray:
        """Evolve the lifted state linearly; rows are per-step states."""
        x = np.asarray(z1, dtype=float).copy()
        if x.shape != (self.p,):
            raise ValueError(f"initial state must have length {self.p}")
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = np.repeat(u[None, :], n_steps - 1, axis=0)
        if u.shape != (n_steps - 1, self.q):
            raise ValueError("input sequence has wrong shape")
        out = np.empty((n_steps, self.p))
        out[0] = x
        for t in range(1, n_steps):
            x = self.A @ x + self.B @ u[t - 1]
            out[t] = x
        return out

    def predict_frequency(self, z1, u, n_steps: int) -> np.ndarray:
        return self.rollout(z1, u, n_steps)[:, 0]

    def to_dict(self) -> dict:
        d = {"format_version": MODEL_FORMAT_VERSION, "method": self.method,
             "A": self.A.tolist(), "B": self.B.tolist(),
             "state_dim": self.state_dim, "meta": self.meta}
        if self.dictionary is not None:
            d["dictionary"] = self.dictionary.to_dict()
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def from_dict(cls, d) -> "BaselineModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError("unsupported model format version "
                             f"{d.get('format_version')!r}")
        dictionary = EdmdDictionary.from_dict(d["dictionary"]) \
            if "dictionary" in d else None
        return cls(np.array(d["A"]), np.array(d["B"]), d["method"],
                   dictionary=dictionary, state_dim=d["state_dim"],
                   meta=d.get("meta", {}))

    @classmethod
    def load(cls, path) -> "BaselineModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def snapshot_matrices(trajectories, tau: float = 0.3, dt_embed: float = 0.01,
                      use_window: bool = False):
    """Per-step snapshot pairs (Z, U, Z_next) from measured trajectories.

    The state is the instantaneous measured sample [omega; y] on the coarse
    grid (the same measurements the windowed predictor sees, without the
    history). use_window=True hands over the entire delay window instead.
    """
    from .dataset import window_matrix
    if not trajectories:
        raise ValueError("no trajectories supplied")
    W = window_matrix(trajectories, tau, dt_embed)
    n, T, L = W.shape
    if use_window:
        S = W
    else:
        n_win = int(round(tau / dt_embed)) + 1
        c = trajectories[0].y_dim + 1
        idx = [n_win - 1]
        idx += [n_win + (n_win - 1) * (c - 1) + j for j in range(c - 1)]
        S = W[:, :, idx]
    U_traj = np.array([traj.shed_u for traj in trajectories], dtype=float)
    Z = S[:, :-1, :].reshape(n * (T - 1), -1)
    Z_next = S[:, 1:, :].reshape(n * (T - 1), -1)
    U = np.repeat(U_traj, T - 1, axis=0)
    return Z, U, Z_next


def fit_baseline(trajectories, method: str = "dmd", *,
                 rbf_count: int = DEFAULT_RBF_COUNT, seed: int = 0,
                 ridge: float = 1e-8, tau: float = 0.3,
                 dt_embed: float = 0.01,
                 use_window: bool = False) -> BaselineModel:
    """Identify a baseline predictor directly from trajectories."""
    Z, U, Z_next = snapshot_matrices(trajectories, tau, dt_embed,
                                     use_window=use_window)
    if method == "dmd":
        dictionary = None
        Zl, Zl_next = Z, Z_next
    elif method == "edmd":
        dictionary = make_dictionary(Z, rbf_count, seed=seed)
        Zl, Zl_next = lift(Z, dictionary), lift(Z_next, dictionary)
    else:
        raise ValueError(f"unknown baseline method {method!r}")
    A, B = fit_dmdc(Zl, U, Zl_next, ridge=ridge)
    meta = {"method": method, "n_train": len(trajectories),
            "ridge": ridge, "seed": seed, "use_window": use_window}
    if dictionary is not None:
        meta["rbf_count"] = dictionary.count
    return BaselineModel(A, B, method, dictionary=dictionary,
                         state_dim=Z.shape[1], meta=meta)


def holdout_mae(model: BaselineModel, trajectories, tau: float = 0.3,
                dt_embed: float = 0.01) -> np.ndarray:
    """Mean absolute frequency error of full-horizon rollouts, per trajectory."""
    from .dataset import window_matrix
    W = window_matrix(trajectories, tau, dt_embed)
    n, T, L = W.shape
    n_win = int(round(tau / dt_embed)) + 1
    c = trajectories[0].y_dim + 1
    idx = [n_win - 1]
    idx += [n_win + (n_win - 1) * (c - 1) + j for j in range(c - 1)]
    S = W[:, 0, :] if model.state_dim == L else W[:, 0, idx]
    X = model.encode(S).T
    U = np.array([traj.shed_u for traj in trajectories], dtype=float)
    true = np.array([traj.omega_coarse for traj in trajectories])
    pred = np.zeros((n, T))
    pred[:, 0] = X[0]
    for k in range(1, T):
        X = model.A @ X + model.B @ U.T
        pred[:, k] = X[0]
    return np.abs(pred - true).mean(axis=1)


def load_model(path):
    """Load either predictor family, dispatching on the method tag."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("method") in ("dmd", "edmd"):
        return BaselineModel.from_dict(d)
    return KoopmanModel.from_dict(d)
