"""Finite-horizon response analysis of the identified predictor.

The trajectory of g_{t+1} = A_t g_t + B_t u_t + w_t over a horizon T is a
linear map from the stacked disturbance (initial state in the first block,
process noise after) to the stacked states and inputs. This module builds
the stacked operators, the response of the identified model under a causal
feedforward/feedback law, the exact response of a perturbed "true" system
driven by the same law, and the resulting open-loop deviation. Everything
is a finite matrix computation: the downshift structure makes all the
inverses finite sums, so formulas can be checked against brute-force
simulation to machine precision.

The runtime shedding decision does not consume these results; they verify
that the deviation introduced by identification error vanishes as the
per-step perturbation bounds go to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

RESIDUAL_TOL = 1e-10


class NeumannDivergence(RuntimeError):
    """Perturbation too large for the norm bound to say anything."""

    def __init__(self, norm: float):
        self.norm = norm
        super().__init__(f"|T delta| = {norm:.3f} >= 1; the deviation bound "
                         "is inapplicable at this perturbation size")


def _as_blocks(M, T: int, name: str):
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return [M] * T
    if M.ndim == 3 and M.shape[0] == T:
        return [M[t] for t in range(T)]
    raise ValueError(f"{name} must be one matrix or a length-{T} stack")


@dataclass
class StackedSystem:
    """Block-diagonal dynamics over T steps plus the downshift operator."""

    calA: np.ndarray        # (T+1)p square, blkdiag(A_1..A_T, 0)
    calB: np.ndarray        # (T+1)p x (T+1)q, blkdiag(B_1..B_T, 0)
    Z: np.ndarray           # block downshift, (T+1)p square
    T: int
    p: int
    q: int


def build_stacked(A, B, T: int) -> StackedSystem:
    """Stack per-step dynamics; a single (A, B) is repeated T times."""
    if T < 1:
        raise ValueError("horizon must be at least one step")
    A_blocks = _as_blocks(A, T, "A")
    B_blocks = _as_blocks(B, T, "B")
    p = A_blocks[0].shape[0]
    q = B_blocks[0].shape[1]
    for Ab, Bb in zip(A_blocks, B_blocks):
        if Ab.shape != (p, p) or Bb.shape != (p, q):
            raise ValueError("inconsistent block shapes")
    calA = block_diag(*A_blocks, np.zeros((p, p)))
    calB = block_diag(*B_blocks, np.zeros((p, q)))
    n = (T + 1) * p
    Z = np.zeros((n, n))
    for t in range(T):
        Z[(t + 1) * p:(t + 2) * p, t * p:(t + 1) * p] = np.eye(p)
    return StackedSystem(calA=calA, calB=calB, Z=Z, T=T, p=p, q=q)


def _is_block_lower(M, rows: int, cols: int) -> bool:
    n_r = M.shape[0] // rows
    n_c = M.shape[1] // cols
    for i in range(n_r):
        for j in range(i + 1, n_c):
            if np.any(M[i * rows:(i + 1) * rows, j * cols:(j + 1) * cols]):
                return False
    return True


@dataclass
class SystemResponse:
    """Causal maps from stacked disturbance to stacked states and inputs."""

    Tg: np.ndarray          # (T+1)p x (T+1)p
    Tu: np.ndarray          # (T+1)q x (T+1)p

    def stacked(self) -> np.ndarray:
        return np.vstack([self.Tg, self.Tu])

    def residual(self, sys: StackedSystem) -> float:
        lhs = (np.eye(sys.calA.shape[0]) - sys.Z @ sys.calA) @ self.Tg \
            - sys.Z @ sys.calB @ self.Tu
        return float(np.abs(lhs - np.eye(lhs.shape[0])).max())


def response_of(sys: StackedSystem, Tu=None) -> SystemResponse:
    """Response achieved by a causal input law Tu (None or 0 = open loop).

    Solves (I - Z calA) Tg = I + Z calB Tu; the left factor is unit
    lower-triangular, so the solve is exact. The defining identity is
    re-checked and a residual above tolerance raises.
    """
    n = sys.calA.shape[0]
    m = (sys.T + 1) * sys.q
    if Tu is None:
        Tu = np.zeros((m, n))
    Tu = np.asarray(Tu, dtype=float)
    if Tu.shape != (m, n):
        raise ValueError(f"Tu must be {m} x {n}")
    if not _is_block_lower(Tu, sys.q, sys.p):
        raise ValueError("Tu must be block-lower-triangular (causal)")
    lhs = np.eye(n) - sys.Z @ sys.calA
    Tg = np.linalg.solve(lhs, np.eye(n) + sys.Z @ sys.calB @ Tu)
    resp = SystemResponse(Tg=Tg, Tu=Tu)
    res = resp.residual(sys)
    if res > RESIDUAL_TOL:
        raise ArithmeticError(f"response residual {res:.2e} above tolerance")
    return resp


def delta_operator(true_sys: StackedSystem,
                   ident_sys: StackedSystem) -> np.ndarray:
    """Mismatch operator [Z(calA - calA_bar), Z(calB - calB_bar)]."""
    if true_sys.calA.shape != ident_sys.calA.shape:
        raise ValueError("systems must share dimensions")
    dA = true_sys.Z @ (true_sys.calA - ident_sys.calA)
    dB = true_sys.Z @ (true_sys.calB - ident_sys.calB)
    return np.hstack([dA, dB])


def true_response_under_identified_controller(
        true_sys: StackedSystem, ident_resp: SystemResponse,
        ident_sys: StackedSystem, *,
        require_convergent: bool = True) -> SystemResponse:
    """Exact response of the true system driven by the identified-model law.

    Computes T_bar + T_bar Delta (I - T_bar Delta)^{-1} T_bar. The inverse
    exists for any perturbation (the product is nilpotent); when the norm
    of T_bar Delta reaches 1 the a-priori bound no longer applies, which
    raises unless require_convergent is False.
    """
    delta = delta_operator(true_sys, ident_sys)
    Tbar = ident_resp.stacked()
    TD = Tbar @ delta
    norm = float(np.linalg.norm(TD, 2))
    if require_convergent and norm >= 1.0:
        raise NeumannDivergence(norm)
    inv = np.linalg.solve(np.eye(TD.shape[0]) - TD, Tbar)
    full = Tbar + TD @ inv
    n = true_sys.calA.shape[0]
    resp = SystemResponse(Tg=full[:n], Tu=full[n:])
    res = resp.residual(true_sys)
    if res > RESIDUAL_TOL:
        raise ArithmeticError(f"true-response residual {res:.2e}")
    return resp


def neumann_sum(TD: np.ndarray, order: int) -> np.ndarray:
    """Truncated series sum_{k=0}^{order} TD^k (exact once TD is nilpotent)."""
    acc = np.eye(TD.shape[0])
    term = np.eye(TD.shape[0])
    for _ in range(order):
        term = term @ TD
        acc = acc + term
    return acc


def open_loop_deviation(ident_resp: SystemResponse,
                        true_resp: SystemResponse,
                        delta: np.ndarray, gamma):
    """Stacked deviation [G_bar; u_bar] - [G; u] for a disturbance gamma.

    Evaluated two ways: directly from the two responses and through the
    perturbation formula -T_bar Delta (I - T_bar Delta)^{-1} T_bar gamma.
    The routes must agree; their maximum discrepancy is returned alongside
    the deviation vector and its norm.
    """
    gamma = np.asarray(gamma, dtype=float)
    Tbar = ident_resp.stacked()
    Ttrue = true_resp.stacked()
    direct = (Tbar - Ttrue) @ gamma
    TD = Tbar @ delta
    formula = -TD @ np.linalg.solve(np.eye(TD.shape[0]) - TD, Tbar @ gamma)
    gap = float(np.abs(direct - formula).max())
    return direct, float(np.linalg.norm(direct)), gap


def sample_perturbation(p: int, q: int, T: int, eps_A: float, eps_B: float,
                        rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-step blocks with induced 2-norm exactly eps (random directions)."""
    dA = np.empty((T, p, p))
    dB = np.empty((T, p, q))
    for t in range(T):
        Ma = rng.standard_normal((p, p))
        dA[t] = eps_A * Ma / max(np.linalg.norm(Ma, 2), 1e-300)
        Mb = rng.standard_normal((p, q))
        dB[t] = eps_B * Mb / max(np.linalg.norm(Mb, 2), 1e-300)
    if eps_A == 0:
        dA[:] = 0.0
    if eps_B == 0:
        dB[:] = 0.0
    return dA, dB


def deviation_bound_check(A, B, T: int, levels, n_samples: int = 20,
                          seed: int = 0, x0_scale: float = 1.0):
    """Max open-loop deviation at each perturbation level, with norm bound.

    For each eps in levels, draws per-step perturbations on the eps sphere
    and a random initial state, computes the exact deviation, and records
    the worst case together with the a-priori bound
    |T_bar Delta| / (1 - |T_bar Delta|) * |T_bar gamma|. Levels must be
    positive (or zero) and the recorded maxima must not increase as eps
    decreases; a violation raises.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    p, q = B.shape
    ident = build_stacked(A, B, T)
    resp_bar = response_of(ident)
    rng = np.random.default_rng(seed)
    rows = []
    for eps in levels:
        if eps < 0:
            raise ValueError("levels must be non-negative")
        worst = 0.0
        worst_bound = 0.0
        converged = True
        for _ in range(n_samples):
            dA, dB = sample_perturbation(p, q, T, eps, eps, rng)
            A_true = np.array([A + dA[t] for t in range(T)])
            B_true = np.array([B + dB[t] for t in range(T)])
            true_sys = build_stacked(A_true, B_true, T)
            delta = delta_operator(true_sys, ident)
            gamma = np.zeros((T + 1) * p)
            gamma[:p] = x0_scale * rng.standard_normal(p)
            TD = resp_bar.stacked() @ delta
            norm_td = float(np.linalg.norm(TD, 2))
            if norm_td >= 1.0:
                converged = False
            resp_true = true_response_under_identified_controller(
                true_sys, resp_bar, ident, require_convergent=False)
            dev, dev_norm, gap = open_loop_deviation(resp_bar, resp_true,
                                                     delta, gamma)
            if gap > 1e-9:
                raise ArithmeticError(f"deviation routes disagree by {gap:.2e}")
            worst = max(worst, dev_norm)
            if norm_td < 1.0:
                bound = norm_td / (1.0 - norm_td) \
                    * float(np.linalg.norm(resp_bar.stacked() @ gamma))
                worst_bound = max(worst_bound, bound)
        rows.append({"eps": float(eps), "max_deviation": worst,
                     "bound": worst_bound, "neumann_converged": converged})
    maxima = [r["max_deviation"] for r in rows]
    eps_order = [r["eps"] for r in rows]
    for (e1, m1), (e2, m2) in zip(zip(eps_order, maxima),
                                  zip(eps_order[1:], maxima[1:])):
        if e2 < e1 and m2 > m1 + 1e-15:
            raise ArithmeticError(
                f"deviation grew from {m1:.3e} to {m2:.3e} as eps shrank "
                f"({e1} -> {e2})")
    return rows
