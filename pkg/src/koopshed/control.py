"""One-shot shedding decision: constrained QP, quantization, safety margin.

The decision problem picks a per-bus shed fraction u in [0, 1]^q minimizing
u' R u subject to the predicted frequency staying above a nadir floor at
every step and above a steady-state floor at the horizon end. Predictions
come from the identified linear model, so every constraint is linear in u
(the shed command is held constant once applied).

Discrete feeders mean the continuous optimum cannot be applied exactly;
``quantize`` rounds to the feeder grid and ``zeta_margin`` computes the
margin that must be added to the frequency floors so that the rounded
command still satisfies the original limits despite quantization and model
error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

OMEGA_MIN_DEFAULT = -0.02        # nadir floor, pu on a 50 Hz base (49.0 Hz)
OMEGA_INF_MIN_DEFAULT = -0.01    # steady-state floor, pu (49.5 Hz)
KKT_TOL = 1e-8
_ACTIVE_SET_MAX_ROUNDS = 200


class InfeasiblePlan(RuntimeError):
    """No admissible shed command exists, even shedding everything.

    Carries the worst violated constraint so callers can report which step
    fails and by how much before escalating.
    """

    def __init__(self, step: int, kind: str, violation: float):
        self.step = step
        self.kind = kind
        self.violation = violation
        super().__init__(f"even u = 1 violates the {kind} constraint at "
                         f"step {step} by {violation:.3e} pu")


@dataclass
class ControlProblem:
    """QP data: model, encoded current state, cost, floors, margin, horizon."""

    A: np.ndarray
    B: np.ndarray
    g1: np.ndarray
    R: np.ndarray | None = None
    omega_min: float = OMEGA_MIN_DEFAULT
    omega_inf_min: float = OMEGA_INF_MIN_DEFAULT
    zeta: float = 0.0
    T: int = 60

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.g1 = np.asarray(self.g1, dtype=float)
        p, q = self.B.shape
        if self.A.shape != (p, p):
            raise ValueError("A and B dimensions disagree")
        if self.g1.shape != (p,):
            raise ValueError(f"g1 must have length {p}")
        if self.R is None:
            self.R = np.eye(q)
        self.R = np.asarray(self.R, dtype=float)
        if self.R.shape != (q, q):
            raise ValueError("R must be q x q")
        if not np.allclose(self.R, self.R.T):
            raise ValueError("R must be symmetric")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        if not (self.omega_min <= self.omega_inf_min <= 0):
            raise ValueError("floors must satisfy omega_min <= "
                             "omega_inf_min <= 0")
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        if self.T < 1:
            raise ValueError("horizon must be at least one step")

    @property
    def q(self) -> int:
        return self.B.shape[1]


def _prediction_rows(problem: ControlProblem):
    """Linear form of each constrained prediction: C g_t = free_t + row_t . u.

    Steps t = 2..T get a nadir row; step T additionally gets the
    steady-state row. The t = 1 value is the measured state itself and no
    input can change it, so it carries no constraint.
    """
    A, B, g1, T = problem.A, problem.B, problem.g1, problem.T
    c0 = np.zeros(A.shape[0])
    c0[0] = 1.0
    c_at = c0.copy()                     # readout row C A^{t-1}
    rsum = np.zeros_like(c0)             # C sum_{k=0}^{t-2} A^k
    rows, frees, steps = [], [], []
    for t in range(2, T + 1):
        rsum = rsum @ A + c0
        c_at = c_at @ A
        rows.append(rsum @ B)
        frees.append(c_at @ g1)
        steps.append(t)
    return np.array(rows), np.array(frees), steps


def solve_qp(problem: ControlProblem):
    """Minimize u' R u under frequency floors and the box 0 <= u <= 1.

    Returns (u_star, info) where info reports the KKT residual, the active
    constraints, the objective, and iteration count. Raises InfeasiblePlan
    when even full shedding violates a floor.
    """
    q = problem.q
    rows, frees, steps = _prediction_rows(problem)
    if len(rows):
        nadir_b = problem.omega_min + problem.zeta - frees
        ss_b = problem.omega_inf_min + problem.zeta - frees[-1]
        M = np.vstack([rows, rows[-1:]])
        b = np.concatenate([nadir_b, [ss_b]])
        kinds = [("nadir", s) for s in steps] + [("steady-state", steps[-1])]
    else:
        M = np.zeros((0, q))
        b = np.zeros(0)
        kinds = []
    # feasibility probe at full shedding
    if len(b):
        slack_full = M @ np.ones(q) - b
        worst = int(np.argmin(slack_full))
        if slack_full[worst] < -1e-12:
            kind, step = kinds[worst]
            raise InfeasiblePlan(step, kind, float(-slack_full[worst]))
    # append box rows:  u_i >= 0  and  -u_i >= -1
    M_all = np.vstack([M, np.eye(q), -np.eye(q)])
    b_all = np.concatenate([b, np.zeros(q), -np.ones(q)])
    n_rows = M_all.shape[0]

    R2 = 2.0 * problem.R
    u = np.ones(q)
    active = list(range(n_rows - q, n_rows))     # upper box rows at u = 1
    lam_full = np.zeros(n_rows)
    for _ in range(_ACTIVE_SET_MAX_ROUNDS):
        W = M_all[active]
        k = len(active)
        kkt = np.zeros((q + k, q + k))
        kkt[:q, :q] = R2
        kkt[:q, q:] = -W.T
        kkt[q:, :q] = W
        rhs = np.concatenate([np.zeros(q), b_all[active]])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        u_new, lam = sol[:q], sol[q:]
        d = u_new - u
        if np.abs(d).max() < 1e-13:
            if k == 0 or lam.min() >= -KKT_TOL:
                lam_full[:] = 0.0
                lam_full[active] = lam
                break
            active.pop(int(np.argmin(lam)))
            continue
        slack = M_all @ u - b_all
        Md = M_all @ d
        alpha = 1.0
        block = -1
        for i in range(n_rows):
            if i in active or Md[i] >= -1e-14:
                continue
            ai = slack[i] / (-Md[i])
            if ai < alpha - 1e-14:
                alpha = max(ai, 0.0)
                block = i
        u = u + alpha * d
        if block >= 0:
            active.append(block)
        elif alpha == 1.0 and k == 0:
            lam_full[:] = 0.0
            break
    else:
        raise RuntimeError("active-set iteration limit exceeded")

    stationarity = np.abs(R2 @ u - M_all.T @ lam_full).max()
    comp = np.abs(lam_full * (M_all @ u - b_all)).max() if n_rows else 0.0
    primal = float(min((M_all @ u - b_all).min(), 0.0)) if n_rows else 0.0
    info = {"kkt_residual": float(max(stationarity, comp, -primal)),
            "objective": float(u @ problem.R @ u),
            "active": sorted(active),
            "n_prediction_constraints": len(b)}
    return np.clip(u, 0.0, 1.0), info


def quantize(u, d) -> np.ndarray:
    """Nearest feeder multiple of each component; exact halves round up."""
    u = np.asarray(u, dtype=float)
    d = np.broadcast_to(np.asarray(d, dtype=float), u.shape)
    if (d <= 0).any():
        raise ValueError("quantization interval must be positive")
    return np.floor(u / d + 0.5 + 1e-9) * d


def quantize_ceil(u, d) -> np.ndarray:
    """Smallest feeder multiple at or above each component."""
    u = np.asarray(u, dtype=float)
    d = np.broadcast_to(np.asarray(d, dtype=float), u.shape)
    if (d <= 0).any():
        raise ValueError("quantization interval must be positive")
    return np.ceil(u / d - 1e-9) * d


@dataclass
class SafetyMargin:
    """Floor padding: worst per-step quantization effect plus model error."""

    zeta: float
    terms: np.ndarray          # per-step quantization bound, t = 1..T
    max_pred_err: float
    d: np.ndarray

    def __post_init__(self):
        self.terms = np.asarray(self.terms, dtype=float)
        self.d = np.asarray(self.d, dtype=float)


def zeta_margin(A, B, d, max_pred_err: float, T: int) -> SafetyMargin:
    """Margin covering feeder rounding and the worst training error.

    The rounding error on each bus is at most d_i / 2, so the frequency
    prediction at step t moves by at most
    sum_i |(C sum_{j<t} A^j B)_i| d_i / 2. The margin is the maximum of
    that bound over the horizon plus the recorded worst prediction error.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    q = B.shape[1]
    d = np.broadcast_to(np.asarray(d, dtype=float), (q,))
    if (d <= 0).any():
        raise ValueError("quantization interval must be positive")
    if max_pred_err < 0:
        raise ValueError("max_pred_err must be non-negative")
    if T < 1:
        raise ValueError("horizon must be at least one step")
    rho = np.abs(np.linalg.eigvals(A)).max()
    if rho >= 1.05:
        warnings.warn(f"spectral radius {rho:.3f} >= 1.05; the margin "
                      "grows with the horizon", RuntimeWarning)
    c_row = np.zeros(A.shape[0])
    c_row[0] = 1.0
    acc = np.zeros(A.shape[0])      # C sum_{j=0}^{t-1} A^j
    terms = np.zeros(T)
    run = c_row.copy()
    for t in range(T):
        acc = acc + run
        terms[t] = 0.5 * np.abs(acc @ B) @ d
        run = run @ A
    zeta = float(terms.max() + max_pred_err)
    return SafetyMargin(zeta=zeta, terms=terms,
                        max_pred_err=float(max_pred_err), d=d.copy())


def quantization_gap_bound(A, B, t: int, d) -> float:
    """Per-step bound used by zeta_margin, exposed for direct checks."""
    margin = zeta_margin(A, B, d, 0.0, t)
    return float(margin.terms[t - 1])


@dataclass
class ShedPlan:
    """Continuous and feeder-quantized shed commands with predictions."""

    u_star: np.ndarray
    u_quantized: np.ndarray
    d: np.ndarray
    zeta: float
    omega_pred_star: np.ndarray
    omega_pred_quantized: np.ndarray
    kkt_residual: float = 0.0
    infeasible: bool = False
    mode: str = "kls"
    bus_mw: np.ndarray | None = None

    def shed_mw(self):
        if self.bus_mw is None:
            return None
        return self.u_quantized * self.bus_mw

    def to_dict(self) -> dict:
        out = {"u_star": self.u_star.tolist(),
               "u_quantized": self.u_quantized.tolist(),
               "d": self.d.tolist(), "zeta": self.zeta,
               "kkt_residual": self.kkt_residual,
               "infeasible": self.infeasible, "mode": self.mode}
        if self.bus_mw is not None:
            out["shed_mw"] = self.shed_mw().tolist()
        return out


def kls_pipeline(model, window, omega_sample, d, *,
                 omega_min: float = OMEGA_MIN_DEFAULT,
                 omega_inf_min: float = OMEGA_INF_MIN_DEFAULT,
                 T: int | None = None, R=None, zeta: float | None = None,
                 max_pred_err: float | None = None, mode: str = "kls",
                 bus_mw=None) -> ShedPlan:
    """Encode a measurement window and produce the quantized shed plan.

    zeta defaults to zeta_margin on the model; max_pred_err defaults to the
    value recorded at training time. mode "kls-c" rounds upward instead of
    to nearest. When no admissible command exists the plan sheds everything
    and carries the infeasible flag.
    """
    if mode not in ("kls", "kls-c"):
        raise ValueError(f"unknown mode {mode!r}")
    horizon = T if T is not None else model.meta.get("horizon", 60)
    q = model.q
    d_vec = np.broadcast_to(np.asarray(d, dtype=float), (q,)).copy()
    if max_pred_err is None:
        max_pred_err = model.meta.get("max_pred_error", 0.0)
    if zeta is None:
        zeta = zeta_margin(model.A, model.B, d_vec, max_pred_err,
                           horizon).zeta
    g1 = model.encode(window, omega_sample)[0]
    problem = ControlProblem(model.A, model.B, g1, R=R,
                             omega_min=omega_min,
                             omega_inf_min=omega_inf_min,
                             zeta=zeta, T=horizon)
    infeasible = False
    kkt = 0.0
    try:
        u_star, info = solve_qp(problem)
        kkt = info["kkt_residual"]
    except InfeasiblePlan:
        u_star = np.ones(q)
        infeasible = True
    u_q = quantize(u_star, d_vec) if mode == "kls" \
        else quantize_ceil(u_star, d_vec)
    u_q = np.clip(u_q, 0.0, 1.0)
    om_star = model.rollout(g1, u_star, horizon)[:, 0]
    om_q = model.rollout(g1, u_q, horizon)[:, 0]
    return ShedPlan(u_star=u_star, u_quantized=u_q, d=d_vec, zeta=float(zeta),
                    omega_pred_star=om_star, omega_pred_quantized=om_q,
                    kkt_residual=float(kkt), infeasible=infeasible,
                    mode=mode,
                    bus_mw=None if bus_mw is None
                    else np.asarray(bus_mw, dtype=float))


def empirical_min_zeta(is_safe, lo: float = 0.0, hi: float = 0.5,
                       tol: float = 1e-3) -> float:
    """Smallest margin passing a monotone safety predicate, by bisection.

    is_safe(zeta) must be monotone (False below some threshold, True above);
    returns an upper estimate within tol. Raises if hi itself is unsafe.
    """
    if not is_safe(hi):
        raise ValueError(f"predicate fails even at zeta = {hi}")
    if is_safe(lo):
        return lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if is_safe(mid):
            hi = mid
        else:
            lo = mid
    return hi
