"""Reduced multi-machine grid frequency simulator.

Machine groups swing against a common center bus through linear synchronizing
ties; each group carries a first-order governor/turbine with deadband, ramp
and output limits; loads are frequency dependent. The model is deliberately
small (a handful of states per machine group) but nonlinear enough that the
post-fault frequency trajectory depends on latent parameters (inertia scale,
size and location of the generation deficit) in a non-trivial way.

Conventions
-----------
* All frequencies are handled as per-unit deviations ``omega`` from nominal
  (``f = f0 * (1 + omega)``). Powers are per unit on the system base unless a
  name says ``_mw``.
* The integrator is fixed-step RK4 on the fine grid ``dt_embed``; faults and
  shedding are applied at step boundaries, so event times must be multiples
  of ``dt_embed``.
* A generator trip removes dispatch, capacity headroom and governor gain of
  the tripped units but keeps the group's inertia constant, so a trip acts as
  a pure power imbalance on the swing equation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

OMEGA_COLLAPSE = -0.10      # pu deviation below which we flag frequency collapse
SETTLE_TOL = 1e-5           # pu, |omega_T - omega_{T-5}| on the coarse grid
DEFAULT_F0 = 50.0           # Hz


class ConfigError(ValueError):
    """Raised for inconsistent grid or protocol configuration."""


class SimulationDiverged(RuntimeError):
    """Raised when the integrator produces non-finite machine states."""


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Machine:
    """One coherent machine group.

    Per-unit quantities are on the machine rating ``rating_mva``; they are
    rescaled to the system base internally.
    """

    name: str
    rating_mva: float
    dispatch_mw: float      # pre-fault mechanical output
    inertia_h: float        # seconds on machine base
    damping: float          # pu/pu self damping
    gov_gain: float         # pu/pu static governor gain (1/droop)
    gov_tc: float           # s, governor/turbine time constant
    deadband: float = 0.0   # pu frequency deadband
    pmax: float = 1.0       # pu output ceiling on machine base
    pmin: float = 0.0       # pu output floor on machine base
    ramp: float | None = None   # pu/s output rate limit, None = unlimited
    sync: float = 2.0       # pu/rad synchronizing coefficient to the center bus
    damping_rel: float = 25.0   # pu/pu damping on speed relative to the COI
    unit_mw: float = 0.0    # size of the trippable unit inside the group


@dataclass(frozen=True)
class Load:
    """Aggregated bus load with linear frequency sensitivity ``kpf``."""

    bus: str
    p_mw: float
    kpf: float = 1.5


@dataclass(frozen=True)
class FaultEvent:
    """Generation loss at ``time``: per-machine tripped MW (zeros elsewhere)."""

    time: float
    deficits_mw: tuple[float, ...]

    @property
    def dp_mw(self) -> float:
        return float(sum(self.deficits_mw))

    @property
    def machines(self) -> tuple[int, ...]:
        return tuple(i for i, d in enumerate(self.deficits_mw) if d > 0.0)


@dataclass
class GridConfig:
    machines: list[Machine]
    loads: list[Load]
    f0: float = DEFAULT_F0
    s_base_mva: float = 1000.0

    def __post_init__(self):
        self.validate()

    # -- validation / derived ------------------------------------------------

    def validate(self) -> None:
        if not self.machines:
            raise ConfigError("grid needs at least one machine group")
        if not self.loads:
            raise ConfigError("grid needs at least one load bus")
        if self.f0 <= 0 or self.s_base_mva <= 0:
            raise ConfigError("f0 and s_base_mva must be positive")
        for m in self.machines:
            if m.inertia_h <= 0:
                raise ConfigError(f"machine {m.name}: inertia_h must be > 0")
            if m.gov_tc <= 0:
                raise ConfigError(f"machine {m.name}: gov_tc must be > 0")
            if m.rating_mva <= 0:
                raise ConfigError(f"machine {m.name}: rating_mva must be > 0")
            if m.pmax <= 0:
                raise ConfigError(f"machine {m.name}: pmax must be > 0")
            if not 0.0 <= m.pmin < m.pmax:
                raise ConfigError(f"machine {m.name}: need 0 <= pmin < pmax")
            if m.dispatch_mw < 0 or m.dispatch_mw > m.pmax * m.rating_mva:
                raise ConfigError(f"machine {m.name}: dispatch outside [0, pmax]")
            if m.sync <= 0:
                raise ConfigError(f"machine {m.name}: sync must be > 0")
            if not 0.0 <= m.unit_mw <= m.dispatch_mw:
                raise ConfigError(f"machine {m.name}: unit_mw outside [0, dispatch]")
        for ld in self.loads:
            if ld.p_mw < 0:
                raise ConfigError(f"load {ld.bus}: p_mw must be >= 0")
        gen = sum(m.dispatch_mw for m in self.machines)
        load = self.total_load_mw
        if abs(gen - load) > 1e-6 * max(load, 1.0):
            raise ConfigError(
                f"dispatch {gen:.3f} MW does not balance load {load:.3f} MW")

    @property
    def total_load_mw(self) -> float:
        return float(sum(ld.p_mw for ld in self.loads))

    @property
    def n_machines(self) -> int:
        return len(self.machines)

    @property
    def n_loads(self) -> int:
        return len(self.loads)

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "f0": self.f0,
            "s_base_mva": self.s_base_mva,
            "machines": [vars(m) | {} for m in self.machines],
            "loads": [vars(ld) | {} for ld in self.loads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        try:
            machines = [Machine(**m) for m in d["machines"]]
            loads = [Load(**ld) for ld in d["loads"]]
            return cls(machines=machines, loads=loads,
                       f0=float(d.get("f0", DEFAULT_F0)),
                       s_base_mva=float(d.get("s_base_mva", 1000.0)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed grid config: {exc}") from exc

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "GridConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_grid() -> GridConfig:
    """Desk-scale reference grid: 4 machine groups, 5 load buses, 2600 MW."""
    machines = [
        Machine("G1", 1100.0, 900.0, 5.5, 2.0, 20.0, 7.0,
                deadband=2e-4, pmax=(900.0 + 40.0) / 1100.0, ramp=0.12,
                sync=1.8, unit_mw=160.0),
        Machine("G2", 900.0, 700.0, 4.0, 2.0, 20.0, 5.0,
                deadband=2e-4, pmax=(700.0 + 35.0) / 900.0, ramp=0.12,
                sync=2.0, unit_mw=130.0),
        Machine("G3", 750.0, 600.0, 6.5, 2.0, 20.0, 8.0,
                deadband=2e-4, pmax=(600.0 + 30.0) / 750.0, ramp=0.12,
                sync=1.6, unit_mw=110.0),
        Machine("G4", 550.0, 400.0, 3.0, 2.0, 20.0, 4.0,
                deadband=2e-4, pmax=(400.0 + 20.0) / 550.0, ramp=0.12,
                sync=2.2, unit_mw=90.0),
    ]
    loads = [
        Load("B1", 600.0, 1.0),
        Load("B2", 550.0, 1.3),
        Load("B3", 520.0, 1.6),
        Load("B4", 480.0, 1.9),
        Load("B5", 450.0, 2.2),
    ]
    return GridConfig(machines=machines, loads=loads)


# ---------------------------------------------------------------------------
# system-base parameter block
# ---------------------------------------------------------------------------

class _SysParams:
    """Per-machine parameters converted to the system base, as arrays."""

    def __init__(self, cfg: GridConfig):
        sb = cfg.s_base_mva
        scale = np.array([m.rating_mva / sb for m in cfg.machines])
        self.h = np.array([m.inertia_h for m in cfg.machines]) * scale
        self.d = np.array([m.damping for m in cfg.machines]) * scale
        self.d_rel = np.array([m.damping_rel for m in cfg.machines]) * scale
        self.k = np.array([m.gov_gain for m in cfg.machines]) * scale
        self.tg = np.array([m.gov_tc for m in cfg.machines])
        self.db = np.array([m.deadband for m in cfg.machines])
        self.tsync = np.array([m.sync for m in cfg.machines]) * scale
        self.p0 = np.array([m.dispatch_mw / sb for m in cfg.machines])
        self.pmax = np.array([m.pmax for m in cfg.machines]) * scale
        self.pmin = np.array([m.pmin for m in cfg.machines]) * scale
        self.ramp = np.array([m.ramp if m.ramp is not None else np.inf
                              for m in cfg.machines]) * scale
        self.pl = np.array([ld.p_mw / sb for ld in cfg.loads])
        self.kpf = np.array([ld.kpf for ld in cfg.loads])
        self.w_s = 2.0 * math.pi * cfg.f0
        self.names = [m.name for m in cfg.machines]


# ---------------------------------------------------------------------------
# single-step API
# ---------------------------------------------------------------------------

@dataclass
class SimState:
    """Machine states at one instant (system-base per unit)."""

    t: float
    delta: np.ndarray   # rad, angle vs. center bus reference
    omega: np.ndarray   # pu speed deviation
    pg: np.ndarray      # pu mechanical power


def equilibrium_state(config: GridConfig, t: float = 0.0) -> SimState:
    """Pre-fault equilibrium: zero speed deviation, dispatch on the governors."""
    p = _SysParams(config)
    delta = p.p0 / p.tsync
    return SimState(t=t, delta=delta.copy(), omega=np.zeros_like(delta),
                    pg=p.p0.copy())


def coi_frequency(speeds, inertias) -> float:
    """Inertia-weighted center-of-inertia speed deviation."""
    w = np.asarray(speeds, dtype=float)
    h = np.asarray(inertias, dtype=float)
    if w.shape != h.shape or w.ndim != 1 or w.size == 0:
        raise ValueError("speeds and inertias must be equal-length 1-D arrays")
    if np.any(h <= 0):
        raise ValueError("inertias must be positive")
    return float(np.dot(h, w) / h.sum())


def _deadband(omega, db):
    return np.sign(omega) * np.maximum(np.abs(omega) - db, 0.0)


def _derivs(delta, omega, pg, p: _SysParams, *, p0, k, pmax, d,
            load_pu_of_coi):
    """Shared RHS for single and batched integration.

    Arrays are (..., n_mach); ``load_pu_of_coi`` maps a (...,) COI deviation
    to served load in system pu.
    """
    h_tot = p.h.sum(axis=-1) if p.h.ndim > 1 else p.h.sum()
    omega_coi = (omega * p.h).sum(axis=-1) / h_tot
    p_load = load_pu_of_coi(omega_coi)
    tsync_tot = p.tsync.sum(axis=-1) if p.tsync.ndim > 1 else p.tsync.sum()
    delta_c = ((p.tsync * delta).sum(axis=-1) - p_load) / tsync_tot
    pe = p.tsync * (delta - delta_c[..., None])

    d_delta = omega * p.w_s
    d_omega = (pg - pe - d * omega
               - p.d_rel * (omega - omega_coi[..., None])) / (2.0 * p.h)

    target = p0 - k * _deadband(omega, p.db)
    d_pg = (target - pg) / p.tg
    d_pg = np.clip(d_pg, -p.ramp, p.ramp)
    # anti-windup: freeze the governor against its limits
    d_pg = np.where((pg >= pmax) & (d_pg > 0.0), 0.0, d_pg)
    d_pg = np.where((pg <= p.pmin) & (d_pg < 0.0), 0.0, d_pg)
    return d_delta, d_omega, d_pg, omega_coi, p_load


def step(state: SimState, config: GridConfig, net_imbalance_mw: float = 0.0,
         dt: float = 0.01) -> SimState:
    """One RK4 step of the nominal grid with an extra fixed load ``net_imbalance_mw``.

    Raises
    ------
    SimulationDiverged
        if any machine state becomes non-finite, naming the machine.
    """
    p = _SysParams(config)
    extra = net_imbalance_mw / config.s_base_mva

    def load_fn(omega_coi):
        return (p.pl * (1.0 + p.kpf * omega_coi)).sum() + extra

    def f(y):
        delta, omega, pg = y
        return _derivs(delta, omega, pg, p, p0=p.p0, k=p.k, pmax=p.pmax,
                       d=p.d, load_pu_of_coi=load_fn)[:3]

    y0 = (state.delta, state.omega, state.pg)
    k1 = f(y0)
    k2 = f(tuple(a + 0.5 * dt * b for a, b in zip(y0, k1)))
    k3 = f(tuple(a + 0.5 * dt * b for a, b in zip(y0, k2)))
    k4 = f(tuple(a + dt * b for a, b in zip(y0, k3)))
    out = [a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
           for a, b1, b2, b3, b4 in zip(y0, k1, k2, k3, k4)]
    pg_new = np.clip(out[2], p.pmin, p.pmax)
    new = SimState(t=state.t + dt, delta=out[0], omega=out[1], pg=pg_new)
    for arr in (new.delta, new.omega, new.pg):
        bad = ~np.isfinite(arr)
        if bad.any():
            name = p.names[int(np.argmax(bad))]
            raise SimulationDiverged(f"non-finite state on machine {name} "
                                     f"at t={new.t:.4f}s")
    return new


# ---------------------------------------------------------------------------
# trajectory container
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Result of one simulated scenario on the two-rate sampling scheme.

    ``windows`` holds, per coarse point, the flattened measurement window
    ``[omega(t-tau..t), y(t-tau), ..., y(t)]`` on the fine grid, where
    ``y = [pg_1, ..., pg_M, served_load]``. The window is the measured signal
    and may carry additive noise; ``omega_coarse`` is the true COI deviation.
    """

    scenario_id: str
    dt_embed: float
    dt_pred: float
    tau: float
    t_coarse: np.ndarray        # (T,) absolute seconds
    omega_coarse: np.ndarray    # (T,) true COI pu deviation
    windows: np.ndarray         # (T, (1 + y_dim) * n_win) measured
    y_dim: int
    nadir: float                # pu, min COI deviation on the fine grid
    ssv: float                  # pu, final COI deviation
    collapsed: bool
    settled: bool
    fault: FaultEvent | None = None
    shed_u: np.ndarray | None = None
    shed_time: float | None = None
    inertia_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    fine_t: np.ndarray | None = None
    fine_omega: np.ndarray | None = None
    fine_y: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.t_coarse)

    @property
    def n_win(self) -> int:
        return int(round(self.tau / self.dt_embed)) + 1

    def nadir_hz(self, f0: float) -> float:
        return f0 * (1.0 + self.nadir)

    def ssv_hz(self, f0: float) -> float:
        return f0 * (1.0 + self.ssv)


@dataclass(frozen=True)
class SimJob:
    """One batched simulation request."""

    scenario_id: str
    fault: FaultEvent | None
    inertia_scale: tuple[float, ...] | None = None
    shed_u: tuple[float, ...] | None = None       # per-bus shed fraction
    shed_time: float | None = None
    stages: tuple[tuple[float, float], ...] | None = None  # (trigger_hz, rho)
    noise_seed: int | None = None
    meta: dict = field(default_factory=dict)


def _check_grid_multiple(value: float, dt: float, what: str) -> int:
    k = value / dt
    if abs(k - round(k)) > 1e-9:
        raise ConfigError(f"{what}={value} is not a multiple of dt_embed={dt}")
    return int(round(k))


def simulate_batch(config: GridConfig, jobs: list[SimJob], *,
                   horizon: float, dt_embed: float = 0.01,
                   dt_pred: float = 1.0, tau: float = 0.3,
                   first_coarse: float, n_steps: int,
                   noise_omega: float = 0.0, noise_y: float = 0.0,
                   keep_fine: bool = False,
                   chunk: int = 64) -> list[Trajectory]:
    """Integrate many scenarios at once (vectorized over the batch).

    All jobs share the timeline (fault time, coarse grid); they differ in
    fault size/location, inertia scaling and shedding. Per-bus shed fractions
    are applied to the bus load from ``shed_time`` on; jobs with ``stages``
    instead latch each stage when the COI frequency first crosses its
    trigger.
    """
    if dt_embed <= 0 or dt_pred <= 0:
        raise ConfigError("dt_embed and dt_pred must be positive")
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    n_sub = _check_grid_multiple(dt_pred, dt_embed, "dt_pred")
    n_win = _check_grid_multiple(tau, dt_embed, "tau") + 1
    i_first = _check_grid_multiple(first_coarse, dt_embed, "first_coarse")
    if first_coarse - tau < -1e-12:
        raise ConfigError("first coarse point earlier than one window length")
    last = first_coarse + (n_steps - 1) * dt_pred
    if last > horizon + 1e-9:
        raise ConfigError(f"horizon {horizon}s too short for {n_steps} coarse "
                          f"steps ending at {last}s")
    n_fine = int(round(horizon / dt_embed))

    out: list[Trajectory] = []
    for lo in range(0, len(jobs), chunk):
        out.extend(_integrate_chunk(
            config, jobs[lo:lo + chunk], n_fine=n_fine, dt=dt_embed,
            n_sub=n_sub, n_win=n_win, i_first=i_first, n_steps=n_steps,
            noise_omega=noise_omega, noise_y=noise_y, keep_fine=keep_fine))
    return out


def _integrate_chunk(config, jobs, *, n_fine, dt, n_sub, n_win, i_first,
                     n_steps, noise_omega, noise_y, keep_fine):
    p = _SysParams(config)
    nb = len(jobs)
    nm = config.n_machines
    nl = config.n_loads
    sb = config.s_base_mva

    scale = np.ones((nb, nm))
    for j, job in enumerate(jobs):
        if job.inertia_scale is not None:
            if len(job.inertia_scale) != nm:
                raise ConfigError(f"job {job.scenario_id}: inertia_scale "
                                  f"length {len(job.inertia_scale)} != {nm}")
            scale[j] = job.inertia_scale

    class B:  # batched parameter view
        pass

    bp = B()
    bp.h = p.h[None, :] * scale
    bp.d = np.broadcast_to(p.d, (nb, nm)).copy()
    bp.d_rel = np.broadcast_to(p.d_rel, (nb, nm)).copy()
    bp.tg = np.broadcast_to(p.tg, (nb, nm))
    bp.db = np.broadcast_to(p.db, (nb, nm))
    bp.tsync = np.broadcast_to(p.tsync, (nb, nm))
    bp.pmin = np.broadcast_to(p.pmin, (nb, nm))
    bp.ramp = np.broadcast_to(p.ramp, (nb, nm))
    bp.pl = p.pl
    bp.kpf = p.kpf
    bp.w_s = p.w_s
    bp.names = p.names

    p0 = np.broadcast_to(p.p0, (nb, nm)).copy()
    pmax = np.broadcast_to(p.pmax, (nb, nm)).copy()
    ksys = np.broadcast_to(p.k, (nb, nm)).copy()
    dsys = bp.d

    delta = np.broadcast_to(p.p0 / p.tsync, (nb, nm)).copy()
    omega = np.zeros((nb, nm))
    pg = p0.copy()

    # fault bookkeeping (single fault time per chunk enforced by the caller)
    fault_steps = {}
    for j, job in enumerate(jobs):
        if job.fault is not None:
            k = _check_grid_multiple(job.fault.time, dt, "fault.time")
            fault_steps.setdefault(k, []).append(j)
            if len(job.fault.deficits_mw) != nm:
                raise ConfigError(f"job {job.scenario_id}: fault deficits "
                                  f"length != {nm}")

    # shedding bookkeeping
    shed_u = np.zeros((nb, nl))
    shed_step = np.full(nb, -1, dtype=int)
    stage_rho = []
    stage_trig = []
    max_stages = max((len(j.stages) for j in jobs if j.stages), default=0)
    stage_rho = np.zeros((nb, max_stages)) if max_stages else None
    stage_trig = np.full((nb, max_stages), -np.inf) if max_stages else None
    stage_on = np.zeros((nb, max_stages), dtype=bool) if max_stages else None
    for j, job in enumerate(jobs):
        if job.shed_u is not None:
            if len(job.shed_u) != nl:
                raise ConfigError(f"job {job.scenario_id}: shed_u length != {nl}")
            shed_u[j] = job.shed_u
            if job.shed_time is None:
                raise ConfigError(f"job {job.scenario_id}: shed_u without shed_time")
            shed_step[j] = _check_grid_multiple(job.shed_time, dt, "shed_time")
        if job.stages:
            for s, (trig_hz, rho) in enumerate(job.stages):
                stage_trig[j, s] = trig_hz / config.f0 - 1.0  # pu deviation
                stage_rho[j, s] = rho

    shed_active = np.zeros((nb, nl))

    def load_fn(omega_coi):
        pl_eff = bp.pl[None, :] * (1.0 - shed_active)
        return (pl_eff * (1.0 + bp.kpf[None, :] * omega_coi[:, None])).sum(axis=1)

    def f(delta, omega, pg):
        return _derivs(delta, omega, pg, bp, p0=p0, k=ksys, pmax=pmax,
                       d=dsys, load_pu_of_coi=load_fn)

    t_fine = np.arange(n_fine + 1) * dt
    omega_coi_series = np.empty((nb, n_fine + 1))
    y_series = np.empty((nb, n_fine + 1, nm + 1))
    trigger_times = [dict() for _ in jobs]

    h_tot = bp.h.sum(axis=1)
    for i in range(n_fine + 1):
        if i in fault_steps:
            for j in fault_steps[i]:
                defic = np.asarray(jobs[j].fault.deficits_mw) / sb
                base = p0[j].copy()
                with np.errstate(invalid="ignore", divide="ignore"):
                    c = np.where(base > 0, defic / base, 0.0)
                if np.any(c > 1.0 + 1e-12):
                    raise ConfigError(f"job {jobs[j].scenario_id}: deficit "
                                      "exceeds machine dispatch")
                p0[j] -= defic
                pg[j] -= defic
                pmax[j] *= (1.0 - c)
                ksys[j] *= (1.0 - c)
                dsys[j] = dsys[j] * (1.0 - c)

        # latch scheduled and triggered shedding before evaluating the step
        w_coi_now = (omega * bp.h).sum(axis=1) / h_tot
        if max_stages:
            newly = (~stage_on) & (w_coi_now[:, None] <= stage_trig)
            if newly.any():
                stage_on |= newly
                jj, ss = np.nonzero(newly)
                for a, b in zip(jj, ss):
                    trigger_times[a][int(b)] = float(t_fine[i])
        active = (shed_step >= 0) & (i >= shed_step)
        shed_active[:] = np.where(active[:, None], shed_u, 0.0)
        if max_stages:
            shed_active += (stage_rho * stage_on).sum(axis=1, keepdims=True)
            np.clip(shed_active, 0.0, 1.0, out=shed_active)

        p_load_now = load_fn(w_coi_now)
        omega_coi_series[:, i] = w_coi_now
        y_series[:, i, :nm] = pg
        y_series[:, i, nm] = p_load_now

        if i == n_fine:
            break

        k1 = f(delta, omega, pg)[:3]
        k2 = f(delta + 0.5 * dt * k1[0], omega + 0.5 * dt * k1[1],
               pg + 0.5 * dt * k1[2])[:3]
        k3 = f(delta + 0.5 * dt * k2[0], omega + 0.5 * dt * k2[1],
               pg + 0.5 * dt * k2[2])[:3]
        k4 = f(delta + dt * k3[0], omega + dt * k3[1], pg + dt * k3[2])[:3]
        delta = delta + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        omega = omega + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        pg = pg + dt / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        np.clip(pg, bp.pmin, pmax, out=pg)

        if not np.isfinite(omega).all():
            bad = np.argwhere(~np.isfinite(omega))
            j, m = bad[0]
            raise SimulationDiverged(
                f"non-finite state on machine {bp.names[m]} in scenario "
                f"{jobs[j].scenario_id} at t={t_fine[i + 1]:.4f}s")

    # -- extract trajectories -------------------------------------------------
    idx_coarse = i_first + n_sub * np.arange(n_steps)
    out = []
    for j, job in enumerate(jobs):
        w = omega_coi_series[j]
        y = y_series[j]
        omega_coarse = w[idx_coarse]
        wins = np.empty((n_steps, n_win * (1 + nm + 1)))
        for k, ic in enumerate(idx_coarse):
            sl = slice(ic - n_win + 1, ic + 1)
            wins[k] = np.concatenate([w[sl], y[sl].ravel()])
        if (noise_omega > 0 or noise_y > 0) and job.noise_seed is not None:
            rng = np.random.Generator(np.random.PCG64(job.noise_seed))
            noise = np.empty_like(wins)
            noise[:, :n_win] = noise_omega * rng.standard_normal((n_steps, n_win))
            noise[:, n_win:] = noise_y * rng.standard_normal(
                (n_steps, n_win * (nm + 1)))
            wins = wins + noise
        settled = abs(omega_coarse[-1] - omega_coarse[-6]) < SETTLE_TOL \
            if n_steps >= 6 else False
        meta = dict(job.meta)
        if job.fault is not None:
            meta.setdefault("deficit_mw", job.fault.dp_mw)
        if max_stages:
            meta["trigger_times"] = trigger_times[j]
            meta["stage_u"] = float((stage_rho[j] * stage_on[j]).sum())
        out.append(Trajectory(
            scenario_id=job.scenario_id, dt_embed=dt, dt_pred=n_sub * dt,
            tau=(n_win - 1) * dt, t_coarse=t_fine[idx_coarse],
            omega_coarse=omega_coarse, windows=wins, y_dim=nm + 1,
            nadir=float(w.min()), ssv=float(w[-1]),
            collapsed=bool((w < OMEGA_COLLAPSE).any()), settled=bool(settled),
            fault=job.fault,
            shed_u=np.array(job.shed_u) if job.shed_u is not None else None,
            shed_time=job.shed_time,
            inertia_scale=np.array(job.inertia_scale)
            if job.inertia_scale is not None else None,
            meta=meta,
            fine_t=t_fine if keep_fine else None,
            fine_omega=w.copy() if keep_fine else None,
            fine_y=y.copy() if keep_fine else None,
        ))
    return out


def simulate(config: GridConfig, fault: FaultEvent | None = None, *,
             shed_u=None, shed_time: float | None = None,
             stages=None, inertia_scale=None,
             horizon: float = 60.0, dt_embed: float = 0.01,
             dt_pred: float = 1.0, tau: float = 0.3,
             first_coarse: float | None = None, n_steps: int | None = None,
             noise_omega: float = 0.0, noise_y: float = 0.0,
             noise_seed: int | None = None,
             keep_fine: bool = False, scenario_id: str = "adhoc") -> Trajectory:
    """Single-scenario convenience wrapper around :func:`simulate_batch`."""
    if first_coarse is None:
        first_coarse = (fault.time if fault else 0.0) + tau
    if n_steps is None:
        n_steps = int(math.floor((horizon - first_coarse) / dt_pred)) + 1
    job = SimJob(scenario_id=scenario_id, fault=fault,
                 inertia_scale=tuple(inertia_scale) if inertia_scale is not None else None,
                 shed_u=tuple(shed_u) if shed_u is not None else None,
                 shed_time=shed_time,
                 stages=tuple(stages) if stages else None,
                 noise_seed=noise_seed)
    return simulate_batch(config, [job], horizon=horizon, dt_embed=dt_embed,
                          dt_pred=dt_pred, tau=tau, first_coarse=first_coarse,
                          n_steps=n_steps, noise_omega=noise_omega,
                          noise_y=noise_y, keep_fine=keep_fine)[0]
