"""Scenario sampling, trajectory generation and dataset persistence.

A scenario is (per-machine inertia multipliers, a generation-loss fault, a
per-bus shed fraction applied at a fixed delay after the fault). Trajectories
are stored as JSON lines with full float precision so a round trip is
bit-exact; a manifest records the generation protocol and file digests.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .gridsim import (ConfigError, FaultEvent, GridConfig, SimJob, Trajectory,
                      simulate_batch)

SCHEMA_VERSION = 1


class WindowError(ValueError):
    """Raised when a requested embedding window cannot be assembled."""


@dataclass(frozen=True)
class ScenarioSpec:
    """One sampled operating scenario."""

    scenario_id: str
    inertia_scale: tuple[float, ...]
    fault: FaultEvent
    shed_u: tuple[float, ...]
    seed: int

    def effective_inertia_scale(self, config: GridConfig) -> float:
        """Aggregate multiplier: scenario kinetic energy over nominal."""
        h = np.array([m.inertia_h * m.rating_mva for m in config.machines])
        return float(np.dot(h, self.inertia_scale) / h.sum())


@dataclass
class GenerationProtocol:
    """Timeline and sampling-rate settings shared by every scenario."""

    fault_time: float = 0.5
    shed_delay: float = 0.3     # shed (and first coarse point) after the fault
    tau: float = 0.3            # embedding window length
    dt_embed: float = 0.01
    dt_pred: float = 1.0
    n_steps: int = 60
    noise_omega: float = 0.0    # std of additive noise on measured omega
    noise_y: float = 0.0        # std of additive noise on measured y channels
    horizon: float | None = None

    def resolved_horizon(self) -> float:
        if self.horizon is not None:
            return self.horizon
        return self.first_coarse + (self.n_steps - 1) * self.dt_pred + 1.0

    @property
    def first_coarse(self) -> float:
        return self.fault_time + self.shed_delay

    @property
    def shed_time(self) -> float:
        return self.fault_time + self.shed_delay


def enumerate_faults(config: GridConfig, max_simultaneous: int = 3,
                     time: float = 0.5) -> list[FaultEvent]:
    """All single/pair/... trips of the per-group units defined in the grid."""
    nm = config.n_machines
    sizes = [m.unit_mw for m in config.machines]
    trippable = [i for i in range(nm) if sizes[i] > 0]
    if not trippable:
        raise ConfigError("no machine has a trippable unit (unit_mw == 0)")
    faults = []
    for k in range(1, max_simultaneous + 1):
        for combo in itertools.combinations(trippable, k):
            deficits = tuple(sizes[i] if i in combo else 0.0 for i in range(nm))
            faults.append(FaultEvent(time=time, deficits_mw=deficits))
    return faults


def sample_scenarios(seed: int, n: int, config: GridConfig, *,
                     band: float = 0.3,
                     faults: list[FaultEvent] | None = None,
                     protocol: GenerationProtocol | None = None,
                     id_prefix: str = "s") -> list[ScenarioSpec]:
    """Draw ``n`` scenarios: inertia multipliers uniform in [1-band, 1+band],
    a fault uniformly from the fault set, per-bus shed fractions uniform in
    [0, 1]."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if not 0.0 <= band < 1.0:
        raise ValueError("band must be in [0, 1)")
    proto = protocol or GenerationProtocol()
    if faults is None:
        faults = enumerate_faults(config, time=proto.fault_time)
    rng = np.random.Generator(np.random.PCG64(seed))
    nm, nl = config.n_machines, config.n_loads
    out = []
    for i in range(n):
        scale = 1.0 + band * rng.uniform(-1.0, 1.0, size=nm)
        fault = faults[int(rng.integers(len(faults)))]
        u = rng.uniform(0.0, 1.0, size=nl)
        out.append(ScenarioSpec(
            scenario_id=f"{id_prefix}{i:04d}",
            inertia_scale=tuple(float(x) for x in scale),
            fault=fault,
            shed_u=tuple(float(x) for x in u),
            seed=seed * 1_000_003 + i,
        ))
    return out


def generate_trajectories(config: GridConfig, scenarios: list[ScenarioSpec],
                          protocol: GenerationProtocol,
                          threads: int | None = None) -> list[Trajectory]:
    """Simulate every scenario under the shared protocol timeline."""
    jobs = [SimJob(scenario_id=s.scenario_id, fault=s.fault,
                   inertia_scale=s.inertia_scale, shed_u=s.shed_u,
                   shed_time=protocol.shed_time, noise_seed=s.seed)
            for s in scenarios]
    kw = dict(horizon=protocol.resolved_horizon(), dt_embed=protocol.dt_embed,
              dt_pred=protocol.dt_pred, tau=protocol.tau,
              first_coarse=protocol.first_coarse, n_steps=protocol.n_steps,
              noise_omega=protocol.noise_omega, noise_y=protocol.noise_y)
    if threads is None:
        threads = int(os.environ.get("KLS_THREADS", "1"))
    if threads <= 1 or len(jobs) <= 64:
        return simulate_batch(config, jobs, **kw)
    chunks = [jobs[lo:lo + 64] for lo in range(0, len(jobs), 64)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: simulate_batch(config, c, **kw), chunks))
    return [t for part in parts for t in part]


# ---------------------------------------------------------------------------
# embedding windows
# ---------------------------------------------------------------------------

def build_embedding(traj: Trajectory, tau: float, dt_embed: float,
                    t: float) -> np.ndarray:
    """Assemble ``[omega(t-tau..t), y(t-tau), ..., y(t)]`` at coarse time ``t``.

    ``tau`` may be any sub-window of the stored one as long as ``dt_embed``
    is a multiple of the stored fine step; ``tau = 0`` yields the
    instantaneous sample ``[omega_t, y_t]``.
    """
    hits = np.nonzero(np.abs(traj.t_coarse - t) < 1e-9)[0]
    if hits.size == 0:
        raise WindowError(f"t={t} is not a coarse sample of this trajectory")
    k = int(hits[0])
    return window_at(traj, tau, dt_embed, k)


def window_at(traj: Trajectory, tau: float, dt_embed: float,
              k: int) -> np.ndarray:
    """Like :func:`build_embedding` but indexed by coarse step ``k``."""
    ratio = dt_embed / traj.dt_embed
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1 - 1e-9:
        raise WindowError(f"dt_embed={dt_embed} is not a multiple of the "
                          f"stored step {traj.dt_embed}")
    stride = int(round(ratio))
    if tau > traj.tau + 1e-12:
        raise WindowError(f"tau={tau} exceeds the stored window {traj.tau}")
    n_req = int(round(tau / dt_embed)) + 1
    if abs(tau - (n_req - 1) * dt_embed) > 1e-9:
        raise WindowError(f"tau={tau} is not a multiple of dt_embed={dt_embed}")
    n_stored = traj.n_win
    if (n_req - 1) * stride > n_stored - 1:
        raise WindowError("requested window reaches before stored history")
    idx = n_stored - 1 - stride * np.arange(n_req - 1, -1, -1)
    w = traj.windows[k]
    om = w[:n_stored][idx]
    y = w[n_stored:].reshape(n_stored, traj.y_dim)[idx]
    return np.concatenate([om, y.ravel()])


def window_matrix(trajectories: list[Trajectory], tau: float,
                  dt_embed: float) -> np.ndarray:
    """Stack windows for every (trajectory, coarse step): (n_traj, T, L)."""
    rows = [np.stack([window_at(tr, tau, dt_embed, k)
                      for k in range(tr.n_steps)]) for tr in trajectories]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    name: str
    n_train: int
    n_test: int
    protocol: dict
    grid: dict
    files: dict = field(default_factory=dict)   # name -> sha256
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)


def _traj_record(spec: ScenarioSpec | None, tr: Trajectory) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "scenario_id": tr.scenario_id,
        "dt_embed": tr.dt_embed,
        "dt_pred": tr.dt_pred,
        "tau": tr.tau,
        "t_coarse": tr.t_coarse.tolist(),
        "omega_coarse": tr.omega_coarse.tolist(),
        "windows": tr.windows.tolist(),
        "y_dim": tr.y_dim,
        "nadir": tr.nadir,
        "ssv": tr.ssv,
        "collapsed": tr.collapsed,
        "settled": tr.settled,
        "fault": {"time": tr.fault.time,
                  "deficits_mw": list(tr.fault.deficits_mw)} if tr.fault else None,
        "shed_u": tr.shed_u.tolist() if tr.shed_u is not None else None,
        "shed_time": tr.shed_time,
        "inertia_scale": tr.inertia_scale.tolist()
        if tr.inertia_scale is not None else None,
        "meta": tr.meta,
    }
    if spec is not None:
        rec["seed"] = spec.seed
    return rec


def _record_traj(rec: dict) -> tuple[ScenarioSpec | None, Trajectory]:
    fault = FaultEvent(rec["fault"]["time"], tuple(rec["fault"]["deficits_mw"])) \
        if rec.get("fault") else None
    tr = Trajectory(
        scenario_id=rec["scenario_id"],
        dt_embed=rec["dt_embed"], dt_pred=rec["dt_pred"], tau=rec["tau"],
        t_coarse=np.array(rec["t_coarse"]),
        omega_coarse=np.array(rec["omega_coarse"]),
        windows=np.array(rec["windows"]),
        y_dim=rec["y_dim"], nadir=rec["nadir"], ssv=rec["ssv"],
        collapsed=rec["collapsed"], settled=rec["settled"], fault=fault,
        shed_u=np.array(rec["shed_u"]) if rec.get("shed_u") is not None else None,
        shed_time=rec.get("shed_time"),
        inertia_scale=np.array(rec["inertia_scale"])
        if rec.get("inertia_scale") is not None else None,
        meta=rec.get("meta", {}),
    )
    spec = None
    if "seed" in rec and fault is not None and tr.shed_u is not None:
        spec = ScenarioSpec(scenario_id=tr.scenario_id,
                            inertia_scale=tuple(tr.inertia_scale.tolist()),
                            fault=fault, shed_u=tuple(tr.shed_u.tolist()),
                            seed=rec["seed"])
    return spec, tr


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def split_and_persist(scenarios: list[ScenarioSpec],
                      trajectories: list[Trajectory],
                      counts: tuple[int, int], outdir, *,
                      config: GridConfig,
                      protocol: GenerationProtocol,
                      name: str = "dataset") -> DatasetManifest:
    """Write ``train.jsonl``/``test.jsonl`` plus ``manifest.json``.

    ``counts`` is (n_train, n_test); the first n_train scenarios form the
    training split. Scenario ids must be unique across the whole set.
    """
    n_train, n_test = counts
    if n_train + n_test != len(scenarios) or len(scenarios) != len(trajectories):
        raise ValueError(f"counts {counts} do not partition "
                         f"{len(scenarios)} scenarios")
    ids = [s.scenario_id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ValueError("scenario ids are not unique")
    os.makedirs(outdir, exist_ok=True)
    files = {}
    for split, lo, hi in (("train", 0, n_train),
                          ("test", n_train, n_train + n_test)):
        path = os.path.join(outdir, f"{split}.jsonl")
        with open(path, "w") as fh:
            for spec, tr in zip(scenarios[lo:hi], trajectories[lo:hi]):
                fh.write(json.dumps(_traj_record(spec, tr),
                                    separators=(",", ":")) + "\n")
        files[f"{split}.jsonl"] = _sha256(path)
    manifest = DatasetManifest(name=name, n_train=n_train, n_test=n_test,
                               protocol=asdict(protocol),
                               grid=config.to_dict(), files=files)
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(dirpath) -> DatasetManifest:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        d = json.load(fh)
    return DatasetManifest(**d)


def load_split(dirpath, split: str = "train", *, verify: bool = True
               ) -> tuple[list[ScenarioSpec | None], list[Trajectory]]:
    """Read one split back; optionally verify the manifest digest."""
    path = os.path.join(dirpath, f"{split}.jsonl")
    if verify:
        manifest = load_manifest(dirpath)
        want = manifest.files.get(f"{split}.jsonl")
        if want is not None and _sha256(path) != want:
            raise IOError(f"digest mismatch for {path}")
    specs, trajs = [], []
    with open(path) as fh:
        for line in fh:
            spec, tr = _record_traj(json.loads(line))
            specs.append(spec)
            trajs.append(tr)
    return specs, trajs
