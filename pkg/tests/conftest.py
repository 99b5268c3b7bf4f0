"""Session fixtures shared by the acceptance tests.

The dataset is regenerated from its seeds at the start of the session
rather than stored, so models are always scored against trajectories the
simulator produces today. Trained models load from tests/artifacts and
are rebuilt from scratch (see retrain_artifacts.py) only when an
artifact file is missing. The closed-loop fixture simulates every
planned shed on the held-out split once and shares the results across
the criteria that need them.
"""

import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
import retrain_artifacts as recipes

from koopshed.baselines import load_model
from koopshed.control import empirical_min_zeta, kls_pipeline, zeta_margin
from koopshed.dataset import generate_trajectories, load_split
from koopshed.evaluate import control_cost, conventional_ufls, safety
from koopshed.gridsim import SimJob, default_grid, simulate_batch

ARTIFACT_DIR = Path(__file__).parent / "artifacts"
MODEL_NAMES = ("kls", "ntd", "edmd", "dmd")
FEEDER_LEVELS_MW = (10.0, 25.0, 50.0)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    recipes.build_dataset(out)
    train_specs, train_trajs = load_split(out, "train")
    test_specs, test_trajs = load_split(out, "test")
    return SimpleNamespace(dir=out, config=default_grid(),
                           protocol=recipes.acceptance_protocol(),
                           train_specs=train_specs, train_trajs=train_trajs,
                           test_specs=test_specs, test_trajs=test_trajs)


@pytest.fixture(scope="session")
def models(dataset):
    out = {}
    for name in MODEL_NAMES:
        path = ARTIFACT_DIR / f"{name}.json"
        if path.exists():
            out[name] = load_model(path)
        else:
            out[name] = recipes.BUILDERS[name](dataset.train_trajs)
    return out


@pytest.fixture(scope="session")
def closed_loop(dataset, models):
    """Plan, quantize, and re-simulate sheds on the held-out split.

    Plans are computed from live (no-shed) measurement windows exactly as
    the controller would see them, then each quantized shed is applied in
    a fresh simulation. Returns per-feeder-size safety/cost/shed arrays
    at the model-certified margin, the zero-margin and conservative
    variants at 25 MW, the empirically minimal margins, and the tuned
    frequency-threshold relay policy on the same split.
    """
    kls = models["kls"]
    config, proto = dataset.config, dataset.protocol
    specs = dataset.test_specs
    bus_mw = np.array([load.p_mw for load in config.loads])
    n_win = int(round(proto.tau / proto.dt_embed)) + 1
    f0 = config.f0

    live_specs = [replace(s, shed_u=None) for s in specs]
    live = generate_trajectories(config, live_specs, proto)
    windows = [(tr.windows[0], float(tr.windows[0][n_win - 1]))
               for tr in live]

    def run_plans(d_mw, zeta, mode="kls"):
        plans = [kls_pipeline(kls, w, om, d_mw / bus_mw, zeta=zeta,
                              mode=mode, bus_mw=bus_mw)
                 for w, om in windows]
        jobs = [SimJob(scenario_id=s.scenario_id, fault=s.fault,
                       inertia_scale=s.inertia_scale,
                       shed_u=tuple(plan.u_quantized),
                       shed_time=proto.shed_time)
                for s, plan in zip(specs, plans)]
        trajs = simulate_batch(config, jobs,
                               horizon=proto.resolved_horizon(),
                               dt_embed=proto.dt_embed,
                               dt_pred=proto.dt_pred, tau=proto.tau,
                               first_coarse=proto.first_coarse,
                               n_steps=proto.n_steps)
        safs = np.array([safety(f0 * (1 + t.nadir), f0 * (1 + t.ssv))
                         for t in trajs])
        costs = np.array([control_cost(f0 * (1 + t.nadir),
                                       f0 * (1 + t.ssv)) for t in trajs])
        shed = np.array([plan.shed_mw().sum() for plan in plans])
        return safs, costs, shed

    mpe = kls.meta["max_pred_error"]
    zeta, safety_at, cost_at, shed_at = {}, {}, {}, {}
    for d in FEEDER_LEVELS_MW:
        zeta[d] = zeta_margin(kls.A, kls.B, d / bus_mw, mpe,
                              proto.n_steps).zeta
        safety_at[d], cost_at[d], shed_at[d] = run_plans(d, zeta[d])

    safety_zero, cost_zero, shed_zero = run_plans(25.0, 0.0)
    safety_ceil, cost_ceil, shed_ceil = run_plans(25.0, zeta[25.0],
                                                  mode="kls-c")

    zeta_star = {}
    for d in FEEDER_LEVELS_MW:
        def is_safe(z, d=d):
            safs, _, _ = run_plans(d, z)
            return bool((safs >= 1.0).all())
        zeta_star[d] = empirical_min_zeta(is_safe, 0.0, 0.05, tol=1e-3)

    relay_policy, relay_rows = conventional_ufls(config, specs,
                                                 protocol=proto)
    return SimpleNamespace(
        max_pred_error=mpe, zeta=zeta, zeta_star=zeta_star,
        safety_at=safety_at, cost_at=cost_at, shed_at=shed_at,
        safety_zero=safety_zero, cost_zero=cost_zero, shed_zero=shed_zero,
        safety_ceil=safety_ceil, cost_ceil=cost_ceil, shed_ceil=shed_ceil,
        relay_policy=relay_policy, relay_rows=relay_rows)
