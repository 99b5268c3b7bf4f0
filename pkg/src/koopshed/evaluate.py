"""Safety and cost metrics, the staged-UFLS reference, and report emission.

The two indices map (nadir, steady-state value) in Hz onto [0, 1]:

* safety: weighted sum of two clamped linear terms, 1.0 when the system
  stays above both one-anchors, 0.0 at or below both zero-anchors;
* control_cost: the minimum of two clamped linear terms that grows as the
  post-event frequency sits lower, i.e. as less load was cut.

compare() runs a method suite over a common test set and writes a CSV
report, a quantile summary, and SVG plots whose bytes depend only on the
inputs and seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import BaselineModel
from .baselines import holdout_mae as baseline_holdout_mae
from .control import kls_pipeline
from .dataset import GenerationProtocol, generate_trajectories
from .gridsim import SimJob, FaultEvent, simulate_batch
from .koopman import KoopmanModel, holdout_mae as koopman_holdout_mae

# anchors in Hz: (nadir zero, nadir one, ssv zero, ssv one)
SAFETY_ANCHORS = (48.5, 49.0, 49.0, 49.5)
COST_ANCHORS = (49.5, 49.0, 50.0, 49.5)
SAFE_FRACTION_LEVEL = 0.9
UFLS_TRIGGER_HZ = 49.0
UFLS_REFERENCE_MW = 350.0
UFLS_REFERENCE_MACHINE = 3

CSV_COLUMNS = ("scenario_id", "method", "nadir_hz", "ssv_hz", "safety",
               "control_cost", "mae_pu", "shed_mw")
SUMMARY_COLUMNS = ("method", "n", "mae_p50", "mae_p95", "nadir_min_hz",
                   "safety_mean", "safety_min", "frac_safe", "cc_mean",
                   "shed_mw_mean")
PREDICTION_METHODS = ("kls", "kls-ntd", "edmd", "dmd")
CONTROL_METHODS = ("kls", "kls-c", "conventional")
ALL_METHODS = ("kls", "kls-ntd", "edmd", "dmd", "kls-c", "conventional")


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def _term(value: float, zero: float, one: float) -> float:
    if zero == one:
        raise ValueError("degenerate metric anchors: zero and one coincide")
    return _clamp01((value - zero) / (one - zero))


def safety(nadir_hz: float, ssv_hz: float, *, anchors=SAFETY_ANCHORS,
           alpha: float = 0.5, beta: float = 0.5) -> float:
    """Weighted two-term frequency-security index on [0, 1]."""
    n0, n1, s0, s1 = anchors
    if not (n0 < n1 and s0 < s1):
        raise ValueError("safety anchors must satisfy zero < one per term")
    if abs(alpha + beta - 1.0) > 1e-12:
        raise ValueError("safety weights must sum to one")
    return alpha * _term(nadir_hz, n0, n1) + beta * _term(ssv_hz, s0, s1)


def control_cost(nadir_hz: float, ssv_hz: float, *,
                 anchors=COST_ANCHORS) -> float:
    """Shedding-parsimony index on [0, 1]; 0 once frequency is held high."""
    n0, n1, s0, s1 = anchors
    return min(_term(nadir_hz, n0, n1), _term(ssv_hz, s0, s1))


def trajectory_mae(predicted, true) -> float:
    """Mean absolute error between two frequency traces on a shared grid."""
    predicted = np.asarray(predicted, dtype=float)
    true = np.asarray(true, dtype=float)
    if predicted.shape != true.shape:
        raise ValueError(f"trajectory shapes differ: {predicted.shape} "
                         f"vs {true.shape}")
    return float(np.abs(predicted - true).mean())


# ---------------------------------------------------------------------------
# conventional staged UFLS

@dataclass(frozen=True)
class UflsPolicy:
    """Latched fixed-proportion shedding triggered at a frequency threshold."""

    trigger_hz: float
    proportion: float
    safe: bool
    reference_mw: float

    @property
    def stages(self) -> tuple[tuple[float, float], ...]:
        return ((self.trigger_hz, self.proportion),)


def _hz(pu: float, f0: float) -> float:
    return f0 * (1.0 + pu)


def tune_proportion(config, *, protocol: GenerationProtocol | None = None,
                    trigger_hz: float = UFLS_TRIGGER_HZ,
                    reference_mw: float = UFLS_REFERENCE_MW,
                    step: float = 0.02) -> UflsPolicy:
    """Smallest shed proportion keeping the reference trip safe.

    The reference event trips reference_mw of generation at nominal
    inertia. A latched policy triggered at the floor itself always dips
    below it, so safe here means Safety >= SAFE_FRACTION_LEVEL rather than
    exactly 1. When even shedding everything stays unsafe the policy is
    returned with safe = False and proportion 1.0.
    """
    if not 0.0 < step <= 1.0:
        raise ValueError("step must lie in (0, 1]")
    proto = protocol or GenerationProtocol()
    deficits = [0.0] * len(config.machines)
    deficits[UFLS_REFERENCE_MACHINE] = reference_mw
    fault = FaultEvent(time=proto.fault_time, deficits_mw=tuple(deficits))
    props = np.round(np.arange(step, 1.0 + step / 2.0, step), 10)
    jobs = [SimJob(scenario_id=f"tune-{i}", fault=fault,
                   stages=((trigger_hz, float(rho)),))
            for i, rho in enumerate(props)]
    trajs = simulate_batch(config, jobs, horizon=proto.resolved_horizon(),
                           dt_embed=proto.dt_embed, dt_pred=proto.dt_pred,
                           tau=proto.tau, first_coarse=proto.first_coarse,
                           n_steps=proto.n_steps)
    for rho, traj in zip(props, trajs):
        s = safety(_hz(traj.nadir, config.f0), _hz(traj.ssv, config.f0))
        if s >= SAFE_FRACTION_LEVEL:
            return UflsPolicy(trigger_hz, float(rho), True, reference_mw)
    return UflsPolicy(trigger_hz, 1.0, False, reference_mw)


def conventional_ufls(config, scenarios, *,
                      policy: UflsPolicy | None = None,
                      protocol: GenerationProtocol | None = None,
                      trigger_hz: float = UFLS_TRIGGER_HZ):
    """Run the latched fixed-proportion policy over a scenario list.

    Returns (policy, rows). The policy is tuned on the reference trip when
    not supplied. Scenario shed inputs are ignored; only the staged policy
    acts.
    """
    proto = protocol or GenerationProtocol()
    if policy is None:
        policy = tune_proportion(config, protocol=proto,
                                 trigger_hz=trigger_hz)
    specs = [replace(s, shed_u=None) for s in scenarios]
    jobs = [SimJob(scenario_id=s.scenario_id, fault=s.fault,
                   inertia_scale=s.inertia_scale, stages=policy.stages)
            for s in specs]
    trajs = simulate_batch(config, jobs, horizon=proto.resolved_horizon(),
                           dt_embed=proto.dt_embed, dt_pred=proto.dt_pred,
                           tau=proto.tau, first_coarse=proto.first_coarse,
                           n_steps=proto.n_steps)
    total_mw = sum(ld.p_mw for ld in config.loads)
    rows = []
    for traj in trajs:
        nadir, ssv = _hz(traj.nadir, config.f0), _hz(traj.ssv, config.f0)
        rows.append(MetricsRow(
            scenario_id=traj.scenario_id, method="conventional",
            nadir_hz=nadir, ssv_hz=ssv, safety=safety(nadir, ssv),
            control_cost=control_cost(nadir, ssv), mae_pu=math.nan,
            shed_mw=float(traj.meta.get("stage_u", 0.0)) * total_mw))
    return policy, rows


# ---------------------------------------------------------------------------
# report assembly

@dataclass(frozen=True)
class MetricsRow:
    """One evaluated (scenario, method) pair; nan marks a non-applicable
    field (prediction-only methods carry no control outcome and vice
    versa)."""

    scenario_id: str
    method: str
    nadir_hz: float
    ssv_hz: float
    safety: float
    control_cost: float
    mae_pu: float
    shed_mw: float

    def csv_fields(self) -> list[str]:
        def fmt(x, spec):
            return "" if isinstance(x, float) and math.isnan(x) \
                else format(x, spec)
        return [self.scenario_id, self.method,
                fmt(self.nadir_hz, ".4f"), fmt(self.ssv_hz, ".4f"),
                fmt(self.safety, ".4f"), fmt(self.control_cost, ".4f"),
                fmt(self.mae_pu, ".6e"), fmt(self.shed_mw, ".1f")]


def _prediction_maes(method: str, model, trajectories,
                     proto: GenerationProtocol) -> np.ndarray:
    if isinstance(model, KoopmanModel):
        return koopman_holdout_mae(model, trajectories)
    if isinstance(model, BaselineModel):
        return baseline_holdout_mae(model, trajectories, tau=proto.tau,
                                    dt_embed=proto.dt_embed)
    raise TypeError(f"method {method!r}: unsupported model type "
                    f"{type(model).__name__}")


def _control_rows(method: str, config, scenarios, plans, proto):
    """Re-simulate quantized plans and score the true outcomes."""
    jobs = [SimJob(scenario_id=s.scenario_id, fault=s.fault,
                   inertia_scale=s.inertia_scale,
                   shed_u=tuple(pl.u_quantized), shed_time=proto.shed_time)
            for s, pl in zip(scenarios, plans)]
    trajs = simulate_batch(config, jobs, horizon=proto.resolved_horizon(),
                           dt_embed=proto.dt_embed, dt_pred=proto.dt_pred,
                           tau=proto.tau, first_coarse=proto.first_coarse,
                           n_steps=proto.n_steps)
    rows = []
    for traj, plan in zip(trajs, plans):
        nadir, ssv = _hz(traj.nadir, config.f0), _hz(traj.ssv, config.f0)
        rows.append(MetricsRow(
            scenario_id=traj.scenario_id, method=method, nadir_hz=nadir,
            ssv_hz=ssv, safety=safety(nadir, ssv),
            control_cost=control_cost(nadir, ssv), mae_pu=math.nan,
            shed_mw=float(plan.shed_mw().sum())))
    return rows, trajs


def _write_csv(path: Path, header, rows_of_fields) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows_of_fields)


def _summary_rows(rows: list[MetricsRow]) -> list[list[str]]:
    out = []
    for method in dict.fromkeys(r.method for r in rows):
        sub = [r for r in rows if r.method == method]
        maes = np.array([r.mae_pu for r in sub if not math.isnan(r.mae_pu)])
        safs = np.array([r.safety for r in sub if not math.isnan(r.safety)])
        nads = np.array([r.nadir_hz for r in sub
                         if not math.isnan(r.nadir_hz)])
        ccs = np.array([r.control_cost for r in sub
                        if not math.isnan(r.control_cost)])
        sheds = np.array([r.shed_mw for r in sub
                          if not math.isnan(r.shed_mw)])
        def q(arr, pct=None, how="%.6e"):
            if not arr.size:
                return ""
            val = np.percentile(arr, pct) if pct is not None else arr.mean()
            return how % val
        out.append([
            method, str(len(sub)),
            q(maes, 50), q(maes, 95),
            "" if not nads.size else "%.4f" % nads.min(),
            q(safs, how="%.4f"),
            "" if not safs.size else "%.4f" % safs.min(),
            "" if not safs.size else
            "%.4f" % float((safs >= SAFE_FRACTION_LEVEL).mean()),
            q(ccs, how="%.4f"), q(sheds, how="%.1f")])
    return out


def _plot_reports(out_dir: Path, config, trajectories, models, methods,
                  maes: dict[str, np.ndarray]) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "koopshed"
    paths = []

    n_show = min(4, len(trajectories))
    if n_show and "kls" in models:
        model = models["kls"]
        fig, axes = plt.subplots(1, n_show, figsize=(4 * n_show, 3.2),
                                 squeeze=False)
        for ax, traj in zip(axes[0], trajectories[:n_show]):
            t = traj.t_coarse
            n_win = int(round(traj.tau / traj.dt_embed)) + 1
            pred = model.predict_frequency(
                traj.windows[0], float(traj.windows[0][n_win - 1]),
                traj.shed_u, len(t))
            ax.plot(t, traj.omega_coarse, "k-", lw=1.2, label="simulated")
            ax.plot(t, pred, "C0--", lw=1.2, label="predicted")
            ax.set_title(traj.scenario_id, fontsize=9)
            ax.set_xlabel("time (s)")
        axes[0][0].set_ylabel("frequency deviation (pu)")
        axes[0][0].legend(fontsize=8, loc="lower right")
        fig.tight_layout()
        p = out_dir / "trajectories.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)

    box_methods = [m for m in methods if m in maes and maes[m].size]
    if box_methods:
        fig, ax = plt.subplots(figsize=(1.6 * len(box_methods) + 2, 3.2))
        ax.boxplot([maes[m] for m in box_methods], tick_labels=box_methods,
                   whis=(5, 95), showfliers=False)
        ax.set_yscale("log")
        ax.set_ylabel("trajectory MAE (pu)")
        fig.tight_layout()
        p = out_dir / "mae_box.svg"
        fig.savefig(p, metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths


def compare(config, scenarios, trajectories, models: dict, *, out_dir,
            methods=ALL_METHODS, d_mw: float = 25.0,
            protocol: GenerationProtocol | None = None,
            zeta: float | None = None, threads: int | None = None,
            plots: bool = True) -> dict:
    """Score every requested method on a shared test set and emit reports.

    scenarios/trajectories are the held-out split (with their random shed
    inputs applied); prediction methods are scored against those traces.
    Control methods re-plan from a fresh no-shed measurement window per
    scenario and are scored on re-simulated outcomes. Writes report.csv,
    summary.csv and SVG plots under out_dir and returns paths plus rows.
    """
    methods = tuple(methods)
    unknown = set(methods) - set(ALL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    if len(scenarios) != len(trajectories):
        raise ValueError("scenarios and trajectories must align")
    proto = protocol or GenerationProtocol()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    needs_model = [m for m in methods if m not in ("conventional",)]
    missing = [m for m in needs_model
               if ("kls" if m == "kls-c" else m) not in models]
    if missing:
        raise ValueError(f"missing trained models for: {missing}")

    rows: list[MetricsRow] = []
    maes: dict[str, np.ndarray] = {}
    for method in (m for m in methods if m in PREDICTION_METHODS):
        maes[method] = _prediction_maes(method, models[method],
                                        trajectories, proto)

    plans_by_mode = {}
    control_requested = [m for m in methods
                         if m in ("kls", "kls-c")]
    if control_requested:
        bus_mw = np.array([ld.p_mw for ld in config.loads])
        d_vec = float(d_mw) / bus_mw
        live_specs = [replace(s, shed_u=None) for s in scenarios]
        live = generate_trajectories(config, live_specs, proto,
                                     threads=threads)
        n_win = int(round(proto.tau / proto.dt_embed)) + 1
        for mode in control_requested:
            plans = []
            for traj in live:
                window = traj.windows[0]
                om_meas = float(window[n_win - 1])
                plans.append(kls_pipeline(
                    models["kls"], window, om_meas, d_vec,
                    mode="kls-c" if mode == "kls-c" else "kls",
                    zeta=zeta, bus_mw=bus_mw))
            plans_by_mode[mode] = plans

    policy = None
    for method in methods:
        if method in ("kls", "kls-c"):
            ctl_rows, _ = _control_rows(method, config, scenarios,
                                        plans_by_mode[method], proto)
            if method == "kls" and method in maes:
                ctl_rows = [replace(r, mae_pu=float(m))
                            for r, m in zip(ctl_rows, maes[method])]
            rows.extend(ctl_rows)
        elif method == "conventional":
            policy, conv_rows = conventional_ufls(
                config, scenarios, protocol=proto)
            rows.extend(conv_rows)
        else:
            rows.extend(MetricsRow(
                scenario_id=s.scenario_id, method=method, nadir_hz=math.nan,
                ssv_hz=math.nan, safety=math.nan, control_cost=math.nan,
                mae_pu=float(m), shed_mw=math.nan)
                for s, m in zip(scenarios, maes[method]))

    report_csv = out_dir / "report.csv"
    _write_csv(report_csv, CSV_COLUMNS, [r.csv_fields() for r in rows])
    summary_csv = out_dir / "summary.csv"
    _write_csv(summary_csv, SUMMARY_COLUMNS, _summary_rows(rows))
    svg_paths = _plot_reports(out_dir, config, trajectories, models,
                              methods, maes) if plots else []
    return {"rows": rows, "report_csv": report_csv,
            "summary_csv": summary_csv, "svg": svg_paths, "policy": policy,
            "maes": maes}
