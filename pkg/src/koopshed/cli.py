"""Command-line experiment runner.

Subcommands cover the full workflow: dataset generation, model training,
prediction scoring, one-shot shed planning, margin tables, closed-loop
deviation checks, the method comparison suite, and the staged-UFLS
benchmark. All frequency limits cross this boundary in Hz and are
converted to per-unit deviation internally; results go to files, logs go
to stderr.

Exit codes: 0 success, 1 domain error (simulation, numerics, infeasible
inputs), 2 configuration error (bad flags, malformed files, missing
paths).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import baselines
from .control import InfeasiblePlan, kls_pipeline, zeta_margin
from .dataset import (ConfigError, GenerationProtocol, load_manifest,
                      load_split, sample_scenarios, generate_trajectories,
                      split_and_persist)
from .evaluate import ALL_METHODS, compare, conventional_ufls
from .gridsim import GridConfig, SimulationDiverged, default_grid
from .koopman import KoopmanModel, TrainConfig, train
from .sls import NeumannDivergence, deviation_bound_check

LOG = logging.getLogger("koopshed")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_CONFIG = 2

_DOMAIN_ERRORS = (ValueError, ArithmeticError, SimulationDiverged,
                  InfeasiblePlan, NeumannDivergence)


def _hz_to_pu(hz: float, f0: float) -> float:
    return hz / f0 - 1.0


def _load_grid(path: str | None) -> GridConfig:
    return default_grid() if path is None else GridConfig.from_json(path)


def _load_model(path: str):
    """Open a saved model of any method, dispatching on its tag."""
    with open(path) as fh:
        method = json.load(fh).get("method")
    if method in ("edmd", "dmd"):
        return baselines.load_model(path)
    return KoopmanModel.load(path)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}") from exc


def _write_rows(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    LOG.info("wrote %s", path)


def _dataset_protocol(args) -> GenerationProtocol:
    return GenerationProtocol(
        tau=args.tau, dt_embed=args.dt_embed, dt_pred=args.dt_pred,
        n_steps=args.n_steps, horizon=args.horizon,
        noise_omega=args.noise_omega, noise_y=args.noise_y)


def _manifest_context(data_dir, grid_path):
    manifest = load_manifest(data_dir)
    config = _load_grid(grid_path) if grid_path \
        else GridConfig.from_dict(manifest.grid)
    protocol = GenerationProtocol(**manifest.protocol)
    return manifest, config, protocol


# ---------------------------------------------------------------------------
# subcommand bodies

def _cmd_gen(args) -> int:
    config = _load_grid(args.grid)
    protocol = _dataset_protocol(args)
    train_sc = sample_scenarios(args.seed, args.n_train, config,
                                protocol=protocol, band=args.band,
                                id_prefix="tr")
    test_sc = sample_scenarios(args.seed + 1, args.n_test, config,
                               protocol=protocol, band=args.band,
                               id_prefix="te")
    LOG.info("simulating %d train + %d test scenarios",
             args.n_train, args.n_test)
    trajs = generate_trajectories(config, train_sc + test_sc, protocol,
                                  threads=args.threads)
    manifest = split_and_persist(train_sc + test_sc, trajs,
                                 (args.n_train, args.n_test), args.out,
                                 config=config, protocol=protocol)
    LOG.info("dataset %s: %d/%d scenarios under %s", manifest.name,
             args.n_train, args.n_test, args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    _, config, protocol = _manifest_context(args.data, args.grid)
    _, trajs = load_split(args.data, "train")
    if args.method in ("edmd", "dmd"):
        model = baselines.fit_baseline(
            trajs, args.method, rbf_count=args.rbf_count, seed=args.seed,
            ridge=args.ridge, tau=protocol.tau, dt_embed=protocol.dt_embed)
    else:
        tau = 0.0 if args.method == "kls-ntd" else protocol.tau
        tc = TrainConfig(epochs=args.epochs, lr=args.lr,
                         rollout_cap=args.rollout_cap, seed=args.seed,
                         lr_schedule=args.lr_schedule,
                         plateau_patience=args.plateau_patience)
        init = KoopmanModel.load(args.init) if args.init else None
        kwargs = dict(latent_dim=args.latent_dim, tau=tau,
                      dt_embed=protocol.dt_embed, config=tc)
        if init is None:
            kwargs.update(encoder=args.encoder,
                          hidden=tuple(int(h) for h in
                                       args.hidden.split(",")),
                          m_dim=args.m_dim)
        else:
            kwargs.update(init_model=init)
        result = train(trajs, **kwargs)
        model = result.model
    model.save(args.out)
    LOG.info("trained %s model -> %s", args.method, args.out)
    return EXIT_OK


def _cmd_predict(args) -> int:
    _, config, protocol = _manifest_context(args.data, args.grid)
    specs, trajs = load_split(args.data, args.split)
    model = _load_model(args.model)
    if args.scenario:
        keep = [i for i, t in enumerate(trajs)
                if t.scenario_id == args.scenario]
        if not keep:
            raise ConfigError(f"scenario {args.scenario!r} not in split")
        trajs = [trajs[i] for i in keep]
    if isinstance(model, KoopmanModel):
        from .koopman import holdout_mae
        maes = holdout_mae(model, trajs)
    else:
        maes = baselines.holdout_mae(model, trajs, tau=protocol.tau,
                                     dt_embed=protocol.dt_embed)
    _write_rows(args.out, ("scenario_id", "mae_pu"),
                [(t.scenario_id, "%.6e" % m) for t, m in zip(trajs, maes)])
    LOG.info("median MAE %.3e over %d scenarios",
             float(np.median(maes)), len(maes))
    return EXIT_OK


def _cmd_control(args) -> int:
    _, config, protocol = _manifest_context(args.data, args.grid)
    specs, trajs = load_split(args.data, args.split)
    pick = [s for s in specs if s is not None
            and s.scenario_id == args.scenario]
    if not pick:
        raise ConfigError(f"scenario {args.scenario!r} not in split")
    spec = replace(pick[0], shed_u=None)
    model = _load_model(args.model)
    live = generate_trajectories(config, [spec], protocol)[0]
    n_win = int(round(protocol.tau / protocol.dt_embed)) + 1
    window = live.windows[0]
    bus_mw = np.array([ld.p_mw for ld in config.loads])
    plan = kls_pipeline(
        model, window, float(window[n_win - 1]), args.d_mw / bus_mw,
        omega_min=_hz_to_pu(args.omega_min_hz, config.f0),
        omega_inf_min=_hz_to_pu(args.omega_inf_min_hz, config.f0),
        zeta=args.zeta, mode="kls-c" if args.ceil else "kls",
        bus_mw=bus_mw)
    payload = plan.to_dict() | {"scenario_id": spec.scenario_id,
                                "d_mw": args.d_mw}
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    LOG.info("plan for %s: shed %.0f MW%s -> %s", spec.scenario_id,
             float(plan.shed_mw().sum()),
             " (infeasible, full shed)" if plan.infeasible else "",
             args.out)
    return EXIT_OK


def _cmd_margin(args) -> int:
    model = _load_model(args.model)
    if args.grid:
        config = _load_grid(args.grid)
    elif args.data:
        _, config, _ = _manifest_context(args.data, None)
    else:
        config = default_grid()
    bus_mw = np.array([ld.p_mw for ld in config.loads])
    horizon = args.horizon or model.meta.get("horizon", 60)
    mpe = model.meta.get("max_pred_error", 0.0)
    rows = []
    for d_mw in _parse_floats(args.d_mw):
        margin = zeta_margin(model.A, model.B, d_mw / bus_mw, mpe, horizon)
        rows.append(("%.1f" % d_mw, "%.6f" % margin.zeta,
                     "%.6f" % margin.terms.max(), "%.6f" % mpe))
    _write_rows(args.out, ("d_mw", "zeta", "quantization_term",
                           "max_pred_err"), rows)
    return EXIT_OK


def _cmd_sls_check(args) -> int:
    model = _load_model(args.model)
    levels = _parse_floats(args.eps)
    rows = deviation_bound_check(model.A, model.B, args.t, levels,
                                 n_samples=args.n_samples, seed=args.seed)
    _write_rows(args.out,
                ("eps", "max_deviation", "bound", "neumann_converged"),
                [("%.6g" % r["eps"], "%.6e" % r["max_deviation"],
                  "%.6e" % r["bound"], str(r["neumann_converged"]))
                 for r in rows])
    return EXIT_OK


def _parse_models(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigError(f"--models entries take name=path: {item!r}")
        name, path = item.split("=", 1)
        out[name.strip()] = _load_model(path.strip())
    return out


def _cmd_evaluate(args) -> int:
    _, config, protocol = _manifest_context(args.data, args.grid)
    specs, trajs = load_split(args.data, args.split)
    if any(s is None for s in specs):
        raise ConfigError("split lacks scenario metadata")
    models = _parse_models(args.models) if args.models else {}
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    out = compare(config, specs, trajs, models, out_dir=args.out,
                  methods=methods, d_mw=args.d_mw, protocol=protocol,
                  zeta=args.zeta, threads=args.threads,
                  plots=not args.no_plots)
    LOG.info("report: %s", out["report_csv"])
    LOG.info("summary: %s", out["summary_csv"])
    return EXIT_OK


def _cmd_compare_ufls(args) -> int:
    _, config, protocol = _manifest_context(args.data, args.grid)
    specs, trajs = load_split(args.data, args.split)
    if any(s is None for s in specs):
        raise ConfigError("split lacks scenario metadata")
    models = {"kls": _load_model(args.model)}
    out = compare(config, specs, trajs, models, out_dir=args.out,
                  methods=("kls", "conventional"), d_mw=args.d_mw,
                  protocol=protocol, threads=args.threads,
                  plots=not args.no_plots)
    policy = out["policy"]
    LOG.info("tuned policy: trigger %.2f Hz, proportion %.2f, safe=%s",
             policy.trigger_hz, policy.proportion, policy.safe)
    LOG.info("report: %s", out["report_csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koopshed",
        description="one-shot load-shedding experiment runner")
    parser.add_argument("--config", metavar="JSON",
                        help="flag defaults as a JSON object")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--grid", metavar="JSON",
                       help="grid config (default: built-in four-machine)")
        return p

    p = add("gen", _cmd_gen, "sample scenarios and simulate a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-train", type=int, default=600)
    p.add_argument("--n-test", type=int, default=300)
    p.add_argument("--band", type=float, default=0.3)
    p.add_argument("--tau", type=float, default=0.3)
    p.add_argument("--dt-embed", type=float, default=0.01)
    p.add_argument("--dt-pred", type=float, default=1.0)
    p.add_argument("--n-steps", type=int, default=60)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--noise-omega", type=float, default=0.0)
    p.add_argument("--noise-y", type=float, default=0.0)
    p.add_argument("--threads", type=int, default=None)

    p = add("train", _cmd_train, "fit a predictor on a stored dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="kls",
                   choices=("kls", "kls-ntd", "edmd", "dmd"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--rollout-cap", type=int, default=1)
    p.add_argument("--latent-dim", type=int, default=15)
    p.add_argument("--encoder", default="extractor",
                   choices=("mlp", "resconv", "extractor", "passthrough"))
    p.add_argument("--hidden", default="96,96")
    p.add_argument("--m-dim", type=int, default=2)
    p.add_argument("--lr-schedule", default="constant",
                   choices=("constant", "halve-on-plateau"))
    p.add_argument("--plateau-patience", type=int, default=40)
    p.add_argument("--init", metavar="MODEL",
                   help="warm-start from a saved model")
    p.add_argument("--rbf-count", type=int, default=100)
    p.add_argument("--ridge", type=float, default=1e-8)

    p = add("predict", _cmd_predict, "score rollouts against a split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--scenario")

    p = add("control", _cmd_control, "plan one-shot shedding for a scenario")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--d-mw", type=float, default=25.0)
    p.add_argument("--omega-min-hz", type=float, default=49.0)
    p.add_argument("--omega-inf-min-hz", type=float, default=49.5)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--ceil", action="store_true",
                   help="round the plan upward (conservative variant)")

    p = add("margin", _cmd_margin, "safety-margin table over feeder sizes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="dataset dir supplying the grid")
    p.add_argument("--d-mw", default="10,25,50")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("sls-check", _cmd_sls_check,
            "closed-loop deviation bound over mismatch levels")
    p.add_argument("--model", required=True)
    p.add_argument("--eps", default="1e-1,1e-2,1e-3,0")
    p.add_argument("--t", type=int, default=20)
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("evaluate", _cmd_evaluate, "full method comparison suite")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--models", default="",
                   metavar="name=path,name=path,...")
    p.add_argument("--methods", default=",".join(ALL_METHODS))
    p.add_argument("--d-mw", type=float, default=25.0)
    p.add_argument("--zeta", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")

    p = add("compare-ufls", _cmd_compare_ufls,
            "one-shot scheme vs tuned staged shedding")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--model", required=True, metavar="KLS_MODEL")
    p.add_argument("--d-mw", type=float, default=25.0)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")
    return parser, sub


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, sub = _build_parser()
    if "--config" in argv:
        try:
            cfg_path = argv[argv.index("--config") + 1]
            with open(cfg_path) as fh:
                defaults = json.load(fh)
        except (IndexError, OSError, json.JSONDecodeError) as exc:
            parser.exit(EXIT_CONFIG, f"koopshed: bad --config: {exc}\n")
        if not isinstance(defaults, dict):
            parser.exit(EXIT_CONFIG,
                        "koopshed: --config must hold a JSON object\n")
        mapped = {k.replace("-", "_"): v for k, v in defaults.items()}
        parser.set_defaults(**mapped)
        for subparser in sub.choices.values():
            known = {a.dest for a in subparser._actions}
            subparser.set_defaults(**{k: v for k, v in mapped.items()
                                      if k in known})
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose
                        else logging.INFO,
                        format="%(levelname)s %(message)s")
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if os.environ.get("KLS_THREADS") and getattr(args, "threads", None) \
            is None and hasattr(args, "threads"):
        args.threads = int(os.environ["KLS_THREADS"])
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        LOG.error("%s", exc)
        return EXIT_CONFIG
    except _DOMAIN_ERRORS as exc:
        LOG.error("%s", exc)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
