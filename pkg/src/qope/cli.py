"""Command-line interface.

Commands: ``evaluate`` (estimate quantiles and means for logged or simulated
data), ``experiment`` (simulation presets), ``simulate`` (write a simulated
dataset) and ``inspect`` (summarize a dataset).

Settings may come from a flat ``key=value`` file given with ``--config``;
explicit flags take precedence.  Exit codes: 0 success, 1 configuration
error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from .core import ConfigError, ContractError, DataFormatError, RngStream, parse_policy, read_dataset_csv, write_dataset_csv
from .inference import KernelSpec
from .mdn import MdnConfig, TrainingDiverged
from .mean import QuantileGrid, QuantileSolveError, classic_dr_mean, tail_robust_mean
from .propensity import GbdtConfig
from .quantile import EstimatorConfig, NuisanceOptions, estimate_quantiles, prepare
from . import simbench

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRESETS = ("table1", "table2", "coverage", "bandwidth", "methods", "fig3")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _add_estimator_flags(p):
    g = p.add_argument_group("estimator")
    g.add_argument("--folds", type=int)
    g.add_argument("--mc-samples", type=int)
    g.add_argument("--solver", choices=("auto", "kink-scan", "subgradient"))
    g.add_argument("--max-iter", type=int)
    g.add_argument("--rel-tol", type=float)
    g.add_argument("--clip-floor", type=float)
    g.add_argument("--aggregation", choices=("pooled", "per-fold-average"))
    g.add_argument("--rollout-covariates", choices=("observed", "regenerate-via-mdn"))
    g.add_argument("--bandwidth", type=float)
    g.add_argument("--bandwidth-rule", choices=("fixed", "scott"))
    g.add_argument("--alpha", type=float)
    g.add_argument("--grid-rule", choices=("midpoint", "trapezoid", "simpson"))
    g.add_argument("--grid-size", type=int)
    g.add_argument("--gbdt-rounds", type=int)
    g.add_argument("--gbdt-depth", type=int)
    g.add_argument("--gbdt-learning-rate", type=float)
    g.add_argument("--gbdt-min-leaf", type=int)
    g.add_argument("--mdn-components", type=int)
    g.add_argument("--mdn-hidden", help="comma-separated layer widths, e.g. 8,8")
    g.add_argument("--mdn-epochs", type=int)
    g.add_argument("--mdn-batch-size", type=int)
    g.add_argument("--mdn-learning-rate", type=float)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qope", description="Quantile off-policy evaluation.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ev = sub.add_parser("evaluate", help="estimate quantiles and means of a target policy")
    ev.add_argument("--config")
    ev.add_argument("--data")
    ev.add_argument("--num-actions", type=int)
    ev.add_argument("--dgp", choices=simbench.KINDS)
    ev.add_argument("--df", type=float)
    ev.add_argument("--n", type=int)
    ev.add_argument("--tau", type=float)
    ev.add_argument("--taus")
    ev.add_argument("--method", choices=("dm", "ipw", "dr"))
    ev.add_argument("--policy")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out")
    _add_estimator_flags(ev)

    ex = sub.add_parser("experiment", help="run a simulation preset")
    ex.add_argument("preset")
    ex.add_argument("--config")
    ex.add_argument("--replicates", type=int)
    ex.add_argument("--seed", type=int)
    ex.add_argument("--threads", type=int)
    ex.add_argument("--out")
    ex.add_argument("--dfs", help="comma-separated degrees of freedom (inf for normal)")
    ex.add_argument("--df", type=float)
    ex.add_argument("--n", type=int)
    ex.add_argument("--taus")
    ex.add_argument("--bandwidths", help="comma-separated bandwidths; 'scott' for the rule")
    _add_estimator_flags(ex)

    sim = sub.add_parser("simulate", help="write a simulated dataset as CSV")
    sim.add_argument("--dgp", choices=simbench.KINDS, default="single")
    sim.add_argument("--df", type=float, default=3.0)
    sim.add_argument("--n", type=int, default=2500)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)

    ins = sub.add_parser("inspect", help="summarize a dataset CSV")
    ins.add_argument("--data", required=True)
    ins.add_argument("--num-actions", type=int)
    return p


def read_config_file(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, keys use ``-`` or ``_``."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for num, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def _merge(args, parser) -> dict:
    """Flag values, falling back to the config file for flags left unset."""
    vals = vars(args).copy()
    if getattr(args, "config", None):
        file_vals = read_config_file(args.config)
        actions = {a.dest: a for sp in _subparsers(parser) for a in sp._actions}
        for key, raw in file_vals.items():
            if key not in vals:
                raise ConfigError(f"unknown config key {key!r}")
            if vals[key] is None:
                act = actions.get(key)
                conv = act.type if act is not None and act.type is not None else str
                try:
                    vals[key] = conv(raw)
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {raw!r}") from None
                if act is not None and act.choices and vals[key] not in act.choices:
                    raise ConfigError(f"{key} must be one of {act.choices}")
    return vals


def _subparsers(parser):
    out = [parser]
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            out += list(a.choices.values())
    return out


def _pick(vals, key, default):
    v = vals.get(key)
    return default if v is None else v


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _estimator(vals, base: EstimatorConfig) -> EstimatorConfig:
    return EstimatorConfig(
        tau=base.tau,
        num_folds=_pick(vals, "folds", base.num_folds),
        mc_samples=_pick(vals, "mc_samples", base.mc_samples),
        solver=_pick(vals, "solver", base.solver),
        max_iter=_pick(vals, "max_iter", base.max_iter),
        rel_tol=_pick(vals, "rel_tol", base.rel_tol),
        clip_floor=_pick(vals, "clip_floor", base.clip_floor),
        aggregation=_pick(vals, "aggregation", base.aggregation),
        rollout_covariates=_pick(vals, "rollout_covariates", base.rollout_covariates),
    )


def _options(vals) -> NuisanceOptions:
    g, m = GbdtConfig(), MdnConfig()
    hidden = vals.get("mdn_hidden")
    gbdt = GbdtConfig(
        rounds=_pick(vals, "gbdt_rounds", g.rounds), max_depth=_pick(vals, "gbdt_depth", g.max_depth),
        learning_rate=_pick(vals, "gbdt_learning_rate", g.learning_rate),
        min_samples_leaf=_pick(vals, "gbdt_min_leaf", g.min_samples_leaf),
        clip_floor=_pick(vals, "clip_floor", g.clip_floor),
    )
    mdn = MdnConfig(
        hidden=tuple(int(v) for v in _floats(hidden)) if hidden else m.hidden,
        components=_pick(vals, "mdn_components", m.components), epochs=_pick(vals, "mdn_epochs", m.epochs),
        batch_size=_pick(vals, "mdn_batch_size", m.batch_size),
        learning_rate=_pick(vals, "mdn_learning_rate", m.learning_rate),
    )
    return NuisanceOptions(gbdt=gbdt, mdn=mdn)


def _kernel(vals) -> KernelSpec:
    return KernelSpec(_pick(vals, "bandwidth", 0.15), _pick(vals, "bandwidth_rule", "fixed"))


def _header(settings: dict) -> str:
    return "".join(f"# {k}={settings[k]}\n" for k in sorted(settings))


def _flatten(**kw) -> dict:
    out = {}
    for key, val in kw.items():
        if hasattr(val, "__dataclass_fields__"):
            out.update({f"{key}.{k}": v for k, v in asdict(val).items()})
        else:
            out[key] = val
    return out


def cmd_evaluate(vals) -> int:
    if vals.get("tau") is None and not vals.get("taus"):
        raise ConfigError("evaluate needs --tau or --taus")
    if (vals.get("data") is None) == (vals.get("dgp") is None):
        raise ConfigError("give exactly one of --data or --dgp")
    taus = (vals["tau"],) if vals.get("tau") is not None else _floats(vals["taus"])
    for t in taus:
        if not 0 < t < 1:
            raise ConfigError(f"tau must lie in (0, 1), got {t}")
    seed = _pick(vals, "seed", 0)
    if vals.get("data"):
        ds = read_dataset_csv(vals["data"], vals.get("num_actions"))
        source = {"data": os.path.abspath(vals["data"])}
    else:
        spec = simbench.DgpSpec(vals["dgp"], _pick(vals, "df", 3.0), _pick(vals, "n", 2500), seed)
        ds = simbench.generate(spec, RngStream(seed, ("simulate",)))
        source = _flatten(dgp=spec)
    policy = parse_policy(_pick(vals, "policy", "threshold"), ds.num_actions)
    config = _estimator(vals, EstimatorConfig())
    options = _options(vals)
    kernel = _kernel(vals)
    method = _pick(vals, "method", "dr")
    alpha = _pick(vals, "alpha", 0.05)
    grid = QuantileGrid.build(_pick(vals, "grid_rule", "midpoint"), _pick(vals, "grid_size", 99))
    prepared = prepare(ds, policy, config, options, RngStream(seed, ("evaluate",)))
    ests = estimate_quantiles(prepared, taus, method, True, kernel, alpha)
    rq = tail_robust_mean(prepared, grid, method).value
    rm = classic_dr_mean(prepared, method)
    out = _pick(vals, "out", ".")
    os.makedirs(out, exist_ok=True)
    header = _header({**source, **_flatten(estimator=config, gbdt=options.gbdt, mdn=options.mdn, kernel=kernel),
                      "method": method, "policy": _pick(vals, "policy", "threshold"), "seed": seed,
                      "alpha": alpha, "grid_rule": grid.rule, "grid_size": len(grid.levels)})
    with open(os.path.join(out, "quantiles.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "tau,eta_hat,j0_hat,sigma_hat,ci_lo,ci_hi,method\n")
        for e in ests:
            fh.write(",".join(repr(float(v)) for v in (e.tau, e.eta_hat, e.j0_hat, e.sigma_hat, *e.ci)))
            fh.write(f",{method}\n")
    with open(os.path.join(out, "mean.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "Rquantile,Rmean\n" + f"{rq!r},{rm!r}\n")
    for e in ests:
        print(f"tau={e.tau:g} eta_hat={e.eta_hat:.6g} sigma_hat={e.sigma_hat:.4g} "
              f"ci=({e.ci[0]:.6g}, {e.ci[1]:.6g})")
    print(f"Rquantile={rq:.6g} Rmean={rm:.6g}")
    return EXIT_OK


def cmd_experiment(vals) -> int:
    preset = vals["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    seed = _pick(vals, "seed", 0)
    threads = _pick(vals, "threads", os.cpu_count() or 1)
    config = _estimator(vals, simbench.experiment_config())
    options = _options(vals)
    kernel = _kernel(vals)
    n = _pick(vals, "n", 2500)
    reps = vals.get("replicates")
    if preset in ("table1", "table2"):
        kind = "single" if preset == "table1" else "two"
        default_dfs = "1.2,1.5,1.8,2,2.5,3,3.5,4" if kind == "single" else "2,4,6,8,inf"
        grid = QuantileGrid.build(_pick(vals, "grid_rule", "midpoint"), _pick(vals, "grid_size", 99))
        rep = simbench.run_mse_experiment(kind, _floats(_pick(vals, "dfs", default_dfs)),
                                          reps if reps is not None else 100, n, config, seed,
                                          threads, grid, options, preset)
    else:
        df = _pick(vals, "df", 4.0 if preset == "methods" else 3.0)
        spec = simbench.DgpSpec("single", df, n)
        taus = _floats(vals["taus"]) if vals.get("taus") else None
        if preset == "coverage":
            rep = simbench.run_coverage_experiment(taus or (0.25, 0.5, 0.75), reps if reps is not None else 200,
                                                   spec, config, kernel, seed, threads,
                                                   _pick(vals, "alpha", 0.05), options)
        elif preset == "methods":
            rep = simbench.run_method_comparison(spec, taus or (0.25, 0.5, 0.75), reps if reps is not None else 50,
                                                 config, seed, threads, options)
        elif preset == "bandwidth":
            kernels = _bandwidths(vals.get("bandwidths") or "0.10,0.15,0.20,scott")
            rep = simbench.run_bandwidth_sweep(kernels, spec, taus or (0.25, 0.5, 0.75),
                                               reps if reps is not None else 50, config, seed, threads, options)
        else:
            rep = simbench.run_fig3(spec, taus, config, seed, options)
    paths = rep.write(_pick(vals, "out", "."))
    print(rep.table())
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _bandwidths(text: str) -> tuple:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "scott":
            out.append(KernelSpec(rule="scott"))
        elif tok:
            out.append(KernelSpec(float(tok)))
    return tuple(out)


def cmd_simulate(vals) -> int:
    spec = simbench.DgpSpec(vals["dgp"], vals["df"], vals["n"], vals["seed"])
    ds = simbench.generate(spec, RngStream(spec.seed, ("simulate",)))
    header = [f"{k}={v}" for k, v in sorted(_flatten(dgp=spec).items())]
    write_dataset_csv(ds, vals["out"], header)
    print(f"wrote {ds.n} trajectories to {vals['out']}")
    return EXIT_OK


def cmd_inspect(vals) -> int:
    ds = read_dataset_csv(vals["data"], vals.get("num_actions"))
    y = ds.cumulative_rewards()
    print(f"trajectories: {ds.n}")
    print(f"stages: {ds.horizon}")
    print(f"actions: {ds.num_actions}")
    print(f"covariate dims: {','.join(map(str, ds.covariate_dims))}")
    for k in range(1, ds.horizon + 1):
        counts = np.bincount(ds.actions[:, k - 1], minlength=ds.num_actions)
        print(f"stage {k} action counts: {' '.join(map(str, counts))}")
    q = np.quantile(y, [0.0, 0.25, 0.5, 0.75, 1.0])
    print("return quantiles (0,.25,.5,.75,1): " + " ".join(f"{v:.6g}" for v in q))
    print(f"return mean: {y.mean():.6g}  sd: {y.std(ddof=1) if y.size > 1 else 0.0:.6g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    usage = None
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_CONFIG
        usage = {n: sp for sp in _subparsers(parser)[1:] for n in [sp.prog.split()[-1]]}[args.command]
        vals = _merge(args, parser)
        handler = {"evaluate": cmd_evaluate, "experiment": cmd_experiment,
                   "simulate": cmd_simulate, "inspect": cmd_inspect}[args.command]
        return handler(vals)
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        if usage is not None:
            usage.print_usage(sys.stderr)
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, QuantileSolveError, ContractError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
