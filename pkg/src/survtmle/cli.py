"""Command-line interface: ``survtmle {estimate,hal-fit,simulate,replicate-table1}``.

Settings are resolved as command-line flags over a JSON ``--config`` file over
built-in defaults; the merged result is written to ``<out>/config.json``.
Exit status is 0 on success, 1 when the pipeline fails (an ``error.json`` with
a machine-readable code is written) and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_csv, write_csv
from .formula import FormulaError

log = logging.getLogger("survtmle")

DEFAULTS = {
    "estimate": {
        "data": None, "schema": None, "tau": None, "target": "ate", "event_model": "hal",
        "censor_model": "cox:A + L1 + L2 + L3", "propensity": "logistic:1", "mode": "iterative",
        "eta": 0.01, "alpha": 0.05, "grid_size": 10, "grid_strategy": "quantile",
        "knots": 8, "knot_strategy": "quantile", "order": 2, "folds": 5, "penalty": None,
        "targeting_intervals": 60, "eval_point": "mid", "max_iter": 50, "step": 1e-3,
        "seed": None, "out": "survtmle-out", "J": 0,
    },
    "hal-fit": {
        "data": None, "schema": None, "tau": None, "time_grid": 10, "grid_strategy": "quantile",
        "knots": 8, "knot_strategy": "quantile", "order": 2, "folds": 5, "event": 1,
        "penalty": None, "n_penalties": 30, "seed": None, "out": "survtmle-out", "J": 0,
    },
    "simulate": {
        "censoring": "covariate_dependent", "n": 1000, "tau": 1.2, "randomization_prob": 0.5,
        "competing": False, "seed": None, "out": "survtmle-out",
    },
    "replicate-table1": {
        "reps": 500, "n": 1000, "mode": "iterative", "seed": None, "threads": 1,
        "out": "survtmle-out",
    },
}


class ConfigError(ValueError):
    code = "config.invalid"


# ------------------------------------------------------------------ parsing

def _parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="survtmle", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings (flags take precedence)")
        sp.add_argument("--seed", type=int, default=S, help="master random seed")
        sp.add_argument("--out", default=S, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data_args(sp):
        sp.add_argument("--data", default=S,
                        help="CSV file (columns time,event,trt,L1..Ld) or '@toy'")
        sp.add_argument("--schema", default=S,
                        help="column remapping, e.g. 'time=T,event=status,trt=arm'")
        sp.add_argument("--tau", type=float, default=S, help="time horizon")
        sp.add_argument("--J", type=int, default=S, help="number of event types")

    e = sub.add_parser("estimate", help="targeted estimate of a tau-risk or risk difference")
    common(e)
    data_args(e)
    e.add_argument("--target", choices=["arm0", "arm1", "ate"], default=S)
    e.add_argument("--event-model", dest="event_model", default=S,
                   help="hal | cox:<formula> | km")
    e.add_argument("--censor-model", dest="censor_model", default=S,
                   help="cox:<formula> | km | none")
    e.add_argument("--propensity", default=S, help="logistic:<formula> | fixed:<p>")
    e.add_argument("--mode", choices=["iterative", "one-step"], default=S)
    e.add_argument("--eta", type=float, default=S, help="positivity truncation level")
    e.add_argument("--alpha", type=float, default=S)
    e.add_argument("--grid-size", dest="grid_size", type=int, default=S)
    e.add_argument("--grid-strategy", dest="grid_strategy", choices=["quantile", "uniform"], default=S)
    e.add_argument("--knots", type=int, default=S)
    e.add_argument("--knot-strategy", dest="knot_strategy", choices=["quantile", "uniform"], default=S)
    e.add_argument("--order", type=int, default=S)
    e.add_argument("--folds", type=int, default=S)
    e.add_argument("--penalty", type=float, default=S, help="fixed HAL penalty (skips CV)")
    e.add_argument("--targeting-intervals", dest="targeting_intervals", type=int, default=S)
    e.add_argument("--eval-point", dest="eval_point", choices=["mid", "left"], default=S)
    e.add_argument("--max-iter", dest="max_iter", type=int, default=S)
    e.add_argument("--step", type=float, default=S, help="one-step micro step size")

    h = sub.add_parser("hal-fit", help="fit a HAL hazard with cross-validated penalty")
    common(h)
    data_args(h)
    h.add_argument("--time-grid", dest="time_grid", type=int, default=S)
    h.add_argument("--grid-strategy", dest="grid_strategy", choices=["quantile", "uniform"], default=S)
    h.add_argument("--knots", type=int, default=S)
    h.add_argument("--knot-strategy", dest="knot_strategy", choices=["quantile", "uniform"], default=S)
    h.add_argument("--order", type=int, default=S)
    h.add_argument("--folds", type=int, default=S)
    h.add_argument("--event", type=int, default=S, help="event type (0 = censoring)")
    h.add_argument("--penalty", type=float, default=S, help="single penalty: no CV")
    h.add_argument("--n-penalties", dest="n_penalties", type=int, default=S)

    s = sub.add_parser("simulate", help="draw a dataset from the simulation design")
    common(s)
    s.add_argument("--censoring", choices=["covariate_dependent", "independent", "none"], default=S)
    s.add_argument("--n", type=int, default=S)
    s.add_argument("--tau", type=float, default=S)
    s.add_argument("--randomization-prob", dest="randomization_prob", type=float, default=S)
    s.add_argument("--competing", action="store_true", default=S, help="two-cause extension")

    r = sub.add_parser("replicate-table1", help="run the replication study")
    common(r)
    r.add_argument("--reps", type=int, default=S)
    r.add_argument("--n", type=int, default=S)
    r.add_argument("--mode", choices=["iterative", "one-step"], default=S)
    r.add_argument("--threads", type=int, default=S)
    return p


def resolve_config(command: str, flags: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags (in that order)."""
    cfg = dict(DEFAULTS[command])
    path = flags.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        unknown = set(loaded) - set(cfg) - {"command", "seed_drawn"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k in cfg})
    cfg.update({k: v for k, v in flags.items() if k in cfg})
    if cfg.get("seed") is None:
        cfg["seed"] = int(np.random.SeedSequence().entropy % (2**63))
        cfg["seed_drawn"] = True
    return cfg


def _schema(text) -> dict | None:
    if text is None or isinstance(text, dict):
        return text
    out = {}
    for part in str(text).split(","):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"bad schema entry {part!r}; use key=column")
        key, val = key.strip(), val.strip()
        out[key] = [v for v in val.split(";") if v] if key == "covariates" else val
    return out


def _load(cfg: dict):
    src = cfg["data"]
    if src is None:
        raise ConfigError("--data is required")
    if src == "@toy":
        with resources.as_file(resources.files("survtmle") / "resources" / "toy.csv") as p:
            return load_csv(p, _schema(cfg["schema"]), cfg["tau"], cfg.get("J", 0))
    return load_csv(src, _schema(cfg["schema"]), cfg["tau"], cfg.get("J", 0))


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands

def cmd_estimate(cfg: dict, out: Path) -> int:
    from .pipeline import EstimatorSpec, fit_nuisances
    from .tmle import Intervention, TargetingConfig, targeted_estimate

    if cfg["tau"] is None:
        raise ConfigError("--tau is required for estimate")
    spec = EstimatorSpec(
        event_model=cfg["event_model"], censor_model=cfg["censor_model"],
        propensity=cfg["propensity"], eta=cfg["eta"], grid_size=cfg["grid_size"],
        grid_strategy=cfg["grid_strategy"], knots=cfg["knots"], knot_strategy=cfg["knot_strategy"],
        order=cfg["order"], folds=cfg["folds"], penalty=cfg["penalty"],
        targeting_intervals=cfg["targeting_intervals"])
    _check_models(spec)
    ds = _load(cfg)
    iv = Intervention.ate() if cfg["target"] == "ate" else Intervention.fixed(int(cfg["target"][-1]))
    nuis = fit_nuisances(ds, spec, cfg["seed"])
    tcfg = TargetingConfig(max_iter=cfg["max_iter"], eval_point=cfg["eval_point"], step=cfg["step"])
    report = targeted_estimate(ds, nuis, iv, mode=cfg["mode"].replace("-", "_"),
                               alpha=cfg["alpha"], config=tcfg)
    _dump(out / "report.json", report.to_dict())
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def _check_models(spec) -> None:
    from .pipeline import parse_model

    try:
        for text, allowed in ((spec.event_model, ("hal", "cox", "km")),
                              (spec.censor_model, ("cox", "km", "none")),
                              (spec.propensity, ("logistic", "fixed"))):
            kind, arg = parse_model(text, allowed)
            if kind in ("cox", "logistic"):
                from .formula import Formula
                Formula.parse(arg)
            if kind == "fixed":
                p = float(arg or 0.5)
                if not 0 < p < 1:
                    raise ConfigError(f"fixed propensity must be in (0, 1), got {p}")
    except (FormulaError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_hal_fit(cfg: dict, out: Path) -> int:
    from .hal import aggregate, build_basis, cross_validate_bound, fit_l1_poisson, penalty_path

    ds = _load(cfg)
    basis = build_basis(ds, cfg["time_grid"], cfg["knots"], min(cfg["order"], ds.d + 1),
                        cfg["knot_strategy"], cfg["grid_strategy"])
    j = cfg["event"]
    if cfg["penalty"] is not None:
        model = fit_l1_poisson(aggregate(ds, basis, j), basis, penalty=cfg["penalty"])
    else:
        cands = penalty_path(aggregate(ds, basis, j), cfg["n_penalties"])
        model = cross_validate_bound(ds, basis, cands, cfg["folds"], j, seed=cfg["seed"])
    (out / "hal_model.json").write_text(model.to_json() + "\n")
    with (out / "cv_curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["penalty", "cv_loss", "selected"])
        if model.cv is not None:
            for k, (lam, loss) in enumerate(zip(model.cv["penalties"], model.cv["loss"])):
                w.writerow([repr(lam), "" if loss is None else repr(loss),
                            int(k == model.cv["selected"])])
        else:
            w.writerow([repr(model.penalty), "", 1])
    msg = (f"HAL fit for event type {j}: {basis.n_columns} basis columns, penalty "
           f"{model.penalty:.6g}, selected bound (L1 norm) {model.bound:.6g}")
    (out / "summary.txt").write_text(msg + "\n")
    print(msg)
    return 0


def cmd_simulate(cfg: dict, out: Path) -> int:
    from .simulation import Scenario, simulate_competing_risks, simulate_dataset, true_psi

    sc = Scenario(censoring=cfg["censoring"], n=cfg["n"], tau=cfg["tau"],
                  randomization_prob=cfg["randomization_prob"], seed=cfg["seed"])
    ds = simulate_competing_risks(sc) if cfg["competing"] else simulate_dataset(sc)
    write_csv(ds, out / "data.csv")
    info = {"n": ds.n, "events": int(np.sum(ds.event >= 1)), "censored": int(np.sum(ds.event == 0))}
    if not cfg["competing"]:
        info["true_ate"] = true_psi(sc)
    _dump(out / "truth.json", info)
    print(f"wrote {ds.n} records to {out / 'data.csv'}")
    return 0


def cmd_replicate_table1(cfg: dict, out: Path) -> int:
    from .simulation import replicate_table1, table1_rows

    results = replicate_table1(cfg["reps"], cfg["n"], cfg["seed"], cfg["threads"],
                               cfg["mode"].replace("-", "_"))
    for kind, res in results.items():
        res.write(out, prefix=kind)
    rows = table1_rows(results)
    with (out / "table1.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    _dump(out / "table1.json", {k: {"truth": r.truth, "metrics": r.metrics}
                                for k, r in results.items()})
    print(format_table1(rows))
    return 0


def format_table1(rows: list[dict]) -> str:
    lines = [f"{'scenario':<20} {'estimator':<9} {'bias':>8} {'cov':>7} {'rmse':>7} {'relMSE':>7}"]
    for r in rows:
        lines.append(f"{r['scenario']:<20} {r['estimator']:<9} {r['bias']:>8.4f} "
                     f"{r['coverage']:>7.4f} {r['rmse']:>7.4f} {r['rel_mse']:>7.4f}")
    return "\n".join(lines)


COMMANDS = {"estimate": cmd_estimate, "hal-fit": cmd_hal_fit, "simulate": cmd_simulate,
            "replicate-table1": cmd_replicate_table1}


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, FileNotFoundError):
        return "io.not_found"
    if isinstance(exc, OSError):
        return "io.error"
    return getattr(exc, "code", "pipeline.error")


def main(argv=None) -> int:
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(command, args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "config.json", {"command": command, **cfg})
    except ConfigError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    try:
        return COMMANDS[command](cfg, out)
    except ConfigError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        err = {"error": _error_code(exc), "message": str(exc), "type": type(exc).__name__}
        if isinstance(exc, DataError) and getattr(exc, "rows", None):
            err["rows"] = [int(r) for r in exc.rows]
        _dump(out / "error.json", err)
        print(json.dumps(err), file=sys.stderr)
        log.debug("pipeline failure", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
