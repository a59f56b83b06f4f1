"""Command-line interface: fit, predict, simulate, evaluate.

Every command reads CSV/key=value inputs and writes CSV (and, for ``fit``,
a JSON model archive).  Outputs are written atomically; any failure leaves
no partial files, prints one machine-parseable ``error: <kind>: <message>``
line on stderr, and exits nonzero.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dc_fields

import numpy as np

from .model import MemoeError
from .em import FitConfig, fit
from .inference import sandwich
from .predict import point_predict, prediction_set
from .simulate import DESIGNS, run_study, report_rows
from . import io as mio

_CONFIG_TYPES = {
    "K": int, "max_em_iters": int, "n_starts": int, "seed": int,
    "mode_max_iters": int, "gating_newton_iters": int,
    "em_rel_tol": float, "sigma2_floor": float, "sigma_eig_floor": float,
    "mode_tol": float,
}


def _build_fit_config(config_path, k_flag, seed_flag):
    """FitConfig with precedence default < config file < flag; returns the
    config plus (key, value, source) provenance rows."""
    values = {f.name: getattr(FitConfig(), f.name)
              for f in dc_fields(FitConfig)
              if f.name in _CONFIG_TYPES}
    sources = {k: "default" for k in values}
    if config_path:
        kv = mio.read_key_value_file(config_path)
        for key, raw in kv.items():
            name = "K" if key.lower() == "k" else key
            if name not in _CONFIG_TYPES:
                raise mio.DataError(f"{config_path}: unknown setting {key!r}")
            try:
                values[name] = _CONFIG_TYPES[name](raw)
            except ValueError:
                raise mio.DataError(
                    f"{config_path}: bad value {raw!r} for {key!r}")
            sources[name] = "file"
    if k_flag is not None:
        values["K"] = k_flag
        sources["K"] = "flag"
    if seed_flag is not None:
        values["seed"] = seed_flag
        sources["seed"] = "flag"
    cfg = FitConfig(**values)
    provenance = [(k, values[k], sources[k]) for k in sorted(values)]
    return cfg, provenance


def _cmd_fit(args) -> int:
    schema = mio.schema_from_file(args.schema)
    cfg, provenance = _build_fit_config(args.config, args.k, args.seed)
    dataset = mio.load_long_csv(args.data, schema)
    fitted = fit(dataset, cfg)
    rows = [["config", key, value, source]
            for key, value, source in provenance]
    for i, ll in enumerate(fitted.loglik_trace):
        rows.append(["trace", i, ll, ""])
    diag = fitted.diagnostics
    rows += [
        ["diagnostics", "converged", int(fitted.converged), ""],
        ["diagnostics", "em_iters", fitted.em_iters, ""],
        ["diagnostics", "final_loglik", fitted.final_loglik, ""],
        ["diagnostics", "chosen_start", fitted.best_of.get("chosen", 0), ""],
        ["diagnostics", "loglik_dips", diag.dip_count, ""],
        ["diagnostics", "degenerate_experts",
         ";".join(map(str, sorted(diag.degenerate_experts))), ""],
        ["diagnostics", "mode_unconverged", diag.mode_unconverged, ""],
    ]
    if not args.no_sandwich:
        report = sandwich(fitted, dataset)
        for k in range(fitted.K):
            for j in range(dataset.p):
                rows.append(["estimate", f"expert{k + 1}.beta{j + 1}",
                             fitted.params.beta[k, j], ""])
                rows.append(["sandwich_se", f"expert{k + 1}.beta{j + 1}",
                             report.se[k][j], ""])
                rows.append(["wald95_lo", f"expert{k + 1}.beta{j + 1}",
                             report.wald_95[k][j, 0], ""])
                rows.append(["wald95_hi", f"expert{k + 1}.beta{j + 1}",
                             report.wald_95[k][j, 1], ""])
    mio.save_model(fitted, args.out)
    mio.write_csv(args.report, ["section", "key", "value", "source"], rows)
    print(f"fitted K={fitted.K} model: loglik={fitted.final_loglik:.6f} "
          f"converged={fitted.converged} -> {args.out}, {args.report}")
    return 0


def _cmd_predict(args) -> int:
    model = mio.load_model(args.model)
    schema = mio.schema_from_file(args.schema)
    rows = []
    for row_id, x, z, w, _y in mio.iter_covariate_rows(args.data, schema):
        y_hat = point_predict(x, z, w, model)
        ps = prediction_set(x, z, w, model, args.q, args.grid_cells)
        for lo, hi in ps.intervals:
            rows.append([row_id, y_hat, lo, hi, ps.achieved_mass])
    mio.write_csv(args.out, ["row_id", "y_hat", "lo", "hi", "achieved_mass"],
                  rows)
    print(f"wrote {len(rows)} interval rows -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    taus = [float(t) for t in args.tau.split(",") if t.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    cfg = FitConfig(seed=args.seed if args.seed is not None else 0,
                    n_starts=args.n_starts, em_rel_tol=args.em_rel_tol)
    report = run_study(args.design, taus, args.reps, methods, cfg,
                       seed=args.seed if args.seed is not None else 0,
                       level=args.q, grid_cells=args.grid_cells)
    header, rows = report_rows(report)
    mio.write_csv(args.out, header, rows)
    print(f"simulated {args.design}: {args.reps} replications x "
          f"{len(taus)} tau value(s) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    schema = mio.schema_from_file(args.schema)
    truth = {row_id: y for row_id, _x, _z, _w, y
             in mio.iter_covariate_rows(args.data, schema)}
    import csv as _csv
    preds: dict = {}
    with open(args.pred, newline="") as fh:
        reader = _csv.DictReader(fh)
        need = {"row_id", "y_hat", "lo", "hi"}
        if reader.fieldnames is None or need - set(reader.fieldnames):
            raise mio.DataError(f"{args.pred}: expected columns {sorted(need)}")
        for row in reader:
            rec = preds.setdefault(row["row_id"],
                                   {"y_hat": float(row["y_hat"]),
                                    "intervals": []})
            rec["intervals"].append((float(row["lo"]), float(row["hi"])))
    if not preds:
        raise mio.DataError(f"{args.pred}: no prediction rows")
    missing = set(preds) - set(truth)
    if missing:
        raise mio.DataError(
            f"{args.pred}: row ids not in the truth data: "
            f"{sorted(missing)[:5]}")
    sq_err, hits, lengths = [], [], []
    for row_id, rec in preds.items():
        y = truth[row_id]
        if np.isnan(y):
            raise mio.DataError(f"{args.data}: missing response for "
                                f"{row_id!r}")
        sq_err.append((rec["y_hat"] - y) ** 2)
        hits.append(any(lo <= y < hi for lo, hi in rec["intervals"]))
        lengths.append(sum(hi - lo for lo, hi in rec["intervals"]))
    header = ["n", "pmse", "coverage", "mean_length"]
    row = [len(preds), float(np.mean(sq_err)), float(np.mean(hits)),
           float(np.mean(lengths))]
    mio.write_csv(args.out, header, [row])
    print(f"evaluated {len(preds)} rows: pmse={row[1]:.6f} "
          f"coverage={row[2]:.4f} mean_length={row[3]:.4f} -> {args.out}")
    return 0


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="memoe",
        description="Mixture-of-experts mixed models: fit, predict, "
                    "simulate, evaluate.")
    sub = top.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model to long-format CSV data")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--schema", required=True)
    p_fit.add_argument("--config", default=None)
    p_fit.add_argument("--k", type=int, default=None)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--out", default="model.json")
    p_fit.add_argument("--report", default="fit_report.csv")
    p_fit.add_argument("--no-sandwich", action="store_true")
    p_fit.set_defaults(func=_cmd_fit)

    p_pred = sub.add_parser("predict",
                            help="point predictions and prediction sets")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--schema", required=True)
    p_pred.add_argument("--q", type=float, default=0.05)
    p_pred.add_argument("--grid-cells", type=int, default=2000)
    p_pred.add_argument("--out", default="predictions.csv")
    p_pred.set_defaults(func=_cmd_predict)

    p_sim = sub.add_parser("simulate", help="run a benchmark study")
    p_sim.add_argument("--design", required=True, choices=DESIGNS)
    p_sim.add_argument("--reps", type=int, default=50)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--tau", default="1.0")
    p_sim.add_argument("--methods", default="memoe,remoe,moe,lmm")
    p_sim.add_argument("--n-starts", type=int, default=2)
    p_sim.add_argument("--em-rel-tol", type=float, default=1e-6)
    p_sim.add_argument("--q", type=float, default=0.05)
    p_sim.add_argument("--grid-cells", type=int, default=2000)
    p_sim.add_argument("--out", default="sim_report.csv")
    p_sim.set_defaults(func=_cmd_simulate)

    p_eval = sub.add_parser("evaluate",
                            help="score a predictions file against truth")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--schema", required=True)
    p_eval.add_argument("--out", default="metrics.csv")
    p_eval.set_defaults(func=_cmd_evaluate)
    return top


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except MemoeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: FileNotFound: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
