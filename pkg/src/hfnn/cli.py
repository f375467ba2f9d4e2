"""Command-line entry point: ``hfnn <command> [options]``.

Each command writes into ``<output>/<run-id>/`` (config.echo, metrics.csv,
checkpoint.bin, report.csv, fields/). Failures exit non-zero with a one-line
JSON error object on standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evaluation as E, experiments as X, geometry as G, operators as O
from .config import load_config
from .errors import ConfigurationError, HfnnError
from .runtime import threads
from .training import loop

log = logging.getLogger("hfnn")


def _common(p):
    p.add_argument("--config", help="config file (sectioned key = value)")
    p.add_argument("--seed", type=int, action="append", help="seed (repeat for several); overrides run.seeds")
    p.add_argument("--output", help="output directory (overrides run.output_dir)")
    p.add_argument("--run-id", help="sub-directory name for this run")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("--threads", type=int, help="native thread count (default: HFNN_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="hfnn", description="PINN and DeepONet hemodynamics experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    cmds = {
        "generate": "sample labelled point clouds for every V in fluid.V_list",
        "train": "train the model named by run.model_kind",
        "eval": "score a checkpoint against the analytic pipe solution",
        "ablate": "technique ablation table",
        "split-study": "operator train/test V-split study",
        "transfer": "warm-start transfer from transfer.baseline_V to each transfer.target_V",
        "export-field": "write predicted fields at query points",
        "ingest": "validate a point-cloud CSV and copy it into the run directory",
    }
    ps = {}
    for name, help_ in cmds.items():
        ps[name] = sub.add_parser(name, help=help_, description=help_)
        _common(ps[name])
    for name in ("eval", "export-field"):
        ps[name].add_argument("--checkpoint", required=True)
    ps["export-field"].add_argument("--points", help="CSV with x1,x2,x3 columns (default: sampled interior points)")
    ps["export-field"].add_argument("--n-points", type=int, default=10000)
    ps["export-field"].add_argument("--format", choices=("csv", "vtk-legacy"))
    ps["export-field"].add_argument("--V", type=float, help="inlet velocity for operator checkpoints")
    ps["train"].add_argument("--cloud", help="train on an ingested point-cloud CSV instead of sampling")
    ps["ingest"].add_argument("--cloud", required=True)
    ps["ingest"].add_argument("--V", type=float)
    ps["ablate"].add_argument("--rows", default="progressive", help="'progressive', 'ends' or comma list of all-on,all-off")
    ps["split-study"].add_argument(
        "--scenario", action="append", metavar="NAME:TRAIN_VS[:TEST_VS]",
        help="e.g. 5-3:0.04,0.06,0.1,0.12,0.15:0.05,0.08,0.13 (default: operator.train_V / operator.test_V)",
    )
    ps["eval"].add_argument("--V", type=float, action="append", help="velocities to score (default from config)")
    return ap


def _config(args):
    overrides = list(args.set)
    if args.seed:
        overrides.append("run.seeds=" + ",".join(str(s) for s in args.seed))
    if args.output:
        overrides.append(f"run.output_dir={args.output}")
    if args.run_id:
        overrides.append(f"run.run_id={args.run_id}")
    return load_config(args.config, overrides)


def _write_report(path, rep):
    rep.write_csv(os.path.join(path, "report.csv"))
    for e in rep:
        log.info("%s V=%s %s vel=%.4e pres=%.4e", e.model, e.V, e.split, e.vel_l2_rel, e.pres_l2_rel)


def cmd_generate(cfg, args, out):
    ddir = os.path.join(out, "data")
    os.makedirs(ddir, exist_ok=True)
    files = []
    for V in cfg.fluid.V_list:
        cloud = X.make_cloud(cfg, V, cfg.run.seeds[0])
        path = os.path.join(ddir, f"cloud_V{V!r}.csv")
        G.export_csv(cloud, path)
        files.append(path)
    return {"files": files}


def cmd_train(cfg, args, out):
    kind = cfg.run.model_kind
    rep = E.EvalReport()
    multi = len(cfg.run.seeds) > 1
    for seed in cfg.run.seeds:
        sfx = f"_s{seed}" if multi else ""
        if kind in X.OPERATOR_KINDS:
            run = X.run_operator(cfg, seed)
            O.save_operator(os.path.join(out, f"checkpoint{sfx}.bin"), run.model, run.result.lambdas)
            for e in run.report:
                e.model = f"{kind}/s{seed}" if multi else kind
                rep.add(e)
        else:
            cloud = None
            if getattr(args, "cloud", None):
                cloud = G.ingest_point_cloud(args.cloud, X.domain_spec(cfg), cfg.fluid.V)
                if cloud.truth is None:
                    cloud.truth = G.default_truth(X.domain_spec(cfg), X.fluid(cfg, cfg.fluid.V), cfg.fluid.p_out)
            run = X.run_pinn(cfg, seed, kind, cloud=cloud)
            X.save_pinn(os.path.join(out, f"checkpoint{sfx}.bin"), run)
            run.entry.model = f"{kind}/s{seed}" if multi else kind
            rep.add(run.entry)
        loop.write_metrics(os.path.join(out, f"metrics{sfx}.csv"), run.result.metrics)
    _write_report(out, rep)
    return {"report": os.path.join(out, "report.csv")}


def cmd_eval(cfg, args, out):
    model = X.load_model(args.checkpoint)
    seed = cfg.run.seeds[0]
    rep = E.EvalReport()
    if isinstance(model, O.OperatorModel):
        Vs = args.V or list(cfg.operator.train_V) + list(cfg.operator.test_V)
        for V in Vs:
            c = X.make_cloud(cfg, V, seed, scenario=False)
            te = G.split(c, cfg.sampling.split, seed)[2]
            rep.add(E.evaluate(lambda p, V=V: model.predict(p, V=V), te["volume"].x, c.truth, "checkpoint", V, "test"))
    else:
        for V in args.V or [cfg.fluid.V]:
            c = X.make_cloud(cfg, V, seed)
            te = G.split(c, cfg.sampling.split, seed)[2]
            rep.add(X.score_pinn(model, te, c, cfg.run.model_kind))
    _write_report(out, rep)
    return {"report": os.path.join(out, "report.csv")}


def cmd_ablate(cfg, args, out):
    if args.rows == "progressive":
        rows = E.progressive_rows()
    elif args.rows == "ends":
        rows = [E.ToggleRow.all_on(), E.ToggleRow.all_off()]
    else:
        known = {"all-on": E.ToggleRow.all_on(), "all-off": E.ToggleRow.all_off()}
        known.update({r.name: r for r in E.progressive_rows()})
        try:
            rows = [known[r.strip()] for r in args.rows.split(",")]
        except KeyError as exc:
            raise ConfigurationError(f"--rows: unknown row {exc.args[0]!r}; known: {sorted(known)}") from None

    def run(row, seed):
        r = X.run_pinn(X.apply_toggles(cfg, row), seed)
        r.result.write_metrics(os.path.join(out, f"metrics_{row.name}_s{seed}.csv"))
        return r.entry

    rep = E.ablation_run(run, rows, cfg.run.seeds)
    _write_report(out, rep)
    return {"report": os.path.join(out, "report.csv")}


def _parse_scenario(text):
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigurationError(f"--scenario {text!r}: expected NAME:TRAIN_VS[:TEST_VS]")
    vals = [tuple(float(v) for v in p.split(",") if v.strip()) for p in parts[1:]]
    return E.SplitScenario(parts[0], vals[0], vals[1] if len(vals) > 1 else ())


def cmd_split_study(cfg, args, out):
    if args.scenario:
        scenarios = [_parse_scenario(s) for s in args.scenario]
    else:
        o = cfg.operator
        scenarios = [E.SplitScenario(f"{len(o.train_V)}-{len(o.test_V)}", o.train_V, o.test_V)]
    allV = sorted(set(cfg.fluid.V_list) | {v for s in scenarios for v in s.train_V + s.test_V})
    kind = cfg.run.model_kind if cfg.run.model_kind in X.OPERATOR_KINDS else "deeponet"

    def run(sc):
        rep = E.EvalReport()
        for seed in cfg.run.seeds:
            r = X.run_operator(cfg, seed, kind, sc.train_V, sc.test_V)
            for e in r.report:
                e.model = f"{sc.name}/s{seed}"
                rep.add(e)
        return rep

    reports = E.split_study(run, allV, scenarios)
    total = E.EvalReport()
    for rep in reports.values():
        total.extend(rep)
    _write_report(out, total)
    return {"report": os.path.join(out, "report.csv")}


def cmd_transfer(cfg, args, out):
    rep = E.EvalReport()
    for seed in cfg.run.seeds:
        base = cold_cache = None
        for V in cfg.transfer.target_V:
            tr = X.run_transfer(cfg, seed, V, baseline=base)
            base = tr.baseline
            cold_cache = tr.cold
            tr.warm.entry.model = f"transfer/s{seed}"
            cold_cache.entry.model = f"cold/s{seed}"
            cold_cache.entry.stop_iter = tr.cold_reach
            rep.add(tr.warm.entry)
            rep.add(cold_cache.entry)
            log.info("V=%s target loss %.4e: cold reached at %s, warm stopped at %s", V, tr.target_loss,
                     tr.cold_reach, tr.warm.result.stop_iter)
    _write_report(out, rep)
    return {"report": os.path.join(out, "report.csv")}


def cmd_export_field(cfg, args, out):
    model = X.load_model(args.checkpoint)
    fmt = args.format or cfg.eval.field_format
    dom = X.domain_spec(cfg)
    if args.points:
        pts = np.loadtxt(args.points, delimiter=",", skiprows=1, usecols=(0, 1, 2), ndmin=2)
    else:
        pts = G._volume(np.random.default_rng(cfg.run.seeds[0]), args.n_points, dom)
    V = args.V if args.V is not None else cfg.fluid.V
    if isinstance(model, O.OperatorModel):
        def predict(p):
            return model.predict(p, V=V)
    else:
        predict = model.predict
    truth = G.default_truth(dom, X.fluid(cfg, V), cfg.fluid.p_out)
    path = os.path.join(out, "fields", "field." + ("vtk" if fmt == "vtk-legacy" else "csv"))
    E.export_field(predict, pts, path, fmt, truth)
    return {"field": path}


def cmd_ingest(cfg, args, out):
    dom = X.domain_spec(cfg)
    cloud = G.ingest_point_cloud(args.cloud, dom, args.V)
    ddir = os.path.join(out, "data")
    os.makedirs(ddir, exist_ok=True)
    path = os.path.join(ddir, os.path.basename(args.cloud))
    G.export_csv(cloud, path)
    return {"file": path, "sizes": cloud.sizes()}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "split-study": cmd_split_study,
    "transfer": cmd_transfer,
    "export-field": cmd_export_field,
    "ingest": cmd_ingest,
}


def _error(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    problems = getattr(exc, "problems", None)
    if problems:
        payload["problems"] = [str(p) for p in problems]
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        n = args.threads if args.threads is not None else (cfg.run.threads or None)
        with threads(n):
            out = X.run_dir(cfg)
            result = COMMANDS[args.command](cfg, args, out)
    except ConfigurationError as exc:
        return _error(exc, 2)
    except (HfnnError, OSError) as exc:
        return _error(exc, 1)
    print(json.dumps({"status": "ok", "output": out, **result}, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
