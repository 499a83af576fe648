"""Command-line entry point: ``afldp {run,plan,serve,edge,invert,idx-info}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import DATA_DIR_ENV, DatasetSpec, idx_info

log = logging.getLogger("afldp")


def _sigma(text):
    return text if text == "auto" else float(text)


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v)


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v)


def _address(text, default_host="127.0.0.1"):
    host, _, port = text.rpartition(":")
    return host or default_host, int(port)


def add_run_flags(p):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", type=Path, help="JSON run config; flags below override it")
    g.add_argument("--algo", choices=("csgd", "asgd", "audp", "mapa"))
    g.add_argument("--model", choices=("logistic", "svm", "quadratic"))
    g.add_argument("--dataset", choices=("quadratic", "gaussians", "mnist-bundled", "idx"))
    g.add_argument("--data-dir", help=f"IDX directory (default ${DATA_DIR_ENV})")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--dim", type=int, help="dimension of synthetic data")
    g.add_argument("--condition", type=float, help="quadratic condition number")
    g.add_argument("--noise-sigma", type=float, help="quadratic gradient noise")
    g.add_argument("--task", help="binary relabelling for LR: parity, digitN, lowhigh")
    g.add_argument("--full", action="store_true", default=None, help="use the full IDX dataset")
    g.add_argument("--data-seed", type=int)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--epsilons", type=_floats, help="per-edge budgets, comma separated")
    g.add_argument("--delta", type=float)
    g.add_argument("--theta", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--edges", type=int)
    g.add_argument("--tau-max", type=int)
    g.add_argument("--delay-model", choices=("cyclic", "uniform_random", "trace"))
    g.add_argument("--trace", type=Path, help="file of edge ids in apply order")
    g.add_argument("--iters", type=int)
    g.add_argument("--sigma", type=_sigma, help="sample std of gradients, or 'auto'")
    g.add_argument("--lipschitz", type=float)
    g.add_argument("--g-bound", type=float)
    g.add_argument("--radius", type=float)
    g.add_argument("--f-gap", type=float)
    g.add_argument("--reg-lambda", type=float)
    g.add_argument("--initial-sensitivity", type=float)
    g.add_argument("--rate-variant", choices=("v1", "v2"))
    g.add_argument("--gamma", type=float, help="constant learning rate (not for mapa)")
    g.add_argument("--separation", type=float, help="class mean distance for gaussians")
    g.add_argument("--x0-norm", type=float)
    g.add_argument("--loss-stride", type=int)
    g.add_argument("--eval-stride", type=int)
    g.add_argument("--seed", type=int)


_RUN_MAP = {"algo": "algorithm", "model": "model", "epsilon": "epsilon", "epsilons": "epsilons",
            "delta": "delta", "theta": "theta", "batch": "batch", "edges": "edges",
            "tau_max": "tau_max", "delay_model": "delay", "iters": "T", "sigma": "sigma",
            "lipschitz": "L", "g_bound": "G", "radius": "R", "f_gap": "f_gap",
            "reg_lambda": "reg_lambda", "initial_sensitivity": "initial_sensitivity",
            "rate_variant": "rate_variant", "x0_norm": "x0_norm", "loss_stride": "loss_stride",
            "eval_stride": "eval_stride", "gamma": "gamma", "seed": "seed"}
_DATA_MAP = {"dataset": "kind", "data_dir": "path", "n_train": "n_train", "n_test": "n_test",
             "dim": "dim", "condition": "condition", "noise_sigma": "noise_sigma", "task": "task",
             "full": "full", "separation": "separation", "data_seed": "seed"}


def config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_dict(json.loads(args.config.read_text())) if args.config else RunConfig()
    data = cfg.dataset.to_dict()
    for flag, key in _DATA_MAP.items():
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    over = {key: getattr(args, flag) for flag, key in _RUN_MAP.items()
            if getattr(args, flag, None) is not None}
    if args.trace is not None:
        over["trace"] = tuple(int(v) for v in args.trace.read_text().split())
        over.setdefault("delay", "trace")
    # the quadratic model and dataset only make sense together
    if over.get("model") == "quadratic" and args.dataset is None:
        data["kind"] = "quadratic"
    if data["kind"] == "quadratic" and "model" not in over:
        over["model"] = "quadratic"
    elif data["kind"] != "quadratic" and cfg.model == "quadratic" and "model" not in over:
        over["model"] = "logistic"
    return cfg.replace(dataset=DatasetSpec(**data), **over).validate()


def _summary(rec):
    r = dict(rec.results)
    r.pop("stages", None)
    return {"config_hash": rec.metadata.get("config_hash"), **r}


def _emit(rec, out):
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        rec.to_csv(out)
        rec.write_json(out.with_suffix(".json"))
        log.info("wrote %s", out)
    print(json.dumps(_summary(rec), indent=2, default=str))


def cmd_run(args):
    from .engine import run
    _emit(run(config_from_args(args)), args.out)


def cmd_plan(args):
    from .experiments import ConvergenceRule, ExperimentPlan, run_plan
    cfg = config_from_args(args)
    base = {k: v for k, v in cfg.to_dict().items()
            if k not in ("algorithm", "model", "dataset", "T", "seed")}
    rule = ConvergenceRule(args.window, args.threshold) if args.threshold else None
    values = tuple(_sigma(v) if args.sweep == "sigma" else
                   (int(v) if args.sweep in ("edges", "batch") else float(v))
                   for v in args.values.split(","))
    plan = ExperimentPlan(tuple(args.algos.split(",")), cfg.model, cfg.dataset, args.sweep,
                          values, args.seeds, cfg.T, rule, base, args.reference_iters)
    out = run_plan(plan, args.out, args.workers)
    print(json.dumps(out["aggregate"], indent=2, default=str))


def cmd_serve(args):
    from .net import serve_cloud
    host, port = _address(args.listen, "0.0.0.0")
    rec = serve_cloud(config_from_args(args), host, port, register_timeout=args.register_timeout)
    _emit(rec, args.out)


def cmd_edge(args):
    from .net import InjectedDelay, run_edge
    host, port = _address(args.connect)
    return run_edge(host, port, config_from_args(args), args.edge_id,
                    InjectedDelay.parse(args.inject_delay_ms), args.retries)


def cmd_invert(args):
    from .experiments import inversion_demo, load_dataset_for_demo
    cfg = config_from_args(args)
    data = load_dataset_for_demo(cfg.dataset)
    out = inversion_demo(data, args.budgets, args.trials, cfg.seed, cfg.reg_lambda)
    table = {str(k): v["median_cosine"] for k, v in out["by_epsilon"].items()}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, default=str))
    print(json.dumps({"G": out["G"], "sensitivity": out["sensitivity"],
                      "median_cosine": table}, indent=2))


def cmd_idx_info(args):
    for p in args.paths:
        print(json.dumps(idx_info(p)))


def build_parser():
    p = argparse.ArgumentParser(prog="afldp", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="one simulated run")
    add_run_flags(s)
    s.add_argument("--out", help="CSV path (a JSON sidecar is written next to it)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("plan", help="sweep one parameter over algorithms and seeds")
    add_run_flags(s)
    s.add_argument("--algos", default="mapa,audp")
    s.add_argument("--sweep", default="epsilon")
    s.add_argument("--values", default="0.1,0.2,0.5")
    s.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    s.add_argument("--threshold", type=float, help="loss threshold (default: CSGD reference)")
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--reference-iters", type=int, default=20000)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("serve", help="run the cloud over TCP")
    add_run_flags(s)
    s.add_argument("--listen", default="0.0.0.0:7070")
    s.add_argument("--register-timeout", type=float, default=60.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("edge", help="run one edge against a cloud")
    add_run_flags(s)
    s.add_argument("--connect", default="127.0.0.1:7070")
    s.add_argument("--edge-id", type=int, required=True)
    s.add_argument("--inject-delay-ms", default="0", help="MS or LOW:HIGH")
    s.add_argument("--retries", type=int, default=20)
    s.set_defaults(func=cmd_edge)

    s = sub.add_parser("invert", help="gradient inversion demo")
    add_run_flags(s)
    s.add_argument("--budgets", type=_floats, default=(1e12, 1.0, 0.1, 0.01),
                   help="noise levels to attack, comma separated")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("idx-info", help="inspect IDX files")
    s.add_argument("paths", nargs="+")
    s.set_defaults(func=cmd_idx_info)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        code = args.func(args)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"afldp: error: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
