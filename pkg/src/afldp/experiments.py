"""Experiment harness: sweep plans, convergence counting and the
gradient-inversion demonstration."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dp
from .config import RunConfig
from .data import DatasetSpec, build_dataset
from .engine import ALGORITHMS, PRIVATE, run
from .models import Dataset, ModelSpec, max_sample_grad_norm, per_sample_gradients

log = logging.getLogger(__name__)

SWEEP_FIELDS = {"epsilon": "epsilon", "edges": "edges", "batch": "batch", "sigma": "sigma",
                "L": "L", "delta": "delta", "theta": "theta"}
ROW_COLUMNS = ("algorithm", "sweep", "value", "seed", "status", "final_accuracy", "final_loss",
               "iterations_to_converge", "total_epsilon", "max_staleness", "config_hash", "error")
AGG_COLUMNS = ("algorithm", "sweep", "value", "runs", "failed", "median_accuracy",
               "median_final_loss", "median_iterations_to_converge", "converged",
               "median_total_epsilon")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ConvergenceRule:
    window: int = 5
    threshold: float = math.inf

    def __post_init__(self):
        if self.window < 2:
            raise PlanError("convergence window must be >= 2")
        if not self.threshold > 0:
            raise PlanError("convergence threshold must be positive")


def iterations_to_converge(record, rule: ConvergenceRule) -> Optional[int]:
    """First iteration at which the mean of the last ``rule.window`` recorded
    losses drops below the threshold.

    ``record`` is a :class:`RunRecord` (iterations without a loss sample are
    skipped) or a plain loss sequence indexed from ``t = 1``.
    """
    if hasattr(record, "loss"):
        losses = np.asarray(record.loss, dtype=float)
        ts = np.asarray(record.t)
        keep = ~np.isnan(losses)
        losses, ts = losses[keep], ts[keep]
    else:
        losses = np.asarray(record, dtype=float)
        ts = np.arange(1, len(losses) + 1)
    if len(losses) == 0:
        raise PlanError("record has no loss samples")
    w = rule.window
    if len(losses) < w:
        return None
    csum = np.concatenate(([0.0], np.cumsum(losses)))
    means = (csum[w:] - csum[:-w]) / w
    hit = np.flatnonzero(means < rule.threshold)
    return int(ts[hit[0] + w - 1]) if hit.size else None


# -- gradient inversion -------------------------------------------------------

def invert_gradient(w, g, reg_lambda: float, orient: bool = True) -> np.ndarray:
    """Recover the feature direction behind a single-sample logistic gradient.

    The gradient is ``s * v + reg_lambda * w`` for a scalar ``s``, so removing
    the regularizer leaves ``v`` up to scale and sign.  With ``orient`` the
    sign is chosen to make the pixel sum nonnegative, as it is for images.
    """
    r = np.asarray(g, dtype=float) - reg_lambda * np.asarray(w, dtype=float)
    norm = float(np.linalg.norm(r))
    if not norm > 0:
        raise PlanError("gradient carries no feature information (zero residual)")
    r = r / norm
    if orient and r.sum() < 0:
        r = -r
    return r


def cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def inversion_demo(data: Dataset, epsilons: Sequence[float], trials: int = 100, seed: int = 0,
                   reg_lambda: float = 1e-4, w=None) -> dict:
    """Cosine between recovered and true features for noisy b=1 gradients.

    Noise uses sensitivity ``2G`` with ``G`` the largest per-sample gradient
    norm at ``w`` (so clipping at ``G`` never binds).  Returns per-epsilon
    cosines and medians.
    """
    spec = ModelSpec("logistic", data.dim, 2, reg_lambda)
    w = np.zeros(data.dim) if w is None else np.asarray(w, dtype=float)
    G = max_sample_grad_norm(spec, w, data)
    sens = dp.sensitivity_from_bound(G, 1)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(data), size=trials)
    grads = per_sample_gradients(spec, w, data.subset(picks))
    out = {"G": G, "sensitivity": sens, "trials": trials, "by_epsilon": {}}
    for eps in epsilons:
        pspec = dp.PrivacySpec(eps, 0.5, sens)
        noise = dp.sample_noise_batch(pspec, data.dim, trials, np.random.default_rng([seed, len(out["by_epsilon"])]))
        cos = []
        for i in range(trials):
            g = dp.clip_gradient(grads[i], sens / 2.0) + noise[i]
            cos.append(cosine(invert_gradient(w, g, reg_lambda), data.features[picks[i]]))
        out["by_epsilon"][eps] = {"median_cosine": float(np.median(cos)), "cosines": cos}
    return out


# -- sweep plans ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    algorithms: tuple = ("mapa", "audp")
    model: str = "logistic"
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(kind="mnist-bundled"))
    sweep: str = "epsilon"
    values: tuple = (0.1, 0.2, 0.5)
    seeds: tuple = (0, 1, 2)
    T: int = 5000
    rule: Optional[ConvergenceRule] = None  # None: derive from a CSGD reference run
    base: dict = field(default_factory=dict)  # extra RunConfig fields
    reference_T: int = 20000

    def validate(self):
        if not self.values or not self.seeds:
            raise PlanError("a plan needs at least one sweep value and one seed")
        if self.sweep not in SWEEP_FIELDS:
            raise PlanError(f"cannot sweep {self.sweep!r}; choose from {sorted(SWEEP_FIELDS)}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise PlanError(f"unknown algorithms {bad}")
        return self

    def base_config(self) -> RunConfig:
        return RunConfig(model=self.model, dataset=self.dataset, T=self.T).replace(**self.base)

    def configs(self):
        base = self.base_config()
        for algo in self.algorithms:
            for value in self.values:
                for seed in self.seeds:
                    cfg = base.replace(algorithm=algo, seed=seed, **{SWEEP_FIELDS[self.sweep]: value})
                    yield algo, value, seed, cfg

    def to_dict(self):
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d


def reference_threshold(plan: ExperimentPlan, factor: float = 1.05):
    """Threshold ``factor`` times the final loss of a long non-private CSGD run."""
    cfg = plan.base_config().replace(algorithm="csgd", T=plan.reference_T, seed=0,
                                     loss_stride=plan.reference_T, eval_stride=0)
    rec = run(cfg)
    final = rec.results["final_loss"]
    return factor * final, {"reference_final_loss": final, "factor": factor,
                            "reference_T": plan.reference_T, "reference_config_hash": cfg.hash()}


def _run_cell(args):
    algo, value, seed, cfg_dict, rule = args
    cfg = RunConfig.from_dict(cfg_dict)
    row = dict.fromkeys(ROW_COLUMNS, "")
    row.update(algorithm=algo, value=value, seed=seed, config_hash=cfg.hash())
    try:
        rec = run(cfg)
        r = rec.results
        row.update(status="ok", final_accuracy=r["final_accuracy"], final_loss=r["final_loss"],
                   iterations_to_converge=iterations_to_converge(rec, rule),
                   total_epsilon=r["ledger_total"] if algo in PRIVATE else 0.0,
                   max_staleness=r["max_staleness"])
    except Exception as exc:  # a failed cell becomes a failed row
        log.warning("cell %s/%s/seed %s failed: %s", algo, value, seed, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def _median(values):
    vals = [float(v) for v in values if v is not None and v != ""]
    return float(np.median(vals)) if vals else None


def aggregate(rows, sweep: str):
    cells = {}
    for row in rows:
        cells.setdefault((row["algorithm"], row["value"]), []).append(row)
    out = []
    for (algo, value), group in cells.items():
        ok = [r for r in group if r["status"] == "ok"]
        conv = [r["iterations_to_converge"] for r in ok if r["iterations_to_converge"] not in (None, "")]
        out.append({"algorithm": algo, "sweep": sweep, "value": value, "runs": len(group),
                    "failed": len(group) - len(ok),
                    "median_accuracy": _median(r["final_accuracy"] for r in ok),
                    "median_final_loss": _median(r["final_loss"] for r in ok),
                    "median_iterations_to_converge": _median(conv),
                    "converged": len(conv),
                    "median_total_epsilon": _median(r["total_epsilon"] for r in ok)})
    return out


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})


def run_plan(plan: ExperimentPlan, out_dir=None, workers: int = 1) -> dict:
    """Run every (algorithm, value, seed) cell; returns rows, aggregates and
    metadata, and writes ``rows.csv``, ``aggregate.csv`` and ``plan.json``
    under ``out_dir`` when given."""
    plan.validate()
    started = time.perf_counter()
    meta = {"plan": plan.to_dict()}
    rule = plan.rule
    if rule is None:
        threshold, ref = reference_threshold(plan)
        rule = ConvergenceRule(5, threshold)
        meta["convergence_reference"] = ref
    meta["convergence_rule"] = asdict(rule)
    cells = []
    configs = {}
    for algo, value, seed, cfg in plan.configs():
        d = cfg.to_dict()
        configs[cfg.hash()] = d
        cells.append((algo, value, seed, d, rule))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    for row in rows:
        row["sweep"] = plan.sweep
    agg = aggregate(rows, plan.sweep)
    meta["configs"] = configs
    meta["wall_time_s"] = time.perf_counter() - started
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "rows.csv", ROW_COLUMNS, rows)
        _write_csv(out / "aggregate.csv", AGG_COLUMNS, agg)
        (out / "plan.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
    return {"rows": rows, "aggregate": agg, "metadata": meta}


def load_dataset_for_demo(spec: DatasetSpec) -> Dataset:
    train, _, _ = build_dataset(spec, binary=False)
    return train
