"""Run configuration and its resolution into a concrete problem instance."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import dp
from .data import DatasetSpec, build_dataset
from .models import Dataset, ModelSpec, default_grad_bound, gradient_spread, loss

# paper-default constants for real data; the quadratic uses its exact ones
DEFAULT_L = 10.0
DEFAULT_SIGMA = 30.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "mapa"
    model: str = "logistic"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    T: int = 1000
    seed: int = 0
    batch: int = 12
    edges: int = 5
    delay: str = "cyclic"
    tau_max: Optional[int] = None
    trace: tuple = ()
    epsilon: float = 0.1
    epsilons: tuple = ()
    delta: float = 1e-3
    theta: float = 0.5
    sigma: Optional[float | str] = None  # "auto": measured at x1
    L: Optional[float] = None
    G: Optional[float] = None
    R: float = 10.0
    f_gap: Optional[float] = None
    reg_lambda: float = 1e-4
    num_classes: int = 10
    initial_sensitivity: Optional[float] = None
    rate_variant: str = "v1"
    gamma: Optional[float] = None  # fixed rate, overrides the schedule (not MAPA)
    loss_stride: int = 1
    eval_stride: int = 100
    x0_norm: float = 0.0

    def validate(self):
        from .engine import ALGORITHMS, DELAY_KINDS
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.model not in ("logistic", "svm", "quadratic"):
            raise ConfigError(f"unknown model {self.model!r}")
        if (self.model == "quadratic") != (self.dataset.kind == "quadratic"):
            raise ConfigError("the quadratic model goes with the quadratic dataset only")
        if self.delay not in DELAY_KINDS:
            raise ConfigError(f"unknown delay model {self.delay!r}")
        if self.T < 1 or self.batch < 1 or self.edges < 1:
            raise ConfigError("T, batch and edges must be >= 1")
        if self.loss_stride < 1 or self.eval_stride < 0:
            raise ConfigError("loss_stride must be >= 1 and eval_stride >= 0")
        if self.epsilons and len(self.epsilons) != self.edges:
            raise ConfigError(f"{len(self.epsilons)} per-edge budgets for {self.edges} edges")
        if self.algorithm in ("audp", "mapa"):
            for e in self.epsilons or (self.epsilon,):
                if not (e > 0 and math.isfinite(e)):
                    raise ConfigError(f"epsilon must be positive and finite, got {e}")
            if not 0 < self.delta < 1:
                raise ConfigError("delta must lie in (0, 1)")
        if self.algorithm == "mapa" and not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if self.rate_variant not in ("v1", "v2"):
            raise ConfigError("rate_variant is v1 or v2")
        if self.gamma is not None:
            if not (self.gamma > 0 and math.isfinite(self.gamma)):
                raise ConfigError(f"gamma must be positive and finite, got {self.gamma}")
            if self.algorithm == "mapa":
                raise ConfigError("MAPA sets its own per-stage rate; gamma does not apply")
        if self.delay == "trace" and not self.trace:
            raise ConfigError("trace delay model needs a trace")
        return self

    def replace(self, **kw) -> "RunConfig":
        if "dataset" in kw and isinstance(kw["dataset"], dict):
            kw["dataset"] = DatasetSpec(**kw["dataset"])
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trace"] = list(self.trace)
        d["epsilons"] = list(self.epsilons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("dataset"), dict):
            d["dataset"] = DatasetSpec(**d["dataset"])
        for key in ("trace", "epsilons"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Problem:
    spec: ModelSpec
    train: Dataset
    test: Optional[Dataset]
    x1: np.ndarray
    consts: dict
    epsilons: list
    K: int
    schedule: object


def resolve_problem(cfg: RunConfig) -> Problem:
    """Build data, model constants and initial point; all deterministic in ``cfg``."""
    from .engine import DelaySchedule

    train, test, qspec = build_dataset(cfg.dataset, binary=cfg.model == "logistic")
    if cfg.model == "quadratic":
        spec = qspec
        L = cfg.L if cfg.L is not None else spec.smoothness_L
        sigma = cfg.sigma if cfg.sigma is not None else spec.sigma
    else:
        num_classes = 2 if cfg.model == "logistic" else cfg.num_classes
        L = cfg.L if cfg.L is not None else DEFAULT_L
        sigma = cfg.sigma if cfg.sigma is not None else DEFAULT_SIGMA
        spec = ModelSpec(cfg.model, train.dim, num_classes, cfg.reg_lambda, L)
    n = spec.n_params
    x1 = np.zeros(n)
    if cfg.x0_norm:
        x1 = np.full(n, cfg.x0_norm / math.sqrt(n))
    if sigma == "auto":
        sigma = gradient_spread(spec, x1, train)
    elif isinstance(sigma, str):
        raise ConfigError(f"sigma must be a number or 'auto', got {sigma!r}")

    K = 1 if cfg.algorithm == "csgd" else cfg.edges
    if cfg.delay == "trace":
        tau_max = cfg.tau_max if cfg.tau_max is not None else max(K - 1, 0)
    else:
        tau_max = cfg.tau_max if cfg.tau_max is not None else K - 1
    if cfg.algorithm == "csgd":
        tau_max = 0
    schedule = DelaySchedule(cfg.delay if cfg.algorithm != "csgd" else "cyclic", K, tau_max,
                             tuple(cfg.trace))

    G = cfg.G if cfg.G is not None else default_grad_bound(spec, x1, train)
    f_gap = cfg.f_gap if cfg.f_gap is not None else loss(spec, x1, train)
    if cfg.algorithm == "mapa" and not f_gap > 0:
        raise ConfigError(f"f_gap must be positive, got {f_gap} (x1 may already be optimal; "
                          "set f_gap or x0_norm)")
    spec = spec.with_constants(smoothness_L=L, grad_bound_G=G, sample_variance_sigma2=sigma ** 2,
                               radius_R=cfg.R)
    init_sens = None
    if cfg.algorithm == "audp":
        init_sens = (cfg.initial_sensitivity if cfg.initial_sensitivity is not None
                     else dp.sensitivity_from_bound(G, cfg.batch))
    elif cfg.algorithm == "mapa":
        init_sens = (cfg.initial_sensitivity if cfg.initial_sensitivity is not None
                     else dp.initial_sensitivity(sigma, cfg.batch, cfg.delta))
    epsilons = list(cfg.epsilons) if cfg.epsilons else [cfg.epsilon] * K
    consts = {"L": L, "sigma": sigma, "G": G, "R": cfg.R, "b": cfg.batch, "tau_max": tau_max,
              "K": K, "f_gap": f_gap, "initial_sensitivity": init_sens,
              "x1_norm": float(np.linalg.norm(x1)), "n_params": n,
              "n_train": len(train), "n_test": len(test) if test is not None else 0,
              "feature_scaling": "pixels/255" if cfg.dataset.kind in ("idx", "mnist-bundled") else "none"}
    return Problem(spec, train, test, x1, consts, epsilons, K, schedule)
