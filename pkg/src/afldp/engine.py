"""Asynchronous edge-cloud training: delay models, edge and cloud state
machines, and deterministic simulated runs.

Iteration ``t`` applies one gradient to the model ``x_t`` and produces
``x_{t+1}``.  A gradient computed on ``x_o`` and applied at iteration ``t``
has staleness ``t - o`` (its ``origin_iteration`` is ``o``).
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import dp, kernels, schedules
from .models import Dataset, ModelSpec, batch_gradient, loss, full_gradient, predict_accuracy
from .record import RunRecord, RowBuffer
from .config import RunConfig, resolve_problem

ALGORITHMS = ("csgd", "asgd", "audp", "mapa")
PRIVATE = ("audp", "mapa")
DELAY_KINDS = ("cyclic", "uniform_random", "trace")


class EngineError(RuntimeError):
    pass


class StalenessViolation(EngineError):
    pass


@dataclass
class GradientMessage:
    origin_iteration: int
    edge_id: int
    payload: np.ndarray
    clip_bound_used: float = math.inf
    seq: int = -1


# -- delay models ---------------------------------------------------------

@dataclass(frozen=True)
class DelaySchedule:
    kind: str = "cyclic"
    K: int = 1
    tau_max: int = 0
    trace: tuple = ()

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise EngineError(f"unknown delay model {self.kind!r}")
        if self.K < 1 or self.tau_max < 0:
            raise EngineError("need K >= 1 and tau_max >= 0")
        if self.kind in ("cyclic", "uniform_random") and self.tau_max < self.K - 1:
            # K edges all start on x_1, so the last of them is applied with lag K - 1
            raise EngineError(f"{self.kind} with K={self.K} needs tau_max >= {self.K - 1}")
        if self.kind == "trace":
            bad = [k for k in self.trace if not 0 <= int(k) < self.K]
            if bad:
                raise EngineError(f"trace names edges outside [0, {self.K}): {bad[:5]}")

    @property
    def strict(self) -> bool:
        """Whether exceeding ``tau_max`` is an error rather than a flagged event."""
        return self.kind != "trace"

    def scheduler(self, rng: Optional[np.random.Generator] = None):
        if self.kind == "cyclic":
            return _Cyclic(self.K)
        if self.kind == "uniform_random":
            return _UniformDue(self.K, self.tau_max, rng or np.random.default_rng(0))
        return _Trace(self.trace)


class _Cyclic:
    def __init__(self, K):
        self.K = K

    def issued(self, edge, origin):
        pass

    def next_edge(self, t, origins):
        return (t - 1) % self.K


class _UniformDue:
    """Each issued model gets a uniform due lag in ``{0..tau_max}``; the
    earliest-due pending gradient is applied next (issue order breaks ties),
    unless a hard deadline ``origin + tau_max`` forces the oldest one."""

    def __init__(self, K, tau_max, rng):
        self.tau_max = tau_max
        self.rng = rng
        self.due = {}
        self.counter = 0

    def issued(self, edge, origin):
        lag = int(self.rng.integers(0, self.tau_max + 1))
        self.due[edge] = (origin + lag, self.counter)
        self.counter += 1

    def next_edge(self, t, origins):
        by_deadline = sorted(origins, key=lambda k: (origins[k], self.due[k][1]))
        for j, k in enumerate(by_deadline):
            if origins[k] + self.tau_max <= t + j:
                return by_deadline[0]
        return min(origins, key=lambda k: self.due[k])


class _Trace:
    def __init__(self, trace):
        self.trace = tuple(int(k) for k in trace)
        self.pos = 0

    def issued(self, edge, origin):
        pass

    def next_edge(self, t, origins):
        if self.pos >= len(self.trace):
            raise EngineError(f"delay trace exhausted at iteration {t}")
        k = self.trace[self.pos]
        self.pos += 1
        if k not in origins:
            raise EngineError(f"trace names edge {k}, which has no gradient in flight")
        return k


def simulate_arrivals(schedule: DelaySchedule, T: int, seed: int = 0):
    """Apply order without any training: returns ``(edges, origins)``."""
    sched = schedule.scheduler(_schedule_rng(seed))
    origins = {}
    for k in range(schedule.K):
        origins[k] = 1
        sched.issued(k, 1)
    edges = np.empty(T, dtype=np.int64)
    used = np.empty(T, dtype=np.int64)
    for t in range(1, T + 1):
        k = sched.next_edge(t, origins)
        edges[t - 1] = k
        used[t - 1] = origins[k]
        origins[k] = t + 1
        sched.issued(k, t + 1)
    return edges, used


def staleness_of(schedule: DelaySchedule, t: int, edge_id: int, seed: int = 0) -> int:
    """Staleness of the gradient applied at iteration ``t``, which must come
    from ``edge_id``."""
    if not 0 <= edge_id < schedule.K:
        raise EngineError(f"edge {edge_id} outside [0, {schedule.K})")
    if schedule.kind == "cyclic":
        if (t - 1) % schedule.K != edge_id:
            raise EngineError(f"edge {edge_id} is not applied at iteration {t}")
        return min(t - 1, schedule.K - 1)
    edges, origins = simulate_arrivals(schedule, t, seed)
    if edges[t - 1] != edge_id:
        raise EngineError(f"edge {edge_id} is not applied at iteration {t}")
    return int(t - origins[t - 1])


def round_trips(edges: Sequence[int]) -> np.ndarray:
    """Updates between consecutive applications from the same edge."""
    last = {}
    out = np.zeros(len(edges), dtype=np.int64)
    for i, k in enumerate(edges):
        k = int(k)
        out[i] = i - last[k] if k in last else 0
        last[k] = i
    return out


def _schedule_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1 << 20,)))


def edge_rng(seed: int, edge_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(edge_id,)))


# -- edges ----------------------------------------------------------------

class Edge:
    """One edge server: samples a mini-batch from its shard, clips, perturbs."""

    def __init__(self, edge_id: int, spec: ModelSpec, data: Dataset, b: int,
                 epsilon: Optional[float], delta: float, rng: np.random.Generator):
        if epsilon is not None and not epsilon > 0:
            raise EngineError(f"edge {edge_id}: epsilon must be positive")
        self.edge_id = edge_id
        self.spec = spec
        self.data = data
        self.b = b
        self.epsilon = epsilon
        self.delta = delta
        self.rng = rng
        self.local_sensitivity = None
        self._g = np.empty(spec.n_params)

    @property
    def private(self):
        return self.epsilon is not None

    def step(self, model: np.ndarray, origin: int, sensitivity: Optional[float],
             batch_indices: Optional[np.ndarray] = None) -> GradientMessage:
        if batch_indices is None:
            batch_indices = self.rng.integers(0, len(self.data), size=self.b, dtype=np.int64)
        g = batch_gradient(self.spec, model, self.data, batch_indices, self._g)
        payload = np.empty_like(g)
        if self.private:
            if not sensitivity or sensitivity <= 0:
                raise EngineError("private edge step needs a positive sensitivity")
            self.local_sensitivity = sensitivity
            clip = self.b * sensitivity / 2.0
            noise = dp.sample_noise(dp.PrivacySpec(self.epsilon, self.delta, sensitivity),
                                    g.shape[0], self.rng)
            kernels.clip_and_perturb(g, clip, noise.vector, 1.0, payload)
        else:
            clip = math.inf
            payload[:] = g
        return GradientMessage(origin, self.edge_id, payload, clip)


def edge_step(edge: Edge, model, sensitivity, batch, origin: int = 1) -> GradientMessage:
    """Compute one message on an explicit mini-batch."""
    return edge.step(np.ascontiguousarray(model, dtype=float), origin, sensitivity,
                     np.ascontiguousarray(batch.indices, dtype=np.int64))


# -- cloud ----------------------------------------------------------------

@dataclass
class Reply:
    edge_id: int
    t: int
    sensitivity: Optional[float]
    model: np.ndarray


class Cloud:
    """The single writer of the global model.

    Messages enter a FIFO buffer via :meth:`receive` and are applied by
    :meth:`apply_next` in arrival order.
    """

    def __init__(self, cfg: RunConfig, spec: ModelSpec, train: Dataset,
                 test: Optional[Dataset], x1: np.ndarray, consts: dict,
                 strict_staleness: bool = True):
        self.cfg = cfg
        self.spec = spec
        self.train = train
        self.test = test
        self.consts = consts
        self.strict = strict_staleness
        self.x = np.array(x1, dtype=np.float64)
        self.x_sum = np.zeros_like(self.x)
        self.t = 1
        self.buffer = deque()
        self.epsilons = {}
        self.epsilon0 = None
        self.ledger = dp.BudgetLedger()
        self.stage = None
        self.stage_cfg = None
        self.sensitivity = None
        self.policy = None
        self.stages = []
        self.started = False
        self.halted = False
        self._seq_in = 0
        self._seq_out = 0
        self.max_staleness = 0
        self.violations = 0
        self.rows = RowBuffer(cfg.T)

    def register(self, edge_id: int, epsilon: Optional[float]):
        if self.started:
            raise EngineError(f"edge {edge_id} registered after training started")
        self.epsilons[edge_id] = epsilon

    def start(self):
        if not self.epsilons:
            raise EngineError("no edges registered")
        algo = self.cfg.algorithm
        c = self.consts
        if algo in PRIVATE:
            eps = [e for e in self.epsilons.values()]
            if any(e is None for e in eps):
                raise EngineError("private run needs a budget from every edge")
            self.epsilon0 = min(eps)
        if algo == "csgd" or algo == "asgd":
            self.policy = schedules.RatePolicy(algo, c["L"], c["tau_max"], c["sigma"], c["R"], c["b"])
        elif algo == "audp":
            self.sensitivity = c["initial_sensitivity"]
            delta_b = schedules.update_delta_b(c["sigma"], c["b"], self.sensitivity, self.epsilon0)
            kind = "audp_v2" if self.cfg.rate_variant == "v2" else "audp"
            self.policy = schedules.RatePolicy(kind, c["L"], c["tau_max"], c["sigma"], c["R"],
                                               c["b"], delta_b)
        else:
            self.stage_cfg = schedules.StageConfig(c["L"], c["tau_max"], c["b"], c["sigma"],
                                                   self.epsilon0, self.cfg.theta, c["f_gap"])
            self.sensitivity = c["initial_sensitivity"]
            self.stage = schedules.make_stage(self.stage_cfg, self.sensitivity)
            self._log_stage(1)
        if self.cfg.gamma is not None:
            self.policy = schedules.RatePolicy("constant", c["L"], c["tau_max"], gamma=self.cfg.gamma)
        self.started = True
        return self.t, self.sensitivity

    def _log_stage(self, start_t):
        s = self.stage
        nxt = schedules.next_sensitivity(s.delta_b, s.P, self.stage_cfg.tau_max, self.stage_cfg.b)
        self.stages.append({"stage": s.stage_index, "start_t": start_t, "P": s.P, "gamma": s.gamma,
                            "T_s": s.T_s, "sensitivity": s.sensitivity, "delta_b": s.delta_b,
                            "estimated_next_sensitivity": nxt})

    @property
    def done(self):
        return self.t > self.cfg.T

    def gamma(self) -> float:
        if self.stage is not None:
            return self.stage.gamma
        return schedules.rate_at(self.policy, self.t)

    def receive(self, msg: GradientMessage):
        msg.seq = self._seq_in
        self._seq_in += 1
        self.buffer.append(msg)

    def _record_metrics(self):
        cfg = self.cfg
        t = self.t
        lossv = gnorm = acc = math.nan
        if (t - 1) % cfg.loss_stride == 0:
            lossv = loss(self.spec, self.x, self.train)
            gnorm = float(np.linalg.norm(full_gradient(self.spec, self.x, self.train)))
        if self.test is not None and cfg.eval_stride and (t - 1) % cfg.eval_stride == 0:
            acc = predict_accuracy(self.spec, self.x, self.test)
        return lossv, gnorm, acc

    def apply_next(self) -> Reply:
        if not self.started:
            raise EngineError("cloud not started")
        if self.done:
            raise EngineError("all iterations already applied")
        msg = self.buffer.popleft()
        if msg.seq != self._seq_out:
            raise EngineError(f"FIFO violated: expected message {self._seq_out}, got {msg.seq}")
        self._seq_out += 1
        t = self.t
        staleness = t - msg.origin_iteration
        if staleness < 0:
            raise EngineError(f"message from the future: origin {msg.origin_iteration} at t={t}")
        if staleness > self.consts["tau_max"]:
            if self.strict:
                raise StalenessViolation(
                    f"staleness {staleness} > tau_max {self.consts['tau_max']} at t={t}")
            self.violations += 1
        self.max_staleness = max(self.max_staleness, staleness)
        if not np.all(np.isfinite(msg.payload)):
            raise EngineError(f"non-finite payload from edge {msg.edge_id} at t={t}; run aborted")

        gamma = self.gamma()
        lossv, gnorm, acc = self._record_metrics()
        stage_index = self.stage.stage_index if self.stage is not None else 0
        sens = self.sensitivity if self.sensitivity is not None else math.nan
        self.rows.append(t, stage_index, gamma, sens, gnorm, lossv, acc, msg.edge_id, staleness)

        self.x_sum += self.x
        kernels.sgd_step(self.x, gamma, msg.payload)
        eps = self.epsilons.get(msg.edge_id)
        if self.cfg.algorithm in PRIVATE:
            dp.compose_budget(self.ledger, eps, t)
        self.t += 1

        reply = Reply(msg.edge_id, self.t, self.sensitivity, self.x)
        if self.stage is not None:
            self.stage = self.stage.tick()
            if self.stage.complete and not self.done:
                self.stage = schedules.advance_stage(self.stage, self.stage_cfg)
                self.sensitivity = self.stage.sensitivity
                self._log_stage(self.t)
        return reply

    def halt(self):
        self.halted = True

    def record(self, mode: str, extra: Optional[dict] = None) -> RunRecord:
        n = self.t - 1
        x_ave = self.x_sum / n if n else self.x.copy()
        results = {
            "updates_applied": n,
            "halted": self.halted,
            "final_loss": loss(self.spec, self.x, self.train),
            "final_grad_norm": float(np.linalg.norm(full_gradient(self.spec, self.x, self.train))),
            "loss_x_ave": loss(self.spec, x_ave, self.train),
            "final_accuracy": (predict_accuracy(self.spec, self.x, self.test)
                               if self.test is not None else None),
            "ledger_total": self.ledger.total,
            "epsilon0": self.epsilon0,
            "max_staleness": self.max_staleness,
            "staleness_violations": self.violations,
            "assumption_violated": self.violations > 0,
            "stages": self.stages,
        }
        meta = {"mode": mode, "config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                "constants": self.consts, "results": results, "backend": kernels.BACKEND}
        if extra:
            meta.update(extra)
        return RunRecord.from_rows(self.rows, self.x.copy(), x_ave, meta)


# -- orchestration --------------------------------------------------------

def build_run(cfg: RunConfig):
    """Resolve data, model constants, initial point and edges for ``cfg``."""
    cfg.validate()
    problem = resolve_problem(cfg)
    K = problem.K
    edges = []
    for k in range(K):
        shard = problem.train.shard(k, K) if K > 1 else problem.train
        eps = problem.epsilons[k] if cfg.algorithm in PRIVATE else None
        edges.append(Edge(k, problem.spec, shard, cfg.batch, eps, cfg.delta, edge_rng(cfg.seed, k)))
    return problem, edges


def run(cfg: RunConfig, schedule: Optional[DelaySchedule] = None) -> RunRecord:
    """Deterministic simulated run of ``cfg.T`` cloud updates."""
    started = time.perf_counter()
    problem, edges = build_run(cfg)
    if schedule is None:
        schedule = problem.schedule
    if schedule.K != len(edges):
        raise EngineError(f"delay schedule has K={schedule.K} but the run has {len(edges)} edges")
    cloud = Cloud(cfg, problem.spec, problem.train, problem.test, problem.x1, problem.consts,
                  strict_staleness=schedule.strict)
    for e in edges:
        cloud.register(e.edge_id, e.epsilon)
    t, sens = cloud.start()
    sched = schedule.scheduler(_schedule_rng(cfg.seed))
    pending = {}
    origins = {}
    for e in edges:
        pending[e.edge_id] = e.step(cloud.x, t, sens)
        origins[e.edge_id] = t
        sched.issued(e.edge_id, t)
    while not cloud.done:
        k = sched.next_edge(cloud.t, origins)
        cloud.receive(pending.pop(k))
        del origins[k]
        reply = cloud.apply_next()
        if cloud.done:
            break
        pending[k] = edges[k].step(reply.model, reply.t, reply.sensitivity)
        origins[k] = reply.t
        sched.issued(k, reply.t)
    cloud.halt()
    return cloud.record("sim", {"delay": {"kind": schedule.kind, "K": schedule.K,
                                          "tau_max": schedule.tau_max},
                                "wall_time_s": time.perf_counter() - started})


def trace_schedule(record: RunRecord, tau_max: Optional[int] = None) -> DelaySchedule:
    """Replay the apply order recorded in ``record``."""
    K = int(record.metadata["constants"]["K"])
    tau = record.metadata["constants"]["tau_max"] if tau_max is None else tau_max
    return DelaySchedule("trace", K, int(tau), tuple(int(k) for k in record.edge))
