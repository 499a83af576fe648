"""Learning-rate policies and the multi-stage sensitivity controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

RATE_KINDS = ("csgd", "asgd", "audp", "audp_v2", "mapa_stage", "constant")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class RatePolicy:
    kind: str
    L: float
    tau_max: int = 0
    sigma: float = 0.0
    R: float = 1.0
    b: int = 1
    delta_b: float = 0.0
    gamma: float = 0.0  # mapa_stage and constant

    def __post_init__(self):
        if self.kind not in RATE_KINDS:
            raise ScheduleError(f"unknown rate policy {self.kind!r}")
        consts = (self.L, self.sigma, self.R, self.delta_b, self.gamma)
        if not all(math.isfinite(c) for c in consts):
            raise ScheduleError("rate constants must be finite")
        if self.L <= 0 or self.R <= 0 or self.b < 1 or self.tau_max < 0:
            raise ScheduleError("need L > 0, R > 0, b >= 1, tau_max >= 0")
        if self.kind in ("mapa_stage", "constant") and self.gamma <= 0:
            raise ScheduleError(f"{self.kind} policy needs a positive gamma")

    def inverse_rate(self, t: int) -> float:
        if t < 1:
            raise ScheduleError(f"iteration index must be >= 1, got {t}")
        lag = self.tau_max + 1
        if self.kind == "csgd":
            return self.L + math.sqrt(t + 1) * self.sigma / (self.R * math.sqrt(self.b))
        if self.kind == "asgd":
            return self.L * lag ** 2 + math.sqrt(t + 1) * self.sigma / (self.R * math.sqrt(self.b))
        if self.kind == "audp":
            return self.L * lag + math.sqrt(self.delta_b + 1) * math.sqrt(t)
        if self.kind == "audp_v2":
            return self.L * (lag ** 2 + 1) + math.sqrt(self.delta_b + 1) * math.sqrt(t)
        return 1.0 / self.gamma


def rate_at(policy: RatePolicy, t: int) -> float:
    return 1.0 / policy.inverse_rate(t)


def _check_theta(theta):
    if not 0 < theta < 1:
        raise ScheduleError(f"theta must lie in (0, 1), got {theta}")


def stage_P(delta_b: float, tau_max: int, b: int, sensitivity: float, theta: float) -> float:
    _check_theta(theta)
    if not (delta_b >= 0 and sensitivity > 0 and b >= 1 and tau_max >= 0):
        raise ScheduleError("stage_P needs delta_b >= 0, sensitivity > 0, b >= 1, tau_max >= 0")
    raw = 8.0 * delta_b / ((tau_max + 1) * b * b * sensitivity * sensitivity * theta * theta)
    return max(raw, 1.0)


def stage_iterations(P: float, L: float, tau_max: int, f_gap: float, delta_b: float) -> int:
    if not (P >= 1 and L > 0 and f_gap > 0 and delta_b > 0):
        raise ScheduleError("stage_iterations needs P >= 1, L > 0, f_gap > 0, delta_b > 0")
    T0 = 4.0 * P * P * L * (tau_max + 1) ** 2 * f_gap / delta_b
    return max(1, math.ceil(T0))


def next_sensitivity(delta_b: float, P: float, tau_max: int, b: int) -> float:
    """Sensitivity implied by the end-of-stage gradient-norm estimate.

    Reported for diagnostics; the controller itself shrinks by ``theta``.
    """
    return 2.0 * math.sqrt(2.0 * delta_b / (P * (tau_max + 1))) / b


def update_delta_b(sigma: float, b: int, sensitivity: float, epsilon0: float) -> float:
    """Sampling variance plus noise variance of one noisy mini-batch gradient."""
    if not epsilon0 > 0:
        raise ScheduleError(f"epsilon0 must be positive, got {epsilon0}")
    return sigma * sigma / b + 2.0 * sensitivity * sensitivity / (epsilon0 * epsilon0)


@dataclass(frozen=True)
class StageConfig:
    L: float
    tau_max: int
    b: int
    sigma: float
    epsilon0: float
    theta: float
    f_gap: float

    def __post_init__(self):
        _check_theta(self.theta)
        if self.f_gap <= 0:
            raise ScheduleError("f_gap must be positive")


@dataclass(frozen=True)
class StageState:
    stage_index: int
    P: float
    gamma: float
    T_s: int
    sensitivity: float
    delta_b: float
    iterations_done_in_stage: int = 0

    @property
    def complete(self) -> bool:
        return self.iterations_done_in_stage >= self.T_s

    def tick(self) -> "StageState":
        return replace(self, iterations_done_in_stage=self.iterations_done_in_stage + 1)


def make_stage(config: StageConfig, sensitivity: float, stage_index: int = 0) -> StageState:
    delta_b = update_delta_b(config.sigma, config.b, sensitivity, config.epsilon0)
    P = stage_P(delta_b, config.tau_max, config.b, sensitivity, config.theta)
    gamma = 1.0 / (2.0 * P * config.L * (config.tau_max + 1))
    if not 1.0 / gamma >= 2.0 * config.L * (config.tau_max + 1) * (1 - 1e-15):
        raise ScheduleError("stage rate violates the constant-rate hypothesis")
    T_s = stage_iterations(P, config.L, config.tau_max, config.f_gap, delta_b)
    return StageState(stage_index, P, gamma, T_s, sensitivity, delta_b, 0)


def advance_stage(state: StageState, config: StageConfig) -> StageState:
    if not state.complete:
        raise ScheduleError(
            f"stage {state.stage_index} has {state.iterations_done_in_stage}/{state.T_s} iterations")
    return make_stage(config, config.theta * state.sensitivity, state.stage_index + 1)


def stage_trace(config: StageConfig, sensitivity: float, n_stages: int):
    """First ``n_stages`` stages starting from ``sensitivity``."""
    stages = [make_stage(config, sensitivity)]
    while len(stages) < n_stages:
        done = replace(stages[-1], iterations_done_in_stage=stages[-1].T_s)
        stages.append(advance_stage(done, config))
    return stages


def gradient_ball_bound(f_gap: float, T: int, gamma: float, delta_b: float, L: float) -> float:
    """Bound on the running mean of ||grad f(x_t)||^2 under a constant rate."""
    return 2.0 * f_gap / (T * gamma) + 2.0 * delta_b * L * gamma


def averaged_error_bound(R: float, G: float, tau_max: int, T: int, delta_b: float, L: float,
                         gamma1: float) -> float:
    """Bound on f(x_ave(T)) - f* for the decaying rate
    ``1/gamma_t = L (tau_max + 1) + sqrt(delta_b + 1) sqrt(t)``."""
    lag = tau_max + 1
    return (R * G * tau_max / T
            + L * (delta_b + G * G) / (2.0 * (delta_b + 1)) * lag * lag * math.log(T) / T
            + ((4.0 + R * R) * math.sqrt(delta_b + 1) + R * R / gamma1) / (2.0 * math.sqrt(T)))
