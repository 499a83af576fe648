"""Acceptance checks, one per criterion; each prints a PASS/FAIL line with
the measured values (collected again in the terminal summary)."""

import math
import time

import numpy as np
import pytest

from afldp import DatasetSpec, RunConfig, dp, run, schedules
from afldp.engine import DelaySchedule, round_trips, simulate_arrivals, trace_schedule
from afldp.net import run_loopback

from conftest import acceptance_report, needs_mnist

pytestmark = pytest.mark.acceptance

QUAD20 = DatasetSpec(kind="quadratic", dim=20, condition=1.0, noise_sigma=1.0, n_train=1000)


def _quad_cfg(seed, T, **kw):
    return RunConfig(algorithm="audp", model="quadratic", dataset=QUAD20, T=T, seed=seed, batch=4,
                     edges=5, tau_max=4, delay="cyclic", epsilon=0.5, x0_norm=5.0, eval_stride=0,
                     **kw)


def _delta_b(consts, eps):
    return schedules.update_delta_b(consts["sigma"], consts["b"], consts["initial_sensitivity"], eps)


def test_01_mechanism_moments():
    t0 = time.perf_counter()
    spec = dp.PrivacySpec(1.0, 1e-3, 2.0)
    eta = dp.sample_noise_batch(spec, 10, 1_000_000, np.random.default_rng(2024))
    second = float(np.mean(np.sum(eta * eta, axis=1)))
    target = 2 * (spec.sensitivity / spec.epsilon) ** 2
    worst_mean = float(np.max(np.abs(eta.mean(axis=0))))
    secs = time.perf_counter() - t0
    rel = abs(second / target - 1)
    ok = rel <= 0.03 and worst_mean <= 0.02 and secs < 30
    assert acceptance_report(1, "mechanism moments", ok,
                             f"E||eta||^2={second:.4f} vs {target} (rel {rel:.2%} <= 3%), "
                             f"max |mean_i|={worst_mean:.4f} <= 0.02, {secs:.1f}s")


def test_02_density_ratio():
    rng = np.random.default_rng(7)
    worst, violations = 0.0, 0
    for i in range(10_000):
        dim = int(rng.integers(1, 12))
        eps = float(rng.uniform(0.01, 5))
        S = float(rng.uniform(0.1, 10))
        g1 = rng.standard_normal(dim) * 5
        step = rng.standard_normal(dim)
        scale = 1.0 if i % 10 == 0 else rng.uniform(0, 1)  # every tenth on the boundary
        g2 = g1 + step / np.linalg.norm(step) * S * scale
        if np.linalg.norm(g1 - g2) > S:
            g2 = g1 + (g2 - g1) * (S / np.linalg.norm(g2 - g1)) * (1 - 2**-50)
        nu = rng.standard_normal(dim) * 10
        spec = dp.PrivacySpec(eps, 0.1, S)
        r = dp.density_ratio_bound(g1, g2, nu, spec)
        bound = math.exp(eps)
        violations += r > bound
        worst = max(worst, r / bound)
    ok = violations == 0
    assert acceptance_report(2, "DP density ratio", ok,
                             f"10^4 triples, {violations} exceed e^eps, max ratio/e^eps={worst:.6f}")


def test_03_theorem4_ball():
    t0 = time.perf_counter()
    L, tau = 1.0, 4
    gamma = 1 / (2 * L * (tau + 1))
    T = 5000
    avgs, bounds = [], []
    for seed in range(10):
        rec = run(_quad_cfg(seed, T, gamma=gamma))
        c = rec.metadata["constants"]
        assert c["L"] == L and c["tau_max"] == tau and c["sigma"] == pytest.approx(1.0)
        assert c["initial_sensitivity"] == 2 * c["G"] / 4
        avgs.append(float(np.mean(rec.grad_norm ** 2)))
        bounds.append(schedules.gradient_ball_bound(c["f_gap"], T, gamma, _delta_b(c, 0.5), L))
    mean = float(np.mean(avgs))
    bound = bounds[0]
    secs = time.perf_counter() - t0
    ok = mean <= bound and secs < 120 and len(set(bounds)) == 1
    assert acceptance_report(3, "Theorem 4 ball", ok,
                             f"mean running avg ||grad f||^2 = {mean:.4f} <= bound {bound:.4f} "
                             f"(gamma={gamma}, {secs:.1f}s)")


def test_04_theorem2_bound():
    t0 = time.perf_counter()
    T = 20_000
    gaps, bound = [], None
    for seed in range(10):
        rec = run(_quad_cfg(seed, T, loss_stride=1000))
        c = rec.metadata["constants"]
        gaps.append(rec.results["loss_x_ave"])  # f* = 0 at x* = 0
        db = _delta_b(c, 0.5)
        g1 = schedules.rate_at(schedules.RatePolicy("audp", c["L"], c["tau_max"], delta_b=db), 1)
        assert rec.gamma[0] == g1
        bound = schedules.averaged_error_bound(c["R"], c["G"], c["tau_max"], T, db, c["L"], g1)
    mean = float(np.mean(gaps))
    secs = time.perf_counter() - t0
    ok = mean < bound and secs < 300
    assert acceptance_report(4, "Theorem 2 bound", ok,
                             f"mean f(x_ave)-f* = {mean:.3e} < bound {bound:.4f} ({secs:.1f}s)")


def test_05_stage_algebra():
    from test_schedules import DEFAULTS, GOLDEN, _same_10_digits
    S0 = dp.initial_sensitivity(30, 12, 1e-3)
    trace = schedules.stage_trace(DEFAULTS, S0, 3)
    fields = ("sensitivity", "delta_b", "P", "gamma", "T_s")
    mismatches = [(s.stage_index, f) for s, row in zip(trace, GOLDEN) for f, v in zip(fields, row)
                  if not (getattr(s, f) == v if f == "T_s" else _same_10_digits(getattr(s, f), v))]
    exact_theta = all(b.sensitivity == 0.5 * a.sensitivity for a, b in zip(trace, trace[1:]))
    hyp = all(1 / s.gamma >= 2 * DEFAULTS.L * (DEFAULTS.tau_max + 1) for s in trace)
    ok = not mismatches and exact_theta and hyp
    assert acceptance_report(5, "stage algebra", ok,
                             f"3 stages match golden to 10 digits ({len(mismatches)} mismatches), "
                             f"dS halves exactly: {exact_theta}, 1/gamma >= 2L(tau+1): {hyp}")


@pytest.mark.slow
@needs_mnist
def test_06_utility_ordering():
    t0 = time.perf_counter()
    data = DatasetSpec(kind="mnist-bundled", n_train=2000, n_test=1000)
    base = RunConfig(model="logistic", dataset=data, T=5000, edges=5, batch=12, sigma="auto",
                     loss_stride=5000, eval_stride=0)

    def median_acc(**kw):
        return float(np.median([run(base.replace(seed=s, **kw)).results["final_accuracy"]
                                for s in range(5)]))

    asgd = median_acc(algorithm="asgd")
    table = {eps: (median_acc(algorithm="mapa", epsilon=eps), median_acc(algorithm="audp", epsilon=eps))
             for eps in (0.1, 0.2, 0.5)}
    secs = time.perf_counter() - t0
    order = all(m >= a for m, a in table.values())
    close = asgd - table[0.5][0] <= 0.05
    ok = order and close and secs < 600
    cells = ", ".join(f"eps={e}: MAPA {m:.3f} vs AUDP {a:.3f}" for e, (m, a) in table.items())
    assert acceptance_report(6, "utility ordering", ok,
                             f"{cells}; ASGD {asgd:.3f}, gap at 0.5 = {asgd - table[0.5][0]:.3f} "
                             f"<= 0.05 ({secs:.0f}s)")


@pytest.mark.slow
def test_07_staleness_invariants():
    t0 = time.perf_counter()
    quad = DatasetSpec(kind="quadratic", dim=2, n_train=50)
    cases = [("cyclic", 5, 4, 300_000), ("uniform_random", 5, 8, 250_000),
             ("uniform_random", 10, 20, 250_000)]
    total, violations = 0, 0
    cyclic = None
    for kind, K, tau, T in cases:
        cfg = RunConfig(algorithm="asgd", model="quadratic", dataset=quad, T=T, edges=K, tau_max=tau,
                        delay=kind, loss_stride=T, eval_stride=0, seed=K)
        rec = run(cfg)  # the cloud asserts FIFO sequence and tau bound on every update
        origins = rec.t - rec.staleness
        violations += int(np.sum(rec.staleness > tau) + np.sum(rec.staleness < 0))
        for k in range(K):
            violations += int(np.sum(np.diff(origins[rec.edge == k]) <= 0))
        violations += int(np.any(np.diff(rec.t) != 1))
        total += len(rec)
        if kind == "cyclic":
            cyclic = rec
    # trace replay of a uniform order, through the full engine as well
    sched = DelaySchedule("uniform_random", 3, 5)
    edges, _ = simulate_arrivals(sched, 200_000, seed=11)
    cfg = RunConfig(algorithm="asgd", model="quadratic", dataset=quad, T=200_000, edges=3, tau_max=5,
                    delay="trace", trace=tuple(edges.tolist()), loss_stride=200_000, eval_stride=0)
    rec = run(cfg)
    violations += int(rec.results["staleness_violations"]) + int(np.any(rec.edge != edges))
    total += len(rec)
    warm = cyclic.staleness[5:]
    trips = round_trips(cyclic.edge)[5:]
    cyc_ok = bool(np.all(warm == 4) and np.all(trips == 5))
    secs = time.perf_counter() - t0
    ok = total >= 1_000_000 and violations == 0 and cyc_ok
    assert acceptance_report(7, "staleness invariants", ok,
                             f"{total} updates, {violations} violations; cyclic K=5 after warm-up: "
                             f"t-origin = {set(warm.tolist())}, per-edge round trip = "
                             f"{set(trips.tolist())} ({secs:.0f}s)")


def test_08_sim_net_equivalence():
    cfg = RunConfig(algorithm="mapa", model="quadratic", edges=1, T=500, epsilon=0.5, sigma=1.0,
                    dataset=DatasetSpec(kind="quadratic", dim=10, condition=4.0, noise_sigma=1.0),
                    x0_norm=3.0, eval_stride=0)
    net_rec, codes = run_loopback(cfg, timeout=60)
    sim_rec = run(cfg, trace_schedule(net_rec))
    same = sim_rec == net_rec and np.array_equal(sim_rec.final_x, net_rec.final_x)
    ok = same and codes == [0]
    assert acceptance_report(8, "sim/net equivalence", ok,
                             f"fingerprints {net_rec.fingerprint()[:12]} (net) vs "
                             f"{sim_rec.fingerprint()[:12]} (sim), edge exit codes {codes}")


@needs_mnist
def test_09_inversion():
    from afldp.data import bundled_mnist
    from afldp.experiments import inversion_demo
    t0 = time.perf_counter()
    eps = (1e12, 1.0, 0.1, 0.01)
    res = inversion_demo(bundled_mnist(), eps, trials=100, seed=0)
    med = [res["by_epsilon"][e]["median_cosine"] for e in eps]
    secs = time.perf_counter() - t0
    ok = med[0] >= 0.999 and med[1] >= med[2] >= med[3] and secs < 60
    assert acceptance_report(9, "inversion demo", ok,
                             "median cosine " + ", ".join(f"eps={e:g}: {m:.4f}" for e, m in zip(eps, med))
                             + f" ({secs:.1f}s)")


def test_10_accountant():
    led = dp.BudgetLedger()
    for t in range(1, 101):
        dp.compose_budget(led, 0.01, t)
    rec = run(RunConfig(algorithm="audp", model="quadratic", dataset=DatasetSpec(kind="quadratic", dim=3),
                        T=100, edges=1, epsilon=0.01, x0_norm=1.0, eval_stride=0))
    ok = led.total == 1.0 and rec.results["ledger_total"] == 1.0
    assert acceptance_report(10, "accountant", ok,
                             f"ledger total {led.total!r}, engine run total {rec.results['ledger_total']!r}")
