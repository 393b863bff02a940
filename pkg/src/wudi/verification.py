"""The verification suite behind ``wudi verify``.

Each check replays one of the method's verifiable properties at desk scale
and returns a pass/fail row: analytic gradients against central
differences, closed-form stationarity, the data-free interference bound,
gradient-descent vs closed-form agreement, the premise metrics against the
stored fixture calibration, and the headline interference reduction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import load_calibration
from .diagnostics import check_interference_bound
from .errors import WudiError
from .experiments import interference_comparison
from .solver import LayerProblem, loss, loss_gradient, solve_closed_form, solve_gd
from .synth import premise_fixture, verify_input_consistency, verify_reconstruction
from .tensorops import frobenius_norm_sq


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _random_problem(rng, max_rows=16, max_cols=32, max_tasks=5) -> LayerProblem:
    rows = int(rng.integers(2, max_rows + 1))
    cols = int(rng.integers(2, max_cols + 1))
    tasks = int(rng.integers(1, max_tasks + 1))
    return LayerProblem([rng.standard_normal((rows, cols)) for _ in range(tasks)])


def check_gradient(instances: int = 100, seed: int = 0) -> CheckResult:
    """Analytic loss gradient vs central finite differences (h = 1e-5)."""
    rng = np.random.default_rng(seed)
    h = 1e-5
    worst = 0.0
    for _ in range(instances):
        problem = _random_problem(rng)
        tau_m = rng.standard_normal(problem.shape)
        grad = loss_gradient(problem, tau_m)
        fd = np.zeros_like(grad)
        for i in range(tau_m.shape[0]):
            for j in range(tau_m.shape[1]):
                bump = np.zeros_like(tau_m)
                bump[i, j] = h
                fd[i, j] = (loss(problem, tau_m + bump) - loss(problem, tau_m - bump)) / (2 * h)
        rel = np.sqrt(frobenius_norm_sq(fd - grad) / max(frobenius_norm_sq(grad), 1e-300))
        worst = max(worst, rel)
    return CheckResult("gradient-vs-finite-differences", worst <= 1e-6,
                       f"worst relative error {worst:.3e} over {instances} instances")


def check_stationarity(instances: int = 100, seed: int = 1) -> CheckResult:
    """Closed form zeroes the regularized objective's gradient."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        for omega in (1e-6, 1e-2, 1.0):
            problem = _random_problem(rng, max_rows=12, max_cols=12, max_tasks=4)
            tau_m = solve_closed_form(problem, omega)
            d_in = problem.shape[1]
            a = np.zeros((d_in, d_in))
            b = np.zeros(problem.shape)
            for t, w in zip(problem.taus, problem.weights):
                gram = t.T @ t + omega * np.eye(d_in)
                a += w * gram
                b += w * t @ gram
            resid = np.sqrt(frobenius_norm_sq(tau_m @ a - b))
            bound = 1e-8 * (1.0 + np.sqrt(frobenius_norm_sq(b)))
            worst = max(worst, resid / bound)
    return CheckResult("closed-form-stationarity", worst <= 1.0,
                       f"worst residual/bound ratio {worst:.3e} over {instances} instances")


def check_bound(instances: int = 200, seed: int = 2) -> CheckResult:
    """The data-free interference bound holds on random instances."""
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(instances):
        d_out = int(rng.integers(2, 9))
        d_in = int(rng.integers(2, 13))
        tau = rng.standard_normal((d_out, d_in))
        delta = rng.standard_normal((int(rng.integers(2, 9)), d_in))
        samples = [rng.standard_normal(d_in) for _ in range(int(rng.integers(3, 12)))]
        if not check_interference_bound(tau, delta, samples).satisfied:
            violations += 1
    return CheckResult("interference-bound", violations == 0,
                       f"{violations} violations over {instances} instances")


def check_gd_cfs_agreement(instances: int = 20, seed: int = 42) -> CheckResult:
    """Adam descent lands on the closed-form solution on full-rank problems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        problem = LayerProblem([rng.standard_normal((4, 6)) for _ in range(3)])
        reference = solve_closed_form(problem, omega=1e-8)
        solution, _ = solve_gd(problem, steps=2000, lr=1e-2)
        rel = np.sqrt(
            frobenius_norm_sq(solution - reference) / frobenius_norm_sq(reference)
        )
        worst = max(worst, rel)
    return CheckResult("gd-vs-closed-form", worst <= 1e-2,
                       f"worst relative distance {worst:.3e} over {instances} instances")


def check_premises() -> CheckResult:
    """Input drift and reconstruction quality against the stored calibration."""
    calibration = load_calibration()
    seeds = calibration["config"]["seeds"]
    directions = []
    wins = 0
    for seed in seeds:
        _, trace = premise_fixture(seed)
        directions.append(verify_input_consistency(trace).delta_direction)
        wins += verify_reconstruction(trace).true_below_random
    median = float(np.median(directions))
    threshold = calibration["delta_direction_threshold"]
    ok = median < threshold and wins >= len(seeds) - 2
    return CheckResult(
        "premises-drift-and-reconstruction", ok,
        f"median drift {median:.4f} vs threshold {threshold:.4f}; "
        f"reconstruction wins {wins}/{len(seeds)}",
    )


def check_headline(seeds=range(20)) -> CheckResult:
    """Merged-model interference: gradient-descent solver vs both baselines."""
    report = interference_comparison(seeds)
    wudi = report["interference"]["wudi-gd"]["per_seed_final"]
    ta = report["interference"]["task-arith"]["per_seed_final"]
    avg = report["interference"]["average"]["per_seed_final"]
    wins_ta = sum(w < t for w, t in zip(wudi, ta))
    wins_avg = sum(w < a for w, a in zip(wudi, avg))
    need = len(wudi) - 2
    return CheckResult(
        "interference-reduction", wins_ta >= need and wins_avg >= need,
        f"beats task-arithmetic {wins_ta}/{len(wudi)}, averaging {wins_avg}/{len(wudi)}",
    )


def run_all(fast: bool = False) -> list[CheckResult]:
    """Run the whole battery; ``fast`` trims instance counts for smoke runs."""
    scale = 0.2 if fast else 1.0
    n = lambda k: max(5, int(k * scale))  # noqa: E731
    results = []
    for check in (
        lambda: check_gradient(n(100)),
        lambda: check_stationarity(n(100)),
        lambda: check_bound(n(200)),
        lambda: check_gd_cfs_agreement(n(20)),
        check_premises,
        lambda: check_headline(range(5 if fast else 20)),
    ):
        try:
            results.append(check())
        except WudiError as e:  # a crash is a failed check, not a crashed suite
            results.append(CheckResult(check.__name__, False, f"raised {e!r}"))
    return results
