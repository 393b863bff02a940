"""Interference diagnostics and empirical checks of the method's premises.

The central quantity is the interference a merged layer inflicts on task i:
the expected squared deviation E||delta x||^2 of its outputs on task-i
inputs, where delta = tau_m - tau_i. Because each task vector's rows
approximately span that layer's fine-tuning inputs, an input can be
reconstructed as x = tau^T alpha + err, which yields the data-free upper
bound

    E||delta x||^2 <= omega1 * ||delta tau^T||_F^2 + omega2 * ||delta||_F^2

with omega1 = E[sum_k alpha_k^2 + 1] and
omega2 = E[(sum_k alpha_k^2 + 1) * ||err||^2]. These reconstruction
constants are computed here empirically from explicit least-squares
reconstructions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateSampleError, DimensionError
from .tensorops import Matrix, Vector, as_matrix, as_vector, cosine, frobenius_norm_sq, solve_spd

REPORT_SCHEMA = 1


@dataclass
class ConsistencyReport:
    """Mean direction and magnitude drift between two paired input sets."""

    delta_direction: float
    delta_magnitude: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "consistency_report",
            "delta_direction": self.delta_direction,
            "delta_magnitude": self.delta_magnitude,
            "sample_count": self.sample_count,
        }


def input_consistency(x_pre: Sequence[Vector], x_exp: Sequence[Vector]) -> ConsistencyReport:
    """Direction drift (1 - cosine) and relative norm drift, averaged.

    ``x_pre`` are the reference inputs (their norms normalize the magnitude
    drift) and must all be nonzero.
    """
    if len(x_pre) != len(x_exp):
        raise DimensionError(f"paired lists differ in length: {len(x_pre)} vs {len(x_exp)}")
    if not x_pre:
        raise ValueError("no samples")
    directions = []
    magnitudes = []
    for i, (p, e) in enumerate(zip(x_pre, x_exp)):
        p = as_vector(p)
        e = as_vector(e)
        np_norm = float(np.linalg.norm(p))
        ne_norm = float(np.linalg.norm(e))
        if np_norm == 0.0 or ne_norm == 0.0:
            raise DegenerateSampleError(f"sample {i} has zero norm", index=i)
        directions.append(1.0 - cosine(e, p))
        magnitudes.append(abs(ne_norm - np_norm) / np_norm)
    return ConsistencyReport(
        delta_direction=float(np.mean(directions)),
        delta_magnitude=float(np.mean(magnitudes)),
        sample_count=len(directions),
    )


@dataclass
class ReconstructionResult:
    """Least-squares expansion of an input over a task vector's rows."""

    coefficients: Vector
    residual: Vector
    relative_residual: float


def reconstruct_input(tau: Matrix, x: Vector) -> ReconstructionResult:
    """Solve min_alpha ||tau^T alpha - x||_2 over the rows of ``tau``.

    Uses normal equations on tau tau^T with a jitter of 1e-12 times the
    mean Gram diagonal, which keeps nearly-dependent rows solvable without
    moving residuals by more than ~1e-8 relative.
    """
    tau = as_matrix(tau)
    x = as_vector(x)
    if x.shape[0] != tau.shape[1]:
        raise DimensionError(
            f"input length {x.shape[0]} does not match row width {tau.shape[1]}",
            (tau.shape, x.shape),
        )
    x_norm = float(np.linalg.norm(x))
    if x_norm == 0.0:
        raise DegenerateSampleError("cannot reconstruct a zero input", index=0)
    gram = tau @ tau.T
    jitter = 1e-12 * (np.trace(gram) / gram.shape[0] if gram.shape[0] else 1.0)
    gram = gram + max(jitter, 1e-300) * np.eye(gram.shape[0])
    rhs = (tau @ x)[None, :]
    alpha = solve_spd(gram, rhs)[0]
    residual = x - tau.T @ alpha
    return ReconstructionResult(
        coefficients=alpha,
        residual=residual,
        relative_residual=float(np.linalg.norm(residual)) / x_norm,
    )


@dataclass
class BoundCheckResult:
    """Both sides of the data-free interference bound on a sample set."""

    lhs: float
    omega1: float
    omega2: float
    rhs: float
    satisfied: bool

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "bound_check",
            "lhs": self.lhs,
            "omega1": self.omega1,
            "omega2": self.omega2,
            "rhs": self.rhs,
            "satisfied": self.satisfied,
        }


def check_interference_bound(
    tau: Matrix, delta: Matrix, samples: Sequence[Vector]
) -> BoundCheckResult:
    """Evaluate mean ||delta x||^2 against its reconstruction-based bound.

    The reconstruction constants come from least-squares expansions of the
    samples over ``tau``'s rows; the bound is an inequality that holds for
    any coefficients, so a violation beyond 1e-9 slack indicates a bug.
    """
    tau = as_matrix(tau)
    delta = as_matrix(delta)
    if delta.shape[1] != tau.shape[1]:
        raise DimensionError(
            f"delta width {delta.shape[1]} does not match task-vector width {tau.shape[1]}",
            (delta.shape, tau.shape),
        )
    if not samples:
        raise ValueError("no samples")
    lhs_terms = []
    alpha_terms = []
    weighted_err = []
    for x in samples:
        x = as_vector(x)
        rec = reconstruct_input(tau, x)
        amp = float(np.sum(rec.coefficients**2)) + 1.0
        lhs_terms.append(float(np.sum((delta @ x) ** 2)))
        alpha_terms.append(amp)
        weighted_err.append(amp * float(np.sum(rec.residual**2)))
    lhs = float(np.mean(lhs_terms))
    omega1 = float(np.mean(alpha_terms))
    omega2 = float(np.mean(weighted_err))
    rhs = omega1 * frobenius_norm_sq(delta @ tau.T) + omega2 * frobenius_norm_sq(delta)
    return BoundCheckResult(
        lhs=lhs, omega1=omega1, omega2=omega2, rhs=rhs,
        satisfied=lhs <= rhs * (1.0 + 1e-9),
    )


@dataclass
class InterferenceReport:
    """Relative output deviation of a merged model from one expert, per depth."""

    task_id: int
    per_depth: list[float]
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "interference_report",
            "task_id": self.task_id,
            "per_depth": self.per_depth,
            "sample_count": self.sample_count,
        }


PrefixEvaluator = Callable[[Mapping[str, Matrix], Vector], list[Vector]]


def _shifted(theta: Mapping[str, Matrix], tau: Mapping[str, Matrix]) -> dict[str, Matrix]:
    out = dict(theta)
    for name, delta in tau.items():
        out[name] = out[name] + delta
    return out


def relative_interference(
    model_apply: PrefixEvaluator,
    theta: Mapping[str, Matrix],
    tau_m: Mapping[str, Matrix],
    tau_i: Mapping[str, Matrix],
    samples: Sequence[Vector],
    task_id: int = 0,
) -> InterferenceReport:
    """Mean relative error between merged and expert outputs at each depth.

    ``model_apply(params, x)`` must return the outputs of every layer
    prefix, shallowest first. The expert outputs are the reference norms
    and must be nonzero for every sample and depth.
    """
    if not samples:
        raise ValueError("no samples")
    merged = _shifted(theta, tau_m)
    expert = _shifted(theta, tau_i)
    sums: list[list[float]] = []
    for idx, x in enumerate(samples):
        x = as_vector(x)
        out_m = model_apply(merged, x)
        out_i = model_apply(expert, x)
        if len(out_m) != len(out_i):
            raise DimensionError(f"evaluator returned {len(out_m)} vs {len(out_i)} prefix outputs")
        if not sums:
            sums = [[] for _ in out_m]
        for depth, (ym, yi) in enumerate(zip(out_m, out_i)):
            ref = float(np.linalg.norm(yi))
            if ref == 0.0:
                raise DegenerateSampleError(
                    f"sample {idx} has zero reference output at depth {depth + 1}", index=idx
                )
            sums[depth].append(float(np.linalg.norm(np.asarray(ym) - np.asarray(yi))) / ref)
    return InterferenceReport(
        task_id=task_id,
        per_depth=[float(np.mean(vals)) for vals in sums],
        sample_count=len(samples),
    )
