"""Fixture-level experiments: interference comparisons and loss ablations.

These drive the synthetic four-task family end to end (fine-tune, solve,
measure) and return plain dicts ready for JSON reports and plotting.
"""

from __future__ import annotations

import numpy as np

from .diagnostics import relative_interference
from .solver import LayerProblem, ablation_projections, solve_baseline, solve_closed_form, solve_gd
from .synth import (
    FOUR_TASK_GD_LR,
    FOUR_TASK_GD_STEPS,
    FixtureBundle,
    LAYER1,
    LAYER2,
    apply_prefixes,
    four_task_family,
    verify_input_consistency,
)

LAYERS = (LAYER1, LAYER2)


def _theta(bundle: FixtureBundle) -> dict:
    return {name: bundle.pretrained.values(name) for name in LAYERS}


def _solve_method(
    taus: list[dict], method: str, steps: int, lr: float,
    lambda_: float = 1.0, omega: float = 1e-6,
    balanced: bool = True, projection_builder=None,
) -> dict:
    merged = {}
    for name in LAYERS:
        mats = [tv[name] for tv in taus]
        if method == "wudi-gd":
            problem = LayerProblem(mats, balanced=balanced)
            projections = projection_builder(problem, name) if projection_builder else None
            merged[name], _ = solve_gd(problem, steps=steps, lr=lr, projections=projections)
        elif method == "wudi-cfs":
            merged[name] = solve_closed_form(LayerProblem(mats, balanced=balanced), omega)
        elif method == "average":
            merged[name] = solve_baseline(mats, "average")
        elif method == "task-arith":
            merged[name] = solve_baseline(mats, "task_arithmetic", lambda_)
        else:
            raise ValueError(f"unknown method {method!r}")
    return merged


def _interference(bundle: FixtureBundle, merged: dict) -> dict:
    theta = _theta(bundle)
    taus = [trace.task_vector() for trace in bundle.traces]
    per_task = []
    for i, trace in enumerate(bundle.traces):
        samples = list(bundle.tasks[i].inputs())
        report = relative_interference(apply_prefixes, theta, merged, taus[i], samples, task_id=i)
        per_task.append(report.per_depth)
    depths = len(per_task[0])
    return {
        "per_task_per_depth": per_task,
        "per_depth_mean": [float(np.mean([pt[d] for pt in per_task])) for d in range(depths)],
        "final_mean": float(np.mean([pt[-1] for pt in per_task])),
    }


def interference_comparison(
    seeds, methods=("wudi-gd", "task-arith", "average"),
    steps: int = FOUR_TASK_GD_STEPS, lr: float = FOUR_TASK_GD_LR, lambda_: float = 1.0,
) -> dict:
    """Merge the four-task fixture with each method and measure interference.

    Also reports the input drift of each seed's traces, since the fixtures
    double as the premise-verification corpus.
    """
    seeds = list(seeds)
    interference: dict[str, dict] = {
        m: {"per_seed_final": [], "per_depth_mean": None, "_depth_acc": []} for m in methods
    }
    drift_rows = []
    for seed in seeds:
        bundle = four_task_family(seed)
        taus = [trace.task_vector() for trace in bundle.traces]
        for method in methods:
            merged = _solve_method(taus, method, steps=steps, lr=lr, lambda_=lambda_)
            result = _interference(bundle, merged)
            interference[method]["per_seed_final"].append(result["final_mean"])
            interference[method]["_depth_acc"].append(result["per_depth_mean"])
        drifts = [verify_input_consistency(trace) for trace in bundle.traces]
        drift_rows.append({
            "seed": seed,
            "delta_direction": float(np.mean([d.delta_direction for d in drifts])),
            "delta_magnitude": float(np.mean([d.delta_magnitude for d in drifts])),
        })
    for method in methods:
        acc = np.asarray(interference[method].pop("_depth_acc"))
        interference[method]["per_depth_mean"] = [float(v) for v in acc.mean(axis=0)]
        interference[method]["final_median"] = float(
            np.median(interference[method]["per_seed_final"])
        )
    return {
        "schema": 1,
        "kind": "diagnose_report",
        "fixture": "four-task",
        "seeds": seeds,
        "solver": {"steps": steps, "learning_rate": lr, "lambda": lambda_},
        "interference": interference,
        "consistency": {"per_seed": drift_rows},
    }


def ablation_comparison(
    seeds, variants=("full", "random-gaussian", "row-subset", "unbalanced"),
    fraction: float = 0.5, variant_seed: int = 0,
    steps: int = FOUR_TASK_GD_STEPS, lr: float = FOUR_TASK_GD_LR,
) -> dict:
    """Final interference of the loss variants, side by side.

    ``full`` is the standard balanced solve; ``unbalanced`` drops the
    per-task weighting; the other two swap the projection subspace.
    """
    seeds = list(seeds)
    results: dict[str, dict] = {v: {"per_seed_final": []} for v in variants}
    for seed in seeds:
        bundle = four_task_family(seed)
        taus = [trace.task_vector() for trace in bundle.traces]
        for variant in variants:
            balanced = variant != "unbalanced"
            builder = None
            if variant in ("random-gaussian", "row-subset"):
                kind = variant.replace("-", "_")

                def builder(problem, layer_name, _kind=kind):
                    layer_salt = 1 if layer_name == LAYER1 else 2
                    return ablation_projections(
                        problem, _kind, fraction=fraction,
                        seed=variant_seed * 1000 + seed * 10 + layer_salt,
                    )

            merged = _solve_method(
                taus, "wudi-gd", steps=steps, lr=lr,
                balanced=balanced, projection_builder=builder,
            )
            results[variant]["per_seed_final"].append(_interference(bundle, merged)["final_mean"])
    for variant in variants:
        vals = results[variant]["per_seed_final"]
        results[variant]["final_mean"] = float(np.mean(vals))
        results[variant]["final_median"] = float(np.median(vals))
    return {
        "schema": 1,
        "kind": "ablation_report",
        "fixture": "four-task",
        "seeds": seeds,
        "fraction": fraction,
        "solver": {"steps": steps, "learning_rate": lr},
        "variants": results,
    }
