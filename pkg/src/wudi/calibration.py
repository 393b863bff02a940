"""Generate and load the fixture calibration record.

The premise checks (input drift, reconstruction comparison) are gated by
thresholds measured from the fixtures themselves at generation time, never
by invented constants. ``python -m wudi.calibration`` regenerates the
packaged record; the verification suite then replays the same seeds and
compares against the stored values.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .synth import PREMISE_DIMS, premise_fixture, verify_input_consistency, verify_reconstruction

CALIBRATION_SEEDS = tuple(range(20))
DATA_FILE = "calibration.json"


def generate_calibration(seeds=CALIBRATION_SEEDS) -> dict:
    """Run the premise fixtures and record per-seed metrics and thresholds.

    The drift threshold is the 95th percentile of the per-seed mean
    direction drift; the loss-ratio bound records the worst fine-tuning
    loss reduction seen across the fixtures.
    """
    d_in, d_h, d_out = PREMISE_DIMS
    per_seed = {}
    for seed in seeds:
        _, trace = premise_fixture(seed)
        consistency = verify_input_consistency(trace)
        comparison = verify_reconstruction(trace)
        per_seed[str(seed)] = {
            "delta_direction": consistency.delta_direction,
            "delta_magnitude": consistency.delta_magnitude,
            "loss_ratio": trace.losses[-1] / trace.losses[0],
            "reconstruction_median_true": comparison.median_true,
            "reconstruction_median_random": comparison.median_random,
            "true_below_random": comparison.true_below_random,
        }
    directions = [v["delta_direction"] for v in per_seed.values()]
    ratios = [v["loss_ratio"] for v in per_seed.values()]
    return {
        "schema": 1,
        "kind": "calibration",
        "config": {
            "d_in": d_in,
            "d_h": d_h,
            "d_out": d_out,
            "samples": 64,
            "iterations": 100,
            "learning_rate": 1e-3,
            "seeds": list(seeds),
        },
        "per_seed": per_seed,
        "delta_direction_threshold": float(np.quantile(directions, 0.95)),
        "max_loss_ratio": float(max(ratios)),
        "reconstruction_wins": int(sum(v["true_below_random"] for v in per_seed.values())),
    }


def load_calibration() -> dict:
    """Load the packaged calibration record."""
    with resources.files("wudi").joinpath("data", DATA_FILE).open("r") as f:
        return json.load(f)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Regenerate the fixture calibration record.")
    parser.add_argument(
        "--out",
        default=str(Path(__file__).parent / "data" / DATA_FILE),
        help="output path (default: the packaged data file)",
    )
    args = parser.parse_args(argv)
    record = generate_calibration()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
