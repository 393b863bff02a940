"""Desk-scale synthetic fine-tuning for verifying the method's premises.

The network is two linear layers with an elementwise rectifier between
them: y = W2 relu(W1 x). Fine-tuning is full-batch plain gradient descent
on a summed squared-error loss against a per-task linear teacher, with
hand-derived analytic gradients, so the accumulated-gradient identity
theta_T - theta_0 = -sum_t eta_t grad(theta_{t-1}) is exact up to
rounding. The rectifier inputs never change (they are the data); the
instrumented quantity is the second layer's input, recorded every
iteration for every sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, TensorEntry
from .diagnostics import ConsistencyReport, input_consistency, reconstruct_input
from .errors import DimensionError, DivergenceError
from .tensorops import Matrix, Vector

LAYER1 = "l1.weight"
LAYER2 = "l2.weight"


@dataclass
class SynthTask:
    """One synthetic task: seeded data plus a rotated linear teacher.

    Targets sit a ``shift_scale``-sized linear drift away from the
    pretrained function, so fine-tuning stays in the small-update regime
    that real fine-tuning (and the interference analysis) lives in.
    """

    seed: int
    d_in: int = 8
    d_h: int = 16
    d_out: int = 4
    samples: int = 64
    shift_scale: float = 0.25
    spectrum_decay: float = 0.75

    def __post_init__(self):
        if min(self.d_in, self.d_h, self.d_out) < 2:
            raise ValueError("all dimensions must be >= 2")
        if self.samples < self.d_in:
            raise ValueError(
                f"need at least d_in={self.d_in} samples for the inputs to span, got {self.samples}"
            )

    def inputs(self) -> np.ndarray:
        """Task inputs (samples x d_in)."""
        return self.data()[0]

    def data(self, pretrained: Checkpoint | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Inputs and targets; targets drift off the pretrained outputs by
        a rotated random linear teacher (pure teacher when no checkpoint
        is given)."""
        rng = np.random.default_rng(self.seed)
        spectrum = self.spectrum_decay ** np.arange(self.d_in)
        basis, _ = np.linalg.qr(rng.standard_normal((self.d_in, self.d_in)))
        x = (rng.standard_normal((self.samples, self.d_in)) * spectrum) @ basis.T
        teacher = rng.standard_normal((self.d_out, self.d_in)) / np.sqrt(self.d_in)
        rotation, _ = np.linalg.qr(rng.standard_normal((self.d_in, self.d_in)))
        targets = self.shift_scale * (x @ (teacher @ rotation).T)
        if pretrained is not None:
            _, _, base = _forward(
                pretrained.values(LAYER1), pretrained.values(LAYER2), x
            )
            targets = base + targets
        return x, targets


@dataclass
class FineTuneConfig:
    """Full-batch schedule: either a scalar rate or one rate per iteration."""

    iterations: int = 100
    learning_rate: float | Sequence[float] = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if np.isscalar(self.learning_rate):
            self.schedule = tuple(float(self.learning_rate) for _ in range(self.iterations))
        else:
            self.schedule = tuple(float(v) for v in self.learning_rate)
        if len(self.schedule) != self.iterations:
            raise ValueError(
                f"schedule length {len(self.schedule)} does not match iterations {self.iterations}"
            )
        # A zero rate is allowed so a no-op fine-tune can be expressed.
        if any(v < 0 for v in self.schedule):
            raise ValueError("learning rates must be >= 0")


@dataclass
class SynthTrace:
    """Everything a fine-tune run produced, one snapshot per iteration."""

    task: SynthTask
    schedule: tuple[float, ...]
    params: list[dict[str, Matrix]]           # iterations 0..T
    layer2_inputs: np.ndarray                 # (T+1, samples, d_h)
    losses: list[float]                       # evaluated at iterations 0..T
    grad_sums: dict[str, Matrix] = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.params) - 1

    def task_vector(self) -> dict[str, Matrix]:
        return {
            name: self.params[-1][name] - self.params[0][name]
            for name in self.params[0]
        }


def pretrain(seed: int, dims: tuple[int, int, int]) -> Checkpoint:
    """Deterministic random two-layer network for a task family.

    ``dims`` is (d_in, d_h, d_out); weights are scaled by 1/sqrt(fan_in).
    """
    d_in, d_h, d_out = dims
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((d_h, d_in)) / np.sqrt(d_in)
    w2 = rng.standard_normal((d_out, d_h)) / np.sqrt(d_h)
    return Checkpoint({
        LAYER1: TensorEntry("F64", (d_h, d_in), w1),
        LAYER2: TensorEntry("F64", (d_out, d_h), w2),
    })


def _forward(w1: Matrix, w2: Matrix, x: np.ndarray):
    z = x @ w1.T
    h = np.maximum(z, 0.0)
    y = h @ w2.T
    return z, h, y


def _loss_and_grads(w1: Matrix, w2: Matrix, x: np.ndarray, t: np.ndarray):
    """Summed squared error 0.5 * sum_n ||y_n - t_n||^2 and its gradients.

    Overflow is allowed through; the caller treats a non-finite loss as
    divergence.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        z, h, y = _forward(w1, w2, x)
        err = y - t
        value = 0.5 * float(np.sum(err * err))
        g_w2 = err.T @ h
        dh = err @ w2
        dz = dh * (z > 0.0)
        g_w1 = dz.T @ x
    return value, g_w1, g_w2, h


def _gradient_self_check(w1: Matrix, w2: Matrix, x: np.ndarray, t: np.ndarray,
                         g_w1: Matrix, g_w2: Matrix, h_fd: float = 1e-6) -> None:
    """Central-difference probe of both analytic gradients.

    Entries of w1 whose perturbation could push a rectifier pre-activation
    across its kink are skipped: the central difference is invalid there.
    """
    def fd(w1_, w2_, mat, i, j):
        bump = np.zeros_like(mat)
        bump[i, j] = h_fd
        if mat is w1_:
            lo = _loss_and_grads(w1_ - bump, w2_, x, t)[0]
            hi = _loss_and_grads(w1_ + bump, w2_, x, t)[0]
        else:
            lo = _loss_and_grads(w1_, w2_ - bump, x, t)[0]
            hi = _loss_and_grads(w1_, w2_ + bump, x, t)[0]
        return (hi - lo) / (2.0 * h_fd)

    z = x @ w1.T
    kink = np.any(np.abs(z)[:, :, None] <= h_fd * np.abs(x)[:, None, :], axis=0)
    err_sq = 0.0
    ref_sq = 0.0
    for i in range(w1.shape[0]):
        for j in range(w1.shape[1]):
            if kink[i, j]:
                continue
            est = fd(w1, w2, w1, i, j)
            err_sq += (est - g_w1[i, j]) ** 2
            ref_sq += g_w1[i, j] ** 2
    for i in range(w2.shape[0]):
        for j in range(w2.shape[1]):
            est = fd(w1, w2, w2, i, j)
            err_sq += (est - g_w2[i, j]) ** 2
            ref_sq += g_w2[i, j] ** 2
    if err_sq > (1e-6**2) * max(ref_sq, 1.0):
        raise AssertionError(
            f"analytic gradient disagrees with finite differences: "
            f"relative error {np.sqrt(err_sq / max(ref_sq, 1e-300)):.3e}"
        )


def finetune(
    pretrained: Checkpoint, task: SynthTask, cfg: FineTuneConfig,
    self_check: bool = True,
) -> tuple[Checkpoint, SynthTrace]:
    """Full-batch gradient descent on the task, recording every iteration."""
    w1 = pretrained.values(LAYER1).copy()
    w2 = pretrained.values(LAYER2).copy()
    if w1.shape != (task.d_h, task.d_in) or w2.shape != (task.d_out, task.d_h):
        raise DimensionError(
            f"checkpoint shapes {w1.shape}/{w2.shape} do not match task dims "
            f"({task.d_in}, {task.d_h}, {task.d_out})",
        )
    x, targets = task.data(pretrained)
    params = [{LAYER1: w1.copy(), LAYER2: w2.copy()}]
    inputs = np.empty((cfg.iterations + 1, task.samples, task.d_h))
    losses: list[float] = []
    grad_sums = {LAYER1: np.zeros_like(w1), LAYER2: np.zeros_like(w2)}
    for t, eta in enumerate(cfg.schedule):
        value, g_w1, g_w2, h = _loss_and_grads(w1, w2, x, targets)
        if not np.isfinite(value):
            raise DivergenceError(
                f"fine-tuning loss became non-finite at iteration {t}; reduce the learning rate",
                iteration=t,
            )
        if t == 0 and self_check:
            _gradient_self_check(w1, w2, x, targets, g_w1, g_w2)
        losses.append(value)
        inputs[t] = h
        grad_sums[LAYER1] += eta * g_w1
        grad_sums[LAYER2] += eta * g_w2
        w1 = w1 - eta * g_w1
        w2 = w2 - eta * g_w2
        params.append({LAYER1: w1.copy(), LAYER2: w2.copy()})
    value, _, _, h = _loss_and_grads(w1, w2, x, targets)
    if not np.isfinite(value):
        raise DivergenceError(
            f"fine-tuning loss became non-finite at iteration {cfg.iterations}; "
            "reduce the learning rate",
            iteration=cfg.iterations,
        )
    losses.append(value)
    inputs[cfg.iterations] = h
    expert = Checkpoint({
        LAYER1: TensorEntry("F64", w1.shape, w1),
        LAYER2: TensorEntry("F64", w2.shape, w2),
    })
    trace = SynthTrace(
        task=task, schedule=cfg.schedule, params=params,
        layer2_inputs=inputs, losses=losses, grad_sums=grad_sums,
    )
    return expert, trace


def apply_prefixes(params: Mapping[str, Matrix], x: Vector) -> list[Vector]:
    """Outputs of each layer prefix: [W1 x, W2 relu(W1 x)]."""
    z = params[LAYER1] @ x
    return [z, params[LAYER2] @ np.maximum(z, 0.0)]


def verify_input_consistency(trace: SynthTrace) -> ConsistencyReport:
    """Direction/magnitude drift of layer-2 inputs from first to last iteration."""
    first = trace.layer2_inputs[0]
    last = trace.layer2_inputs[-1]
    return input_consistency(list(first), list(last))


@dataclass
class ReconstructionComparison:
    """Reconstruction residuals of final inputs: true task vector vs random."""

    true_residuals: list[float]
    random_residuals: list[float]

    @property
    def median_true(self) -> float:
        return float(np.median(self.true_residuals))

    @property
    def median_random(self) -> float:
        return float(np.median(self.random_residuals))

    @property
    def true_below_random(self) -> bool:
        return self.median_true < self.median_random

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "kind": "reconstruction_comparison",
            "median_true": self.median_true,
            "median_random": self.median_random,
            "true_below_random": self.true_below_random,
            "true_residuals": self.true_residuals,
            "random_residuals": self.random_residuals,
        }


def matched_random_matrix(tau: Matrix, seed: int) -> Matrix:
    """Gaussian matrix with each row's mean and std matched to ``tau``'s."""
    rng = np.random.default_rng([seed, 0x7A5])
    out = np.empty_like(tau)
    for k in range(tau.shape[0]):
        mu = float(np.mean(tau[k]))
        sigma = float(np.std(tau[k]))
        out[k] = rng.normal(mu, sigma, size=tau.shape[1]) if sigma > 0 else mu
    return out


def verify_reconstruction(trace: SynthTrace) -> ReconstructionComparison:
    """Reconstruct each final layer-2 input from the layer-2 task vector's
    rows, and from a shape/moment-matched random matrix, reporting both
    residual distributions."""
    tau2 = trace.task_vector()[LAYER2]
    if tau2.shape[0] < 2:
        raise ValueError("layer-2 task vector needs at least 2 rows")
    random_mat = matched_random_matrix(tau2, trace.task.seed)
    finals = trace.layer2_inputs[-1]
    true_res = [reconstruct_input(tau2, x).relative_residual for x in finals]
    rand_res = [reconstruct_input(random_mat, x).relative_residual for x in finals]
    return ReconstructionComparison(true_residuals=true_res, random_residuals=rand_res)


@dataclass
class FixtureBundle:
    """A pretrained network plus fine-tuned experts for one family seed."""

    pretrained: Checkpoint
    experts: list[Checkpoint]
    traces: list[SynthTrace]
    tasks: list[SynthTask]


def task_family(
    family_seed: int, num_tasks: int = 4, d_in: int = 8, d_h: int = 16, d_out: int = 4,
    samples: int = 64, iterations: int = 100, learning_rate: float = 1e-3,
    shift_scale: float = 0.25, spectrum_decay: float = 0.75,
    self_check: bool = False,
) -> FixtureBundle:
    """Fine-tune ``num_tasks`` experts from one seeded pretrained network."""
    pre = pretrain(family_seed, (d_in, d_h, d_out))
    child_seeds = [int(s) for s in np.random.SeedSequence(family_seed).generate_state(num_tasks)]
    cfg = FineTuneConfig(iterations=iterations, learning_rate=learning_rate)
    experts, traces, tasks = [], [], []
    for seed in child_seeds:
        task = SynthTask(seed=seed, d_in=d_in, d_h=d_h, d_out=d_out, samples=samples,
                         shift_scale=shift_scale, spectrum_decay=spectrum_decay)
        expert, trace = finetune(pre, task, cfg, self_check=self_check)
        experts.append(expert)
        traces.append(trace)
        tasks.append(task)
    return FixtureBundle(pretrained=pre, experts=experts, traces=traces, tasks=tasks)


# Canonical fixture families. The single-task family is where the premise
# checks (input drift, reconstruction) run; the four-task family has
# largely distinct per-task input domains and is where the merge
# experiments run. Solver settings for the latter are desk-scale tuned:
# unit-scale synthetic task vectors need a much larger learning rate than
# real checkpoints.
PREMISE_DIMS = (8, 16, 4)
FOUR_TASK_DIMS = (16, 24, 16)
FOUR_TASK_DECAY = 0.5
FOUR_TASK_GD_STEPS = 1000
FOUR_TASK_GD_LR = 1e-3


def premise_fixture(seed: int) -> tuple[Checkpoint, SynthTrace]:
    """Single fine-tune used by the input-drift and reconstruction checks."""
    d_in, d_h, d_out = PREMISE_DIMS
    pre = pretrain(seed, PREMISE_DIMS)
    child = int(np.random.SeedSequence(seed).generate_state(1)[0])
    task = SynthTask(seed=child, d_in=d_in, d_h=d_h, d_out=d_out, samples=64)
    expert, trace = finetune(pre, task, FineTuneConfig(), self_check=False)
    return expert, trace


def four_task_family(seed: int) -> FixtureBundle:
    """The four-task merge fixture for one family seed."""
    d_in, d_h, d_out = FOUR_TASK_DIMS
    return task_family(
        seed, num_tasks=4, d_in=d_in, d_h=d_h, d_out=d_out, samples=64,
        iterations=100, learning_rate=1e-3, shift_scale=0.25,
        spectrum_decay=FOUR_TASK_DECAY,
    )


def save_trace_jsonl(trace: SynthTrace, path: str | Path) -> None:
    """Write the per-iteration layer-2 inputs as JSON lines.

    First line is a header object; each following line holds one iteration
    with the (samples x width) input block flattened row-major.
    """
    t_plus_1, samples, width = trace.layer2_inputs.shape
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "schema": 1,
            "kind": "synth_trace",
            "samples": samples,
            "width": width,
            "iterations": t_plus_1 - 1,
            "learning_rates": list(trace.schedule),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for t in range(t_plus_1):
            row = {"iteration": t, "inputs": trace.layer2_inputs[t].ravel().tolist()}
            f.write(json.dumps(row) + "\n")


def load_trace_jsonl(path: str | Path) -> tuple[dict, np.ndarray]:
    """Read a trace file back as (header, inputs of shape (T+1, samples, width))."""
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        samples, width = header["samples"], header["width"]
        blocks = np.empty((header["iterations"] + 1, samples, width))
        for line in f:
            row = json.loads(line)
            blocks[row["iteration"]] = np.asarray(row["inputs"]).reshape(samples, width)
    return header, blocks
