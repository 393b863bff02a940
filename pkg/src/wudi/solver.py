"""Per-layer merged-task-vector solvers.

For one linear layer with expert task vectors t_1..t_P (each d_out x d_in),
the merged task vector t_m minimizes

    L(t_m) = sum_i w_i * || (t_m - t_i) t_i^T ||_F^2

where w_i = 1 / ||t_i||_F^2 when balanced weighting is on (so large task
vectors tolerate proportionally more deviation) and w_i = 1 otherwise.
Two solvers are provided: Adam gradient descent from the init sum_i t_i,
relying on the implicit regularization of gradient methods, and the
closed-form stationary point of the ridge-regularized objective

    t_m = [sum_i w_i t_i (t_i^T t_i + omega I)] [sum_i w_i (t_i^T t_i + omega I)]^-1.

Note the ridge term enters each task's summand, so the effective
regularization scales with sum_i w_i.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import (
    DegenerateSubsetError,
    DimensionError,
    DivergenceError,
    MergeLayerError,
    SingularMatrixError,
)
from .taskvector import (
    MergeConfig,
    TaskVector,
    assemble_merged,
    classify_layers,
    extract_lora_task_vector,
    extract_task_vector,
)
from .tensorops import Matrix, as_matrix, frobenius_norm_sq, matmul, solve_spd

REPORT_SCHEMA = 1


@dataclass
class LayerProblem:
    """Task vectors of one layer plus their loss weights.

    A zero task vector contributes an identically-zero loss term, so its
    balanced weight (nominally 1/0) is set to 0.
    """

    taus: list[Matrix]
    balanced: bool = True
    weights: list[float] = field(init=False)

    def __post_init__(self):
        if not self.taus:
            raise ValueError("a layer problem needs at least one task vector")
        self.taus = [as_matrix(t) for t in self.taus]
        shape = self.taus[0].shape
        for t in self.taus[1:]:
            if t.shape != shape:
                raise DimensionError(
                    f"task vectors disagree on shape: {shape} vs {t.shape}", (shape, t.shape)
                )
        if self.balanced:
            self.weights = [
                (1.0 / n if (n := frobenius_norm_sq(t)) > 0.0 else 0.0) for t in self.taus
            ]
        else:
            self.weights = [1.0] * len(self.taus)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taus[0].shape


@dataclass
class AdamState:
    """Moment estimates for one matrix parameter."""

    m: Matrix
    v: Matrix
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))

    def update(self, param: Matrix, grad: Matrix, lr: float) -> Matrix:
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step)
        v_hat = self.v / (1.0 - self.beta2 ** self.step)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class SolveTrace:
    losses: list[float]
    wall_time: float
    final_grad_norm: float


def _check_shape(problem: LayerProblem, tau_m: Matrix) -> Matrix:
    tau_m = as_matrix(tau_m)
    if tau_m.shape != problem.shape:
        raise DimensionError(
            f"candidate shape {tau_m.shape} does not match problem shape {problem.shape}",
            (tau_m.shape, problem.shape),
        )
    return tau_m


def loss(problem: LayerProblem, tau_m: Matrix, projections: list[Matrix] | None = None) -> float:
    """Weighted interference loss of a candidate merged task vector.

    ``projections`` swaps the matrices whose rows the residual is projected
    onto (used by the subspace ablations); by default the task vectors
    project themselves.
    """
    tau_m = _check_shape(problem, tau_m)
    mats = problem.taus if projections is None else projections
    total = 0.0
    for tau_i, proj, w in zip(problem.taus, mats, problem.weights):
        total += w * frobenius_norm_sq(matmul(tau_m - tau_i, proj.T))
    return total


def loss_gradient(
    problem: LayerProblem, tau_m: Matrix, projections: list[Matrix] | None = None
) -> Matrix:
    """Analytic gradient of :func:`loss` with respect to the candidate."""
    tau_m = _check_shape(problem, tau_m)
    mats = problem.taus if projections is None else projections
    grad = np.zeros(problem.shape)
    for tau_i, proj, w in zip(problem.taus, mats, problem.weights):
        grad += 2.0 * w * matmul(matmul(tau_m - tau_i, proj.T), proj)
    return grad


def solve_gd(
    problem: LayerProblem,
    steps: int = 300,
    lr: float = 1e-5,
    projections: list[Matrix] | None = None,
) -> tuple[Matrix, SolveTrace]:
    """Minimize the interference loss with Adam from the init sum_i t_i.

    The trace records the loss at the start of every step. Raises a
    divergence error if the loss goes non-finite, or if the final loss
    exceeds the initial one.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    start = time.perf_counter()
    tau_m = np.sum(problem.taus, axis=0)
    adam = AdamState.zeros(problem.shape)
    losses: list[float] = []
    for it in range(steps):
        value = loss(problem, tau_m, projections)
        if not np.isfinite(value):
            raise DivergenceError(f"loss became non-finite at iteration {it}", iteration=it)
        losses.append(value)
        grad = loss_gradient(problem, tau_m, projections)
        tau_m = adam.update(tau_m, grad, lr)
    final = loss(problem, tau_m, projections)
    if not np.isfinite(final):
        raise DivergenceError(f"loss became non-finite at iteration {steps}", iteration=steps)
    if final > losses[0] + 1e-12 * (1.0 + losses[0]):
        raise DivergenceError(
            f"final loss {final:.6e} exceeds initial loss {losses[0]:.6e}; reduce the learning rate",
            iteration=steps,
        )
    grad_norm = float(np.sqrt(frobenius_norm_sq(loss_gradient(problem, tau_m, projections))))
    return tau_m, SolveTrace(losses=losses, wall_time=time.perf_counter() - start,
                             final_grad_norm=grad_norm)


def solve_closed_form(problem: LayerProblem, omega: float = 0.0) -> Matrix:
    """Stationary point of the ridge-regularized interference objective.

    Solves t_m A = B with A = sum_i w_i (t_i^T t_i + omega I) and
    B = sum_i w_i t_i (t_i^T t_i + omega I). A is only guaranteed positive
    definite for omega > 0; with omega = 0 a rank-deficient Gram sum fails
    loudly rather than being silently jittered.
    """
    if omega < 0:
        raise ValueError(f"omega must be >= 0, got {omega}")
    d_in = problem.shape[1]
    a = np.zeros((d_in, d_in))
    b = np.zeros(problem.shape)
    eye = np.eye(d_in)
    for tau_i, w in zip(problem.taus, problem.weights):
        gram = matmul(tau_i.T, tau_i) + omega * eye
        a += w * gram
        b += w * matmul(tau_i, gram)
    try:
        return solve_spd(a, b)
    except SingularMatrixError as e:
        raise SingularMatrixError(
            f"aggregated Gram matrix is singular (pivot {e.pivot}); "
            "use a positive ridge coefficient omega",
            pivot=e.pivot,
        ) from e


def solve_baseline(taus: list[Matrix], method: str, lambda_: float = 1.0) -> Matrix:
    """Reference merges: plain averaging or scaled task-vector addition."""
    if not taus:
        raise ValueError("no task vectors to merge")
    taus = [as_matrix(t) for t in taus]
    total = np.sum(taus, axis=0)
    if method == "average":
        return total / len(taus)
    if method == "task_arithmetic":
        if not lambda_ > 0:
            raise ValueError(f"lambda must be > 0, got {lambda_}")
        return lambda_ * total
    raise ValueError(f"unknown baseline {method!r}; expected 'average' or 'task_arithmetic'")


def ablation_projections(
    problem: LayerProblem, variant: str, fraction: float = 1.0, seed: int = 0
) -> list[Matrix]:
    """Replacement projection matrices for the subspace-selection ablations.

    ``random_gaussian`` draws a shape-matched matrix per task from a normal
    with that task vector's global mean and standard deviation.
    ``row_subset`` keeps a random fraction of each task vector's rows,
    sampled without replacement. Deterministic given the seed.
    """
    rows, _ = problem.shape
    out: list[Matrix] = []
    for idx, tau_i in enumerate(problem.taus):
        rng = np.random.default_rng([seed, idx])
        if variant == "random_gaussian":
            mu = float(np.mean(tau_i))
            sigma = float(np.std(tau_i))
            out.append(rng.normal(mu, sigma, size=tau_i.shape) if sigma > 0
                       else np.full(tau_i.shape, mu))
        elif variant == "row_subset":
            if not 0.0 < fraction <= 1.0:
                raise ValueError(f"fraction must be in (0, 1], got {fraction}")
            k = int(fraction * rows)
            if k == 0:
                raise DegenerateSubsetError(
                    f"fraction {fraction} of {rows} rows selects an empty subset"
                )
            index = rng.choice(rows, size=k, replace=False)
            out.append(tau_i[np.sort(index), :])
        else:
            raise ValueError(f"unknown ablation variant {variant!r}")
    return out


def ablation_loss(
    problem: LayerProblem, tau_m: Matrix, variant: str, fraction: float = 1.0, seed: int = 0
) -> float:
    """Interference loss with the ablation's projection matrices."""
    return loss(problem, tau_m, ablation_projections(problem, variant, fraction, seed))


@dataclass
class LayerResult:
    tau_m: Matrix
    initial_loss: float
    final_loss: float
    trace: SolveTrace | None
    seconds: float


@dataclass
class MergeReport:
    """Per-layer solve records plus a summary of the merged task vector."""

    method: str
    config: dict
    num_experts: int
    layers: dict[str, dict]
    excluded: dict[str, str]
    timing: dict

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "kind": "merge_report",
            "method": self.method,
            "config": self.config,
            "num_experts": self.num_experts,
            "layers": self.layers,
            "excluded": self.excluded,
            "timing": self.timing,
        }

    def comparable_dict(self) -> dict:
        """The report without its nondeterministic timing section."""
        d = self.to_dict()
        d.pop("timing")
        return d


def _config_dict(cfg: MergeConfig) -> dict:
    return {
        "method": cfg.method,
        "epsilon": cfg.epsilon,
        "lambda": cfg.lambda_,
        "omega": cfg.omega,
        "steps": cfg.steps,
        "learning_rate": cfg.learning_rate,
        "balanced": cfg.balanced,
        "nonlinear_policy": cfg.nonlinear_policy,
        "include": list(cfg.include),
        "exclude": list(cfg.exclude),
    }


def solve_layer(
    taus: list[Matrix], cfg: MergeConfig, projections: list[Matrix] | None = None
) -> LayerResult:
    """Run the configured solver on one layer's task vectors."""
    start = time.perf_counter()
    problem = LayerProblem(taus, balanced=cfg.balanced)
    init = np.sum(problem.taus, axis=0)
    initial = loss(problem, init, projections)
    trace = None
    if cfg.method == "wudi-gd":
        tau_m, trace = solve_gd(problem, cfg.steps, cfg.learning_rate, projections)
    elif cfg.method == "wudi-cfs":
        tau_m = solve_closed_form(problem, cfg.omega)
    elif cfg.method == "average":
        tau_m = solve_baseline(taus, "average")
    else:
        tau_m = solve_baseline(taus, "task_arithmetic", cfg.lambda_)
    final = loss(problem, tau_m, projections)
    return LayerResult(
        tau_m=tau_m, initial_loss=initial, final_loss=final, trace=trace,
        seconds=time.perf_counter() - start,
    )


def merge(
    pretrained: Checkpoint,
    experts: list[Checkpoint],
    cfg: MergeConfig,
    threads: int = 1,
    lora: bool = False,
    layer_projections: dict[str, list[Matrix]] | None = None,
) -> tuple[Checkpoint, MergeReport]:
    """Merge expert checkpoints into one multi-task checkpoint.

    Each eligible layer is solved independently (optionally across a thread
    pool; results do not depend on scheduling). ``layer_projections`` feeds
    the ablation variants through to the per-layer solves.
    """
    if not experts:
        raise ValueError("no expert checkpoints to merge")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    t0 = time.perf_counter()
    classification = classify_layers(pretrained, cfg)
    if lora:
        taus = [
            extract_lora_task_vector(pretrained, e, classification, source_id=i)
            for i, e in enumerate(experts)
        ]
    else:
        taus = [
            extract_task_vector(pretrained, e, classification, source_id=i)
            for i, e in enumerate(experts)
        ]
    # LoRA adapters only cover the layers they ship; merge those.
    layer_names = sorted(
        set.intersection(*(set(tv.layers) for tv in taus)) if lora
        else set(classification.eligible)
    )

    def run(name: str) -> tuple[str, LayerResult]:
        try:
            proj = layer_projections.get(name) if layer_projections else None
            return name, solve_layer([tv.layers[name] for tv in taus], cfg, proj)
        except Exception as e:
            raise MergeLayerError(name, e) from e

    if threads == 1:
        results = dict(run(name) for name in layer_names)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(run, layer_names))

    tau_m = TaskVector(
        layers={name: res.tau_m for name, res in results.items()}, passthrough={}
    )
    merged = assemble_merged(pretrained, tau_m, cfg, expert_taus=taus)
    layer_records = {}
    for name in layer_names:
        res = results[name]
        record = {
            "initial_loss": res.initial_loss,
            "final_loss": res.final_loss,
            "tau_m_frobenius_norm": float(np.sqrt(frobenius_norm_sq(res.tau_m))),
            "shape": list(res.tau_m.shape),
        }
        if res.trace is not None:
            record["loss_trace"] = res.trace.losses
            record["final_grad_norm"] = res.trace.final_grad_norm
        layer_records[name] = record
    report = MergeReport(
        method=cfg.method,
        config=_config_dict(cfg),
        num_experts=len(experts),
        layers=layer_records,
        excluded=dict(sorted(classification.excluded.items())),
        timing={
            "total_seconds": time.perf_counter() - t0,
            "per_layer_seconds": {name: results[name].seconds for name in layer_names},
        },
    )
    return merged, report
