"""Task vectors: expert-minus-pretrained deltas, layer eligibility, assembly.

A task vector splits a checkpoint delta into merge-eligible linear layers
(rank-2 weight matrices the solver operates on) and passthrough deltas for
everything else (biases, norms, embeddings, higher-rank tensors).
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, TensorEntry
from .errors import CheckpointIntegrityError, DimensionError
from .tensorops import Matrix, matmul

DEFAULT_EXCLUDE = ("*embed*", "*position*")

REASON_RANK = "rank≠2"
REASON_PATTERN = "pattern-excluded"
REASON_DIM = "dimension-below-threshold"


@dataclass
class MergeConfig:
    """Solver choice and hyperparameters for a merge run.

    ``epsilon`` rescales the merged task vector when it is added back to the
    pretrained weights; the method is designed to work at 1.0. ``lambda_``
    is the task-arithmetic coefficient, ``omega`` the ridge coefficient of
    the closed-form path (the gradient-descent path is unregularized).
    """

    method: str = "wudi-gd"
    epsilon: float = 1.0
    lambda_: float = 1.0
    omega: float = 0.0
    steps: int = 300
    learning_rate: float = 1e-5
    balanced: bool = True
    nonlinear_policy: str = "pretrained"
    include: tuple[str, ...] = ("*",)
    exclude: tuple[str, ...] = DEFAULT_EXCLUDE

    METHODS = ("wudi-gd", "wudi-cfs", "average", "task-arith")
    POLICIES = ("pretrained", "mean", "sum")

    def __post_init__(self):
        if self.method not in self.METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {self.METHODS}")
        if self.nonlinear_policy not in self.POLICIES:
            raise ValueError(
                f"unknown nonlinear policy {self.nonlinear_policy!r}; expected one of {self.POLICIES}"
            )
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.epsilon <= 2.0:
            raise ValueError(f"epsilon must be in (0, 2], got {self.epsilon}")
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if not self.lambda_ > 0:
            raise ValueError(f"lambda must be > 0, got {self.lambda_}")
        self.include = tuple(self.include)
        self.exclude = tuple(self.exclude)


@dataclass
class LayerClassification:
    """Partition of tensor names into merge-eligible layers and the rest."""

    eligible: list[str]
    excluded: dict[str, str]  # name -> reason

    def to_dict(self) -> dict:
        return {"eligible": list(self.eligible), "excluded": dict(self.excluded)}


@dataclass
class TaskVector:
    """Per-layer delta matrices plus passthrough deltas for one expert."""

    layers: dict[str, Matrix]
    passthrough: dict[str, np.ndarray]
    source_id: int = 0

    def __post_init__(self):
        self.layers = dict(sorted(self.layers.items()))
        self.passthrough = dict(sorted(self.passthrough.items()))
        for name, mat in self.layers.items():
            if mat.ndim != 2:
                raise DimensionError(f"task-vector layer {name!r} has rank {mat.ndim}, expected 2")


def _matches(name: str, patterns: tuple[str, ...]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def classify_layers(pretrained: Checkpoint, cfg: MergeConfig) -> LayerClassification:
    """Split tensors into merge-eligible linear layers and excluded tensors.

    Eligible: rank 2, both dimensions >= 2, matching an include pattern and
    no exclude pattern. Everything else is excluded with a reason.
    """
    eligible: list[str] = []
    excluded: dict[str, str] = {}
    for name, entry in pretrained.items():
        if len(entry.shape) != 2:
            excluded[name] = REASON_RANK
        elif min(entry.shape) < 2:
            excluded[name] = REASON_DIM
        elif not _matches(name, cfg.include) or _matches(name, cfg.exclude):
            excluded[name] = REASON_PATTERN
        else:
            eligible.append(name)
    return LayerClassification(eligible=eligible, excluded=excluded)


def extract_task_vector(
    pretrained: Checkpoint, expert: Checkpoint, classification: LayerClassification,
    source_id: int = 0,
) -> TaskVector:
    """Elementwise expert-minus-pretrained delta, split by eligibility."""
    layers: dict[str, Matrix] = {}
    passthrough: dict[str, np.ndarray] = {}
    for name in pretrained.names():
        if name not in expert:
            raise CheckpointIntegrityError(f"expert is missing tensor {name!r}", tensor=name)
        delta = expert.values(name) - pretrained.values(name)
        if name in classification.excluded:
            passthrough[name] = delta
        else:
            layers[name] = delta
    return TaskVector(layers=layers, passthrough=passthrough, source_id=source_id)


def restore_lora(a: Matrix, b: Matrix) -> Matrix:
    """Densify a low-rank adapter pair into a full delta: b @ a."""
    return matmul(b, a)


def extract_lora_task_vector(
    pretrained: Checkpoint, adapter: Checkpoint, classification: LayerClassification,
    source_id: int = 0, a_suffix: str = ".lora_A", b_suffix: str = ".lora_B",
) -> TaskVector:
    """Build a task vector from an adapter checkpoint of paired low-rank tensors.

    Tensors named ``<layer><a_suffix>`` / ``<layer><b_suffix>`` are restored
    to a dense delta for ``<layer>``; the layer must exist in the pretrained
    checkpoint. Unpaired adapter tensors are an integrity error.
    """
    a_names: dict[str, str] = {}
    b_names: dict[str, str] = {}
    for name in adapter.names():
        if name.endswith(a_suffix):
            a_names[name[: -len(a_suffix)]] = name
        elif name.endswith(b_suffix):
            b_names[name[: -len(b_suffix)]] = name
        else:
            raise CheckpointIntegrityError(
                f"adapter tensor {name!r} has neither suffix {a_suffix!r} nor {b_suffix!r}",
                tensor=name,
            )
    unpaired = set(a_names) ^ set(b_names)
    if unpaired:
        base = sorted(unpaired)[0]
        raise CheckpointIntegrityError(
            f"adapter pair for {base!r} is incomplete", tensor=base
        )
    layers: dict[str, Matrix] = {}
    passthrough: dict[str, np.ndarray] = {}
    for base, a_name in a_names.items():
        if base not in pretrained:
            raise CheckpointIntegrityError(
                f"pretrained checkpoint has no tensor {base!r} for adapter pair", tensor=base
            )
        delta = restore_lora(adapter.values(a_name), adapter.values(b_names[base]))
        if delta.shape != pretrained.entry(base).shape:
            raise DimensionError(
                f"restored delta for {base!r} has shape {delta.shape}, "
                f"layer has {pretrained.entry(base).shape}",
                (delta.shape, pretrained.entry(base).shape),
            )
        if base in classification.excluded:
            passthrough[base] = delta
        else:
            layers[base] = delta
    # Tensors untouched by the adapter carry a zero delta and need no entry.
    return TaskVector(layers=layers, passthrough=passthrough, source_id=source_id)


def assemble_merged(
    pretrained: Checkpoint,
    tau_m: TaskVector,
    cfg: MergeConfig,
    expert_taus: list[TaskVector] | None = None,
) -> Checkpoint:
    """Add the merged task vector back onto the pretrained weights.

    Eligible layers get ``pretrained + epsilon * tau_m``. Every other tensor
    follows ``cfg.nonlinear_policy``: keep the pretrained value, or add the
    epsilon-scaled mean or sum of the experts' passthrough deltas.
    """
    expert_taus = expert_taus or []
    tensors: dict[str, TensorEntry] = {}
    for name, entry in pretrained.items():
        base = entry.values
        if name in tau_m.layers:
            delta = tau_m.layers[name]
            if delta.shape != entry.shape:
                raise DimensionError(
                    f"merged delta for {name!r} has shape {delta.shape}, layer has {entry.shape}",
                    (delta.shape, entry.shape),
                )
            merged = base + cfg.epsilon * delta
        elif cfg.nonlinear_policy == "pretrained":
            merged = base
        else:
            deltas = [tv.passthrough[name] for tv in expert_taus if name in tv.passthrough]
            if not deltas:
                merged = base
            else:
                total = np.sum(deltas, axis=0)
                if cfg.nonlinear_policy == "mean":
                    total = total / len(deltas)
                merged = base + cfg.epsilon * total
        tensors[name] = TensorEntry(dtype=entry.dtype, shape=entry.shape, values=merged)
    return Checkpoint(tensors, pretrained.metadata)
