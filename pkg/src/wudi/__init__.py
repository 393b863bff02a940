"""Data-free multi-task checkpoint merging guided by task vectors."""

from .checkpoint import (
    Checkpoint,
    CompatibilityReport,
    Manifest,
    TensorEntry,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    validate_compatible,
)
from .taskvector import (
    LayerClassification,
    MergeConfig,
    TaskVector,
    assemble_merged,
    classify_layers,
    extract_lora_task_vector,
    extract_task_vector,
    restore_lora,
)
from .solver import (
    LayerProblem,
    MergeReport,
    SolveTrace,
    ablation_loss,
    loss,
    loss_gradient,
    merge,
    solve_baseline,
    solve_closed_form,
    solve_gd,
)
from .diagnostics import (
    BoundCheckResult,
    ConsistencyReport,
    InterferenceReport,
    ReconstructionResult,
    check_interference_bound,
    input_consistency,
    reconstruct_input,
    relative_interference,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CompatibilityReport",
    "Manifest",
    "TensorEntry",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
    "validate_compatible",
    "LayerClassification",
    "MergeConfig",
    "TaskVector",
    "assemble_merged",
    "classify_layers",
    "extract_lora_task_vector",
    "extract_task_vector",
    "restore_lora",
    "LayerProblem",
    "MergeReport",
    "SolveTrace",
    "ablation_loss",
    "loss",
    "loss_gradient",
    "merge",
    "solve_baseline",
    "solve_closed_form",
    "solve_gd",
    "BoundCheckResult",
    "ConsistencyReport",
    "InterferenceReport",
    "ReconstructionResult",
    "check_interference_bound",
    "input_consistency",
    "reconstruct_input",
    "relative_interference",
    "__version__",
]
