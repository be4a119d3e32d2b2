"""Checkpoint merging: weighted averaging, task arithmetic, DARE, TIES and
TIES with slack reservation, plus sign-conflict analysis and grid search."""

__version__ = "0.1.0"

from .conflict import ConflictReport, conflict_report, series_analysis
from .estimators import ConflictAnalyzer, TaskArithmeticMerger, TiesMerger, WeightedAverageMerger
from .exceptions import (
    CheckpointFormatError,
    EvalHookError,
    FingerprintMismatchError,
    MergeError,
    ValidationError,
)
from .recipe import MergeManifest, MergeRecipe, load_recipe, run_recipe, ties_merge
from .sweep import SweepResult, SweepSpec, enumerate_grid, grid_search, run_eval_hook
from .synth import SynthSpec, TensorSpec, generate_checkpoint, generate_ct_series
from .taskvec import (
    AveragingWeights,
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    dare_drop,
    task_arithmetic_merge,
    weighted_average,
)
from .tensorio import Checkpoint, TensorMeta, read_checkpoint, to_f32, write_checkpoint
from .ties import (
    SignTensor,
    SlackReservation,
    TiesEngine,
    TrimmedDelta,
    disjoint_merge,
    elect_signs,
    slack_reserve,
    trim,
)
