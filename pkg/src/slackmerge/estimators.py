"""scikit-learn style estimators wrapping the merge algorithms.

``fit(models, base)`` learns the merged task vector; ``transform(base)`` adds
it (scaled) to a base checkpoint. Hyperparameters live in ``__init__`` so the
usual ``get_params`` / ``set_params`` / ``clone`` machinery works, e.g.::

    merger = TiesMerger(densities=(0.2, 1.0), scale=1.0)
    merged = merger.fit_transform([sft, ct], base=base)
    merger.summary_["conflict"]["discard_proportion"]
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .conflict import series_analysis
from .exceptions import ValidationError
from .taskvec import (
    TaskVector,
    apply_task_vector,
    compute_task_vector,
    weighted_average,
)
from .tensorio import Checkpoint
from .ties import TiesEngine
from .validation import check_checkpoints

__all__ = ["WeightedAverageMerger", "TaskArithmeticMerger", "TiesMerger", "ConflictAnalyzer"]


class _DeltaMerger(TransformerMixin, BaseEstimator):
    scale: float
    output_dtype: str | None

    def transform(self, base: Checkpoint, allow_base_mismatch: bool = False) -> Checkpoint:
        check_is_fitted(self, "merged_delta_")
        return apply_task_vector(
            base, self.merged_delta_, self.scale, self.output_dtype, allow_base_mismatch
        )

    def fit_transform(self, models, base: Checkpoint = None, **fit_params) -> Checkpoint:
        return self.fit(models, base, **fit_params).transform(base)


class WeightedAverageMerger(TransformerMixin, BaseEstimator):
    """Elementwise ``sum_i w_i * theta_i``; uniform weights by default."""

    def __init__(self, weights=None, output_dtype=None):
        self.weights = weights
        self.output_dtype = output_dtype

    def fit(self, models, base=None):
        models = check_checkpoints(models, minimum=2)
        weights = self.weights if self.weights is not None else [1.0 / len(models)] * len(models)
        self.merged_ = weighted_average(models, weights, self.output_dtype)
        self.weights_ = np.asarray(weights, dtype=float)
        self.n_models_ = len(models)
        return self

    def transform(self, X=None):
        check_is_fitted(self, "merged_")
        return self.merged_

    def fit_transform(self, models, base=None, **fit_params):
        return self.fit(models, base).merged_


class TaskArithmeticMerger(_DeltaMerger):
    """``base + scale * sum_i c_i * tau_i``."""

    def __init__(self, coefficients=None, scale=1.0, output_dtype=None):
        self.coefficients = coefficients
        self.scale = scale
        self.output_dtype = output_dtype

    def fit(self, models, base=None):
        if base is None:
            raise ValidationError("task arithmetic needs a base checkpoint")
        models = check_checkpoints(models)
        coeffs = self.coefficients if self.coefficients is not None else [1.0] * len(models)
        if len(coeffs) != len(models):
            raise ValidationError(f"{len(coeffs)} coefficients given for {len(models)} models")
        tvs = [compute_task_vector(m, base) for m in models]
        c = [np.float32(x) for x in coeffs]

        def delta(name):
            acc = c[0] * tvs[0][name]
            for ci, tv in zip(c[1:], tvs[1:]):
                acc += ci * tv[name]
            return acc

        self.task_vectors_ = tvs
        self.merged_delta_ = TaskVector(base.structure(), delta, base.fingerprint)
        return self


class TiesMerger(_DeltaMerger):
    """TIES merging, with optional slack reservation (TIES-SV) or DARE dropout.

    Set ``slack`` to enable slack reservation for model ``protected_model``
    (two models only); set ``drop_p`` to apply DARE before trimming.
    """

    def __init__(
        self,
        densities=None,
        scale=1.0,
        trim_granularity="per_tensor",
        normalize=False,
        slack=None,
        protected_model=0,
        drop_p=None,
        seed=0,
        output_dtype=None,
    ):
        self.densities = densities
        self.scale = scale
        self.trim_granularity = trim_granularity
        self.normalize = normalize
        self.slack = slack
        self.protected_model = protected_model
        self.drop_p = drop_p
        self.seed = seed
        self.output_dtype = output_dtype

    def fit(self, models, base=None):
        if base is None:
            raise ValidationError("TIES needs a base checkpoint")
        models = check_checkpoints(models)
        densities = self.densities if self.densities is not None else [1.0] * len(models)
        engine = TiesEngine(
            base,
            models,
            list(densities),
            scale=self.scale,
            granularity=self.trim_granularity,
            normalize=self.normalize,
            slack=self.slack,
            protected_model=self.protected_model,
            drop_p=self.drop_p,
            seed=self.seed,
            output_dtype=self.output_dtype,
        )
        self.engine_ = engine
        self.trimmed_ = engine.trimmed
        self.merged_delta_ = TaskVector(base.structure(), engine.merged_delta, base.fingerprint)
        return self

    @property
    def summary_(self) -> dict:
        """Retention and conflict statistics for the tensors computed so far."""
        check_is_fitted(self, "engine_")
        return self.engine_.summary()


class ConflictAnalyzer(BaseEstimator):
    """Discard proportion of a protected model against a series of checkpoints."""

    def __init__(self, k_protected=0.2, k_other=1.0, granularity="global"):
        self.k_protected = k_protected
        self.k_other = k_other
        self.granularity = granularity

    def fit(self, checkpoints, base=None, protected=None, tags=None):
        if base is None or protected is None:
            raise ValidationError("ConflictAnalyzer.fit needs base and protected checkpoints")
        self.series_ = series_analysis(
            base,
            protected,
            list(checkpoints),
            self.k_protected,
            self.k_other,
            self.granularity,
            tags,
        )
        self.discard_proportions_ = np.array(
            [p.report.discard_proportion for p in self.series_], dtype=float
        )
        return self
