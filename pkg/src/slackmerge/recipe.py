"""Merge recipes: declarative description of one merge, plus dispatch to the engines."""

from __future__ import annotations

import os
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields, replace

from .documents import dump_document, load_document
from .exceptions import ValidationError
from .taskvec import compute_task_vector, task_arithmetic_merge, weighted_average
from .tensorio import DTYPES, Checkpoint, read_checkpoint, write_checkpoint
from .ties import GRANULARITIES, TiesEngine
from .validation import check_density, check_finite

__all__ = ["ALGORITHMS", "MergeRecipe", "MergeManifest", "load_recipe", "ties_merge", "run_recipe"]

ALGORITHMS = ("weighted_average", "task_arithmetic", "ties", "ties_sv", "dare_ties")
TIES_FAMILY = ("ties", "ties_sv", "dare_ties")


@dataclass
class MergeRecipe:
    """One merge, fully specified.

    ``base`` and ``models`` are file paths or already-loaded checkpoints.
    ``weights`` is used by ``weighted_average`` (default uniform) and
    ``task_arithmetic`` (per-model coefficient, default 1, multiplied by
    ``scale``). ``densities`` defaults to 1.0 per model for the TIES family.
    """

    algorithm: str
    base: str | Checkpoint | None = None
    models: list = field(default_factory=list)
    densities: list[float] | None = None
    scale: float = 1.0
    slack: float | None = None
    protected_model: int = 0
    trim_granularity: str = "per_tensor"
    normalize: bool = False
    drop_p: float | None = None
    seed: int = 0
    output_dtype: str | None = None
    weights: list[float] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        n = len(self.models)
        if n == 0:
            raise ValidationError("recipe lists no models")
        if self.algorithm == "weighted_average":
            if n < 2:
                raise ValidationError("weighted_average needs at least two models")
        elif self.base is None:
            raise ValidationError(f"{self.algorithm} requires a base checkpoint")
        if self.densities is not None:
            if len(self.densities) != n:
                raise ValidationError(f"{len(self.densities)} densities given for {n} models")
            for k in self.densities:
                check_density(k)
        if self.weights is not None:
            if len(self.weights) != n:
                raise ValidationError(f"{len(self.weights)} weights given for {n} models")
            for w in self.weights:
                check_finite(w, "weight")
        check_finite(self.scale, "scale")
        if self.trim_granularity not in GRANULARITIES:
            raise ValidationError(f"trim_granularity must be one of {GRANULARITIES}")
        if self.output_dtype is not None and self.output_dtype not in DTYPES:
            raise ValidationError(f"output_dtype must be one of {DTYPES}")
        if self.slack is not None:
            check_density(self.slack, "slack")
        if self.algorithm == "ties_sv":
            if n != 2:
                raise ValidationError(f"ties_sv merges exactly 2 models, recipe lists {n}")
            if self.slack is None:
                raise ValidationError("ties_sv requires a slack value")
            if self.protected_model not in (0, 1):
                raise ValidationError("protected_model must be 0 or 1")
        if self.algorithm == "dare_ties":
            if self.drop_p is None or not 0.0 <= float(self.drop_p) < 1.0:
                raise ValidationError("dare_ties requires drop_p in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, doc: Mapping, root: str | None = None) -> MergeRecipe:
        """Build from a parsed document; relative paths resolve against ``root``."""
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown recipe keys: {sorted(unknown)}")
        if "algorithm" not in doc:
            raise ValidationError("recipe has no 'algorithm'")
        kwargs = dict(doc)
        if root is not None:
            if isinstance(kwargs.get("base"), str):
                kwargs["base"] = os.path.join(root, kwargs["base"])
            kwargs["models"] = [
                os.path.join(root, m) if isinstance(m, str) else m for m in kwargs.get("models", [])
            ]
        for key in ("densities", "weights", "models"):
            if kwargs.get(key) is not None and not isinstance(kwargs[key], (list, tuple)):
                raise ValidationError(f"recipe key {key!r} must be a list")
            if kwargs.get(key) is not None:
                kwargs[key] = list(kwargs[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["base"] = _reference(self.base)
        doc["models"] = [_reference(m) for m in self.models]
        return doc

    def with_values(self, **changes) -> MergeRecipe:
        return replace(self, **changes)


def _reference(x):
    if isinstance(x, Checkpoint):
        return x.source or f"<in-memory {x.fingerprint[:16]}>"
    return x


def load_recipe(path) -> MergeRecipe:
    path = os.fspath(path)
    return MergeRecipe.from_dict(load_document(path), root=os.path.dirname(os.path.abspath(path)))


def _load(ref) -> Checkpoint:
    return ref if isinstance(ref, Checkpoint) else read_checkpoint(ref)


def _engine(recipe: MergeRecipe, base: Checkpoint, models: Sequence[Checkpoint]) -> TiesEngine:
    densities = recipe.densities if recipe.densities is not None else [1.0] * len(models)
    return TiesEngine(
        base,
        models,
        densities,
        scale=recipe.scale,
        granularity=recipe.trim_granularity,
        normalize=recipe.normalize,
        slack=recipe.slack if recipe.algorithm == "ties_sv" else None,
        protected_model=recipe.protected_model,
        drop_p=recipe.drop_p if recipe.algorithm == "dare_ties" else None,
        seed=recipe.seed,
        output_dtype=recipe.output_dtype,
    )


def _dispatch(recipe: MergeRecipe, base, models) -> tuple[Checkpoint, TiesEngine | None]:
    if recipe.algorithm == "weighted_average":
        weights = recipe.weights or [1.0 / len(models)] * len(models)
        return weighted_average(models, weights, recipe.output_dtype), None
    if recipe.algorithm == "task_arithmetic":
        weights = recipe.weights or [1.0] * len(models)
        tvs = [compute_task_vector(m, base) for m in models]
        coeffs = [recipe.scale * w for w in weights]
        return task_arithmetic_merge(base, tvs, coeffs, recipe.output_dtype), None
    engine = _engine(recipe, base, models)
    return engine.output(), engine


def ties_merge(recipe: MergeRecipe, base: Checkpoint | None = None, models=None) -> Checkpoint:
    """Run a TIES-family recipe on loaded checkpoints and return the lazy result.

    ``base`` and ``models`` default to the references inside the recipe.
    """
    recipe.validate()
    if recipe.algorithm not in TIES_FAMILY:
        raise ValidationError(f"ties_merge handles {TIES_FAMILY}, not {recipe.algorithm!r}")
    base = _load(base if base is not None else recipe.base)
    models = [_load(m) for m in (models if models is not None else recipe.models)]
    return _engine(recipe, base, models).output()


@dataclass
class MergeManifest:
    recipe: dict
    inputs: dict
    output: dict
    retained: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": "slackmerge-manifest/1", **asdict(self)}

    def write(self, path) -> None:
        dump_document(self.to_dict(), path)


def manifest_path(out_path) -> str:
    return os.fspath(out_path) + ".manifest.json"


def run_recipe(
    recipe: MergeRecipe, out_path, threads: int = 1, write_manifest: bool = True
) -> tuple[Checkpoint, MergeManifest]:
    """Execute ``recipe``, stream the result to ``out_path`` and describe it.

    The manifest is written next to the output as ``<out_path>.manifest.json``.
    Output bytes do not depend on ``threads``.
    """
    recipe.validate()
    base = _load(recipe.base) if recipe.base is not None else None
    models = [_load(m) for m in recipe.models]
    merged, engine = _dispatch(recipe, base, models)
    fingerprint = write_checkpoint(merged, out_path, threads=max(1, int(threads)))

    inputs = {
        "models": [
            {"path": _reference(ref), "fingerprint": m.fingerprint}
            for ref, m in zip(recipe.models, models)
        ]
    }
    if base is not None:
        inputs["base"] = {"path": _reference(recipe.base), "fingerprint": base.fingerprint}
    manifest = MergeManifest(
        recipe=recipe.to_dict(),
        inputs=inputs,
        output={"path": os.fspath(out_path), "fingerprint": fingerprint},
    )
    if engine is not None:
        manifest.retained = {
            f"model_{i}": {
                "total": t.retained_total,
                "per_tensor": dict(sorted(t.retained_per_tensor.items())),
            }
            for i, t in enumerate(engine.trimmed)
        }
        manifest.summary = engine.summary()
    if write_manifest:
        manifest.write(manifest_path(out_path))
    return read_checkpoint(out_path), manifest
