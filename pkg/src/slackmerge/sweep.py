"""Grid search over merge recipes, scored by an external evaluation command.

The hook protocol: the command is run with ``{candidate}`` replaced by the
candidate checkpoint path (also exported as ``MERGE_CANDIDATE``); it must exit
0 and print a finite decimal score as the last line of stdout. Higher wins.
"""

from __future__ import annotations

import copy
import itertools
import logging
import math
import os
import re
import shlex
import subprocess
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

from .documents import dump_document, load_document
from .exceptions import EvalHookError, MergeError, ValidationError
from .recipe import MergeRecipe, manifest_path, run_recipe

__all__ = [
    "DEFAULT_DENSITY_GRID",
    "SweepSpec",
    "SweepResult",
    "CandidateResult",
    "enumerate_grid",
    "run_eval_hook",
    "grid_search",
    "load_sweep_spec",
]

log = logging.getLogger(__name__)

DEFAULT_DENSITY_GRID = (0.01, 0.2, 0.4, 0.6, 0.8, 1.0)
PLACEHOLDER = "{candidate}"
ENV_VAR = "MERGE_CANDIDATE"

_RECIPE_FIELDS = {f.name for f in fields(MergeRecipe)}
_LIST_FIELDS = ("densities", "weights")
_ALIASES = {"lambda": "scale"}
_INDEXED = re.compile(r"^(?P<field>\w+)\[(?P<index>\d+)\]$")
_DENSITY_ALIAS = re.compile(r"^k(?P<number>[1-9]\d*)$")


def _resolve_field(name: str, n_models: int) -> tuple[str, int | None]:
    """Map a grid key to (recipe field, list index or None)."""
    if name in _ALIASES:
        return _ALIASES[name], None
    m = _DENSITY_ALIAS.match(name)
    if m:
        field_name, index = "densities", int(m["number"]) - 1
    else:
        m = _INDEXED.match(name)
        if m:
            field_name, index = m["field"], int(m["index"])
        else:
            field_name, index = name, None
    if field_name not in _RECIPE_FIELDS or field_name in ("base", "models", "algorithm"):
        raise ValidationError(f"grid field {name!r} is not a sweepable recipe field")
    if index is not None:
        if field_name not in _LIST_FIELDS:
            raise ValidationError(f"grid field {name!r}: {field_name!r} is not a per-model list")
        if index >= n_models:
            raise ValidationError(f"grid field {name!r} refers to model {index}, recipe has {n_models}")
    return field_name, index


@dataclass
class SweepSpec:
    """A grid over recipe fields.

    Grid keys are recipe field names (``scale``, ``slack``, ...), indexed list
    entries (``densities[0]``), or the shorthands ``k1, k2, ...`` for densities
    and ``lambda`` for scale. An empty grid sweeps every model's density over
    :data:`DEFAULT_DENSITY_GRID`.
    """

    recipe_template: dict
    eval_command: str | Sequence[str]
    workdir: str
    grid: dict[str, list] = field(default_factory=dict)
    keep_candidates: bool = False
    timeout: float | None = None
    jobs: int = 1
    threads: int = 1
    root: str | None = None

    def __post_init__(self):
        self.recipe_template = dict(self.recipe_template)
        if not self.grid:
            n = len(self.recipe_template.get("models", []))
            self.grid = {f"k{i + 1}": list(DEFAULT_DENSITY_GRID) for i in range(n)}
        self.validate()

    @property
    def n_models(self) -> int:
        return len(self.recipe_template.get("models", []))

    def validate(self) -> None:
        if "algorithm" not in self.recipe_template:
            raise ValidationError("recipe template has no 'algorithm'")
        if not self.grid:
            raise ValidationError("grid is empty")
        targets = set()
        for name, values in self.grid.items():
            if not isinstance(values, (list, tuple)) or len(values) == 0:
                raise ValidationError(f"grid list for {name!r} must be a non-empty list")
            target = _resolve_field(name, self.n_models)
            if target in targets:
                raise ValidationError(f"grid field {name!r} duplicates another key")
            targets.add(target)
        if int(self.jobs) < 1:
            raise ValidationError("jobs must be at least 1")

    @property
    def n_candidates(self) -> int:
        return math.prod(len(v) for v in self.grid.values())

    @classmethod
    def from_dict(cls, doc: Mapping, root: str | None = None) -> SweepSpec:
        known = {"recipe", "grid", "eval_command", "workdir", "keep_candidates", "timeout", "jobs", "threads"}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown sweep spec keys: {sorted(unknown)}")
        for key in ("recipe", "eval_command", "workdir"):
            if key not in doc:
                raise ValidationError(f"sweep spec requires {key!r}")
        workdir = doc["workdir"]
        if root is not None:
            workdir = os.path.join(root, workdir)
        return cls(
            recipe_template=doc["recipe"],
            eval_command=doc["eval_command"],
            workdir=workdir,
            grid=dict(doc.get("grid") or {}),
            keep_candidates=bool(doc.get("keep_candidates", False)),
            timeout=doc.get("timeout"),
            jobs=int(doc.get("jobs", 1)),
            threads=int(doc.get("threads", 1)),
            root=root,
        )


def load_sweep_spec(path) -> SweepSpec:
    path = os.fspath(path)
    return SweepSpec.from_dict(load_document(path), root=os.path.dirname(os.path.abspath(path)))


def enumerate_grid(spec: SweepSpec) -> list[dict]:
    """Cartesian product over the grid, field names sorted, first field slowest."""
    spec.validate()
    keys = sorted(spec.grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(spec.grid[k] for k in keys))]


def materialize(spec: SweepSpec, assignment: Mapping) -> MergeRecipe:
    doc = copy.deepcopy(spec.recipe_template)
    n = spec.n_models
    for name, value in assignment.items():
        field_name, index = _resolve_field(name, n)
        if index is None:
            doc[field_name] = value
        else:
            current = doc.get(field_name)
            values = list(current) if current is not None else [1.0] * n
            values[index] = value
            doc[field_name] = values
    return MergeRecipe.from_dict(doc, root=spec.root)


def run_eval_hook(command, candidate_path, timeout: float | None = None, assignment=None) -> float:
    """Run the evaluation command on one candidate and parse its score."""
    candidate_path = os.fspath(candidate_path)
    args = shlex.split(command) if isinstance(command, str) else list(command)
    if not args:
        raise EvalHookError("empty evaluation command", assignment)
    args = [a.replace(PLACEHOLDER, candidate_path) for a in args]
    env = {**os.environ, ENV_VAR: candidate_path}
    try:
        proc = subprocess.run(args, capture_output=True, text=True, env=env, timeout=timeout)
    except subprocess.TimeoutExpired:
        raise EvalHookError(f"evaluation timed out after {timeout}s", assignment) from None
    except OSError as exc:
        raise EvalHookError(f"could not run evaluation command: {exc}", assignment) from None
    if proc.returncode != 0:
        tail = proc.stderr.strip().splitlines()[-1:] or [""]
        raise EvalHookError(
            f"evaluation exited with status {proc.returncode} for {dict(assignment or {})}: {tail[0]}",
            assignment,
        )
    lines = proc.stdout.strip().splitlines()
    last = lines[-1].strip() if lines else ""
    try:
        score = float(last)
    except ValueError:
        raise EvalHookError(f"evaluation printed non-numeric score {last!r}", assignment) from None
    if not math.isfinite(score):
        raise EvalHookError(f"evaluation printed non-finite score {last!r}", assignment)
    return score


@dataclass
class CandidateResult:
    index: int
    assignment: dict
    score: float | None = None
    fingerprint: str | None = None
    path: str | None = None
    error: str | None = None
    recipe: dict | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "assignment": self.assignment,
            "score": self.score,
            "fingerprint": self.fingerprint,
            "error": self.error,
        }


@dataclass
class SweepResult:
    candidates: list[CandidateResult]
    ranked: list[CandidateResult]
    best: CandidateResult

    @property
    def failed(self) -> list[CandidateResult]:
        return [c for c in self.candidates if not c.ok]

    def to_dict(self) -> dict:
        return {
            "n_candidates": len(self.candidates),
            "candidates": [c.to_dict() for c in self.candidates],
            "ranking": [c.index for c in self.ranked],
            "best": {
                **self.best.to_dict(),
                "path": self.best.path,
                "recipe": self.best.recipe,
            },
        }


def _candidate_path(spec: SweepSpec, index: int) -> str:
    return os.path.join(spec.workdir, f"candidate_{index:04d}.safetensors")


def _evaluate(spec: SweepSpec, index: int, assignment: dict) -> CandidateResult:
    result = CandidateResult(index, dict(assignment))
    path = _candidate_path(spec, index)
    try:
        recipe = materialize(spec, assignment)
        result.recipe = recipe.to_dict()
        _, manifest = run_recipe(recipe, path, threads=spec.threads)
        result.path = path
        result.fingerprint = manifest.output["fingerprint"]
        result.score = run_eval_hook(spec.eval_command, path, spec.timeout, assignment)
    except (MergeError, OSError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        result.score = None
        log.warning("candidate %d %s failed: %s", index, assignment, exc)
    return result


def _discard(result: CandidateResult) -> None:
    if result.path is None:
        return
    for p in (result.path, manifest_path(result.path)):
        if os.path.exists(p):
            os.remove(p)
    result.path = None


def grid_search(spec: SweepSpec) -> SweepResult:
    """Merge, evaluate and rank every grid point.

    Failed candidates are kept in the result with their error and excluded from
    the ranking. Unless ``keep_candidates`` is set, only the best candidate's
    checkpoint is left in ``workdir``. A report is written to
    ``workdir/sweep_report.json``.
    """
    assignments = enumerate_grid(spec)
    os.makedirs(spec.workdir, exist_ok=True)

    if spec.jobs > 1:
        pool = ThreadPoolExecutor(max_workers=spec.jobs)
        futures = [pool.submit(_evaluate, spec, i, a) for i, a in enumerate(assignments)]
        stream = (f.result() for f in futures)
    else:
        pool = None
        stream = (_evaluate(spec, i, a) for i, a in enumerate(assignments))

    candidates: list[CandidateResult] = []
    best: CandidateResult | None = None
    try:
        # consumed in enumeration order regardless of completion order
        for result in stream:
            candidates.append(result)
            log.info("candidate %d %s -> %s", result.index, result.assignment, result.score)
            if spec.keep_candidates:
                if result.ok and (best is None or result.score > best.score):
                    best = result
                continue
            if not result.ok:
                _discard(result)
            elif best is None or result.score > best.score:
                if best is not None:
                    _discard(best)
                best = result
            else:
                _discard(result)
    finally:
        if pool is not None:
            pool.shutdown()

    ranked = sorted((c for c in candidates if c.ok), key=lambda c: (-c.score, c.index))
    if not ranked:
        errors = "; ".join(f"#{c.index}: {c.error}" for c in candidates[:3])
        raise EvalHookError(f"all {len(candidates)} candidates failed ({errors})")
    result = SweepResult(candidates, ranked, ranked[0])
    dump_document(result.to_dict(), os.path.join(spec.workdir, "sweep_report.json"))
    return result
