import json
import os
import sys

import numpy as np
import pytest

from slackmerge import EvalHookError, SweepSpec, ValidationError, enumerate_grid, grid_search, run_eval_hook, write_checkpoint
from slackmerge.sweep import DEFAULT_DENSITY_GRID, materialize

from helpers import ckpt

# scores a candidate from its manifest: -(k1 - 0.4)^2
QUADRATIC_HOOK = """
import json, sys
doc = json.load(open(sys.argv[1] + ".manifest.json"))
k1 = doc["recipe"]["densities"][0]
print("loading", sys.argv[1])
print(-(k1 - 0.4) ** 2)
"""


def script(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body)
    return f"{sys.executable} {path} {{candidate}}"


@pytest.fixture
def inputs(tmp_path, worked_example):
    paths = []
    for name, c in zip(("base", "m1", "m2"), worked_example):
        write_checkpoint(c, tmp_path / f"{name}.safetensors")
        paths.append(f"{name}.safetensors")
    return {"algorithm": "ties", "base": paths[0], "models": paths[1:]}


def make_spec(tmp_path, recipe, command, **kwargs):
    return SweepSpec(recipe, command, str(tmp_path / "work"), root=str(tmp_path), **kwargs)


def test_two_by_one_grid(inputs, tmp_path):
    spec = make_spec(tmp_path, inputs, "true", grid={"k1": [0.2, 1.0], "k2": [0.5]})
    assert enumerate_grid(spec) == [{"k1": 0.2, "k2": 0.5}, {"k1": 1.0, "k2": 0.5}]


def test_single_point_grid(inputs, tmp_path):
    assert len(enumerate_grid(make_spec(tmp_path, inputs, "true", grid={"lambda": [1.0]}))) == 1


def test_default_grid_is_six_by_six(inputs, tmp_path):
    spec = make_spec(tmp_path, inputs, "true")
    grid = enumerate_grid(spec)
    assert len(grid) == 36 == spec.n_candidates
    assert grid[0] == {"k1": 0.01, "k2": 0.01}
    assert grid[1] == {"k1": 0.01, "k2": 0.2}
    assert {g["k1"] for g in grid} == set(DEFAULT_DENSITY_GRID)


def test_materialize_fields(inputs, tmp_path):
    spec = make_spec(tmp_path, inputs, "true", grid={"densities[1]": [0.3], "lambda": [0.5]})
    recipe = materialize(spec, enumerate_grid(spec)[0])
    assert recipe.densities == [1.0, 0.3]
    assert recipe.scale == 0.5
    assert recipe.base == os.path.join(str(tmp_path), "base.safetensors")


@pytest.mark.parametrize(
    "grid",
    [{"models": [["a"]]}, {"k3": [0.1]}, {"scale[0]": [1.0]}, {"k1": []}, {"k1": [0.2], "densities[0]": [0.3]}, {"bogus": [1]}],
)
def test_invalid_grids(inputs, tmp_path, grid):
    with pytest.raises(ValidationError):
        make_spec(tmp_path, inputs, "true", grid=grid)


def test_hook_parsing(tmp_path):
    cand = tmp_path / "c.st"
    assert run_eval_hook(script(tmp_path, "h.py", "print('log line')\nprint('0.5')\n"), cand) == 0.5
    env_hook = script(tmp_path, "env.py", "import os, sys\nprint(float(os.environ['MERGE_CANDIDATE'] == sys.argv[1]))\n")
    assert run_eval_hook(env_hook, cand) == 1.0


@pytest.mark.parametrize(
    "body, match",
    [
        ("print('nan')", "non-finite"),
        ("print('inf')", "non-finite"),
        ("print('great')", "non-numeric"),
        ("pass", "non-numeric"),
        ("import sys\nprint('oops', file=sys.stderr)\nsys.exit(2)", "status 2"),
    ],
)
def test_hook_failures(tmp_path, body, match):
    assignment = {"k1": 0.2}
    with pytest.raises(EvalHookError, match=match) as info:
        run_eval_hook(script(tmp_path, "bad.py", body), tmp_path / "c.st", assignment=assignment)
    assert info.value.assignment == assignment


def test_hook_timeout_and_missing_binary(tmp_path):
    with pytest.raises(EvalHookError, match="timed out"):
        run_eval_hook(script(tmp_path, "slow.py", "import time\ntime.sleep(5)"), "c", timeout=0.2)
    with pytest.raises(EvalHookError, match="could not run"):
        run_eval_hook("/nonexistent/hook {candidate}", "c")


def test_grid_search_finds_analytic_optimum(inputs, tmp_path):
    spec = make_spec(tmp_path, inputs, script(tmp_path, "q.py", QUADRATIC_HOOK), grid={"k1": list(DEFAULT_DENSITY_GRID)})
    result = grid_search(spec)
    assert result.best.assignment == {"k1": 0.4}
    assert result.best.score == 0.0
    assert [c.index for c in result.ranked][:1] == [2]
    # only the winner (and its manifest) is left behind
    left = sorted(os.listdir(spec.workdir))
    assert left == ["candidate_0002.safetensors", "candidate_0002.safetensors.manifest.json", "sweep_report.json"]
    report = json.loads((tmp_path / "work" / "sweep_report.json").read_text())
    assert report["best"]["index"] == 2 and report["n_candidates"] == 6


def test_constant_hook_picks_first(inputs, tmp_path):
    spec = make_spec(tmp_path, inputs, script(tmp_path, "c.py", "print(1.25)"), grid={"k1": [0.2, 0.6], "lambda": [0.5, 1.0]}, keep_candidates=True)
    result = grid_search(spec)
    assert result.best.index == 0
    assert [c.index for c in result.ranked] == [0, 1, 2, 3]
    assert len([f for f in os.listdir(spec.workdir) if f.endswith(".safetensors")]) == 4


def test_failed_candidates_are_reported(inputs, tmp_path):
    hook = script(tmp_path, "half.py", QUADRATIC_HOOK.replace("print(-(k1", "assert k1 != 1.0\nprint(-(k1"))
    result = grid_search(make_spec(tmp_path, inputs, hook, grid={"k1": [0.2, 1.0]}))
    assert [c.index for c in result.failed] == [1]
    assert result.best.index == 0
    assert "status" in result.failed[0].error


def test_all_failures_raise(inputs, tmp_path):
    with pytest.raises(EvalHookError, match="all 2 candidates failed"):
        grid_search(make_spec(tmp_path, inputs, script(tmp_path, "f.py", "print('x')"), grid={"k1": [0.2, 1.0]}))


def test_parallel_jobs_are_deterministic(inputs, tmp_path):
    hook = script(tmp_path, "q.py", QUADRATIC_HOOK)
    grid = {"k1": [0.2, 0.4, 1.0], "k2": [0.5, 1.0]}
    serial = grid_search(make_spec(tmp_path, inputs, hook, grid=grid))
    spec = SweepSpec(inputs, hook, str(tmp_path / "work2"), grid=grid, root=str(tmp_path), jobs=3)
    parallel = grid_search(spec)
    assert [c.to_dict() for c in serial.candidates] == [c.to_dict() for c in parallel.candidates]


def test_from_dict_validation(inputs):
    with pytest.raises(ValidationError, match="requires"):
        SweepSpec.from_dict({"recipe": inputs, "workdir": "w"})
    with pytest.raises(ValidationError, match="unknown"):
        SweepSpec.from_dict({"recipe": inputs, "workdir": "w", "eval_command": "true", "budget": 3})
