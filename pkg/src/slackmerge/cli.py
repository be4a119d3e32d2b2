"""Command-line interface: ``slackmerge <subcommand> ...``.

Exit status: 0 success, 1 validation error, 2 I/O or parse error. Reports go
to stdout (``--format table`` for people, ``--format doc`` for JSON);
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .conflict import format_table, series_analysis, series_csv, series_document
from .documents import dump_document, load_document
from .exceptions import CheckpointFormatError, EvalHookError, ValidationError
from .recipe import load_recipe, manifest_path, run_recipe
from .sweep import grid_search, load_sweep_spec
from .synth import SynthSpec, generate_checkpoint, generate_ct_series
from .taskvec import compute_task_vector
from .tensorio import read_checkpoint, write_checkpoint
from .ties import GRANULARITIES

log = logging.getLogger("slackmerge")

INSPECT_COLUMNS = ("name", "dtype", "shape", "nbytes")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(fmt: str, doc: dict, table: str) -> None:
    if fmt == "doc":
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        sys.stdout.write(table.rstrip("\n") + "\n")


# -- inspect ------------------------------------------------------------------


def inspect_table(ckpt) -> str:
    """Tab-separated rows ``name, dtype, shape (JSON), nbytes`` plus a comment totals line."""
    lines = ["\t".join(INSPECT_COLUMNS)]
    for m in ckpt.metas():
        lines.append(f"{m.name}\t{m.dtype}\t{json.dumps(list(m.shape))}\t{m.nbytes}")
    lines.append(f"# total\t{len(ckpt)} tensors\t{ckpt.numel_total} parameters\t{ckpt.nbytes} bytes")
    return "\n".join(lines)


def parse_inspect_table(text: str) -> list[dict]:
    rows = []
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("# ")]
    header = lines[0].split("\t")
    if tuple(header) != INSPECT_COLUMNS:
        raise ValueError(f"unexpected header {header}")
    for ln in lines[1:]:
        name, dtype, shape, nbytes = ln.split("\t")
        rows.append({"name": name, "dtype": dtype, "shape": json.loads(shape), "nbytes": int(nbytes)})
    return rows


def cmd_inspect(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    doc = {
        "tensors": [
            {
                "name": m.name,
                "dtype": m.dtype,
                "shape": list(m.shape),
                "numel": m.numel,
                "nbytes": m.nbytes,
                "data_offsets": list(m.data_offsets),
            }
            for m in ckpt.metas()
        ],
        "metadata": ckpt.metadata,
        "total_tensors": len(ckpt),
        "total_parameters": ckpt.numel_total,
        "total_bytes": ckpt.nbytes,
    }
    _emit(args.format, doc, inspect_table(ckpt))
    return 0


# -- diff ---------------------------------------------------------------------


def delta_stats(tv) -> dict:
    per_tensor = {}
    sq_total, max_total, nz_total, n_total = 0.0, 0.0, 0, 0
    for name in tv.names:
        d = tv[name].astype(np.float64)
        sq = float(np.sum(d * d))
        mx = float(np.max(np.abs(d))) if d.size else 0.0
        nz = int(np.count_nonzero(d))
        per_tensor[name] = {
            "l2": math.sqrt(sq),
            "max_abs": mx,
            "nonzero_fraction": nz / d.size if d.size else 0.0,
            "numel": int(d.size),
        }
        sq_total += sq
        max_total = max(max_total, mx)
        nz_total += nz
        n_total += d.size
    total = {
        "l2": math.sqrt(sq_total),
        "max_abs": max_total,
        "nonzero_fraction": nz_total / n_total if n_total else 0.0,
        "numel": n_total,
    }
    return {"per_tensor": per_tensor, "global": total}


def cmd_diff(args) -> int:
    base = read_checkpoint(args.base)
    tuned = read_checkpoint(args.tuned)
    stats = delta_stats(compute_task_vector(tuned, base))
    rows = ["name\tl2\tmax_abs\tnonzero_fraction"]
    for name, s in list(stats["per_tensor"].items()) + [("(global)", stats["global"])]:
        rows.append(f"{name}\t{s['l2']:.6g}\t{s['max_abs']:.6g}\t{s['nonzero_fraction']:.6f}")
    _emit(args.format, stats, "\n".join(rows))
    return 0


# -- merge --------------------------------------------------------------------


def cmd_merge(args) -> int:
    recipe = load_recipe(args.recipe)
    _, manifest = run_recipe(recipe, args.out, threads=args.threads)
    doc = manifest.to_dict()
    lines = [
        f"algorithm\t{recipe.algorithm}",
        f"output\t{args.out}",
        f"fingerprint\t{manifest.output['fingerprint']}",
        f"manifest\t{manifest_path(args.out)}",
    ]
    conflict = manifest.summary.get("conflict")
    if conflict:
        lines.append(f"discard_proportion\t{conflict['discard_proportion']:.6f}")
    if "slack_reserved" in manifest.summary:
        lines.append(f"slack_reserved\t{manifest.summary['slack_reserved']}")
    _emit(args.format, doc, "\n".join(lines))
    return 0


# -- analyze / series ---------------------------------------------------------


def _write_reports(args, doc, csv_text) -> None:
    if args.out:
        dump_document(doc, args.out)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)


def cmd_analyze(args) -> int:
    base = read_checkpoint(args.base)
    protected = read_checkpoint(args.protected)
    other = read_checkpoint(args.other)
    series = series_analysis(
        base, protected, [other], args.k_protected, args.k_other, args.granularity, [args.tag]
    )
    doc = series[0].to_dict()
    _write_reports(args, doc, series_csv(series))
    _emit(args.format, doc, format_table([(args.tag, series[0].report)]))
    return 0


def _read_list_file(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def cmd_series(args) -> int:
    paths = list(args.checkpoints or [])
    if args.checkpoint_list:
        paths += _read_list_file(args.checkpoint_list)
    if not paths:
        raise ValidationError("no checkpoints given")
    tags = args.tags or [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(tags) != len(paths):
        raise ValidationError(f"{len(tags)} tags given for {len(paths)} checkpoints")
    base = read_checkpoint(args.base)
    protected = read_checkpoint(args.protected)
    checkpoints = [read_checkpoint(p) for p in paths]
    series = series_analysis(
        base,
        protected,
        checkpoints,
        args.k_protected,
        args.k_other,
        args.granularity,
        tags,
        threads=args.threads,
    )
    doc = series_document(series)
    _write_reports(args, doc, series_csv(series))
    _emit(args.format, doc, format_table([(p.tag, p.report) for p in series]))
    return 0


# -- sweep --------------------------------------------------------------------


def cmd_sweep(args) -> int:
    spec = load_sweep_spec(args.spec)
    if args.threads > 1:
        spec.threads = args.threads
    result = grid_search(spec)
    doc = result.to_dict()
    lines = ["rank\tindex\tscore\tassignment"]
    for rank, c in enumerate(result.ranked):
        lines.append(f"{rank}\t{c.index}\t{c.score:.6g}\t{json.dumps(c.assignment)}")
    for c in result.failed:
        lines.append(f"-\t{c.index}\tFAILED\t{json.dumps(c.assignment)}\t{c.error}")
    lines.append(f"# best\t{result.best.index}\t{json.dumps(result.best.assignment)}")
    _emit(args.format, doc, "\n".join(lines))
    return 0


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = load_document(args.spec)
    root = os.path.dirname(os.path.abspath(args.spec))
    reference = None
    ref_path = (doc.get("conflict") or {}).get("reference")
    if ref_path:
        reference = read_checkpoint(os.path.join(root, ref_path))
    spec = SynthSpec.from_dict(doc, reference)
    series = doc.get("ct_series")
    written = {}
    if series:
        os.makedirs(args.out, exist_ok=True)
        base_path = os.path.join(args.out, "base.safetensors")
        written[base_path] = write_checkpoint(generate_checkpoint(spec), base_path, args.threads)
        steps = generate_ct_series(spec, int(series["steps"]), float(series["growth"]))
        for i, ckpt in enumerate(steps, start=1):
            path = os.path.join(args.out, f"step_{i:03d}.safetensors")
            written[path] = write_checkpoint(ckpt, path, args.threads)
    else:
        written[args.out] = write_checkpoint(generate_checkpoint(spec), args.out, args.threads)
    _emit(
        args.format,
        {"written": [{"path": p, "fingerprint": f} for p, f in written.items()]},
        "\n".join(f"{p}\t{f}" for p, f in written.items()),
    )
    return 0


# -- wiring -------------------------------------------------------------------


def _analysis_flags(p) -> None:
    p.add_argument("--base", required=True)
    p.add_argument("--protected", required=True)
    p.add_argument("--k-protected", type=float, default=0.2)
    p.add_argument("--k-other", type=float, default=1.0)
    p.add_argument("--granularity", choices=GRANULARITIES, default="global")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--csv", help="also write a flat CSV table here")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("table", "doc"), default="table")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="slackmerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", parents=[common], help="list tensors in a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("diff", parents=[common], help="task-vector statistics of tuned - base")
    p.add_argument("base")
    p.add_argument("tuned")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("merge", parents=[common], help="run a merge recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("analyze", parents=[common], help="sign-conflict report for one pair")
    _analysis_flags(p)
    p.add_argument("--other", required=True)
    p.add_argument("--tag", default="other")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("series", parents=[common], help="conflict reports over a checkpoint series")
    _analysis_flags(p)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--checkpoint-list", help="file with one checkpoint path per line")
    p.add_argument("--tags", nargs="*")
    p.set_defaults(func=cmd_series)

    p = sub.add_parser("sweep", parents=[common], help="grid search with an evaluation hook")
    p.add_argument("--spec", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic checkpoints")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("slackmerge: error: --threads must be at least 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValidationError, EvalHookError) as exc:
        print(f"slackmerge: error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointFormatError, OSError) as exc:
        print(f"slackmerge: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
