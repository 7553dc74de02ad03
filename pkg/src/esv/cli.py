"""Command-line interface: ``esv attribute|contrast|ablate|eval-approx|random-model|replay``.

Failures print one line ``<ErrorClass>: <message>`` on stderr (a JSON object
with ``--json``) and exit with 2 (validation), 3 (capacity), 4 (undefined
metric) or 5 (I/O). Nothing is written to the output path on failure.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from esv import io
from esv.analysis import ORDERS, EvalItem, ablate_by_rank, batch_quality
from esv.engine import approx_esv, classify_elements, contrastive_esv, exact_esv
from esv.errors import ESVError, FileFormatError, ValidationError
from esv.models import KINDS, MultiScaleModel, load_model, random_model_spec
from esv.sequence import DEFAULT_EXHAUSTIVE_LIMIT


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser, output=True) -> None:
    p.add_argument("--quiet", action="store_true", help="no summary on stdout")
    p.add_argument("--json", action="store_true", help="machine-readable stdout and errors")
    if output:
        p.add_argument("--output", required=True, type=Path)


def _add_attribution(p: argparse.ArgumentParser, need_classes=True) -> None:
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    if need_classes:
        p.add_argument("--classes", default="all", help="comma-separated class indices or 'all'")
    p.add_argument("--mode", choices=("exact", "approx"), default="exact")
    p.add_argument("--m", type=int, default=256, help="max subsequences sampled per scale (approx)")
    p.add_argument("--iterations", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--nmax", type=int, default=None, help="use only scales 1..NMAX of a per-scale model")
    p.add_argument("--strict-alg1", action="store_true", help="scale parent means by (s-1)/s above n_max")
    p.add_argument("--limit", type=int, default=DEFAULT_EXHAUSTIVE_LIMIT, help="max n for exact mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esv", description="Element Shapley values for sequence models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attribute", help="per-element attributions")
    _add_attribution(p)
    _add_common(p)

    p = sub.add_parser("contrast", help="class-contrastive attributions")
    _add_attribution(p, need_classes=False)
    p.add_argument("--gt", type=int, required=True)
    p.add_argument("--pt", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("ablate", help="remove elements in rank order and re-score")
    _add_attribution(p, need_classes=False)
    p.add_argument("--order", choices=ORDERS, required=True)
    p.add_argument("--class", dest="cls", type=int, required=True)
    p.add_argument("--label", type=int, required=True)
    _add_common(p)

    p = sub.add_parser("eval-approx", help="approximate vs exact quality grid")
    p.add_argument("--features-dir", required=True, type=Path)
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--class", dest="cls", default="pred", help="class index or 'pred' (argmax on the full input)")
    p.add_argument("--m-grid", type=_int_list, default=[32, 64, 128, 256, 512, 1024])
    p.add_argument("--iterations-grid", type=_int_list, default=[1, 2, 4])
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--min-evidential", type=float, default=None)
    p.add_argument("--nmax", type=int, default=None)
    p.add_argument("--limit", type=int, default=DEFAULT_EXHAUSTIVE_LIMIT)
    _add_common(p)

    p = sub.add_parser("random-model", help="write a randomly initialised model document")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--C", dest="n_classes", type=int, default=3)
    p.add_argument("--D", dest="dim", type=int, default=4)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--nmax", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    _add_common(p)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("--output", type=Path, default=None, help="write here instead of the recorded path")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--json", action="store_true")
    return parser


# ---------------------------------------------------------------------------


def _load(args):
    X = io.read_features(args.features)
    model = load_model(io.read_model_spec(args.model), strict_alg1=args.strict_alg1)
    if args.nmax is not None:
        if not isinstance(model, MultiScaleModel):
            raise ValidationError("--nmax only applies to per-scale models")
        if not 1 <= args.nmax <= model.n_max:
            raise ValidationError(f"--nmax must be in 1..{model.n_max}")
        model = MultiScaleModel(
            model.scales[: args.nmax], model.n_classes, model.dim, model.empty_prior, model.normalize, model.strict_alg1
        )
    if X.dim != model.dim:
        raise ValidationError(f"features have D={X.dim}, model expects D={model.dim}")
    return X, model


def _parse_classes(text: str, C: int) -> list[int] | None:
    if text == "all":
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"--classes: expected 'all' or integers, got {text!r}") from None


def _attribute(args, model, X, classes):
    if args.mode == "exact":
        return exact_esv(model, X, classes, limit=args.limit)
    if args.seed is None:
        raise ValidationError("--seed is required in approx mode")
    return approx_esv(model, X, classes, m=args.m, iterations=args.iterations, seed=args.seed,
                      strict_alg1=args.strict_alg1)


def _manifest(args, argv, started, model_calls) -> dict:
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    doc = {
        "format": io.MANIFEST_FORMAT,
        "command": args.command,
        "argv": list(argv),
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "model_calls": model_calls,
        "wall_time": round(time.perf_counter() - started, 6),
    }
    for key in ("features", "model"):
        if getattr(args, key, None) is not None:
            doc[f"{key}_digest"] = io.file_digest(getattr(args, key))
    return doc


def _write_with_manifest(args, argv, started, text, model_calls):
    io.atomic_write(args.output, text)
    manifest = _manifest(args, argv, started, model_calls)
    io.atomic_write(Path(str(args.output) + ".manifest.json"), json.dumps(manifest, indent=1) + "\n")


def _labels(result):
    return {str(c): classify_elements(result, c) for c in result.classes}


def cmd_attribute(args, argv, started):
    X, model = _load(args)
    result = _attribute(args, model, X, _parse_classes(args.classes, model.n_classes))
    doc = io.result_to_dict(result, {"labels": _labels(result)})
    text = io.dumps(doc)
    _write_with_manifest(args, argv, started, text, result.model_calls)
    if args.json:
        sys.stdout.write(text)
    elif not args.quiet:
        print(f"wrote {args.output}: n={result.n} classes={list(result.classes)} mode={result.mode} "
              f"model_calls={result.model_calls}")


def cmd_contrast(args, argv, started):
    X, model = _load(args)
    classes = [args.gt] if args.gt == args.pt else [args.gt, args.pt]
    result = _attribute(args, model, X, classes)
    delta = contrastive_esv(result, result, args.gt, args.pt)
    doc = io.result_to_dict(result, {
        "contrast": {"gt": args.gt, "pt": args.pt, "delta": [float(v) for v in delta]},
    })
    text = io.dumps(doc)
    _write_with_manifest(args, argv, started, text, result.model_calls)
    if args.json:
        sys.stdout.write(text)
    elif not args.quiet:
        print("element,phi_gt,phi_pt,delta")
        for i, d in enumerate(delta):
            print(f"{i},{result.column(args.gt)[i]!r},{result.column(args.pt)[i]!r},{float(d)!r}")


def cmd_ablate(args, argv, started):
    X, model = _load(args)
    if not 0 <= args.cls < model.n_classes or not 0 <= args.label < model.n_classes:
        raise ValidationError(f"--class/--label must be in 0..{model.n_classes - 1}")
    result = _attribute(args, model, X, [args.cls]) if args.order.startswith("esv-") else None
    if args.order == "random" and args.seed is None:
        raise ValidationError("--seed is required for the random order")
    curve = ablate_by_rank(model, X, result, args.cls, args.order, seed=args.seed, label=args.label)
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["elements_remaining", "removed", "score", "correct"])
    for k, (remaining, score, correct) in enumerate(curve.points):
        w.writerow([remaining, "" if k == 0 else curve.removed[k - 1], repr(score), int(correct)])
    _write_with_manifest(args, argv, started, buf.getvalue(), model.calls.value)
    if args.json:
        print(json.dumps({"order": curve.order, "removed": curve.removed,
                          "points": [list(p) for p in curve.points]}))
    elif not args.quiet:
        sys.stdout.write(buf.getvalue())


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(round(float(v), 6))


def cmd_eval_approx(args, argv, started):
    model = load_model(io.read_model_spec(args.model))
    if args.nmax is not None:
        if not isinstance(model, MultiScaleModel) or not 1 <= args.nmax <= model.n_max:
            raise ValidationError("--nmax must select scales of a per-scale model")
        model = MultiScaleModel(model.scales[: args.nmax], model.n_classes, model.dim, model.empty_prior,
                                model.normalize)
    if not args.features_dir.is_dir():
        raise FileFormatError(f"{args.features_dir}: not a directory")
    if args.cls == "pred":
        cls = None
    else:
        try:
            cls = int(args.cls)
        except ValueError:
            raise ValidationError(f"--class: expected an integer or 'pred', got {args.cls!r}") from None
    items = []
    for path in sorted(p for p in args.features_dir.iterdir() if p.is_file() and not p.name.startswith(".")):
        X = io.read_features(path)
        if X.dim != model.dim:
            raise ValidationError(f"{path}: D={X.dim}, model expects D={model.dim}")
        items.append(EvalItem(model, X, cls, path.name))
    grid = batch_quality(items, args.m_grid, args.iterations_grid, args.seeds,
                         min_evidential=args.min_evidential, limit=args.limit)
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "iterations", "relative_error", "lad_slope", "pearson_r", "videos", "gaps",
                "sampled_pct_per_iteration"])
    for (m, it), rep in grid.items():
        videos = len({r["name"] for r in rep.per_video})
        w.writerow([m, it, _fmt(rep.relative_error), _fmt(rep.lad_slope), _fmt(rep.pearson_r), videos,
                    rep.gaps, f"{100 * rep.sampled_fraction:.2f}"])
    _write_with_manifest(args, argv, started, buf.getvalue(), model.calls.value)
    if args.json:
        print(json.dumps([{"m": m, "iterations": it, "relative_error": r.relative_error,
                           "lad_slope": r.lad_slope, "pearson_r": r.pearson_r, "gaps": r.gaps,
                           "sampled_fraction": r.sampled_fraction} for (m, it), r in grid.items()]))
    elif not args.quiet:
        sys.stdout.write(buf.getvalue())


def cmd_random_model(args, argv, started):
    spec = random_model_spec(args.kind, args.n_classes, args.dim, hidden=args.hidden, n_max=args.nmax,
                             seed=args.seed, normalize=args.normalize)
    io.write_model_spec(args.output, spec)
    if not args.quiet:
        print(f"wrote {args.output}")


def cmd_replay(args, argv, started):
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except OSError as exc:
        raise FileFormatError(f"{args.manifest}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.manifest}: not JSON ({exc})") from None
    if manifest.get("format") != io.MANIFEST_FORMAT:
        raise ValidationError(f"{args.manifest}: not an {io.MANIFEST_FORMAT} document")
    replay_argv = list(manifest["argv"])
    inner = build_parser().parse_args(replay_argv)
    for key in ("features", "model"):
        recorded = manifest.get(f"{key}_digest")
        if recorded and io.file_digest(getattr(inner, key)) != recorded:
            raise ValidationError(f"{key} file changed since the manifest was written")
    if args.output is not None:
        idx = replay_argv.index("--output")
        replay_argv[idx + 1] = str(args.output)
    return main(replay_argv)


COMMANDS = {
    "attribute": cmd_attribute,
    "contrast": cmd_contrast,
    "ablate": cmd_ablate,
    "eval-approx": cmd_eval_approx,
    "random-model": cmd_random_model,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        out = COMMANDS[args.command](args, argv, started)
        return out or 0
    except ESVError as exc:
        name = type(exc).__name__
        if getattr(args, "json", False):
            print(json.dumps({"error": name, "message": str(exc)}), file=sys.stderr)
        else:
            print(f"{name}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
