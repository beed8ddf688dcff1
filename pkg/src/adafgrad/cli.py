"""Batch command-line entry points.

    adafgrad synth  --out DIR [--spec FILE] [--seed N] [--force]
    adafgrad train  --manifest FILE --out DIR [--config FILE]
                    [--method adafgrad|finetune|joint|er] [--seed N]
    adafgrad report --runs DIR [DIR ...] --out DIR
    adafgrad dump-embeddings --run DIR --manifest FILE --out FILE

Exit codes: 0 success, 2 usage or validation failure, 3 numeric failure
during a run.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import engine
from .data import load_manifest, spec_from_dict, synth_sequence, SyntheticSpec
from .errors import AdafgradError, NonFiniteError
from .metrics import write_acc_matrix_csv
from .model import GatedAttentionParams, ModelParams, forward, param_items
from .plots import acc_fgt_scatter_svg, accuracy_curves_svg, confidence_boxes_svg

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

_LOG_COLUMNS = ("task", "epoch", "step", "slide_id", "ce", "infonce",
                "self_sim", "replay_ce", "ppgd", "total")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_checkpoint(params: ModelParams, path) -> None:
    np.savez(path, **{name: arr for name, arr in param_items(params)})


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as data:
        get = lambda name: np.array(data[name])
        return ModelParams(
            patch_proj_w=get("patch_proj_w"), patch_proj_b=get("patch_proj_b"),
            patch_attn=GatedAttentionParams(V=get("patch_attn.V"),
                                            U=get("patch_attn.U"),
                                            w=get("patch_attn.w")),
            region_proj_w=get("region_proj_w"), region_proj_b=get("region_proj_b"),
            region_mlp_w=get("region_mlp_w"), region_mlp_b=get("region_mlp_b"),
            slide_attn=GatedAttentionParams(V=get("slide_attn.V"),
                                            U=get("slide_attn.U"),
                                            w=get("slide_attn.w")),
            align_g=get("align_g"), head_w=get("head_w"), head_b=get("head_b"),
        )


def _load_json(path, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise AdafgradError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise AdafgradError(f"{what} is not valid JSON: {path}: {exc}")


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)",
              file=sys.stderr)
        return EXIT_USAGE
    spec = SyntheticSpec() if args.spec is None else spec_from_dict(
        _load_json(args.spec, "synthetic spec"))
    _, manifest, proto_path = synth_sequence(spec, args.seed, out)
    n_slides = sum(len(t.slides) for t in manifest.tasks)
    print(f"wrote {manifest.n_tasks} tasks, {manifest.total_classes} classes, "
          f"{n_slides} slides under {out}")
    print(f"manifest: {out / 'manifest.json'}")
    print(f"prototypes: {proto_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    raw_cfg = {} if args.config is None else _load_json(args.config, "config")
    cfg = engine.config_from_dict(raw_cfg, method=args.method)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    matrix, report, params = engine.run_sequence(cfg, manifest)

    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    write_acc_matrix_csv(matrix, out / "acc_matrix.csv")
    with open(out / "loss_log.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(_LOG_COLUMNS) + "\n")
        for row in report.loss_log:
            fh.write(",".join(_fmt(row[c]) for c in _LOG_COLUMNS) + "\n")
    save_checkpoint(params, out / "params.npz")

    shown = {k: ("-" if v is None else f"{v:.4f}")
             for k, v in report.metrics.items()}
    print(f"method={cfg.method} seed={cfg.seed} "
          + " ".join(f"{k}={v}" for k, v in shown.items()))
    print(f"run artifacts in {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for run_dir in args.runs:
        raw = _load_json(Path(run_dir) / "report.json", "run report")
        reports.append((Path(run_dir).name, engine.report_from_dict(raw)))
    counts = {r.n_tasks for _, r in reports}
    if len(counts) > 1:
        raise AdafgradError(f"incompatible task counts across runs: {sorted(counts)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    keys = ("acc", "masked_acc", "auc", "macc", "bwt", "fwt", "fgt")
    with open(out / "comparison.csv", "w", encoding="utf-8") as fh:
        fh.write("run,method,seed," + ",".join(keys) + ",wall_clock_seconds\n")
        for name, r in reports:
            cells = [_fmt(r.metrics.get(k)) for k in keys]
            fh.write(f"{name},{r.method},{r.seed}," + ",".join(cells)
                     + f",{_fmt(r.wall_clock_seconds)}\n")

    with open(out / "acc_fgt_scatter.svg", "w", encoding="utf-8") as fh:
        fh.write(acc_fgt_scatter_svg([r for _, r in reports]))
    for name, r in reports:
        with open(out / f"curves_{name}.svg", "w", encoding="utf-8") as fh:
            fh.write(accuracy_curves_svg(r))
        with open(out / f"confidence_{name}.svg", "w", encoding="utf-8") as fh:
            fh.write(confidence_boxes_svg(r))
    print(f"aggregated {len(reports)} runs into {out}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    manifest = load_manifest(args.manifest)
    params = load_checkpoint(Path(args.run) / "params.npz")
    if params.patch_proj_w.shape[0] != int(manifest.dims["d_vis"]):
        raise AdafgradError(
            f"checkpoint expects d_vis={params.patch_proj_w.shape[0]}, manifest "
            f"declares {manifest.dims['d_vis']}")
    if params.head_w.shape[1] != manifest.total_classes:
        raise AdafgradError(
            f"checkpoint head width {params.head_w.shape[1]} != manifest "
            f"class count {manifest.total_classes}")
    d_model = params.head_w.shape[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n_rows = 0
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("slide_id,task,global_class,"
                 + ",".join(f"e{i}" for i in range(d_model)) + "\n")
        for t in range(manifest.n_tasks):
            for slide in manifest.load_split(t, "test"):
                trace = forward(params, slide)
                emb = ",".join(repr(float(v)) for v in trace.slide_embedding)
                fh.write(f"{slide.slide_id},{t},{slide.global_class},{emb}\n")
                n_rows += 1
    print(f"wrote {n_rows} embeddings of width {d_model} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adafgrad",
        description="Lifelong-learning experiments over bag-of-features "
                    "classification tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task sequence")
    p.add_argument("--spec", default=None, help="synthetic-spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one method over a task sequence")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="run-config JSON file")
    p.add_argument("--method", default="adafgrad", choices=engine.METHODS)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate run reports and emit plots")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-embeddings",
                       help="write final slide embeddings for test slides")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AdafgradError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
