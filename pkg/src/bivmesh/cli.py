"""Command-line interface: phantom generation, template fitting, GSN training,
scheme reconstruction, and batch evaluation.

A flat key=value config file may preset any option; command-line flags
override file values.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import figures, gsn, metrics, phantom
from .fit import FitConfig
from .gsn import LossWeights, TrainConfig, TrainingDiverged
from .mesh import load_mesh, save_mesh
from .metrics import aspect_ratio, scaled_jacobian, write_batch_csv, write_report_json
from .pipeline import SCHEMES, build_training_case, fit_template, reconstruct
from .volume import load_volume, save_volume


DEFAULTS = {
    "phantom": {"out": ".", "name": "phantom", "degrade_multiplier": 0,
                "degrade_shift": 0.0, "drop_apical": 0, "drop_basal": 0},
    "fit": {"iterations": 10, "clamp": 0.25, "no_align": False,
            "no_deform": False, "seed": 0},
    "train": {"epochs": 120, "lr": 0.001, "max_points": 5000,
              "lambda_chamfer": 0.56, "lambda_laplacian": 0.12,
              "fit_iterations": 10},
    "reconstruct": {"scheme": 5, "checkpoint": "", "iterations": 10,
                    "smooth_lambda": 0.13, "smooth_iterations": 10,
                    "asd_samples": 5000, "seed": 0},
    "eval": {"mesh": "", "volume": "", "manifest": "", "asd_samples": 5000,
             "seed": 0},
}


def _load_config(path):
    if not path:
        return {}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"config {path} line {lineno}: expected key=value")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    return type(like)(value)


def _merge(command, args):
    ns = vars(args)
    config = _load_config(ns.pop("config", None))
    merged = dict(DEFAULTS[command])
    for key, val in config.items():
        if key not in merged:
            raise SystemExit(f"config: unknown key '{key}' for '{command}'")
        merged[key] = _coerce(val, merged[key])
    for key, val in ns.items():
        merged[key] = val
    return argparse.Namespace(**merged)


def _atomic_bytes(path, payload):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _save_mesh_atomic(mesh, path):
    tmp = Path(str(path) + ".tmp")
    save_mesh(mesh, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(a):
    if a.spec:
        try:
            spec_dict = json.loads(Path(a.spec).read_text())
        except json.JSONDecodeError as e:
            raise SystemExit(f"parse error in {a.spec} line {e.lineno}: {e.msg}")
        spec = phantom.PhantomSpec.from_dict(spec_dict)
    else:
        spec = phantom.PhantomSpec()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    vol, surfaces = phantom.generate_phantom(spec)
    save_volume(vol, out / f"{a.name}.json")
    phantom.save_surfaces(surfaces, out / f"{a.name}_surfaces.json")
    written = [out / f"{a.name}.json", out / f"{a.name}.raw",
               out / f"{a.name}_surfaces.json"]
    if a.degrade_multiplier >= 1:
        dspec = phantom.DegradationSpec(
            slice_multiplier=a.degrade_multiplier,
            max_shift_mm=a.degrade_shift,
            drop_apical=a.drop_apical, drop_basal=a.drop_basal)
        degraded = phantom.degrade(vol, dspec, seed=spec.seed)
        save_volume(degraded, out / f"{a.name}_degraded.json")
        written += [out / f"{a.name}_degraded.json", out / f"{a.name}_degraded.raw"]
    for p in written:
        print(p)
    return 0


def cmd_fit(a):
    vol = load_volume(a.volume)
    template = load_mesh(a.template)
    deform = not a.no_deform and a.iterations > 0
    cfg = FitConfig(iterations=max(a.iterations, 1), step_clamp=a.clamp)
    mesh, log, rot = fit_template(vol, template, cfg,
                                  align=not a.no_align, deform=deform)
    _save_mesh_atomic(mesh, a.out)
    print(f"wrote {a.out}")
    if rot is not None:
        print(f"swing angle: {rot.angle:+.6f} rad")
    if log is not None:
        stem = Path(a.out).with_suffix("")
        log_path = Path(f"{stem}_fit_log.csv")
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "mean_distance"])
            for i, v in enumerate(log.mean_distance, 1):
                writer.writerow([i, repr(float(v))])
        figures.save_fit_convergence(log, f"{stem}_convergence.png")
        for i, v in enumerate(log.mean_distance, 1):
            print(f"iteration {i}: mean |d(v)| = {v:.6f}")
        print(f"wrote {log_path}")
        print(f"wrote {stem}_convergence.png")
    return 0


def _read_manifest(path, columns=3):
    rows = []
    base = Path(path).parent
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < columns:
                raise SystemExit(f"manifest {path}: expected {columns} columns, "
                                 f"got {row}")
            resolved = [row[0].strip()]
            for cell in row[1:columns]:
                p = Path(cell.strip())
                resolved.append(p if p.is_absolute() else base / p)
            rows.append(resolved)
    return rows


def cmd_train(a):
    cases = _read_manifest(a.manifest)
    dataset = []
    for case_id, vol_path, tpl_path in cases:
        vol = load_volume(vol_path)
        template = load_mesh(tpl_path)
        cfg = FitConfig(iterations=a.fit_iterations)
        dataset.append(build_training_case(vol, template, cfg,
                                           max_points=a.max_points, seed=a.seed))
        print(f"prepared case {case_id}")
    cfg = TrainConfig(epochs=a.epochs, lr=a.lr, seed=a.seed)
    weights = LossWeights(chamfer=a.lambda_chamfer, laplacian=a.lambda_laplacian)
    stem = Path(a.out).with_suffix("")
    try:
        stack, history = gsn.train(dataset, cfg, weights)
    except TrainingDiverged as e:
        _write_history(e.history, f"{stem}_history.csv")
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    gsn.save_checkpoint(stack, a.out, seed=a.seed, epoch=cfg.epochs,
                        loss=history[-1])
    _write_history(history, f"{stem}_history.csv")
    figures.save_training_history(history, f"{stem}_history.png")
    print(f"wrote {a.out}")
    print(f"initial loss {history[0]:.6f}, final loss {history[-1]:.6f}")
    return 0


def _write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            writer.writerow([i, repr(float(v))])


def cmd_reconstruct(a):
    if a.scheme not in SCHEMES:
        raise SystemExit(f"unknown scheme {a.scheme}; valid: 1..5")
    stack = None
    if a.scheme in (4, 5):
        if not a.checkpoint:
            raise SystemExit(f"scheme {a.scheme} requires --checkpoint")
        stack, _ = gsn.load_checkpoint(a.checkpoint)
    vol = load_volume(a.volume)
    template = load_mesh(a.template)
    cfg = FitConfig(iterations=a.iterations)
    result = reconstruct(vol, template, a.scheme, stack=stack, cfg=cfg,
                         smooth_lambda=a.smooth_lambda,
                         smooth_iterations=a.smooth_iterations,
                         n_asd_samples=a.asd_samples, seed=a.seed,
                         case_id=Path(a.out).name)
    _save_mesh_atomic(result.mesh, f"{a.out}.ply")
    write_report_json(result.report, f"{a.out}_report.json")
    aspr, _ = aspect_ratio(result.mesh)
    jacr, _ = scaled_jacobian(result.mesh)
    figures.save_quality_histograms(aspr, jacr, f"{a.out}_quality.png")
    if result.fit_log is not None:
        figures.save_fit_convergence(result.fit_log, f"{a.out}_convergence.png")
    print(f"scheme {a.scheme}: {SCHEMES[a.scheme]}")
    for key, val in result.report.to_dict().items():
        print(f"  {key}: {val}")
    return 0


def cmd_eval(a):
    out_dir = Path(a.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if a.manifest:
        rows = _read_manifest(a.manifest)
        reports = []
        for case_id, vol_path, mesh_path in rows:
            try:
                vol = load_volume(vol_path)
                mesh = load_mesh(mesh_path)
                report = metrics.evaluate_mesh(mesh, vol, n_samples=a.asd_samples,
                                               seed=a.seed, case_id=case_id)
            except Exception as e:
                print(f"case {case_id} failed: {e}", file=sys.stderr)
                continue
            write_report_json(report, out_dir / f"{case_id}_report.json")
            reports.append(report)
            print(f"case {case_id}: mean dice {report.dice_mean:.4f}, "
                  f"asd {report.asd_mm:.3f} mm")
        write_batch_csv(reports, out_dir / "metrics.csv")
        if reports:
            figures.save_metrics_summary(reports, out_dir / "metrics_summary.png")
        print(f"wrote {out_dir / 'metrics.csv'}")
        return 0
    if not (a.mesh and a.volume):
        raise SystemExit("eval needs either --manifest or both --mesh and --volume")
    vol = load_volume(a.volume)
    mesh = load_mesh(a.mesh)
    report = metrics.evaluate_mesh(mesh, vol, n_samples=a.asd_samples,
                                   seed=a.seed, case_id=Path(a.mesh).stem)
    write_report_json(report, out_dir / f"{report.case_id}_report.json")
    write_batch_csv([report], out_dir / "metrics.csv")
    for key, val in report.to_dict().items():
        print(f"{key}: {val}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="bivmesh",
        description="Bi-ventricular surface reconstruction from labeled volumes",
        argument_default=argparse.SUPPRESS,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", argument_default=argparse.SUPPRESS,
                       help="generate a synthetic labeled volume")
    p.add_argument("spec", nargs="?", default="", help="phantom.json spec file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--name")
    p.add_argument("--degrade-multiplier", type=int, dest="degrade_multiplier")
    p.add_argument("--degrade-shift", type=float, dest="degrade_shift")
    p.add_argument("--drop-apical", type=int, dest="drop_apical")
    p.add_argument("--drop-basal", type=int, dest="drop_basal")

    p = sub.add_parser("fit", argument_default=argparse.SUPPRESS,
                       help="adjust a template to a segmentation")
    p.add_argument("volume")
    p.add_argument("template")
    p.add_argument("out")
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--clamp", type=float)
    p.add_argument("--no-align", action="store_true", dest="no_align")
    p.add_argument("--no-deform", action="store_true", dest="no_deform")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", argument_default=argparse.SUPPRESS,
                       help="train the graph-subdivision stack")
    p.add_argument("manifest", help="CSV of (case id, volume path, template path)")
    p.add_argument("out", help="output checkpoint (.gsn)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-points", type=int, dest="max_points")
    p.add_argument("--lambda-chamfer", type=float, dest="lambda_chamfer")
    p.add_argument("--lambda-laplacian", type=float, dest="lambda_laplacian")
    p.add_argument("--fit-iterations", type=int, dest="fit_iterations")

    p = sub.add_parser("reconstruct", argument_default=argparse.SUPPRESS,
                       help="run one ablation scheme end to end")
    p.add_argument("volume")
    p.add_argument("template")
    p.add_argument("out", help="output prefix")
    p.add_argument("--config")
    p.add_argument("--scheme", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--smooth-lambda", type=float, dest="smooth_lambda")
    p.add_argument("--smooth-iterations", type=int, dest="smooth_iterations")
    p.add_argument("--asd-samples", type=int, dest="asd_samples")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", argument_default=argparse.SUPPRESS,
                       help="evaluate meshes against ground-truth volumes")
    p.add_argument("out", help="output directory")
    p.add_argument("--config")
    p.add_argument("--mesh")
    p.add_argument("--volume")
    p.add_argument("--manifest", help="CSV of (case id, volume path, mesh path)")
    p.add_argument("--asd-samples", type=int, dest="asd_samples")
    p.add_argument("--seed", type=int)
    return parser


_COMMANDS = {
    "phantom": cmd_phantom,
    "fit": cmd_fit,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    command = args.command
    del args.command
    merged = _merge(command, args)
    return _COMMANDS[command](merged)


if __name__ == "__main__":
    sys.exit(main())
