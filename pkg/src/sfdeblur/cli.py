"""Batch command line: synth, run, deblur, eval, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import cv2
import numpy as np

from . import io
from .datagen import generate
from .deblur import build_problem, solve_latents, write_objective_csv
from .metrics import evaluate, write_reports_csv
from .pipeline import PipelineInput, read_trace_csv, run_pipeline, write_trace_csv
from .sceneflow import write_rounds_csv

log = logging.getLogger("sfdeblur")

HEAT_FLOW_PX = 3.0  # heatmap saturation: the outlier threshold
HEAT_DISP_PX = 3.0
HEAT_INTENSITY = 0.1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _global_flags(parser, suppress: bool) -> None:
    # repeated on every subcommand; SUPPRESS keeps values given before the subcommand
    def default(value):
        return argparse.SUPPRESS if suppress else value

    parser.add_argument("--seed", type=int, default=default(None), help="random seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=default(None), help="cap on worker threads")
    parser.add_argument("--verbose", "-v", action="store_true", default=default(False), help="log progress")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    p = _Parser(prog="sfdeblur",
                description="Joint stereo video deblurring, scene flow and moving-object segmentation.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic blurred sequence")
    s.add_argument("scene", help="scene description (key=value), or 'default'")
    s.add_argument("out_dir")

    s = sub.add_parser("run", parents=[common], help="full pipeline")
    s.add_argument("config", help="key=value config file")
    s.add_argument("in_dir")
    s.add_argument("out_dir")

    s = sub.add_parser("deblur", parents=[common], help="deblur under a known scene model")
    s.add_argument("config")
    s.add_argument("in_dir")
    s.add_argument("model", help="model.npz")
    s.add_argument("out_dir")

    s = sub.add_parser("eval", parents=[common], help="metrics of estimates against ground truth")
    s.add_argument("est_dir")
    s.add_argument("gt_dir", help="synth output directory or its gt/ folder")
    s.add_argument("report")

    s = sub.add_parser("report", parents=[common], help="summarize a trace and draw error heatmaps")
    s.add_argument("trace")
    s.add_argument("--gt", default=None, help="ground truth directory for heatmaps")
    s.add_argument("--out", default=None, help="heatmap directory (default: next to the trace)")
    return p


def _seed(args, cfg_seed: int = 0) -> int:
    return cfg_seed if args.seed is None else args.seed


def cmd_synth(args) -> None:
    seed = _seed(args)
    if args.scene == "default":
        spec = io.parse_scene({"preset": "default", "seed": str(seed)})
    else:
        spec = io.read_scene(args.scene)
    bundle = generate(spec, seed)
    io.write_dataset(args.out_dir, bundle)
    print(f"wrote {args.out_dir}")


def cmd_run(args) -> None:
    cfg = io.read_config(args.config)
    seq = io.read_inputs(args.in_dir)
    inp = PipelineInput(seq.blurred, seq.mask, seq.rig, cfg.params, _seed(args, cfg.seed), cfg.options)
    out = run_pipeline(inp)
    root = Path(args.out_dir)
    io.write_estimates(root, out.latents, out.flow_fwd, out.flow_bwd, out.disparity, out.moving_mask)
    io.save_model(root / "model.npz", out.model)
    write_trace_csv(root / "trace.csv", out.trace)
    write_rounds_csv(root / "rounds.csv", out.rounds)
    print(f"final energy {out.trace[-1].energy.total:.3f}; wrote {root}")


def cmd_deblur(args) -> None:
    cfg = io.read_config(args.config)
    seq = io.read_inputs(args.in_dir)
    model = io.load_model(args.model)
    if model.shape != seq.mask.shape:
        raise ValueError(f"model size {model.shape} does not match the images {seq.mask.shape}")
    problem = build_problem(model, seq.blurred, seq.rig, cfg.params)
    trace: list = []
    latents = solve_latents(problem, None, cfg.options.deblur_iters, cfg.options.deblur_tol, trace=trace)
    root = Path(args.out_dir)
    io.write_views(root, latents)
    write_objective_csv(root / "objective.csv", trace)
    print(f"{len(trace) - 1} iterations, objective {trace[-1]:.3f}; wrote {root}")


def _gt_root(path) -> tuple[Path, Path | None]:
    path = Path(path)
    if (path / "gt").is_dir():
        return path / "gt", path
    return path, None


def cmd_eval(args) -> None:
    est = io.read_estimates(args.est_dir)
    gt_dir, inputs = _gt_root(args.gt_dir)
    gt = io.read_estimates(gt_dir)
    blurred = io.read_views(inputs) if inputs is not None else None
    if est.flow_bwd is None or gt.flow_bwd is None:
        raise FileNotFoundError("backward flow missing (flow/bwd.flo)")
    rep = evaluate(est.latents, est.flow_fwd, est.flow_bwd, est.disparity, est.moving,
                   gt.latents, gt.flow_fwd, gt.flow_bwd, gt.disparity, gt.moving, blurred)
    write_reports_csv(args.report, [rep], [Path(args.est_dir).name])
    print(rep.summary())


def _heatmap(path: Path, err: np.ndarray, vmax: float) -> None:
    img = np.rint(np.clip(np.nan_to_num(err, nan=vmax, posinf=vmax) / vmax, 0, 1) * 255)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img.astype(np.uint8)):
        raise OSError(f"cannot write {path}")


def cmd_report(args) -> None:
    trace = read_trace_csv(args.trace)
    if not trace:
        raise ValueError(f"{args.trace}: empty trace")
    for t in trace:
        print(f"iter {t.iteration} {t.stage:<9} energy {t.energy.total:.3f}")
    totals = [t.energy.total for t in trace]
    rises = sum(b > a for a, b in zip(totals, totals[1:]))
    print(f"energy {totals[0]:.3f} -> {totals[-1]:.3f}; increases: {rises}")
    if args.gt is None:
        return
    est_root = Path(args.trace).parent
    out = Path(args.out) if args.out else est_root / "heatmaps"
    est = io.read_estimates(est_root)
    gt, _ = _gt_root(args.gt)
    gt = io.read_estimates(gt)
    _heatmap(out / "flow_fwd.pgm", np.linalg.norm(est.flow_fwd - gt.flow_fwd, axis=2), HEAT_FLOW_PX)
    if est.flow_bwd is not None and gt.flow_bwd is not None:
        _heatmap(out / "flow_bwd.pgm", np.linalg.norm(est.flow_bwd - gt.flow_bwd, axis=2), HEAT_FLOW_PX)
    for fr, d in est.disparity.items():
        if fr in gt.disparity:
            err = np.where(d > 0, np.abs(d - gt.disparity[fr]), np.inf)
            _heatmap(out / f"disp_{fr + 1:03d}.pgm", np.where(gt.disparity[fr] > 0, err, 0), HEAT_DISP_PX)
    for key, L in est.latents.items():
        if key in gt.latents:
            err = np.abs(L - gt.latents[key]).mean(axis=2)
            _heatmap(out / f"{io.VIEW_DIRS[key[0]]}_{key[1] + 1:03d}.pgm", err, HEAT_INTENSITY)
    print(f"heatmaps in {out} (saturation: flow/disparity {HEAT_FLOW_PX:g} px, "
          f"intensity {HEAT_INTENSITY:g})")


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "deblur": cmd_deblur, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("sfdeblur: error: --threads must be >= 1", file=sys.stderr)
            return 2
        cv2.setNumThreads(args.threads)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        if args.verbose:
            log.exception("command failed")
        print(f"sfdeblur {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
