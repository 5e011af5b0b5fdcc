"""Initialisation and the alternation between scene flow and latent images."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .core import CameraRig, EnergyParams, as_image
from .deblur import build_problem, solve_latents
from .energy import EnergyBreakdown, FeatureCorrespondences, total_energy
from .geometry import (ALL_KEYS, REFERENCE, TWO_FRAME_KEYS, SceneModel, WarpTarget, model_disparity,
                       model_flow)
from .initialize import (initial_model, init_disparity, motion_pairs, ransac_motions,
                         reference_correspondences)
from .sceneflow import ProposalConfig, RoundRecord, solve_sceneflow
from .superpixels import Partition, build_superpixels, init_labels, moving_mask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineOptions:
    superpixels: int = 150
    max_disp: int | None = None
    max_objects: int = 4
    ransac_threshold: float = 1.0
    sceneflow_rounds: int = 2
    deblur_iters: int = 50
    deblur_tol: float = 1e-5
    two_frame: bool = False
    proposals: ProposalConfig = field(default_factory=ProposalConfig)


@dataclass
class PipelineInput:
    blurred: dict
    mask: np.ndarray
    rig: CameraRig
    params: EnergyParams = field(default_factory=EnergyParams)
    seed: int = 0
    options: PipelineOptions = field(default_factory=PipelineOptions)

    def __post_init__(self):
        keys = TWO_FRAME_KEYS if self.options.two_frame else ALL_KEYS
        missing = [k for k in keys if k not in self.blurred]
        if missing:
            raise ValueError(f"missing input images {missing}")
        self.blurred = {k: as_image(self.blurred[k]) for k in keys}
        shapes = {v.shape for v in self.blurred.values()}
        if len(shapes) != 1:
            raise ValueError(f"input images differ in shape: {sorted(shapes)}")
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.shape != self.blurred[REFERENCE].shape[:2]:
            raise ValueError("semantic mask does not match the images")


@dataclass
class TraceEntry:
    iteration: int
    stage: str
    energy: EnergyBreakdown
    seconds: float


@dataclass
class PipelineOutput:
    latents: dict
    model: SceneModel
    partition: Partition
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    disparity: dict  # frame -> left-view disparity
    moving_mask: np.ndarray
    trace: list
    rounds: list = field(default_factory=list)


class PipelineError(RuntimeError):
    pass


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as exc:  # report the failing stage
        raise PipelineError(f"{name} failed: {exc}") from exc


@dataclass
class InitialState:
    model: SceneModel
    partition: Partition
    prior: list
    correspondences: FeatureCorrespondences
    hypotheses: list
    disparity: dict


def initialize(inp: PipelineInput) -> InitialState:
    B = inp.blurred
    opts = inp.options
    d0 = _stage("disparity (frame m)", init_disparity, B[(0, 0)], B[(1, 0)], opts.max_disp)
    d1 = _stage("disparity (frame m+1)", init_disparity, B[(0, 1)], B[(1, 1)], opts.max_disp)
    part = _stage("superpixels", build_superpixels, B[REFERENCE], d0, opts.superpixels)
    corr = _stage("feature matching", reference_correspondences, B)
    P, Q, xy = motion_pairs(corr.get(WarpTarget.FLOW_F), d0, d1, inp.rig)
    hyps = _stage("motion hypotheses", ransac_motions, P, Q, opts.max_objects, opts.ransac_threshold,
                  inp.seed, rig=inp.rig)
    num_objects = max(2, len(hyps))
    prior = init_labels(part, inp.mask, num_objects)
    model = _stage("plane fitting", initial_model, part, d0, inp.rig, prior, hyps, xy, num_objects)
    return InitialState(model, part, prior, corr, hyps, {0: d0, 1: d1})


def run_pipeline(inp: PipelineInput, init: InitialState | None = None) -> PipelineOutput:
    """Initialise, then alternate scene-flow and latent-image updates ``outer_iters`` times.

    ``init`` replaces the automatic initialisation (e.g. a ground-truth model).
    """
    params = inp.params
    opts = inp.options
    if init is None:
        init = initialize(inp)
    model, part = init.model, init.partition
    latents = {k: v.copy() for k, v in inp.blurred.items()}
    extra = [h.motion for h in init.hypotheses]
    trace, rounds = [], []

    def record(it, stage, t0):
        e = total_energy(model, part, latents, inp.blurred, init.correspondences, inp.rig, params)
        trace.append(TraceEntry(it, stage, e, time.perf_counter() - t0))
        log.info("iter %d %-9s energy %.3f (%.1f s)", it, stage, e.total, trace[-1].seconds)

    def deblur(it):
        nonlocal latents
        t0 = time.perf_counter()
        problem = _stage("blur operators", build_problem, model, inp.blurred, inp.rig, params)
        latents = _stage("deblurring", solve_latents, problem, latents, opts.deblur_iters,
                         opts.deblur_tol)
        record(it, "deblur", t0)

    record(0, "init", time.perf_counter())
    if params.outer_iters > 0:
        # latents start from a deblur under the initial model; on the raw blurred
        # images the blur term favours small kernels and pulls objects to the background
        deblur(0)
    for it in range(1, params.outer_iters + 1):
        t0 = time.perf_counter()
        model = _stage("scene flow", solve_sceneflow, model, part, latents, inp.blurred,
                       init.correspondences, init.prior, inp.rig, params, opts.sceneflow_rounds,
                       seed=[inp.seed, it], cfg=opts.proposals, extra_motions=extra, trace=rounds)
        record(it, "sceneflow", t0)
        deblur(it)
    ff = model_flow(model, inp.rig, WarpTarget.FLOW_F)
    fb = -ff if opts.two_frame else model_flow(model, inp.rig, WarpTarget.FLOW_B)
    disp = {0: model_disparity(model, inp.rig, 0), 1: model_disparity(model, inp.rig, 1)}
    return PipelineOutput(latents, model, part, ff, fb, disp, moving_mask(model), trace, rounds)


# wall-clock time stays out of the file so identical runs give identical bytes
TRACE_COLUMNS = ["iteration", "stage", "data1", "data2", "data3", "smooth1", "smooth2", "smooth3",
                 "smooth4", "tv", "total"]


def write_trace_csv(path, trace: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for t in trace:
            e = t.energy.as_dict()
            w.writerow([t.iteration, t.stage] + [repr(float(e[c])) for c in TRACE_COLUMNS[2:]])


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(TRACE_COLUMNS) - set(rows[0]):
        raise ValueError(f"{path}: missing trace columns {sorted(set(TRACE_COLUMNS) - set(rows[0]))}")
    out = []
    for r in rows:
        e = EnergyBreakdown(**{c: float(r[c]) for c in TRACE_COLUMNS[2:-1]})
        out.append(TraceEntry(int(r["iteration"]), r["stage"], e, float("nan")))
    return out
