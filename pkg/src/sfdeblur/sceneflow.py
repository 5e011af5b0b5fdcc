"""Scene-flow subproblem: proposal sampling, discretisation and TRW-S rounds.

A round first re-estimates each object's motion by picking the best of
its sampled candidates under the current labelling, then discretises the
per-superpixel (plane, object) choice over sampled proposals and solves it
with TRW-S. Candidate 0 of every node is the incumbent state.

Visibility in the non-reference images is held fixed while discretising
(taken from the incumbent model), which makes the discrete objective an
exact restriction of the full energy. The blur term couples pixels owned
by different superpixels through its derivative filters; those couplings
become pairwise tables, adding graph edges between non-adjacent owners.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .blur import blur_at
from .core import CameraRig, EnergyParams, pixel_grid
from .energy import (FeatureCorrespondences, brightness_cost, compute_ownership, feature_cost,
                     feature_owner, is_two_frame, pair_smoothness, total_energy, _boundary_xy)
from .geometry import (REFERENCE, RigidMotion, SceneModel, flows_at, image_flow_homographies,
                       inverse_depth, project_points, surface_homographies, targets_for)
from .superpixels import Partition
from .trws import DiscreteProblem, trws_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProposalConfig:
    planes: int = 8
    motions: int = 4
    plane_rel_std: float = 0.05
    plane_abs_std: float = 1e-3
    rot_std_deg: float = 0.5
    trans_rel_std: float = 0.02
    trans_abs_std: float = 1e-3
    neighbor_planes: int = 8
    max_fallback_groups: int = 24
    max_labels: int = 24
    allow_background: bool = True
    trws_passes: int = 30


@dataclass
class ProposalSet:
    """Per-superpixel ``(plane, object)`` candidates and per-object motion candidates."""

    planes: list  # (A_i, 3) arrays
    objects: list  # (A_i,) arrays
    motions: list = field(default_factory=list)  # per object, candidate 0 = current

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(o) for o in self.objects])

    def subset(self, keep: list) -> "ProposalSet":
        return ProposalSet([p[k] for p, k in zip(self.planes, keep)],
                           [o[k] for o, k in zip(self.objects, keep)], self.motions)


def _label_set(prior: tuple, allow_background: bool) -> tuple:
    labels = list(prior)
    if allow_background and 1 not in labels:
        labels.append(1)
    return tuple(labels)


def _plane_key(n: np.ndarray, k: int) -> tuple:
    return (int(k),) + tuple(np.round(n, 12))


def perturb_motion(m: RigidMotion, rng: np.random.Generator, cfg: ProposalConfig) -> RigidMotion:
    rot = rng.normal(0.0, np.deg2rad(cfg.rot_std_deg), 3)
    std_t = cfg.trans_rel_std * np.linalg.norm(m.t) + cfg.trans_abs_std
    dt = rng.normal(0.0, std_t, 3)
    step = RigidMotion.from_params(*dt, *rot)
    return RigidMotion(step.R @ m.R, m.t + dt)


def sample_proposals(model: SceneModel, prior: list, rng_seed, cfg: ProposalConfig = ProposalConfig(),
                     partition: Partition | None = None, extra_motions=()) -> ProposalSet:
    """Candidates for every superpixel and object; deterministic for a fixed seed."""
    if cfg.planes < 0 or cfg.motions < 0 or cfg.max_labels < 1:
        raise ValueError("proposal counts must be non-negative")
    if len(prior) != model.n_superpixels:
        raise ValueError("one prior label set per superpixel required")
    rng = np.random.default_rng(rng_seed)
    planes_out, objects_out = [], []
    for i in range(model.n_superpixels):
        n0, k0 = model.planes[i], int(model.objects[i])
        pool = [n0]
        if partition is not None and cfg.neighbor_planes > 0:
            nb = partition.neighbors(i)
            if nb:
                pick = rng.choice(nb, size=min(cfg.neighbor_planes, len(nb)), replace=False)
                pool += [model.planes[j] for j in sorted(pick)]
        std = cfg.plane_rel_std * np.abs(n0) + cfg.plane_abs_std
        for _ in range(cfg.planes):
            pool.append(n0 + rng.normal(0.0, 1.0, 3) * std)
        labels = _label_set(tuple(prior[i]), cfg.allow_background)
        seen = {_plane_key(n0, k0)}
        cand_p, cand_k = [n0], [k0]
        for n in pool:
            for k in labels:
                key = _plane_key(n, k)
                if key in seen or len(cand_k) >= cfg.max_labels:
                    continue
                seen.add(key)
                cand_p.append(np.asarray(n, float))
                cand_k.append(k)
        planes_out.append(np.array(cand_p))
        objects_out.append(np.array(cand_k, dtype=np.intp))
    motions_out = []
    for m in model.motions:
        cands = [m]
        cur = m
        for _ in range(cfg.motions):
            cur = perturb_motion(cur, rng, cfg)
            cands.append(cur)
        cands += list(extra_motions)
        motions_out.append(_dedupe_motions(cands))
    return ProposalSet(planes_out, objects_out, motions_out)


def _dedupe_motions(cands: list) -> list:
    out = []
    for m in cands:
        if not any(np.array_equal(m.R, o.R) and np.array_equal(m.t, o.t) for o in out):
            out.append(m)
    return out


@dataclass
class Discretization:
    problem: DiscreteProblem
    proposals: ProposalSet
    ownership: dict


def _owned(ownership: np.ndarray, n: int) -> list:
    flat = ownership.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(n + 1))
    return [order[starts[i]:starts[i + 1]] for i in range(n)]


def _candidate_flows(planes, objects, motions, rig, key, two, xs, ys):
    """Flows ``(A, P, 2)`` of each candidate at pixels ``xs, ys`` of image ``key``."""
    Hf, Hb = image_flow_homographies(planes, objects, motions, rig, *key, two_frame=two)
    A, P = len(planes), len(xs)
    ids = np.repeat(np.arange(A), P)
    ff, fb = flows_at(Hf, Hb, ids, np.tile(xs, A), np.tile(ys, A))
    return ff, fb


def _feasible(model: SceneModel, proposals: ProposalSet, ownership: dict, owned: dict,
              rig: CameraRig, params: EnergyParams, keys, two: bool) -> list:
    """Indices of candidates with a positive-depth plane and kernels within the radius."""
    h, w = model.shape
    xs_all, ys_all = pixel_grid(h, w)
    xs_all, ys_all = xs_all.ravel(), ys_all.ravel()
    keep = []
    for i in range(model.n_superpixels):
        planes, objects = proposals.planes[i], proposals.objects[i]
        ok = np.ones(len(objects), dtype=bool)
        ref_pix = owned[REFERENCE][i]
        inv = np.stack([inverse_depth(n, rig.K, xs_all[ref_pix], ys_all[ref_pix]) for n in planes])
        ok &= np.all(inv > 0, axis=1)
        for key in keys:
            pix = owned[key][i]
            if pix.size == 0:
                continue
            ff, fb = _candidate_flows(planes, objects, model.motions, rig, key, two,
                                      xs_all[pix], ys_all[pix])
            lf = params.tau * np.hypot(ff[:, 0], ff[:, 1]).reshape(len(objects), -1)
            lb = params.tau * np.hypot(fb[:, 0], fb[:, 1]).reshape(len(objects), -1)
            ok &= np.all(np.isfinite(lf) & np.isfinite(lb), axis=1)
            ok &= (np.nanmax(lf, axis=1) <= params.max_kernel_radius)
            ok &= (np.nanmax(lb, axis=1) <= params.max_kernel_radius)
        if not ok[0]:
            raise ValueError(f"incumbent state of superpixel {i} is infeasible")
        keep.append(np.flatnonzero(ok))
    return keep


def discretize(model: SceneModel, partition: Partition, proposals: ProposalSet, latents: dict,
               blurred: dict, correspondences: FeatureCorrespondences, rig: CameraRig,
               params: EnergyParams, ownership: dict | None = None) -> Discretization:
    """Unary and pairwise tables whose sum equals ``total_energy - tv`` at every labelling.

    Equality holds with non-reference visibility fixed to ``ownership``
    (default: rendered from ``model``). Candidates with a plane behind the
    camera or a blur streak beyond the kernel radius are dropped.
    """
    keys = list(latents)
    two = is_two_frame(latents)
    if ownership is None:
        ownership = compute_ownership(model, rig, keys)
    n = model.n_superpixels
    owned = {k: _owned(ownership[k], n) for k in keys}
    keep = _feasible(model, proposals, ownership, owned, rig, params, keys, two)
    props = proposals.subset(keep)
    counts = props.counts
    unary = [np.zeros(c) for c in counts]
    tables: dict = {}

    h, w = model.shape
    xs_all, ys_all = pixel_grid(h, w)
    xs_all, ys_all = xs_all.ravel(), ys_all.ravel()
    s = params.intensity_scale

    # brightness constancy
    if params.theta1 > 0:
        ref = np.asarray(latents[REFERENCE], float).reshape(h * w, -1) * s
        targets = [(t, np.asarray(latents[t.key], float) * s) for t in targets_for(keys)]
        for i in range(n):
            pix = partition.pixels[i]
            for t, img in targets:
                Hs = surface_homographies(props.planes[i], props.objects[i], model.motions, rig, *t.key)
                px, py, c = project_points(Hs[:, None], xs_all[pix], ys_all[pix])
                unary[i] += params.theta1 * brightness_cost(ref[pix], img, px, py, c).sum(axis=1)

    # sparse features
    if params.theta2 > 0:
        for t in correspondences.pairs:
            ref_xy, tgt_xy = correspondences.get(t)
            if len(ref_xy) == 0:
                continue
            own = feature_owner(model.labels, ref_xy)
            for i in np.unique(own):
                sel = own == i
                Hs = surface_homographies(props.planes[i], props.objects[i], model.motions, rig, *t.key)
                cost = feature_cost(Hs[:, None], ref_xy[sel], tgt_xy[sel], params.alpha1)
                unary[i] += params.theta2 * cost.sum(axis=1)

    # blur data: derivative pairs inside one owner are unary, across owners pairwise
    if params.theta3 > 0:
        wgt = params.theta3 * s * s
        for key in keys:
            L = np.asarray(latents[key], float)
            B = np.asarray(blurred[key], float).reshape(h * w, -1)
            own = ownership[key].ravel()
            est = {}
            pos = np.empty(h * w, dtype=np.intp)
            for i in range(n):
                pix = owned[key][i]
                if pix.size == 0:
                    continue
                pos[pix] = np.arange(pix.size)
                A = counts[i]
                ff, fb = _candidate_flows(props.planes[i], props.objects[i], model.motions, rig,
                                          key, two, xs_all[pix], ys_all[pix])
                vals = blur_at(L, np.tile(xs_all[pix], A), np.tile(ys_all[pix], A), ff, fb,
                               params.tau, params.max_kernel_radius)
                est[i] = vals.reshape(A, pix.size, -1)
            idx = np.arange(h * w).reshape(h, w)
            for a_pix, b_pix in ((idx[:, :-1].ravel(), idx[:, 1:].ravel()),
                                 (idx[:-1, :].ravel(), idx[1:, :].ravel())):
                dB = B[b_pix] - B[a_pix]
                oa, ob = own[a_pix], own[b_pix]
                same = oa == ob
                for i in np.unique(oa[same]):
                    sel = same & (oa == i)
                    e = est[i]
                    r = e[:, pos[b_pix[sel]]] - e[:, pos[a_pix[sel]]] - dB[sel]
                    unary[i] += wgt * np.sum(r ** 2, axis=(1, 2))
                cross = np.flatnonzero(~same)
                if cross.size == 0:
                    continue
                lo = np.minimum(oa[cross], ob[cross])
                hi = np.maximum(oa[cross], ob[cross])
                pair_id = lo * n + hi
                order = np.argsort(pair_id, kind="stable")
                cross, pair_id = cross[order], pair_id[order]
                cuts = np.flatnonzero(np.diff(pair_id)) + 1
                for seg in np.split(cross, cuts):
                    i, j = int(min(oa[seg[0]], ob[seg[0]])), int(max(oa[seg[0]], ob[seg[0]]))
                    # orient every pair as (value owned by i, value owned by j)
                    a_is_i = oa[seg] == i
                    pi = np.where(a_is_i, a_pix[seg], b_pix[seg])
                    pj = np.where(a_is_i, b_pix[seg], a_pix[seg])
                    sign = np.where(a_is_i, 1.0, -1.0)[:, None]
                    d = dB[seg] * sign  # residual = sign * (E_j - E_i) - dB = sign * (E_j - E_i - d)
                    Ei = est[i][:, pos[pi]]  # (A_i, P, C)
                    Ej = est[j][:, pos[pj]] - d  # (A_j, P, C)
                    Ei2 = Ei.reshape(Ei.shape[0], -1)
                    Ej2 = Ej.reshape(Ej.shape[0], -1)
                    tab = (np.sum(Ei2 ** 2, axis=1)[:, None] + np.sum(Ej2 ** 2, axis=1)[None, :]
                           - 2.0 * Ei2 @ Ej2.T)
                    _add_table(tables, i, j, wgt * tab, counts)

    # smoothness on adjacent superpixels
    if any(getattr(params, a) > 0 for a in ("theta4", "theta5", "weight_phi3", "weight_phi4")):
        for i, j in partition.edges:
            bx, by = _boundary_xy(partition, i, j)
            terms = pair_smoothness(props.planes[i], props.planes[j], props.objects[i],
                                    props.objects[j], bx, by, model.motions, rig, params)
            _add_table(tables, i, j, sum(terms), counts)
    else:
        for i, j in partition.edges:
            _add_table(tables, i, j, np.zeros((counts[i], counts[j])), counts)

    edges = sorted(tables)
    problem = DiscreteProblem(unary, edges, [tables[e] for e in edges])
    return Discretization(problem, props, ownership)


def _add_table(tables: dict, i: int, j: int, tab: np.ndarray, counts) -> None:
    key = (i, j)
    if key not in tables:
        tables[key] = np.zeros((counts[i], counts[j]))
    tables[key] += tab


def assemble(model: SceneModel, proposals: ProposalSet, labeling) -> SceneModel:
    planes = np.array([p[x] for p, x in zip(proposals.planes, labeling)])
    objects = np.array([o[x] for o, x in zip(proposals.objects, labeling)])
    return model.with_(planes=planes, objects=objects)


def sceneflow_objective(model, partition, latents, blurred, correspondences, rig, params) -> float:
    """Scene-flow energy: the full energy without the latent-only TV term."""
    e = total_energy(model, partition, latents, blurred, correspondences, rig, params)
    return e.total - e.tv


@dataclass
class RoundRecord:
    round: int
    stage: str
    energy: float
    accepted: bool
    lower_bound: float = float("nan")


def solve_sceneflow(model: SceneModel, partition: Partition, latents: dict, blurred: dict,
                    correspondences: FeatureCorrespondences, prior: list, rig: CameraRig,
                    params: EnergyParams, rounds: int = 3, seed: int = 0,
                    cfg: ProposalConfig = ProposalConfig(), extra_motions=(),
                    trace: list | None = None) -> SceneModel:
    """Block-coordinate descent on the scene-flow energy; never increases it."""
    if rounds <= 0:
        return model
    args = (partition, latents, blurred, correspondences, rig, params)
    best = model
    best_e = sceneflow_objective(best, *args)
    for r in range(rounds):
        props = sample_proposals(best, prior, [seed, r], cfg, partition, extra_motions)
        # motion block
        used = set(np.unique(best.objects).tolist())
        for k in range(1, len(best.motions) + 1):
            if k not in used:
                continue
            for cand in props.motions[k - 1][1:]:
                motions = list(best.motions)
                motions[k - 1] = cand
                trial = best.with_(motions=motions)
                try:
                    e = sceneflow_objective(trial, *args)
                except ValueError:
                    continue
                if e < best_e:
                    best, best_e = trial, e
        if trace is not None:
            trace.append(RoundRecord(r, "motion", best_e, True))
        # plane / label block
        disc = discretize(best, partition, props, latents, blurred, correspondences, rig, params)
        labeling, lbs, _ = trws_solve(disc.problem, cfg.trws_passes)
        trial = assemble(best, disc.proposals, labeling)
        try:
            e = sceneflow_objective(trial, *args)
        except ValueError:
            e = np.inf
        accepted = e <= best_e
        if accepted:
            best, best_e = trial, e
        else:
            best, best_e, accepted = _accept_groups(best, best_e, trial, partition, args,
                                                   cfg.max_fallback_groups)
        log.debug("round %d: energy %.3f (candidate %.3f, accepted %s)", r, best_e, e, accepted)
        if trace is not None:
            trace.append(RoundRecord(r, "planes", best_e, bool(accepted), lbs[-1] if lbs else np.nan))
    return best


def _changed_groups(model: SceneModel, trial: SceneModel, partition: Partition) -> list:
    changed = np.flatnonzero(np.any(model.planes != trial.planes, axis=1)
                             | (model.objects != trial.objects))
    todo = set(changed.tolist())
    groups = []
    while todo:
        seed_node = min(todo)
        stack, comp = [seed_node], []
        todo.discard(seed_node)
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in partition.neighbors(i):
                if j in todo:
                    todo.discard(j)
                    stack.append(j)
        groups.append(sorted(comp))
    return groups


def _accept_groups(best, best_e, trial, partition, args, max_groups):
    """Apply connected groups of the rejected move one at a time, keeping those that help.

    The discrete step holds visibility fixed; re-rendering it can undo the
    gain of the move as a whole while parts of it still pay off.
    """
    accepted = False
    for comp in _changed_groups(best, trial, partition)[:max_groups]:
        planes, objects = best.planes.copy(), best.objects.copy()
        planes[comp] = trial.planes[comp]
        objects[comp] = trial.objects[comp]
        cand = best.with_(planes=planes, objects=objects)
        try:
            e = sceneflow_objective(cand, *args)
        except ValueError:
            continue
        if e < best_e:
            best, best_e, accepted = cand, e, True
    return best, best_e, accepted


def write_rounds_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "stage", "energy", "accepted", "lower_bound"])
        for rec in records:
            w.writerow([rec.round, rec.stage, repr(rec.energy), int(rec.accepted), repr(rec.lower_bound)])
