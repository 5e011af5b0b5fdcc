"""Terms of the joint scene-flow / latent-image energy.

Photometric terms operate on ``params.intensity_scale * L``; geometric terms
(features, disparity, orientation, motion boundaries) are scale free.
Images are passed as dicts keyed by ``(view, frame)``; the reference is the
left middle frame ``(0, 0)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .blur import blur_at
from .core import CameraRig, EnergyParams, bilinear_sample, gradient, pixel_grid, truncated_l1
from .geometry import (HOMOG_EPS, REFERENCE, SceneModel, WarpTarget, flows_at,
                       image_flow_homographies, render_ownership, surface_homographies,
                       targets_for)
from .superpixels import Partition


@dataclass
class FeatureCorrespondences:
    """Sparse matches per warp target: ``pairs[target] = (ref_xy (P, 2), target_xy (P, 2))``."""

    pairs: dict = field(default_factory=dict)

    def get(self, target: WarpTarget):
        ref, tgt = self.pairs.get(target, (np.zeros((0, 2)), np.zeros((0, 2))))
        return np.asarray(ref, float).reshape(-1, 2), np.asarray(tgt, float).reshape(-1, 2)

    def __len__(self) -> int:
        return sum(len(self.get(t)[0]) for t in self.pairs)


@dataclass
class EnergyBreakdown:
    data1: float = 0.0
    data2: float = 0.0
    data3: float = 0.0
    smooth1: float = 0.0
    smooth2: float = 0.0
    smooth3: float = 0.0
    smooth4: float = 0.0
    tv: float = 0.0
    total: float = field(init=False)

    def __post_init__(self):
        for f in fields(self):
            if f.name != "total":
                setattr(self, f.name, float(getattr(self, f.name)))
        self.total = float(sum(getattr(self, f.name) for f in fields(self) if f.name != "total"))
        if not np.isfinite(self.total):
            raise ValueError("non-finite energy")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def is_two_frame(images: dict) -> bool:
    return (0, -1) not in images


def project_many(H: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Project points ``(P,)`` through ``(A, 3, 3)`` homographies -> ``(A, P)`` arrays."""
    h = H[:, :, :, None]
    a = h[:, 0, 0] * xs + h[:, 0, 1] * ys + h[:, 0, 2]
    b = h[:, 1, 0] * xs + h[:, 1, 1] * ys + h[:, 1, 2]
    c = h[:, 2, 0] * xs + h[:, 2, 1] * ys + h[:, 2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / c, b / c, c


def brightness_cost(ref_vals: np.ndarray, target: np.ndarray, px, py, c) -> np.ndarray:
    """Per-point l1 photometric difference (summed over channels), zero where invalid."""
    h, w = target.shape[:2]
    valid = (c > HOMOG_EPS) & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    px = np.where(valid, px, 0.0)
    py = np.where(valid, py, 0.0)
    vals = bilinear_sample(target, px, py)
    cost = np.abs(vals - ref_vals).sum(axis=-1)
    return np.where(valid, cost, 0.0)


def data_brightness(model: SceneModel, latents: dict, rig: CameraRig, params: EnergyParams) -> float:
    """Brightness constancy between the reference and its five warp targets."""
    if params.theta1 == 0:
        return 0.0
    xs, ys = pixel_grid(*model.shape)
    xs, ys = xs.ravel(), ys.ravel()
    lab = model.labels.ravel()
    ref = np.asarray(latents[REFERENCE], float).reshape(len(xs), -1) * params.intensity_scale
    total = 0.0
    for tgt in targets_for(latents):
        Hs = surface_homographies(model.planes, model.objects, model.motions, rig, *tgt.key)
        px, py, c = _project_pointwise(Hs[lab], xs, ys)
        cost = brightness_cost(ref, latents[tgt.key] * params.intensity_scale, px, py, c)
        total += cost.sum()
    return params.theta1 * float(total)


def feature_cost(H: np.ndarray, ref_xy: np.ndarray, tgt_xy: np.ndarray, alpha: float) -> np.ndarray:
    """Truncated reprojection error of matches under per-point homographies ``(..., 3, 3)``."""
    px, py, c = _project_pointwise(H, ref_xy[:, 0], ref_xy[:, 1])
    err = np.hypot(px - tgt_xy[:, 0], py - tgt_xy[:, 1])
    err = np.where((c > HOMOG_EPS) & np.isfinite(err), err, alpha)
    return truncated_l1(err, alpha)


def _project_pointwise(H, xs, ys):
    a = H[..., 0, 0] * xs + H[..., 0, 1] * ys + H[..., 0, 2]
    b = H[..., 1, 0] * xs + H[..., 1, 1] * ys + H[..., 1, 2]
    c = H[..., 2, 0] * xs + H[..., 2, 1] * ys + H[..., 2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / c, b / c, c


def feature_owner(labels: np.ndarray, ref_xy: np.ndarray) -> np.ndarray:
    h, w = labels.shape
    cx = np.clip(np.rint(ref_xy[:, 0]).astype(np.intp), 0, w - 1)
    cy = np.clip(np.rint(ref_xy[:, 1]).astype(np.intp), 0, h - 1)
    return labels[cy, cx]


def data_features(model: SceneModel, correspondences: FeatureCorrespondences, rig: CameraRig,
                  params: EnergyParams) -> float:
    if params.theta2 == 0:
        return 0.0
    total = 0.0
    for tgt, _ in correspondences.pairs.items():
        ref_xy, tgt_xy = correspondences.get(tgt)
        if len(ref_xy) == 0:
            continue
        Hs = surface_homographies(model.planes, model.objects, model.motions, rig, *tgt.key)
        owner = feature_owner(model.labels, ref_xy)
        total += feature_cost(Hs[owner], ref_xy, tgt_xy, params.alpha1).sum()
    return params.theta2 * float(total)


def compute_ownership(model: SceneModel, rig: CameraRig, keys) -> dict:
    """Visible superpixel per pixel for every image key."""
    out = {}
    for key in keys:
        out[key] = model.labels if key == REFERENCE else render_ownership(model, rig, *key)[0]
    return out


def blurred_estimate(model: SceneModel, L: np.ndarray, rig: CameraRig, key, owner: np.ndarray,
                     params: EnergyParams, two_frame: bool = False) -> np.ndarray:
    """``A_m L_m`` for image ``key`` with kernels from the owning superpixels' flows."""
    Hf, Hb = image_flow_homographies(model.planes, model.objects, model.motions, rig, *key,
                                     two_frame=two_frame)
    h, w = model.shape
    xs, ys = pixel_grid(h, w)
    xs, ys = xs.ravel(), ys.ravel()
    ff, fb = flows_at(Hf, Hb, owner.ravel(), xs, ys)
    vals = blur_at(L, xs, ys, ff, fb, params.tau, params.max_kernel_radius)
    return vals.reshape(h, w, -1)


def data_blur(model: SceneModel, latents: dict, blurred: dict, rig: CameraRig, params: EnergyParams,
              ownership: dict | None = None) -> float:
    """Gradient-domain fit of re-blurred latents to the observed blurred images."""
    if params.theta3 == 0:
        return 0.0
    two = is_two_frame(latents)
    if ownership is None:
        ownership = compute_ownership(model, rig, latents.keys())
    s = params.intensity_scale
    total = 0.0
    for key, L in latents.items():
        est = blurred_estimate(model, L, rig, key, ownership[key], params, two)
        r = gradient(est) - gradient(np.asarray(blurred[key], float))
        total += float(np.sum(r ** 2))
    return params.theta3 * s * s * total


def plane_disparity(planes: np.ndarray, rig: CameraRig, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Disparity of each plane ``(A, 3)`` at points ``(P,)`` -> ``(A, P)``."""
    m = np.atleast_2d(planes) @ np.linalg.inv(rig.K)
    return rig.focal * rig.baseline * (m[:, :1] * xs + m[:, 1:2] * ys + m[:, 2:3])


def normal_cosine(ni: np.ndarray, nj: np.ndarray) -> np.ndarray:
    """``|n_i . n_j| / (|n_i| |n_j|)`` broadcasting over leading axes."""
    num = np.abs(np.sum(ni * nj, axis=-1))
    den = np.linalg.norm(ni, axis=-1) * np.linalg.norm(nj, axis=-1)
    if np.any(den == 0):
        raise ValueError("zero-norm plane")
    return num / den


def motion_similarity(mi, mj, params: EnergyParams) -> float:
    """``G(o_i, o_j)`` comparing two rigid motions."""
    rot = (np.trace(mi.R.T @ mj.R) - 1.0) / 2.0
    return params.theta_r * rot + params.theta_t * np.exp(-np.linalg.norm(mi.t - mj.t))


def _boundary_xy(partition: Partition, i: int, j: int):
    w = partition.shape[1]
    pix = partition.boundary(i, j)
    y, x = np.divmod(pix, w)
    return x.astype(np.float64), y.astype(np.float64)


def pair_smoothness(ni, nj, ki, kj, xs, ys, motions, rig: CameraRig, params: EnergyParams):
    """Smoothness terms of one adjacent pair for plane/label candidates.

    ``ni``/``ki`` have a leading axis ``A`` and ``nj``/``kj`` a leading axis
    ``B``; returns four ``(A, B)`` tables (depth, orientation, phi3, phi4).
    """
    di = plane_disparity(ni, rig, xs, ys)  # (A, P)
    dj = plane_disparity(nj, rig, xs, ys)  # (B, P)
    omega = di[:, None, :] - dj[None, :, :]
    depth = params.theta4 * truncated_l1(omega, params.alpha2).sum(axis=2)
    cos = normal_cosine(ni[:, None, :], nj[None, :, :])
    orient = params.theta5 * truncated_l1(1.0 - cos, params.alpha3)
    nb = max(len(xs), 1)
    diff = np.asarray(ki)[:, None] != np.asarray(kj)[None, :]
    phi3 = params.weight_phi3 * np.exp(-params.lam / nb * np.sum(omega ** 2, axis=2)) * cos * diff
    G = np.zeros(diff.shape)
    for a, ka in enumerate(ki):
        for b, kb in enumerate(kj):
            if ka != kb:
                G[a, b] = motion_similarity(motions[ka - 1], motions[kb - 1], params)
    # sum over boundary pixels of a pixel-independent G, normalised by |B|
    phi4 = params.weight_phi4 * np.exp(-params.lam / nb * (nb * G)) * cos * diff
    return depth, orient, phi3, phi4


def smoothness_terms(model: SceneModel, partition: Partition, rig: CameraRig,
                     params: EnergyParams) -> tuple[float, float, float, float]:
    out = np.zeros(4)
    for i, j in partition.edges:
        xs, ys = _boundary_xy(partition, i, j)
        terms = pair_smoothness(model.planes[i:i + 1], model.planes[j:j + 1], model.objects[i:i + 1],
                                model.objects[j:j + 1], xs, ys, model.motions, rig, params)
        out += [float(t[0, 0]) for t in terms]
    return tuple(out)


def smooth_depth(model, partition, rig, params) -> float:
    return smoothness_terms(model, partition, rig, params)[0]


def smooth_orientation(model, partition, rig, params) -> float:
    return smoothness_terms(model, partition, rig, params)[1]


def smooth_motion_boundary(model, partition, rig, params) -> float:
    t = smoothness_terms(model, partition, rig, params)
    return t[2] + t[3]


def tv(latents, params: EnergyParams | None = None) -> float:
    """Isotropic total variation summed over images and channels."""
    s = 1.0 if params is None else params.intensity_scale
    imgs = latents.values() if isinstance(latents, dict) else latents
    total = 0.0
    for L in imgs:
        g = gradient(np.asarray(L, float))
        total += float(np.sqrt(g[..., 0] ** 2 + g[..., 1] ** 2).sum())
    return s * total


def total_energy(model: SceneModel, partition: Partition, latents: dict, blurred: dict,
                 correspondences: FeatureCorrespondences, rig: CameraRig, params: EnergyParams,
                 ownership: dict | None = None) -> EnergyBreakdown:
    """Full energy. ``ownership`` fixes per-image visibility (default: rendered from ``model``)."""
    s1, s2, s3, s4 = smoothness_terms(model, partition, rig, params)
    return EnergyBreakdown(
        data1=data_brightness(model, latents, rig, params),
        data2=data_features(model, correspondences, rig, params),
        data3=data_blur(model, latents, blurred, rig, params, ownership),
        smooth1=s1, smooth2=s2, smooth3=s3, smooth4=s4,
        tv=tv(latents, params))
