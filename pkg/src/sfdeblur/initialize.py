"""Initial disparity, sparse matches, rigid-motion hypotheses and plane fits."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .core import INVALID_DISPARITY, CameraRig, as_image, bilinear_sample, pixel_grid
from .geometry import REFERENCE, RigidMotion, SceneModel, targets_for
from .energy import FeatureCorrespondences
from .superpixels import Partition

ZNCC_WINDOW = 9
TEXTURE_STD = 0.01
SGM_P1 = 0.1
SGM_P2 = 0.6
LR_TOLERANCE = 1.0


def _gray(img) -> np.ndarray:
    return as_image(img).mean(axis=2).astype(np.float64)


def _box(img: np.ndarray, k: int) -> np.ndarray:
    return cv2.boxFilter(img, cv2.CV_64F, (k, k), normalize=True, borderType=cv2.BORDER_REFLECT)


def zncc_volume(left: np.ndarray, right: np.ndarray, max_disp: int, window: int = ZNCC_WINDOW):
    """Matching cost ``1 - ZNCC`` for disparities ``0..max_disp``; ``(H, W, D)``.

    Disparities that leave the right image get the maximal cost 2.
    """
    h, w = left.shape
    mu_l = _box(left, window)
    sd_l = np.sqrt(np.maximum(_box(left * left, window) - mu_l ** 2, 0.0))
    cost = np.full((h, w, max_disp + 1), 2.0)
    for d in range(max_disp + 1):
        shifted = np.empty_like(right)
        shifted[:, d:] = right[:, :w - d]
        shifted[:, :d] = right[:, :1]
        mu_r = _box(shifted, window)
        sd_r = np.sqrt(np.maximum(_box(shifted * shifted, window) - mu_r ** 2, 0.0))
        cov = _box(left * shifted, window) - mu_l * mu_r
        den = sd_l * sd_r
        z = np.where(den > 1e-12, cov / np.maximum(den, 1e-12), 0.0)
        c = 1.0 - np.clip(z, -1.0, 1.0)
        c[:, :d] = 2.0
        cost[:, :, d] = c
    return cost, sd_l


def _aggregate_path(cost: np.ndarray, p1: float, p2: float, axis: int, reverse: bool) -> np.ndarray:
    c = np.moveaxis(cost, axis, 0)
    if reverse:
        c = c[::-1]
    out = np.empty_like(c)
    prev = c[0].copy()
    out[0] = prev
    for i in range(1, c.shape[0]):
        m = prev.min(axis=-1, keepdims=True)
        up = np.concatenate([prev[..., 1:], np.full(prev.shape[:-1] + (1,), np.inf)], axis=-1)
        dn = np.concatenate([np.full(prev.shape[:-1] + (1,), np.inf), prev[..., :-1]], axis=-1)
        best = np.minimum(np.minimum(prev, np.minimum(up, dn) + p1), m + p2)
        prev = c[i] + best - m
        out[i] = prev
    if reverse:
        out = out[::-1]
    return np.moveaxis(out, 0, axis)


def sgm_aggregate(cost: np.ndarray, p1: float = SGM_P1, p2: float = SGM_P2) -> np.ndarray:
    """Sum of four scanline (left, right, up, down) path costs."""
    total = np.zeros_like(cost)
    for axis in (0, 1):
        for rev in (False, True):
            total += _aggregate_path(cost, p1, p2, axis, rev)
    return total


def _subpixel(vol: np.ndarray, d: np.ndarray) -> np.ndarray:
    D = vol.shape[2]
    dm = np.clip(d - 1, 0, D - 1)
    dp = np.clip(d + 1, 0, D - 1)
    c0 = np.take_along_axis(vol, d[..., None], 2)[..., 0]
    cm = np.take_along_axis(vol, dm[..., None], 2)[..., 0]
    cp = np.take_along_axis(vol, dp[..., None], 2)[..., 0]
    den = cm - 2 * c0 + cp
    inner = (d > 0) & (d < D - 1) & (den > 1e-12)
    off = np.where(inner, (cm - cp) / (2 * np.where(inner, den, 1.0)), 0.0)
    return d + np.clip(off, -0.5, 0.5)


def init_disparity(left, right, max_disp: int | None = None, window: int = ZNCC_WINDOW) -> np.ndarray:
    """Semi-global ZNCC block matching with a left-right consistency check.

    Returns a disparity map with :data:`INVALID_DISPARITY` on inconsistent
    and textureless pixels.
    """
    L, R = _gray(left), _gray(right)
    if L.shape != R.shape:
        raise ValueError("left and right images differ in size")
    h, w = L.shape
    if max_disp is None:
        max_disp = max(1, min(64, w // 4))
    if max_disp >= w or max_disp < 0:
        raise ValueError(f"max_disp {max_disp} must lie in [0, width={w})")
    cost, sd_l = zncc_volume(L, R, max_disp, window)
    agg = sgm_aggregate(cost)
    d_left = np.argmin(agg, axis=2)
    # right-view disparities from the same volume: pixel xr matches left xr + d
    xs = np.arange(w)
    right_agg = np.full_like(agg, np.inf)
    for d in range(max_disp + 1):
        right_agg[:, :w - d, d] = agg[:, d:, d]
    d_right = np.argmin(right_agg, axis=2)
    xr = xs[None, :] - d_left
    ok = xr >= 0
    back = d_right[np.arange(h)[:, None], np.clip(xr, 0, w - 1)]
    ok &= np.abs(back - d_left) <= LR_TOLERANCE
    ok &= sd_l > TEXTURE_STD
    disp = _subpixel(agg, d_left).astype(np.float64)
    return np.where(ok, disp, INVALID_DISPARITY)


def _peak_subpixel(score: np.ndarray, iy: int, ix: int) -> tuple[float, float]:
    def off(a, b, c):
        den = a - 2 * b + c
        return 0.0 if abs(den) < 1e-12 else float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))

    h, w = score.shape
    dx = off(score[iy, ix - 1], score[iy, ix], score[iy, ix + 1]) if 0 < ix < w - 1 else 0.0
    dy = off(score[iy - 1, ix], score[iy, ix], score[iy + 1, ix]) if 0 < iy < h - 1 else 0.0
    return ix + dx, iy + dy


def _match_one(src, dst, x, y, radius, half, min_score, ratio):
    h, w = dst.shape
    tpl = src[y - half:y + half + 1, x - half:x + half + 1]
    x0, x1 = max(x - radius - half, 0), min(x + radius + half + 1, w)
    y0, y1 = max(y - radius - half, 0), min(y + radius + half + 1, h)
    win = dst[y0:y1, x0:x1]
    if win.shape[0] < tpl.shape[0] or win.shape[1] < tpl.shape[1] or tpl.std() < TEXTURE_STD:
        return None
    score = cv2.matchTemplate(win.astype(np.float32), tpl.astype(np.float32), cv2.TM_CCOEFF_NORMED)
    score = np.nan_to_num(score.astype(np.float64), nan=-1.0)
    iy, ix = np.unravel_index(int(np.argmax(score)), score.shape)
    best = score[iy, ix]
    if best < min_score:
        return None
    # a peak on the edge of the search window may be a truncated slope, not a maximum
    if iy in (0, score.shape[0] - 1) or ix in (0, score.shape[1] - 1):
        return None
    masked = score.copy()
    masked[max(iy - 2, 0):iy + 3, max(ix - 2, 0):ix + 3] = -np.inf
    second = masked.max() if np.isfinite(masked).any() else -1.0
    if (1.0 - best) > ratio * (1.0 - second):
        return None
    sx, sy = _peak_subpixel(score, iy, ix)
    return x0 + sx + half, y0 + sy + half


def sparse_matches(imgA, imgB, radius: int = 40, max_corners: int = 400, patch: int = 11,
                   min_score: float = 0.8, ratio: float = 0.8):
    """Harris corners of ``imgA`` matched into ``imgB`` by ZNCC.

    Keeps matches passing a ratio test and a reverse match that lands
    within one pixel of the corner. Returns ``(xy_A, xy_B)`` arrays ``(P, 2)``.
    """
    A, B = _gray(imgA), _gray(imgB)
    if A.shape != B.shape:
        raise ValueError("images differ in size")
    half = patch // 2
    h, w = A.shape
    corners = cv2.goodFeaturesToTrack(A.astype(np.float32), max_corners, 0.01, 5,
                                      useHarrisDetector=True, k=0.04)
    src, dst = [], []
    if corners is None:
        return np.zeros((0, 2)), np.zeros((0, 2))
    for cx, cy in corners.reshape(-1, 2):
        x, y = int(round(cx)), int(round(cy))
        if x < half or y < half or x >= w - half or y >= h - half:
            continue
        fwd = _match_one(A, B, x, y, radius, half, min_score, ratio)
        if fwd is None:
            continue
        bx, by = int(round(fwd[0])), int(round(fwd[1]))
        if bx < half or by < half or bx >= w - half or by >= h - half:
            continue
        back = _match_one(B, A, bx, by, radius, half, min_score, ratio)
        if back is None or np.hypot(back[0] - x, back[1] - y) > 1.0:
            continue
        src.append((float(x), float(y)))
        dst.append(fwd)
    if not src:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.array(src), np.array(dst)


def reference_correspondences(images: dict, **kw) -> FeatureCorrespondences:
    ref = images[REFERENCE]
    pairs = {}
    for t in targets_for(images):
        pairs[t] = sparse_matches(ref, images[t.key], **kw)
    return FeatureCorrespondences(pairs)


def procrustes(P: np.ndarray, Q: np.ndarray) -> RigidMotion:
    """Least-squares motion with ``Q ~ R P - t``."""
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Hm = (P - mp).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidMotion(R, R @ mp - mq)


def backproject(xy: np.ndarray, disp: np.ndarray, rig: CameraRig) -> np.ndarray:
    """3D points of pixels ``(P, 2)`` with disparities ``(P,)``."""
    Z = rig.focal * rig.baseline / disp
    ray = np.c_[xy, np.ones(len(xy))] @ rig.K_inv.T
    return ray * Z[:, None]


def _residuals(m: RigidMotion, P, Q, rig: CameraRig | None):
    pred = m.apply(P)
    if rig is None:
        return np.linalg.norm(pred - Q, axis=1)
    fb = rig.focal * rig.baseline

    def img(X):
        x = X @ rig.K.T
        z = np.where(np.abs(X[:, 2]) > 1e-9, X[:, 2], 1e-9)
        return np.c_[x[:, 0] / z, x[:, 1] / z, fb / z]

    return np.linalg.norm(img(pred) - img(Q), axis=1)


@dataclass
class MotionHypothesis:
    motion: RigidMotion
    inliers: np.ndarray  # indices into the input arrays


def ransac_motions(P, Q, max_objects: int = 4, threshold: float = 0.05, seed: int = 0,
                   iters: int = 300, min_inliers: int = 6, rig: CameraRig | None = None) -> list:
    """Greedy sequential 3-point RANSAC; the first hypothesis is the dominant motion.

    Residuals are 3D distances, or image-plus-disparity distances in pixels
    when ``rig`` is given.
    """
    P = np.asarray(P, float).reshape(-1, 3)
    Q = np.asarray(Q, float).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError("point sets differ in size")
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(P))
    out = []
    while len(out) < max_objects and len(remaining) >= 3:
        best_in = None
        for _ in range(iters):
            pick = rng.choice(len(remaining), 3, replace=False)
            idx = remaining[pick]
            if np.linalg.matrix_rank(P[idx] - P[idx].mean(axis=0), tol=1e-9) < 2:
                continue
            m = procrustes(P[idx], Q[idx])
            inl = remaining[_residuals(m, P[remaining], Q[remaining], rig) < threshold]
            if best_in is None or len(inl) > len(best_in):
                best_in = inl
        if best_in is None or len(best_in) < max(3, min_inliers):
            break
        for _ in range(2):
            m = procrustes(P[best_in], Q[best_in])
            refit = remaining[_residuals(m, P[remaining], Q[remaining], rig) < threshold]
            if len(refit) < 3:
                break
            best_in = refit
        m = procrustes(P[best_in], Q[best_in])
        out.append(MotionHypothesis(m, np.sort(best_in)))
        remaining = np.setdiff1d(remaining, best_in)
    return out


def fit_plane(xs, ys, d, rig: CameraRig, passes: int = 2) -> np.ndarray | None:
    """Plane through disparity samples ``d = a x + b y + c`` with reweighting."""
    if len(d) < 3:
        return None
    A = np.c_[xs, ys, np.ones(len(xs))]
    if np.linalg.matrix_rank(A - A.mean(axis=0) * [1, 1, 0]) < 3:
        return None
    wts = np.ones(len(d))
    coef = None
    for _ in range(passes + 1):
        sw = np.sqrt(wts)
        coef, *_ = np.linalg.lstsq(A * sw[:, None], d * sw, rcond=None)
        r = np.abs(A @ coef - d)
        scale = max(1.4826 * np.median(r), 0.25)
        wts = 1.0 / np.maximum(r / scale, 1.0)
    return rig.K.T @ (coef / (rig.focal * rig.baseline))


def _fronto(d_med: float, rig: CameraRig) -> np.ndarray:
    return np.array([0.0, 0.0, d_med / (rig.focal * rig.baseline)])


def fit_planes(partition: Partition, disparity: np.ndarray, rig: CameraRig) -> np.ndarray:
    """One plane per superpixel; superpixels without usable samples inherit a neighbour's."""
    h, w = partition.shape
    xs, ys = pixel_grid(h, w)
    xs, ys, dflat = xs.ravel(), ys.ravel(), np.asarray(disparity, float).ravel()
    planes = np.full((partition.n, 3), np.nan)
    for i, pix in enumerate(partition.pixels):
        v = pix[dflat[pix] > 0]
        if v.size == 0:
            continue
        n = fit_plane(xs[v], ys[v], dflat[v], rig) if v.size >= 10 else None
        if n is not None:
            inv = n @ rig.K_inv
            dp = rig.focal * rig.baseline * (inv[0] * xs[pix] + inv[1] * ys[pix] + inv[2])
            if np.all(dp > 0) and np.abs(np.median(dp[np.isin(pix, v)]) - np.median(dflat[v])) <= 1.0:
                planes[i] = n
                continue
        planes[i] = _fronto(float(np.median(dflat[v])), rig)
    missing = np.flatnonzero(np.isnan(planes[:, 0]))
    if missing.size == partition.n:
        raise ValueError("no valid disparity to initialise planes")
    while missing.size:
        progressed = False
        for i in missing:
            best, best_len = None, 0
            for j in partition.neighbors(i):
                if not np.isnan(planes[j, 0]):
                    blen = len(partition.boundary(i, j))
                    if blen > best_len:
                        best, best_len = j, blen
            if best is not None:
                planes[i] = planes[best]
                progressed = True
        missing = np.flatnonzero(np.isnan(planes[:, 0]))
        if not progressed and missing.size:
            planes[missing] = np.nanmedian(planes, axis=0)
            break
    return planes


def motion_pairs(corr_flow, disp0: np.ndarray, disp1: np.ndarray, rig: CameraRig):
    """3D point pairs from reference-to-next-frame matches and both disparity maps."""
    ref_xy, tgt_xy = corr_flow
    if len(ref_xy) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2))

    h, w = disp0.shape[:2]

    def sample(dmap, xy):
        inside = (xy[:, 0] >= 0) & (xy[:, 0] <= w - 1) & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1)
        d = bilinear_sample(dmap, xy[:, 0], xy[:, 1])[:, 0]
        # any invalid neighbour drags the interpolant down; require all four valid
        lo = np.minimum.reduce([bilinear_sample(dmap, np.floor(xy[:, 0]) + ox, np.floor(xy[:, 1]) + oy)[:, 0]
                                for ox in (0, 1) for oy in (0, 1)])
        return np.where(inside & (lo > 0), d, -1.0)

    d0 = sample(disp0, ref_xy)
    d1 = sample(disp1, tgt_xy)
    ok = (d0 > 0) & (d1 > 0)
    return (backproject(ref_xy[ok], d0[ok], rig), backproject(tgt_xy[ok], d1[ok], rig), ref_xy[ok])


def initial_objects(partition: Partition, prior: list, hypotheses: list, ref_xy: np.ndarray) -> np.ndarray:
    """Object per superpixel: background outside the prior; inside, the foreground
    hypothesis with most inlier features in the superpixel (else the first)."""
    objects = np.ones(partition.n, dtype=np.intp)
    h, w = partition.shape
    votes = np.zeros((partition.n, len(hypotheses) + 1))
    for k, hyp in enumerate(hypotheses, start=1):
        xy = ref_xy[hyp.inliers]
        if len(xy):
            sp_id = partition.labels[np.clip(np.rint(xy[:, 1]).astype(int), 0, h - 1),
                                     np.clip(np.rint(xy[:, 0]).astype(int), 0, w - 1)]
            np.add.at(votes[:, k], sp_id, 1)
    for i, labels in enumerate(prior):
        if labels == (1,):
            continue
        cand = [k for k in labels if k <= len(hypotheses)]
        if not cand:
            objects[i] = labels[0]
            continue
        objects[i] = max(cand, key=lambda k: (votes[i, k], -k))
    return objects


def initial_model(partition: Partition, disparity: np.ndarray, rig: CameraRig, prior: list,
                  hypotheses: list, ref_xy: np.ndarray, num_objects: int) -> SceneModel:
    planes = fit_planes(partition, disparity, rig)
    motions = [h.motion for h in hypotheses][:num_objects]
    while len(motions) < num_objects:
        motions.append(motions[0] if motions else RigidMotion())
    objects = initial_objects(partition, prior, hypotheses[:num_objects], ref_xy)
    return SceneModel(partition.labels, planes, np.minimum(objects, num_objects), motions)
