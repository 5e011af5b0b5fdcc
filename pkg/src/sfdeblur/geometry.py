"""Piecewise-planar scene geometry: planes, rigid motions, homographies and warps.

Conventions
-----------
* A plane is a 3-vector ``n`` with ``n . X = 1`` for points ``X`` on it,
  expressed in the reference (left, middle frame) camera coordinates.
* A :class:`RigidMotion` ``(R, t)`` maps a point to ``R X - t``. The induced
  plane homography is then ``K (R - t n^T) K^-1``; the right camera of a rig
  with baseline ``b`` is the motion ``(I, (b, 0, 0))``.
* Flow follows ``u = x - pi(H x)``; the matched pixel is ``x* = pi(H x)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm, logm
from scipy.ndimage import distance_transform_edt
from scipy.spatial.transform import Rotation

from .core import INVALID_DISPARITY, CameraRig, bilinear_sample, pixel_grid

HOMOG_EPS = 1e-12


@dataclass(frozen=True)
class RigidMotion:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("motion must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("R is not a rotation matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls()

    @classmethod
    def from_params(cls, tx=0.0, ty=0.0, tz=0.0, rx=0.0, ry=0.0, rz=0.0) -> "RigidMotion":
        """Translation (m) and rotation vector (rad)."""
        return cls(Rotation.from_rotvec([rx, ry, rz]).as_matrix(), np.array([tx, ty, tz], float))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "RigidMotion":
        R = M[:3, :3]
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] *= -1
            R = u @ vt
        return cls(R, -M[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = -self.t
        return M

    def params(self) -> np.ndarray:
        return np.concatenate([self.t, Rotation.from_matrix(self.R).as_rotvec()])

    def apply(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T - self.t

    def compose(self, first: "RigidMotion") -> "RigidMotion":
        """Motion equivalent to applying ``first`` then ``self``."""
        return RigidMotion(self.R @ first.R, self.R @ first.t + self.t)

    def inverse(self) -> "RigidMotion":
        return RigidMotion(self.R.T, -self.R.T @ self.t)

    def power(self, s: float) -> "RigidMotion":
        """Constant-velocity interpolation/extrapolation ``self ** s``."""
        if s == 0:
            return RigidMotion()
        if float(s).is_integer():
            base = self if s > 0 else self.inverse()
            out = RigidMotion()
            for _ in range(int(abs(s))):
                out = base.compose(out)
            return out
        if np.allclose(self.R, np.eye(3), atol=1e-15):
            return RigidMotion(np.eye(3), s * self.t)
        log = np.real(logm(self.matrix))
        return RigidMotion.from_matrix(expm(s * log))


def stereo_motion(rig: CameraRig) -> RigidMotion:
    return RigidMotion(np.eye(3), np.array([rig.baseline, 0.0, 0.0]))


def transform_plane(n: np.ndarray, motion: RigidMotion) -> np.ndarray:
    """Plane parameters after the coordinate change ``X' = R X - t``."""
    rn = motion.R @ np.asarray(n, dtype=np.float64)
    denom = 1.0 - rn @ motion.t
    if abs(denom) < 1e-12:
        raise ValueError("plane passes through the moved camera center")
    return rn / denom


def homography(K: np.ndarray, motion: RigidMotion, plane: np.ndarray) -> np.ndarray:
    """Plane-induced homography ``K (R - t n^T) K^-1`` scaled so ``H[2, 2] = 1``."""
    K = np.asarray(K, dtype=np.float64)
    if abs(np.linalg.det(K)) < 1e-12:
        raise ValueError("singular calibration matrix")
    n = np.asarray(plane, dtype=np.float64).reshape(3)
    H = K @ (motion.R - np.outer(motion.t, n)) @ np.linalg.inv(K)
    if abs(H[2, 2]) > 1e-15:
        H = H / H[2, 2]
    return H


def project_points(H: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Apply per-point (or shared) homographies; returns ``(x*, y*, w)``."""
    H = np.asarray(H)
    if H.ndim == 2:
        a = H[0, 0] * xs + H[0, 1] * ys + H[0, 2]
        b = H[1, 0] * xs + H[1, 1] * ys + H[1, 2]
        c = H[2, 0] * xs + H[2, 1] * ys + H[2, 2]
    else:
        a = H[..., 0, 0] * xs + H[..., 0, 1] * ys + H[..., 0, 2]
        b = H[..., 1, 0] * xs + H[..., 1, 1] * ys + H[..., 1, 2]
        c = H[..., 2, 0] * xs + H[..., 2, 1] * ys + H[..., 2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / c, b / c, c


def flow_from_homography(H: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Dense flow ``u(x) = x - pi(H x)`` over an ``(h, w)`` domain."""
    h, w = shape[:2]
    xs, ys = pixel_grid(h, w)
    px, py, c = project_points(H, xs, ys)
    bad = c <= HOMOG_EPS
    if np.any(bad):
        r, col = np.argwhere(bad)[0]
        raise ValueError(f"homography maps pixel (x={col}, y={r}) to infinity or behind the camera")
    return np.stack([xs - px, ys - py], axis=-1)


def inverse_depth(plane: np.ndarray, K: np.ndarray, xs, ys) -> np.ndarray:
    """``1/Z`` of the plane at pixels ``(xs, ys)``."""
    Ki = np.linalg.inv(K)
    m = np.asarray(plane, dtype=np.float64) @ Ki
    return m[0] * xs + m[1] * ys + m[2]


def disparity_from_plane(plane: np.ndarray, rig: CameraRig, shape: tuple[int, int]) -> np.ndarray:
    """Disparity ``f * b * (n . K^-1 x)`` induced by ``plane``; non-positive values are invalid."""
    n = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(n)) or np.linalg.norm(n) == 0:
        raise ValueError("plane must be finite and non-zero")
    xs, ys = pixel_grid(*shape[:2])
    d = rig.focal * rig.baseline * inverse_depth(n, rig.K, xs, ys)
    return np.where(d > 0, d, INVALID_DISPARITY)


class WarpTarget(enum.Enum):
    STEREO = "stereo"
    FLOW_F = "flow_f"
    FLOW_B = "flow_b"
    CROSS_F = "cross_f"
    CROSS_B = "cross_b"

    @property
    def key(self) -> tuple[int, int]:
        """``(view, frame)`` of the target image; view 0 = left, 1 = right."""
        return _TARGET_KEYS[self]


_TARGET_KEYS = {
    WarpTarget.STEREO: (1, 0),
    WarpTarget.FLOW_F: (0, 1),
    WarpTarget.FLOW_B: (0, -1),
    WarpTarget.CROSS_F: (1, 1),
    WarpTarget.CROSS_B: (1, -1),
}
REFERENCE = (0, 0)
ALL_KEYS = [(0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
TWO_FRAME_KEYS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def targets_for(keys) -> list[WarpTarget]:
    keys = set(keys)
    return [t for t in WarpTarget if t.key in keys]


@dataclass
class SceneModel:
    """Superpixel map with a plane and object label per superpixel and a motion per object.

    ``objects[i]`` is 1-based; object 1 is the background. ``motions[k - 1]``
    is the frame-to-frame motion of object ``k`` in reference camera
    coordinates.
    """

    labels: np.ndarray
    planes: np.ndarray
    objects: np.ndarray
    motions: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.planes = np.asarray(self.planes, dtype=np.float64).reshape(-1, 3)
        self.objects = np.asarray(self.objects, dtype=np.intp).ravel()
        n_sp = self.planes.shape[0]
        if self.objects.shape[0] != n_sp:
            raise ValueError("one object label per superpixel required")
        if self.labels.min() < 0 or self.labels.max() >= n_sp:
            raise ValueError("superpixel ids out of range")
        if self.objects.min() < 1 or self.objects.max() > len(self.motions):
            raise ValueError("object label references a missing motion")
        if not np.all(np.isfinite(self.planes)) or np.any(np.linalg.norm(self.planes, axis=1) == 0):
            raise ValueError("planes must be finite and non-zero")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_superpixels(self) -> int:
        return self.planes.shape[0]

    def copy(self) -> "SceneModel":
        return SceneModel(self.labels.copy(), self.planes.copy(), self.objects.copy(),
                          list(self.motions))

    def with_(self, planes=None, objects=None, motions=None) -> "SceneModel":
        return SceneModel(self.labels,
                          self.planes if planes is None else planes,
                          self.objects if objects is None else objects,
                          list(self.motions) if motions is None else list(motions))


def view_frame_motion(motion: RigidMotion, rig: CameraRig, view: int, frame: int) -> RigidMotion:
    """Coordinate change from the reference camera to camera ``view`` at ``frame``."""
    m = motion.power(frame)
    if view == 1:
        m = stereo_motion(rig).compose(m)
    return m


def surface_homographies(planes: np.ndarray, objects: np.ndarray, motions: list,
                         rig: CameraRig, view: int, frame: int) -> np.ndarray:
    """Reference-to-``(view, frame)`` homography of every superpixel, ``(S, 3, 3)``."""
    cache = {}
    out = np.empty((len(planes), 3, 3))
    for i, (n, k) in enumerate(zip(planes, objects)):
        m = cache.get(k)
        if m is None:
            m = cache[k] = view_frame_motion(motions[k - 1], rig, view, frame)
        out[i] = homography(rig.K, m, n)
    return out


def target_homographies(model: SceneModel, rig: CameraRig, target: WarpTarget) -> np.ndarray:
    view, frame = target.key
    return surface_homographies(model.planes, model.objects, model.motions, rig, view, frame)


def warp_coords(model: SceneModel, rig: CameraRig, target: WarpTarget):
    """Matched positions ``x*`` of every reference pixel for ``target``."""
    H = target_homographies(model, rig, target)[model.labels]
    xs, ys = pixel_grid(*model.shape)
    px, py, c = project_points(H, xs, ys)
    return px, py, c


def in_domain(px, py, c, shape) -> np.ndarray:
    h, w = shape[:2]
    return (c > HOMOG_EPS) & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)


def warp(img: np.ndarray, model: SceneModel, target: WarpTarget, rig: CameraRig):
    """Backward-warp target image ``img`` onto the reference grid.

    Returns ``(warped, valid)``; pixels whose match falls outside the target
    domain are invalid and hold the border-clamped sample.
    """
    px, py, c = warp_coords(model, rig, target)
    valid = in_domain(px, py, c, img.shape)
    px = np.where(np.isfinite(px), px, 0.0)
    py = np.where(np.isfinite(py), py, 0.0)
    return bilinear_sample(img, px, py), valid


def model_flow(model: SceneModel, rig: CameraRig, target: WarpTarget) -> np.ndarray:
    """Reference flow ``x - x*`` for a warp target."""
    px, py, _ = warp_coords(model, rig, target)
    xs, ys = pixel_grid(*model.shape)
    return np.stack([xs - px, ys - py], axis=-1)


def render_surfaces(labels: np.ndarray, planes: np.ndarray, objects: np.ndarray, motions: list,
                    rig: CameraRig, view: int, frame: int):
    """Visible superpixel and inverse depth at every pixel of image ``(view, frame)``.

    Each superpixel is mapped through its homography with a z-buffer; pixels
    no surface reaches are filled from the nearest covered pixel.
    """
    h, w = labels.shape
    if (view, frame) == REFERENCE:
        xs, ys = pixel_grid(h, w)
        Ki = np.linalg.inv(rig.K)
        m = planes @ Ki
        m = m[labels]
        inv = m[..., 0] * xs + m[..., 1] * ys + m[..., 2]
        return labels.copy(), inv
    Hs = surface_homographies(planes, objects, motions, rig, view, frame)
    owner = np.full((h, w), -1, dtype=np.intp)
    best = np.full((h, w), -np.inf)
    Ki = np.linalg.inv(rig.K)
    motion_cache = {}
    n_sp = len(planes)
    for i in range(n_sp):
        ys_i, xs_i = np.nonzero(labels == i)
        if xs_i.size == 0:
            continue
        H = Hs[i]
        cx = np.array([xs_i.min() - 0.5, xs_i.max() + 0.5])
        cy = np.array([ys_i.min() - 0.5, ys_i.max() + 0.5])
        gx, gy = np.meshgrid(cx, cy)
        qx, qy, qc = project_points(H, gx.ravel(), gy.ravel())
        if np.any(qc <= HOMOG_EPS) or not np.all(np.isfinite(qx)):
            continue
        x0 = max(int(np.floor(qx.min())) - 1, 0)
        x1 = min(int(np.ceil(qx.max())) + 1, w - 1)
        y0 = max(int(np.floor(qy.min())) - 1, 0)
        y1 = min(int(np.ceil(qy.max())) + 1, h - 1)
        if x0 > x1 or y0 > y1:
            continue
        ty, tx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        tx = tx.astype(np.float64)
        ty = ty.astype(np.float64)
        Hinv = np.linalg.inv(H)
        bx, by, bc = project_points(Hinv, tx, ty)
        ok = (bc > HOMOG_EPS) & (bx > -0.5) & (bx < w - 0.5) & (by > -0.5) & (by < h - 0.5)
        rx = np.clip(np.rint(np.where(ok, bx, 0)), 0, w - 1).astype(np.intp)
        ry = np.clip(np.rint(np.where(ok, by, 0)), 0, h - 1).astype(np.intp)
        ok &= labels[ry, rx] == i
        if not np.any(ok):
            continue
        k = objects[i]
        m = motion_cache.get(k)
        if m is None:
            m = motion_cache[k] = view_frame_motion(motions[k - 1], rig, view, frame)
        n_t = transform_plane(planes[i], m) @ Ki
        inv = n_t[0] * tx + n_t[1] * ty + n_t[2]
        sub_best = best[y0:y1 + 1, x0:x1 + 1]
        take = ok & (inv > sub_best)
        sub_best[take] = inv[take]
        owner[y0:y1 + 1, x0:x1 + 1][take] = i
    holes = owner < 0
    if np.all(holes):
        raise ValueError(f"no surface is visible in image (view={view}, frame={frame})")
    if np.any(holes):
        _, (iy, ix) = distance_transform_edt(holes, return_indices=True)
        owner = owner[iy, ix]
        best = best[iy, ix]
    return owner, best


def render_ownership(model: SceneModel, rig: CameraRig, view: int, frame: int):
    return render_surfaces(model.labels, model.planes, model.objects, model.motions, rig, view, frame)


def image_flow_homographies(planes, objects, motions, rig: CameraRig, view: int, frame: int,
                            two_frame: bool = False):
    """Forward and backward flow homographies of each surface as seen in image ``(view, frame)``.

    Returns ``(H_fwd, H_bwd)`` of shape ``(S, 3, 3)``; the bidirectional flows
    at a pixel owned by surface ``i`` are ``y - pi(H[i] y)``. In two-frame
    mode ``H_bwd`` is None and the backward flow is the reflected forward flow.
    """
    G = surface_homographies(planes, objects, motions, rig, view, frame)
    Gf = surface_homographies(planes, objects, motions, rig, view, frame + 1)
    Ginv = np.linalg.inv(G)
    Hf = Gf @ Ginv
    if two_frame:
        return Hf, None
    Gb = surface_homographies(planes, objects, motions, rig, view, frame - 1)
    return Hf, Gb @ Ginv


def flows_at(Hf: np.ndarray, Hb, owner_ids: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Bidirectional flows ``(P, 2)`` at pixels with per-pixel surface ids."""
    fx, fy, _ = project_points(Hf[owner_ids], xs, ys)
    ff = np.stack([xs - fx, ys - fy], axis=-1)
    if Hb is None:
        return ff, -ff
    bx, by, _ = project_points(Hb[owner_ids], xs, ys)
    return ff, np.stack([xs - bx, ys - by], axis=-1)


def image_flows(model: SceneModel, rig: CameraRig, view: int, frame: int,
                owner: np.ndarray | None = None, two_frame: bool = False):
    """Dense bidirectional flows of image ``(view, frame)`` under ``model``."""
    if owner is None:
        owner, _ = render_ownership(model, rig, view, frame)
    Hf, Hb = image_flow_homographies(model.planes, model.objects, model.motions, rig, view, frame,
                                     two_frame)
    xs, ys = pixel_grid(*model.shape)
    ff, fb = flows_at(Hf, Hb, owner, xs, ys)
    return ff, fb


def model_disparity(model: SceneModel, rig: CameraRig, frame: int = 0) -> np.ndarray:
    """Left-view disparity map of ``frame`` rendered from the model."""
    _, inv = render_ownership(model, rig, 0, frame)
    d = rig.focal * rig.baseline * inv
    return np.where(d > 0, d, INVALID_DISPARITY)
