"""Shared containers, sampling helpers and rig geometry.

Images are ``(H, W, C)`` float64 arrays with intensities in [0, 1]. Flow
fields are ``(H, W, 2)`` arrays holding ``(u, v)`` in pixels; disparity maps
are ``(H, W)`` arrays where invalid pixels carry :data:`INVALID_DISPARITY`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

INVALID_DISPARITY = -1.0


def as_image(arr) -> np.ndarray:
    """Return ``arr`` as a float64 ``(H, W, C)`` image."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW, HxWx1 or HxWx3 image, got shape {img.shape}")
    if img.size == 0:
        raise ValueError("empty image")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def check_same_shape(*arrays: np.ndarray) -> None:
    ref = arrays[0].shape[:2]
    for a in arrays[1:]:
        if a.shape[:2] != ref:
            raise ValueError(f"dimension mismatch: {a.shape[:2]} vs {ref}")


def bilinear_sample(img: np.ndarray, x, y) -> np.ndarray:
    """Bilinearly sample ``img`` at column ``x`` and row ``y``.

    Coordinates outside the image are clamped to the border. ``x`` and ``y``
    may be scalars or arrays of equal shape; the result has shape
    ``x.shape + (C,)``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (x - x0)[..., None]
    ay = (y - y0)[..., None]
    top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def truncated_l1(x, alpha):
    """Truncated l1 penalty ``min(|x|, alpha)``."""
    if np.any(np.asarray(alpha) < 0):
        raise ValueError("alpha must be non-negative")
    return np.minimum(np.abs(x), alpha)


@dataclass(frozen=True)
class CameraRig:
    """Calibrated rectified stereo rig; the right camera sits ``baseline`` m along +x."""

    K: np.ndarray
    baseline: float

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError("K must be 3x3")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0:
            raise ValueError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        object.__setattr__(self, "K", K)

    @classmethod
    def from_focal(cls, focal: float, cx: float, cy: float, baseline: float) -> "CameraRig":
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        return cls(K, float(baseline))

    @property
    def focal(self) -> float:
        return float(self.K[0, 0])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)


@dataclass(frozen=True)
class EnergyParams:
    """Energy weights and solver settings.

    ``intensity_scale`` maps [0, 1] intensities onto the 8-bit range the
    default weights were tuned for: photometric terms are evaluated on
    ``scale * L``. Set it to 1 to evaluate terms on raw intensities.
    """

    theta1: float = 0.7
    theta2: float = 5.5
    theta3: float = 0.7
    theta4: float = 0.37
    theta5: float = 17.0
    lam: float = 0.13
    alpha1: float = 3.39
    alpha2: float = 2.5
    alpha3: float = 0.25
    theta_r: float = 0.05
    theta_t: float = 0.1
    weight_phi3: float = 1.0
    weight_phi4: float = 1.0
    gamma: float = 250.0
    eta: float = 0.0  # 0 -> derived from the stacked operator norm
    tau: float = 0.23
    n_sub: int = 20
    outer_iters: int = 3
    intensity_scale: float = 255.0
    max_kernel_radius: float = 64.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
        weights = ("theta1", "theta2", "theta3", "theta4", "theta5", "lam", "alpha1",
                   "alpha2", "alpha3", "theta_r", "theta_t", "weight_phi3", "weight_phi4", "eta")
        for name in weights:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0 < self.tau <= 0.5:
            raise ValueError("tau must lie in (0, 0.5]")
        if self.n_sub < 1:
            raise ValueError("n_sub must be >= 1")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be > 0")

    def replace(self, **kw) -> "EnergyParams":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


def zero_weight_params(**kw) -> EnergyParams:
    """Parameters with every energy weight set to zero."""
    base = dict(theta1=0.0, theta2=0.0, theta3=0.0, theta4=0.0, theta5=0.0,
                weight_phi3=0.0, weight_phi4=0.0)
    base.update(kw)
    return EnergyParams(**base)


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Column and row coordinate arrays of shape ``(h, w)``."""
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def gradient(img: np.ndarray) -> np.ndarray:
    """Forward differences with replicate boundary; returns ``(H, W, C, 2)`` as ``(d/dx, d/dy)``."""
    img = np.asarray(img, dtype=np.float64)
    g = np.zeros(img.shape + (2,))
    g[:, :-1, ..., 0] = img[:, 1:] - img[:, :-1]
    g[:-1, :, ..., 1] = img[1:] - img[:-1]
    return g


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`gradient`: ``<grad u, p> = -<u, div p>``."""
    px, py = p[..., 0], p[..., 1]
    d = np.zeros(px.shape)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1] += py[:-1]
    d[1:] -= py[:-1]
    return d
