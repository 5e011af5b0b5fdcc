"""Structured per-pixel motion blur.

Each pixel's kernel is a piecewise-linear streak along ``tau`` times its
forward and backward flow. Kernels gather: ``B(x) = sum_k w_k L(x + o_k)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import as_image, bilinear_sample, check_same_shape

DEFAULT_MAX_RADIUS = 64.0


class KernelRadiusError(ValueError):
    pass


def _check_flow(flow: np.ndarray, name: str) -> None:
    bad = ~np.all(np.isfinite(flow), axis=-1)
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"non-finite {name} flow at pixel (x={c}, y={r})")


def segment_samples(flow_fwd: np.ndarray, flow_bwd: np.ndarray, tau: float,
                    max_radius: float = DEFAULT_MAX_RADIUS):
    """Sub-pixel sample offsets and weights of the two-branch streak.

    ``flow_fwd`` / ``flow_bwd`` are ``(P, 2)`` arrays. Returns ``(dx, dy, w)``
    each of shape ``(P, S)``; padded entries have zero weight and every row
    of ``w`` sums to one.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64).reshape(-1, 2)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64).reshape(-1, 2)
    branches = []
    for f in (flow_fwd, flow_bwd):
        seg = tau * f
        length = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(length > max_radius):
            i = int(np.argmax(length))
            raise KernelRadiusError(
                f"blur streak of {length[i]:.1f} px exceeds the {max_radius:g} px kernel radius")
        n = np.ceil(2.0 * length - 1e-9).astype(np.intp) + 1
        n = np.maximum(n, 1)
        branches.append((seg, n))
    s_max = max(int(b[1].max()) if b[1].size else 1 for b in branches)
    dx, dy, w = [], [], []
    k = np.arange(s_max)[None, :]
    for seg, n in branches:
        frac = np.where(n[:, None] > 1, k / np.maximum(n[:, None] - 1, 1), 0.0)
        live = k < n[:, None]
        frac = np.where(live, frac, 0.0)
        dx.append(frac * seg[:, :1])
        dy.append(frac * seg[:, 1:])
        w.append(np.where(live, 0.5 / n[:, None], 0.0))
    return np.hstack(dx), np.hstack(dy), np.hstack(w)


def blur_at(L: np.ndarray, xs: np.ndarray, ys: np.ndarray, flow_fwd: np.ndarray,
            flow_bwd: np.ndarray, tau: float, max_radius: float = DEFAULT_MAX_RADIUS) -> np.ndarray:
    """Blurred intensities at integer pixels ``(xs, ys)`` without building an operator.

    Equal to ``apply(build_kernel(...), L)`` restricted to those pixels.
    Returns ``(P, C)``.
    """
    L = np.asarray(L, dtype=np.float64)
    if L.ndim == 2:
        L = L[:, :, None]
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.size == 0:
        return np.zeros((0, L.shape[2]))
    dx, dy, w = segment_samples(flow_fwd, flow_bwd, tau, max_radius)
    vals = bilinear_sample(L, xs[:, None] + dx, ys[:, None] + dy)
    return np.einsum("ps,psc->pc", w, vals)


@dataclass(frozen=True)
class BlurOperator:
    """Per-pixel kernel field stored as merged integer taps.

    ``tap_pixel`` holds the flat output pixel index of each tap; ``tap_dx`` /
    ``tap_dy`` its integer offset and ``tap_w`` its weight.
    """

    height: int
    width: int
    tap_pixel: np.ndarray
    tap_dx: np.ndarray
    tap_dy: np.ndarray
    tap_w: np.ndarray

    def kernel_at(self, x: int, y: int) -> list[tuple[tuple[int, int], float]]:
        """Taps of pixel ``(x, y)`` as ``((dx, dy), weight)`` pairs."""
        p = y * self.width + x
        lo, hi = np.searchsorted(self.tap_pixel, [p, p + 1])
        return [((int(self.tap_dx[i]), int(self.tap_dy[i])), float(self.tap_w[i]))
                for i in range(lo, hi)]

    @property
    def matrix(self) -> sp.csr_matrix:
        m = getattr(self, "_matrix", None)
        if m is None:
            h, w = self.height, self.width
            py, px = np.divmod(self.tap_pixel, w)
            cy = np.clip(py + self.tap_dy, 0, h - 1)
            cx = np.clip(px + self.tap_dx, 0, w - 1)
            m = sp.csr_matrix((self.tap_w, (self.tap_pixel, cy * w + cx)), shape=(h * w, h * w))
            object.__setattr__(self, "_matrix", m)
        return m


def identity_operator(height: int, width: int) -> BlurOperator:
    n = height * width
    z = np.zeros(n, dtype=np.intp)
    return BlurOperator(height, width, np.arange(n), z, z.copy(), np.ones(n))


def build_kernel(flow_fwd: np.ndarray, flow_bwd: np.ndarray, tau: float,
                 max_radius: float = DEFAULT_MAX_RADIUS) -> BlurOperator:
    """Rasterize the bidirectional-flow streak of every pixel into a BlurOperator."""
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape or flow_fwd.ndim != 3 or flow_fwd.shape[2] != 2:
        raise ValueError("flow fields must share an (H, W, 2) shape")
    if not 0 < tau <= 0.5:
        raise ValueError("tau must lie in (0, 0.5]")
    _check_flow(flow_fwd, "forward")
    _check_flow(flow_bwd, "backward")
    h, w = flow_fwd.shape[:2]
    n = h * w
    dx, dy, wt = segment_samples(flow_fwd.reshape(n, 2), flow_bwd.reshape(n, 2), tau, max_radius)

    fx = np.floor(dx)
    fy = np.floor(dy)
    ax = dx - fx
    ay = dy - fy
    pix = np.broadcast_to(np.arange(n)[:, None], dx.shape)
    parts = []
    for ox, oy, bw in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                       (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        parts.append((pix, fx + ox, fy + oy, wt * bw))
    P = np.concatenate([p[0].ravel() for p in parts])
    X = np.concatenate([p[1].ravel() for p in parts]).astype(np.intp)
    Y = np.concatenate([p[2].ravel() for p in parts]).astype(np.intp)
    Wt = np.concatenate([p[3].ravel() for p in parts])
    keep = Wt > 0
    P, X, Y, Wt = P[keep], X[keep], Y[keep], Wt[keep]

    span = 2 * int(np.ceil(max_radius)) + 3
    off = int(np.ceil(max_radius)) + 1
    key = (P * span + (Y + off)) * span + (X + off)
    uniq, inv = np.unique(key, return_inverse=True)
    weights = np.bincount(inv, weights=Wt)
    rest, xk = np.divmod(uniq, span)
    pk, yk = np.divmod(rest, span)
    sums = np.bincount(pk, weights=weights, minlength=n)
    weights = weights / sums[pk]
    return BlurOperator(h, w, pk.astype(np.intp), (xk - off).astype(np.intp),
                        (yk - off).astype(np.intp), weights)


def apply(op: BlurOperator, L: np.ndarray) -> np.ndarray:
    """Blur ``L`` with the per-pixel kernels of ``op``."""
    L = as_image(L)
    if L.shape[:2] != (op.height, op.width):
        raise ValueError(f"dimension mismatch: image {L.shape[:2]} vs operator {(op.height, op.width)}")
    out = op.matrix @ L.reshape(-1, L.shape[2])
    return out.reshape(L.shape)


def apply_adjoint(op: BlurOperator, r: np.ndarray) -> np.ndarray:
    """Transpose of :func:`apply` (scatter of weighted residuals)."""
    r = np.asarray(r, dtype=np.float64)
    if r.ndim == 2:
        r = r[:, :, None]
    if r.shape[:2] != (op.height, op.width):
        raise ValueError(f"dimension mismatch: image {r.shape[:2]} vs operator {(op.height, op.width)}")
    out = op.matrix.T @ r.reshape(-1, r.shape[2])
    return out.reshape(r.shape)


def synthesize_blur(frames) -> np.ndarray:
    """Average of ``2N+1`` latent sub-frames; the middle one is the sharp latent."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 3 or len(frames) % 2 == 0:
        raise ValueError(f"need an odd number (>= 3) of frames, got {len(frames)}")
    check_same_shape(*frames)
    if len({f.shape for f in frames}) != 1:
        raise ValueError("frames differ in channel count")
    return np.mean(frames, axis=0)
