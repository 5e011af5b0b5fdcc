"""Latent-image subproblem: TV-regularised multi-view deconvolution.

With the scene model fixed, the energy restricted to the latents is

    s * sum_m TV(L_m) + theta1 * s * sum_t |D_t (L_ref - W_t L_t)|_1
        + theta3 * s^2 * sum_m |grad(A_m L_m) - grad(B_m)|^2

with ``s = params.intensity_scale``, ``W_t`` the bilinear warp of target
image ``t`` onto the reference grid and ``D_t`` its validity mask. The
solver works on this objective divided by ``s`` and alternates projected
dual ascent with a proximal primal step solved by conjugate gradients,
sweeping the images Gauss-Seidel style.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .blur import build_kernel
from .core import EnergyParams, CameraRig, divergence, gradient, pixel_grid
from .energy import compute_ownership, is_two_frame
from .geometry import (REFERENCE, SceneModel, WarpTarget, flows_at, image_flow_homographies,
                       in_domain, targets_for, warp_coords)

CG_MAX_ITERS = 30
CG_TOL = 1e-8
COMPONENTWISE = "componentwise"
ISOTROPIC = "isotropic"


class ConvergenceError(RuntimeError):
    pass


def bilinear_matrix(px: np.ndarray, py: np.ndarray, valid: np.ndarray, shape) -> sp.csr_matrix:
    """Sparse bilinear sampling at ``(px, py)``; rows of invalid points are empty.

    Matches :func:`core.bilinear_sample` at valid points.
    """
    h, w = shape[:2]
    n = px.size
    px = np.where(valid, px, 0.0).ravel()
    py = np.where(valid, py, 0.0).ravel()
    v = np.asarray(valid).ravel()
    x = np.clip(px, 0.0, w - 1)
    y = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    vals = np.concatenate([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay])
    vals = vals * np.tile(v, 4)
    keep = vals != 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, h * w))


@dataclass
class DeblurProblem:
    """Linear operators of the latent subproblem.

    ``blur_ops[key]`` is the ``(P, P)`` blur matrix of image ``key``;
    ``couplings[target] = (W, mask)`` pairs the reference with a target.
    """

    shape: tuple
    blur_ops: dict
    couplings: dict
    blurred: dict
    params: EnergyParams
    eta: float = field(default=0.0)

    def __post_init__(self):
        if REFERENCE not in self.blur_ops:
            raise ValueError("the reference image is required")
        for t in self.couplings:
            if t.key not in self.blur_ops:
                raise ValueError(f"coupling target {t.key} has no image")
        self.blurred = {k: np.asarray(v, float).reshape(self.shape[0], self.shape[1], -1)
                        for k, v in self.blurred.items()}
        self._grad_b = {k: gradient(self.blurred[k]) for k in self.blur_ops}
        if self.eta <= 0:
            self.eta = self.params.eta if self.params.eta > 0 else derived_eta(self)

    @property
    def keys(self) -> list:
        return list(self.blur_ops)

    def blur(self, key, L: np.ndarray) -> np.ndarray:
        c = L.shape[2]
        return (self.blur_ops[key] @ L.reshape(-1, c)).reshape(L.shape)

    def blur_t(self, key, r: np.ndarray) -> np.ndarray:
        c = r.shape[2]
        return (self.blur_ops[key].T @ r.reshape(-1, c)).reshape(r.shape)

    def coupling(self, target: WarpTarget, L_ref: np.ndarray, L_t: np.ndarray) -> np.ndarray:
        W, mask = self.couplings[target]
        c = L_ref.shape[2]
        warped = (W @ L_t.reshape(-1, c)).reshape(L_ref.shape)
        return (L_ref - warped) * mask[:, :, None]


def build_problem(model: SceneModel, blurred: dict, rig: CameraRig, params: EnergyParams,
                  ownership: dict | None = None) -> DeblurProblem:
    """Operators induced by ``model`` for the images in ``blurred``."""
    keys = list(blurred)
    two = is_two_frame(blurred)
    if ownership is None:
        ownership = compute_ownership(model, rig, keys)
    h, w = model.shape
    xs, ys = pixel_grid(h, w)
    xs, ys = xs.ravel(), ys.ravel()
    blur_ops = {}
    for key in keys:
        Hf, Hb = image_flow_homographies(model.planes, model.objects, model.motions, rig, *key,
                                         two_frame=two)
        ff, fb = flows_at(Hf, Hb, ownership[key].ravel(), xs, ys)
        op = build_kernel(ff.reshape(h, w, 2), fb.reshape(h, w, 2), params.tau,
                          params.max_kernel_radius)
        blur_ops[key] = op.matrix
    couplings = {}
    for t in targets_for(keys):
        px, py, c = warp_coords(model, rig, t)
        valid = in_domain(px, py, c, (h, w))
        couplings[t] = (bilinear_matrix(px, py, valid, (h, w)), valid.astype(np.float64))
    return DeblurProblem((h, w), blur_ops, couplings, blurred, params)


def identity_problem(blurred: dict, params: EnergyParams) -> DeblurProblem:
    """Problem with delta kernels and no brightness couplings."""
    first = np.asarray(next(iter(blurred.values())))
    h, w = first.shape[:2]
    eye = sp.identity(h * w, format="csr")
    return DeblurProblem((h, w), {k: eye for k in blurred}, {}, blurred, params)


def _apply_K(problem: DeblurProblem, L: dict):
    th1 = problem.params.theta1
    g = {k: gradient(L[k]) for k in problem.keys}
    c = {t: th1 * problem.coupling(t, L[REFERENCE], L[t.key]) for t in problem.couplings}
    return g, c


def _apply_Kt(problem: DeblurProblem, g: dict, c: dict) -> dict:
    th1 = problem.params.theta1
    out = {k: -divergence(g[k]) for k in problem.keys}
    for t, q in c.items():
        out[REFERENCE] = out[REFERENCE] + th1 * _coupling_t_ref(problem, t, q)
        out[t.key] = out[t.key] + th1 * _coupling_t_tgt(problem, t, q)
    return out


def _coupling_t_ref(problem, t, q):
    return q * problem.couplings[t][1][:, :, None]


def _coupling_t_tgt(problem, t, q):
    W, mask = problem.couplings[t]
    qm = q * mask[:, :, None]
    return -(W.T @ qm.reshape(-1, q.shape[2])).reshape(q.shape)


def operator_norm(problem: DeblurProblem, channels: int = 1, iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of the norm of the stacked dual operator."""
    rng = np.random.default_rng(seed)
    h, w = problem.shape
    L = {k: rng.standard_normal((h, w, channels)) for k in problem.keys}
    sigma = 0.0
    for _ in range(iters):
        nrm = np.sqrt(sum(np.sum(v ** 2) for v in L.values()))
        L = {k: v / nrm for k, v in L.items()}
        L = _apply_Kt(problem, *_apply_K(problem, L))
        sigma = np.sqrt(sum(np.sum(v ** 2) for v in L.values()))
    # power iteration under-estimates and the top singular values cluster; pad by 5%
    return float(np.sqrt(sigma) * 1.05)


def derived_eta(problem: DeblurProblem) -> float:
    L_hat = operator_norm(problem)
    return 1.0 / (problem.params.gamma * L_hat ** 2)


@dataclass
class PDState:
    latents: dict
    p: dict
    q: dict
    iteration: int = 0
    gamma: float = 250.0
    eta: float = 1e-3

    def copy(self) -> "PDState":
        return PDState({k: v.copy() for k, v in self.latents.items()},
                       {k: v.copy() for k, v in self.p.items()},
                       {k: v.copy() for k, v in self.q.items()},
                       self.iteration, self.gamma, self.eta)


def init_state(problem: DeblurProblem, latents: dict | None = None) -> PDState:
    src = problem.blurred if latents is None else latents
    h, w = problem.shape
    L = {k: np.asarray(src[k], float).reshape(h, w, -1).copy() for k in problem.keys}
    c = L[REFERENCE].shape[2]
    p = {k: np.zeros((h, w, c, 2)) for k in problem.keys}
    q = {t: np.zeros((h, w, c)) for t in problem.couplings}
    return PDState(L, p, q, 0, problem.params.gamma, problem.eta)


def project_dual(v: np.ndarray, mode: str = COMPONENTWISE) -> np.ndarray:
    """Projection onto the unit ball: per component, or per 2-vector."""
    if mode == COMPONENTWISE:
        return v / np.maximum(1.0, np.abs(v))
    if mode == ISOTROPIC:
        nrm = np.sqrt(np.sum(v ** 2, axis=-1, keepdims=True))
        return v / np.maximum(1.0, nrm)
    raise ValueError(f"unknown projection {mode!r}")


def _cg(apply_A, b: np.ndarray, x0: np.ndarray, max_iters: int, tol: float) -> np.ndarray:
    x = x0.copy()
    r = b - apply_A(x)
    d = r.copy()
    rs = float(np.sum(r * r))
    bn = max(float(np.sqrt(np.sum(b * b))), 1e-300)
    if np.sqrt(rs) <= tol * bn:
        return x
    for _ in range(max_iters):
        Ad = apply_A(d)
        alpha = rs / float(np.sum(d * Ad))
        x += alpha * d
        r -= alpha * Ad
        rs_new = float(np.sum(r * r))
        if np.sqrt(rs_new) <= tol * bn:
            return x
        d = r + (rs_new / rs) * d
        rs = rs_new
    res = np.sqrt(rs) / bn
    raise ConvergenceError(f"CG did not converge in {max_iters} iterations (relative residual {res:.3e})")


def _primal_update(problem: DeblurProblem, key, L_tilde: np.ndarray, eta: float,
                   cg_iters: int, cg_tol: float, x0: np.ndarray) -> np.ndarray:
    wq = 2.0 * problem.params.theta3 * problem.params.intensity_scale
    if wq == 0:
        return L_tilde

    def normal(x):
        gx = gradient(problem.blur(key, x))
        return wq * problem.blur_t(key, -divergence(gx)) + x / eta

    rhs = L_tilde / eta + wq * problem.blur_t(key, -divergence(problem._grad_b[key]))
    return _cg(normal, rhs, x0, cg_iters, cg_tol)


def pd_step(state: PDState, problem: DeblurProblem, projection: str = ISOTROPIC,
            cg_iters: int = CG_MAX_ITERS, cg_tol: float = CG_TOL) -> PDState:
    """One Gauss-Seidel sweep of dual ascent and proximal primal steps over all images."""
    s = state.copy()
    g, eta = s.gamma, s.eta
    th1 = problem.params.theta1
    order = [REFERENCE] + [k for k in problem.keys if k != REFERENCE]
    by_key = {t.key: t for t in problem.couplings}
    for key in order:
        L = s.latents[key]
        s.p[key] = project_dual(s.p[key] + g * gradient(L), projection)
        t = by_key.get(key)
        if t is not None:
            c = problem.coupling(t, s.latents[REFERENCE], L)
            s.q[t] = project_dual(s.q[t] + g * th1 * c, COMPONENTWISE)
        kty = -divergence(s.p[key])
        if key == REFERENCE:
            for tt, q in s.q.items():
                kty = kty + th1 * _coupling_t_ref(problem, tt, q)
        elif t is not None:
            kty = kty + th1 * _coupling_t_tgt(problem, t, s.q[t])
        s.latents[key] = _primal_update(problem, key, L - eta * kty, eta, cg_iters, cg_tol, L)
    s.iteration += 1
    return s


def latent_objective(problem: DeblurProblem, latents: dict) -> float:
    """Latent-restricted energy in the units of :func:`energy.total_energy`."""
    prm = problem.params
    s = prm.intensity_scale
    h, w = problem.shape
    L = {k: np.asarray(latents[k], float).reshape(h, w, -1) for k in problem.keys}
    tv = 0.0
    blur = 0.0
    for k in problem.keys:
        gl = gradient(L[k])
        tv += float(np.sqrt(gl[..., 0] ** 2 + gl[..., 1] ** 2).sum())
        if prm.theta3 > 0:
            r = gradient(problem.blur(k, L[k])) - problem._grad_b[k]
            blur += float(np.sum(r ** 2))
    bright = 0.0
    if prm.theta1 > 0:
        for t in problem.couplings:
            bright += float(np.abs(problem.coupling(t, L[REFERENCE], L[t.key])).sum())
    return s * tv + prm.theta1 * s * bright + prm.theta3 * s * s * blur


def _clamped(latents: dict) -> dict:
    return {k: np.clip(v, 0.0, 1.0) for k, v in latents.items()}


def solve_latents(problem: DeblurProblem, latents: dict | None = None, max_iters: int = 100,
                  tol: float = 1e-5, projection: str = ISOTROPIC, trace: list | None = None,
                  cg_iters: int = CG_MAX_ITERS) -> dict:
    """Run :func:`pd_step` until the relative objective change drops below ``tol``.

    Returns clamped latents. The best clamped iterate (starting point
    included) is returned, so the objective never exceeds its initial value.
    """
    state = init_state(problem, latents)
    best = _clamped(state.latents)
    best_e = latent_objective(problem, best)
    prev = latent_objective(problem, state.latents)
    if trace is not None:
        trace.append(best_e)
    for _ in range(max(1, max_iters)):
        state = pd_step(state, problem, projection, cg_iters)
        clamped = _clamped(state.latents)
        e = latent_objective(problem, clamped)
        if trace is not None:
            trace.append(e)
        if e < best_e:
            best, best_e = clamped, e
        cur = latent_objective(problem, state.latents)
        if abs(prev - cur) <= tol * max(abs(prev), 1e-300):
            break
        prev = cur
    return {k: v.copy() for k, v in best.items()}


def write_objective_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective"])
        for k, e in enumerate(trace):
            w.writerow([k, repr(float(e))])
