"""Evaluation metrics: PSNR, flow/disparity outlier rates, segmentation P/R/F."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 99.0
OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


def psnr(est: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0, capped at 99 dB."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {est.shape} vs {gt.shape}")
    mse = float(np.mean((est - gt) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def outlier_rate(est: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    """Percentage of valid pixels with error > 3 px and > 5% of the ground-truth magnitude.

    Flow fields are ``(H, W, 2)``; disparity maps ``(H, W)``.
    """
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    if est.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {est.shape} vs {gt.shape}")
    if est.ndim == 3:
        err = np.linalg.norm(est - gt, axis=2)
        mag = np.linalg.norm(gt, axis=2)
    else:
        err = np.abs(est - gt)
        mag = np.abs(gt)
    if valid is None:
        valid = np.ones(err.shape, dtype=bool)
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("empty valid mask")
    out = (err > OUTLIER_PX) & (err > OUTLIER_REL * mag)
    return 100.0 * float(out[valid].mean())


def disparity_outlier_rate(est: np.ndarray, gt: np.ndarray) -> float:
    """Outlier rate over pixels valid in the ground truth; invalid estimates count as outliers."""
    est = np.asarray(est, float)
    gt = np.asarray(gt, float)
    valid = gt > 0
    filled = np.where(est > 0, est, np.inf)
    err = np.abs(filled - gt)
    out = (err > OUTLIER_PX) & (err > OUTLIER_REL * np.abs(gt))
    if not valid.any():
        raise ValueError("empty valid mask")
    return 100.0 * float(out[valid].mean())


def segmentation_prf(est: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """Pixel-wise precision, recall and F-measure; empty denominators give 0."""
    est = np.asarray(est, bool)
    gt = np.asarray(gt, bool)
    if est.shape != gt.shape:
        raise ValueError(f"dimension mismatch: {est.shape} vs {gt.shape}")
    tp = int(np.sum(est & gt))
    fp = int(np.sum(est & ~gt))
    fn = int(np.sum(~est & gt))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class MetricsReport:
    psnr: dict = field(default_factory=dict)  # "view_frame" -> dB
    blurred_psnr: dict = field(default_factory=dict)
    flow_fwd_outliers: float = 0.0
    flow_bwd_outliers: float = 0.0
    disp_outliers: dict = field(default_factory=dict)  # frame -> %
    precision: float = 0.0
    recall: float = 0.0
    f_measure: float = 0.0

    def view_psnr(self, view: int) -> float:
        vals = [v for k, v in self.psnr.items() if k.startswith(f"{view}_")]
        return float(np.mean(vals)) if vals else float("nan")

    def row(self) -> dict:
        out = {}
        for k, v in sorted(self.psnr.items()):
            out[f"psnr_{k}"] = v
        for k, v in sorted(self.blurred_psnr.items()):
            out[f"blurred_psnr_{k}"] = v
        out["psnr_left"] = self.view_psnr(0)
        out["psnr_right"] = self.view_psnr(1)
        out["flow_fwd_outliers"] = self.flow_fwd_outliers
        out["flow_bwd_outliers"] = self.flow_bwd_outliers
        for k, v in sorted(self.disp_outliers.items()):
            out[f"disp_outliers_{k}"] = v
        out["precision"] = self.precision
        out["recall"] = self.recall
        out["f_measure"] = self.f_measure
        return out

    def summary(self) -> str:
        r = self.row()
        return "\n".join(f"{k}: {v:.4f}" for k, v in r.items())


def image_tag(key) -> str:
    return f"{key[0]}_{key[1] + 1}"


def evaluate(latents: dict, flow_fwd, flow_bwd, disparity: dict, moving: np.ndarray,
             gt_latent: dict, gt_flow_fwd, gt_flow_bwd, gt_disparity: dict, gt_moving,
             blurred: dict | None = None) -> MetricsReport:
    rep = MetricsReport()
    for key, L in latents.items():
        if key in gt_latent:
            rep.psnr[image_tag(key)] = psnr(np.clip(L, 0, 1), gt_latent[key])
            if blurred is not None and key in blurred:
                rep.blurred_psnr[image_tag(key)] = psnr(blurred[key], gt_latent[key])
    rep.flow_fwd_outliers = outlier_rate(flow_fwd, gt_flow_fwd)
    if flow_bwd is not None and gt_flow_bwd is not None:
        rep.flow_bwd_outliers = outlier_rate(flow_bwd, gt_flow_bwd)
    for fr, d in disparity.items():
        if fr in gt_disparity:
            rep.disp_outliers[fr] = disparity_outlier_rate(d, gt_disparity[fr])
    rep.precision, rep.recall, rep.f_measure = segmentation_prf(moving, gt_moving)
    return rep


def write_reports_csv(path, reports: list, names: list | None = None) -> None:
    rows = [r.row() for r in reports]
    cols = []
    for row in rows:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence"] + cols)
        for i, row in enumerate(rows):
            name = names[i] if names else str(i)
            w.writerow([name] + [repr(float(row.get(c, float("nan")))) for c in cols])

