"""Superpixel partition, adjacency and semantic label priors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, label as cc_label

from .core import as_image

INTENSITY_WEIGHT = 1.0
DISPARITY_WEIGHT = 2.0


@dataclass
class Partition:
    """Superpixel label map with per-superpixel pixel lists and shared boundaries.

    ``boundaries[(i, j)]`` (``i < j``) holds the flat indices of pixels of
    either superpixel that have a 4-neighbour in the other one.
    """

    labels: np.ndarray
    pixels: list = field(repr=False)
    boundaries: dict = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.pixels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def edges(self) -> list[tuple[int, int]]:
        return sorted(self.boundaries)

    def boundary(self, i: int, j: int) -> np.ndarray:
        return self.boundaries[(i, j) if i < j else (j, i)]

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.boundaries if i in (a, b)})


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.intp)


def partition_from_labels(labels: np.ndarray) -> Partition:
    labels = relabel_contiguous(np.asarray(labels))
    h, w = labels.shape
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[order], np.arange(flat.max() + 2))
    pixels = [order[starts[i]:starts[i + 1]] for i in range(flat.max() + 1)]

    idx = np.arange(h * w).reshape(h, w)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    la, lb = flat[a], flat[b]
    diff = la != lb
    a, b, la, lb = a[diff], b[diff], la[diff], lb[diff]
    lo = np.minimum(la, lb)
    hi = np.maximum(la, lb)
    n = flat.max() + 1
    pair = np.concatenate([lo * n + hi, lo * n + hi])
    pix = np.concatenate([a, b])
    order = np.lexsort((pix, pair))
    pair, pix = pair[order], pix[order]
    boundaries = {}
    if pair.size:
        cuts = np.flatnonzero(np.diff(pair)) + 1
        for seg_pair, seg_pix in zip(np.split(pair, cuts), np.split(pix, cuts)):
            i, j = divmod(int(seg_pair[0]), n)
            boundaries[(i, j)] = np.unique(seg_pix)
    return Partition(labels, pixels, boundaries)


def _grid_shape(h: int, w: int, target: int) -> tuple[int, int]:
    step = np.sqrt(h * w / target)
    return max(1, int(round(h / step))), max(1, int(round(w / step)))


def fill_invalid(disparity: np.ndarray) -> np.ndarray:
    d = np.asarray(disparity, dtype=np.float64)
    bad = ~(d > 0)
    if np.all(bad):
        return np.zeros_like(d)
    if np.any(bad):
        _, (iy, ix) = distance_transform_edt(bad, return_indices=True)
        d = d[iy, ix]
    return d


def build_superpixels(img: np.ndarray, disparity: np.ndarray, target_count: int,
                      n_iter: int = 10) -> Partition:
    """SLIC-style clustering on position, intensity and disparity.

    Distances combine position scaled by the seed spacing, intensity with
    weight 1 and disparity (pixels) with weight 2, so depth edges dominate.
    """
    if target_count < 4:
        raise ValueError("target_count must be >= 4")
    img = as_image(img)
    h, w = img.shape[:2]
    ny, nx = _grid_shape(h, w, target_count)
    if h < ny or w < nx or h * w < target_count:
        raise ValueError(f"image {h}x{w} is smaller than the {ny}x{nx} seed grid")
    disp = fill_invalid(disparity) if disparity is not None else np.zeros((h, w))
    feats = np.concatenate([img * INTENSITY_WEIGHT, disp[:, :, None] * DISPARITY_WEIGHT], axis=2)
    sy, sx = h / ny, w / nx
    step = np.sqrt(sy * sx)
    cy = (np.arange(ny) + 0.5) * sy
    cx = (np.arange(nx) + 0.5) * sx
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers_xy = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
    centers_f = feats[np.clip(cyy.ravel().astype(int), 0, h - 1), np.clip(cxx.ravel().astype(int), 0, w - 1)]
    ys, xs = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.intp)
    rad_y, rad_x = int(np.ceil(sy)) + 1, int(np.ceil(sx)) + 1
    for _ in range(n_iter):
        dist = np.full((h, w), np.inf)
        for k, ((px, py), f) in enumerate(zip(centers_xy, centers_f)):
            y0, y1 = max(int(py) - rad_y, 0), min(int(py) + rad_y + 1, h)
            x0, x1 = max(int(px) - rad_x, 0), min(int(px) + rad_x + 1, w)
            sub = feats[y0:y1, x0:x1]
            d = (((xs[y0:y1, x0:x1] - px) ** 2 + (ys[y0:y1, x0:x1] - py) ** 2) / step ** 2
                 + np.sum((sub - f) ** 2, axis=2))
            cur = dist[y0:y1, x0:x1]
            better = d < cur
            cur[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=len(centers_xy)).astype(np.float64)
        live = cnt > 0
        for c, arr in ((0, xs), (1, ys)):
            s = np.bincount(flat, weights=arr.ravel(), minlength=len(cnt))
            centers_xy[live, c] = s[live] / cnt[live]
        for c in range(feats.shape[2]):
            s = np.bincount(flat, weights=feats[:, :, c].ravel(), minlength=len(cnt))
            centers_f[live, c] = s[live] / cnt[live]
    return partition_from_labels(enforce_connectivity(labels))


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected piece of each label; merge the rest into neighbours."""
    labels = labels.copy()
    h, w = labels.shape
    orphan = np.zeros((h, w), dtype=bool)
    for k in np.unique(labels):
        comp, n = cc_label(labels == k)
        if n > 1:
            sizes = np.bincount(comp.ravel())[1:]
            keep = np.argmax(sizes) + 1
            orphan |= (comp > 0) & (comp != keep)
    labels[orphan] = -1
    while np.any(labels < 0):
        comp, n = cc_label(labels < 0)
        for c in range(1, n + 1):
            region = comp == c
            ry, rx = np.nonzero(region)
            votes = []
            for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                ny_, nx_ = ry + dy, rx + dx
                ok = (ny_ >= 0) & (ny_ < h) & (nx_ >= 0) & (nx_ < w)
                nb = labels[ny_[ok], nx_[ok]]
                votes.append(nb[nb >= 0])
            votes = np.concatenate(votes)
            if votes.size:
                labels[region] = np.bincount(votes).argmax()
    return relabel_contiguous(labels)


def init_labels(partition: Partition, mask: np.ndarray, num_objects: int) -> list[tuple[int, ...]]:
    """Per-superpixel admissible object labels from a binary semantic prior.

    Superpixels with a strict majority of foreground pixels get the
    foreground set ``(2, ..., num_objects)``; all others get ``(1,)``.
    """
    if num_objects < 2:
        raise ValueError("num_objects must be >= 2")
    mask = np.asarray(mask).astype(bool)
    if mask.shape != partition.shape:
        raise ValueError("mask does not match the partition")
    flat = mask.ravel()
    fg = tuple(range(2, num_objects + 1))
    out = []
    for pix in partition.pixels:
        if pix.size == 0:
            raise ValueError("empty superpixel")
        out.append(fg if 2 * flat[pix].sum() > pix.size else (1,))
    return out


def moving_mask(model, partition: Partition | None = None) -> np.ndarray:
    """Pixels whose superpixel is assigned to a non-background object."""
    labels = model.labels if partition is None else partition.labels
    return (np.asarray(model.objects)[labels] != 1)
