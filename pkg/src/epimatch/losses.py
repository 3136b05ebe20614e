"""Supervision signals: ground-truth and epipolar classification/regression
losses with their analytic gradients.

The coarse loss is a sparse negative log-likelihood over the positive entries
of a binary mask; the fine loss is a linearly-scaled distance. In the
epipolar variants the mask positives are the per-row argmax of the confidence
matrix restricted to a thickened epipolar line set, and the distance is the
perpendicular pixel distance to the epipolar line.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLine, EmptySupervision
from .geometry import FundamentalMatrix
from .grid import GridSpec

CLAMP_EPS = 1e-12


@dataclass
class LossConfig:
    lam: float = 0.5  # fine-term weight in the total loss
    theta: float = float(np.sqrt(2.0))  # line thickness factor
    fine_weight_scale: float = 1.0
    fine_supervision_fraction: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.theta <= 0.0:
            raise ValueError("theta must be positive")
        if not 0.0 < self.fine_supervision_fraction <= 1.0:
            raise ValueError("fine_supervision_fraction must be in (0, 1]")


@dataclass
class ConfidenceMatrix:
    values: np.ndarray  # (m1, m2) in [0, 1]
    grid1: GridSpec
    grid2: GridSpec


@dataclass
class EpipolarMask:
    values: np.ndarray  # (m1, m2) binary
    line_sets: np.ndarray  # (m1, m2) boolean column sets e_1^i
    excluded: np.ndarray  # (m1,) rows with no admissible column


def epipolar_line_set(F: FundamentalMatrix, grid1: GridSpec, grid2: GridSpec, theta):
    """Boolean (m1, m2) table: cell j of image 2 lies within theta*w/2 pixels
    of the epipolar line of cell i's centre. Epipole rows come back empty."""
    c1 = grid1.cell_centers()
    c2 = grid2.cell_centers()
    ones = np.ones((c1.shape[0], 1))
    lines = np.hstack([c1, ones]) @ F.m.T  # row i = F x1_i
    norms = np.hypot(lines[:, 0], lines[:, 1])
    ok = norms > 1e-12 * max(1.0, float(np.abs(lines).max(initial=0.0)))
    dist = np.abs(np.hstack([c2, np.ones((c2.shape[0], 1))]) @ lines.T)  # (m2, m1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = dist.T / norms[:, None]
    band = theta * grid2.patch_width / 2.0
    sets = (dist <= band) & ok[:, None]
    return sets


def epipolar_classification_mask(C: ConfidenceMatrix, line_sets) -> EpipolarMask:
    """One positive per non-empty row at the on-line confidence argmax."""
    values = np.zeros_like(C.values)
    excluded = ~line_sets.any(axis=1)
    scores = np.where(line_sets, C.values, -np.inf)
    rows = np.where(~excluded)[0]
    if rows.size:
        cols = np.argmax(scores[rows], axis=1)  # first max wins ties
        values[rows, cols] = 1.0
    return EpipolarMask(values=values, line_sets=np.asarray(line_sets), excluded=excluded)


def naive_epipolar_mask(line_sets) -> EpipolarMask:
    """Ablation: every on-line cell is a positive; row sums may exceed 1."""
    line_sets = np.asarray(line_sets)
    return EpipolarMask(
        values=line_sets.astype(float),
        line_sets=line_sets,
        excluded=~line_sets.any(axis=1),
    )


def gt_classification_mask(targets, m2) -> EpipolarMask:
    """One-hot mask from per-cell ground-truth target cells (-1 for none)."""
    targets = np.asarray(targets, dtype=int)
    values = np.zeros((targets.shape[0], m2))
    rows = np.where(targets >= 0)[0]
    values[rows, targets[rows]] = 1.0
    return EpipolarMask(values=values, line_sets=values > 0, excluded=targets < 0)


def coarse_loss(C_values, mask: EpipolarMask):
    """Mean negative log-confidence over mask positives."""
    pos = mask.values > 0
    if not pos.any():
        raise EmptySupervision("classification mask has no positive entries")
    c = np.clip(C_values[pos], CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(np.mean(-np.log(c)))


def coarse_loss_grad(C_values, mask: EpipolarMask):
    """(loss, dL/dC); the mask itself is treated as constant (stop-gradient)."""
    pos = mask.values > 0
    if not pos.any():
        raise EmptySupervision("classification mask has no positive entries")
    n = int(pos.sum())
    grad = np.zeros_like(C_values)
    inside = pos & (C_values > CLAMP_EPS) & (C_values < 1.0 - CLAMP_EPS)
    grad[inside] = -1.0 / (n * C_values[inside])
    c = np.clip(C_values[pos], CLAMP_EPS, 1.0 - CLAMP_EPS)
    return float(np.mean(-np.log(c))), grad


def d_epi(F: FundamentalMatrix, x1, x2_hat):
    """Perpendicular pixel distance from x2_hat to the line F x1, plus its
    gradient w.r.t. the (u, v) of x2_hat. Subgradient 0 on the line."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2_hat, dtype=float)
    line = F.m @ x1
    n = np.hypot(line[0], line[1])
    if n == 0.0:
        raise DegenerateLine("epipolar line has (a, b) = (0, 0)")
    r = float(line @ (x2 / x2[2]))
    d = abs(r) / n
    grad = np.sign(r) * line[:2] / n
    return d, grad


def d_epi_batch(F: FundamentalMatrix, x1s, x2s):
    """Vectorized d_epi over (N, 2) pixel arrays; returns (d, grad) arrays."""
    x1s = np.asarray(x1s, dtype=float)
    x2s = np.asarray(x2s, dtype=float)
    ones = np.ones((x1s.shape[0], 1))
    lines = np.hstack([x1s, ones]) @ F.m.T
    n = np.hypot(lines[:, 0], lines[:, 1])
    if np.any(n == 0.0):
        raise DegenerateLine("epipolar line with vanishing (a, b)")
    r = np.einsum("ij,ij->i", np.hstack([x2s, ones]), lines)
    d = np.abs(r) / n
    grad = np.sign(r)[:, None] * lines[:, :2] / n[:, None]
    return d, grad


def fine_loss(F: FundamentalMatrix, x1s, x2s, scale=1.0):
    """Mean scaled epipolar distance over fine matches."""
    x1s = np.asarray(x1s, dtype=float)
    if x1s.shape[0] == 0:
        raise EmptySupervision("no fine matches to supervise")
    d, _ = d_epi_batch(F, x1s, x2s)
    return float(scale * np.mean(d))


def fine_loss_grad(F: FundamentalMatrix, x1s, x2s, scale=1.0):
    """(loss, dL/dx2) for the epipolar fine loss."""
    x1s = np.asarray(x1s, dtype=float)
    if x1s.shape[0] == 0:
        raise EmptySupervision("no fine matches to supervise")
    d, g = d_epi_batch(F, x1s, x2s)
    return float(scale * np.mean(d)), scale * g / x1s.shape[0]


def gt_fine_loss(x2s, gt_points, scale=1.0):
    """Mean scaled Euclidean distance to ground-truth subpixel targets."""
    x2s = np.asarray(x2s, dtype=float)
    gt = np.asarray(gt_points, dtype=float)
    if x2s.shape[0] == 0:
        raise EmptySupervision("no fine matches to supervise")
    return float(scale * np.mean(np.linalg.norm(x2s - gt, axis=1)))


def gt_fine_loss_grad(x2s, gt_points, scale=1.0):
    """(loss, dL/dx2); subgradient 0 at exact hits."""
    x2s = np.asarray(x2s, dtype=float)
    gt = np.asarray(gt_points, dtype=float)
    if x2s.shape[0] == 0:
        raise EmptySupervision("no fine matches to supervise")
    diff = x2s - gt
    dist = np.linalg.norm(diff, axis=1)
    grad = np.zeros_like(diff)
    nz = dist > 0
    grad[nz] = diff[nz] / dist[nz, None]
    return float(scale * np.mean(dist)), scale * grad / x2s.shape[0]


def total_epipolar_loss(C: ConfidenceMatrix, fine_x1s, fine_x2s, F: FundamentalMatrix, cfg: LossConfig, naive_mask=False):
    """(1 - lam) * coarse + lam * fine, with gradients w.r.t. C and the fine
    coordinates. The classification mask is recomputed from the current C but
    not differentiated through."""
    sets = epipolar_line_set(F, C.grid1, C.grid2, cfg.theta)
    mask = naive_epipolar_mask(sets) if naive_mask else epipolar_classification_mask(C, sets)
    lc, dC = coarse_loss_grad(C.values, mask)
    lf, dfine = fine_loss_grad(F, fine_x1s, fine_x2s, cfg.fine_weight_scale)
    total = (1.0 - cfg.lam) * lc + cfg.lam * lf
    return total, (1.0 - cfg.lam) * dC, cfg.lam * dfine, mask
