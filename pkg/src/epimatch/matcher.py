"""Minimal trainable coarse-to-fine matcher.

Coarse stage: raw w x w intensity patches (mean-subtracted, unit-norm) are
linearly embedded, re-normalized and compared by dual-softmax over scaled
inner products. Fine stage: around each coarse match, a correlation heatmap
between fine-patch embeddings feeds a soft-argmax that yields a subpixel
match. Both stages backpropagate exactly into the two embedding matrices and
the shared softmax temperature.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadDimensions, NonFiniteGradient
from .grid import GridSpec
from .losses import ConfidenceMatrix

_NORM_EPS = 1e-12
_TAU_MIN = 1e-3
_CHECKPOINT_MAGIC = b"EPMATCH1"
_CHECKPOINT_VERSION = 1


@dataclass
class MatcherConfig:
    patch_width: int = 8
    fine_patch: int = 4
    fine_stride: int = 2
    d: int = 32
    d_fine: int = 16
    window_radius: int = 3
    match_threshold: float = 0.2

    @property
    def d_in(self):
        return self.patch_width ** 2

    @property
    def d_in_fine(self):
        return self.fine_patch ** 2


@dataclass
class MatcherParams:
    """Two linear embeddings plus per-stage softmax temperatures.

    A single shared temperature couples the stages destructively: the fine
    stage prefers flatter heatmaps on weak texture, which would also flatten
    the coarse selection, so each stage owns its temperature.
    """

    W_coarse: np.ndarray  # (d_in, d)
    W_fine: np.ndarray  # (d_in_fine, d_fine)
    tau_coarse: float
    tau_fine: float

    def copy(self):
        return MatcherParams(self.W_coarse.copy(), self.W_fine.copy(),
                             float(self.tau_coarse), float(self.tau_fine))


@dataclass
class MatcherGrads:
    dW_coarse: np.ndarray
    dW_fine: np.ndarray
    dtau_coarse: float
    dtau_fine: float

    def scaled(self, c):
        return MatcherGrads(c * self.dW_coarse, c * self.dW_fine,
                            c * self.dtau_coarse, c * self.dtau_fine)

    def add_(self, other):
        self.dW_coarse += other.dW_coarse
        self.dW_fine += other.dW_fine
        self.dtau_coarse += other.dtau_coarse
        self.dtau_fine += other.dtau_fine
        return self


def zero_grads(params: MatcherParams) -> MatcherGrads:
    return MatcherGrads(np.zeros_like(params.W_coarse), np.zeros_like(params.W_fine), 0.0, 0.0)


def init_params(cfg: MatcherConfig, seed=0) -> MatcherParams:
    rng = np.random.default_rng(seed)
    Wc = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_in), (cfg.d_in, cfg.d))
    Wf = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_in_fine), (cfg.d_in_fine, cfg.d_fine))
    return MatcherParams(Wc, Wf, tau_coarse=0.1, tau_fine=0.1)


@dataclass
class ImageFeatures:
    coarse: np.ndarray  # (m, d_in)
    textureless: np.ndarray  # (m,)
    fine: np.ndarray  # (nf, d_in_fine)
    fine_rows: int
    fine_cols: int
    fine_centers: np.ndarray  # (nf, 2) pixel coords
    grid: GridSpec


def _patch_rows(stack):
    """Mean-subtract and unit-normalize flattened patches; flag flats."""
    x = stack - stack.mean(axis=1, keepdims=True)
    n = np.linalg.norm(x, axis=1)
    flat = n < _NORM_EPS
    x[~flat] /= n[~flat, None]
    x[flat] = 0.0
    return x, flat


def extract_features(image, cfg: MatcherConfig) -> ImageFeatures:
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise BadDimensions("expected a 2D intensity grid")
    H, W = image.shape
    w = cfg.patch_width
    if H % w or W % w:
        raise BadDimensions(f"image {H}x{W} not a multiple of patch width {w}")
    grid = GridSpec.for_image(H, W, w)
    blocks = image.reshape(grid.rows, w, grid.cols, w).transpose(0, 2, 1, 3)
    coarse, flat = _patch_rows(blocks.reshape(grid.m, w * w).copy())

    fp, s = cfg.fine_patch, cfg.fine_stride
    windows = np.lib.stride_tricks.sliding_window_view(image, (fp, fp))[::s, ::s]
    fr, fc = windows.shape[:2]
    fine, _ = _patch_rows(windows.reshape(fr * fc, fp * fp).copy())
    qs = np.arange(fc) * s + fp // 2
    ps = np.arange(fr) * s + fp // 2
    uu, vv = np.meshgrid(qs, ps)
    centers = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
    return ImageFeatures(coarse, flat, fine, fr, fc, centers, grid)


def _embed_normalized(X, W):
    """Rows of (N, d_in) X @ W scaled to unit norm; returns (D, Y, norms)."""
    Y = X @ W
    n = np.linalg.norm(Y, axis=1)
    D = np.zeros_like(Y)
    good = n > _NORM_EPS
    D[good] = Y[good] / n[good][:, None]
    return D, Y, n


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def confidence_matrix(feats1: ImageFeatures, feats2: ImageFeatures, params: MatcherParams):
    """Dual-softmax confidence over embedded coarse descriptors.

    Returns (ConfidenceMatrix, cache dict for backward).
    """
    D1, Y1, n1 = _embed_normalized(feats1.coarse, params.W_coarse)
    D2, Y2, n2 = _embed_normalized(feats2.coarse, params.W_coarse)
    S = (D1 @ D2.T) / params.tau_coarse
    RS = _softmax(S, axis=1)
    CS = _softmax(S, axis=0)
    C = RS * CS
    cache = dict(D1=D1, D2=D2, n1=n1, n2=n2, S=S, RS=RS, CS=CS,
                 X1=feats1.coarse, X2=feats2.coarse)
    return ConfidenceMatrix(C, feats1.grid, feats2.grid), cache


def select_coarse(C_values, match_threshold):
    """Mutual-argmax matches with confidence >= threshold, ordered by row."""
    if C_values.size == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    row_best = np.argmax(C_values, axis=1)
    col_best = np.argmax(C_values, axis=0)
    rows = np.arange(C_values.shape[0])
    mutual = col_best[row_best] == rows
    conf = C_values[rows, row_best]
    keep = mutual & (conf >= match_threshold)
    return rows[keep], row_best[keep], conf[keep]


def _fine_cell_of_center(feats: ImageFeatures, cfg: MatcherConfig, u, v):
    """Index of the fine cell whose centre coincides with (u, v), or -1."""
    fp, s = cfg.fine_patch, cfg.fine_stride
    q = (u - fp // 2) / s
    p = (v - fp // 2) / s
    qi, pi = int(round(q)), int(round(p))
    if 0 <= pi < feats.fine_rows and 0 <= qi < feats.fine_cols:
        return pi * feats.fine_cols + qi
    return -1


def refine_fine(feats1: ImageFeatures, feats2: ImageFeatures, params: MatcherParams,
                cfg: MatcherConfig, i_idx, j_idx, conf):
    """Soft-argmax refinement of coarse matches.

    Returns (x1s, x2s, conf_kept, cache, dropped) where x1s are coarse cell
    centres in image 1 and x2s the refined subpixel matches in image 2.
    Matches whose correlation window leaves the fine grid are dropped.
    """
    r = cfg.window_radius
    kept, centers1, center_cells1, window_cells = [], [], [], []
    for k, (i, j) in enumerate(zip(i_idx, j_idx)):
        u1, v1 = feats1.grid.cell_center(i)
        u2, v2 = feats2.grid.cell_center(j)
        c1 = _fine_cell_of_center(feats1, cfg, u1, v1)
        c2 = _fine_cell_of_center(feats2, cfg, u2, v2)
        if c1 < 0 or c2 < 0:
            continue
        p2, q2 = divmod(c2, feats2.fine_cols)
        if p2 - r < 0 or p2 + r >= feats2.fine_rows or q2 - r < 0 or q2 + r >= feats2.fine_cols:
            continue
        pp, qq = np.meshgrid(np.arange(p2 - r, p2 + r + 1), np.arange(q2 - r, q2 + r + 1), indexing="ij")
        window_cells.append((pp * feats2.fine_cols + qq).ravel())
        center_cells1.append(c1)
        centers1.append((u1, v1))
        kept.append(k)
    dropped = len(i_idx) - len(kept)
    if not kept:
        empty = np.zeros((0, 2))
        cache = dict(M=0)
        return empty, empty.copy(), np.zeros(0), cache, dropped

    kept = np.array(kept, int)
    widx = np.array(window_cells, int)  # (M, Kw)
    cidx = np.array(center_cells1, int)  # (M,)
    Xf1 = feats1.fine[cidx]  # (M, d_in_f)
    Xf2 = feats2.fine[widx]  # (M, Kw, d_in_f)
    e1, Yf1, nf1 = _embed_normalized(Xf1, params.W_fine)
    M, Kw, _ = Xf2.shape
    Y2w = Xf2 @ params.W_fine
    n2w = np.linalg.norm(Y2w, axis=2)
    E2w = np.zeros_like(Y2w)
    good = n2w > _NORM_EPS
    E2w[good] = Y2w[good] / n2w[good][:, None]
    corr = np.einsum("mkd,md->mk", E2w, e1)
    logits = corr / params.tau_fine
    p = _softmax(logits, axis=1)
    coords = feats2.fine_centers[widx]  # (M, Kw, 2)
    x2s = np.einsum("mk,mkc->mc", p, coords)
    x1s = np.array(centers1, dtype=float)
    cache = dict(M=M, kept=kept, widx=widx, cidx=cidx, Xf1=Xf1, Xf2=Xf2,
                 e1=e1, nf1=nf1, E2w=E2w, n2w=n2w, corr=corr, p=p, coords=coords)
    return x1s, x2s, np.asarray(conf)[kept], cache, dropped


@dataclass
class MatchPrediction:
    C: ConfidenceMatrix
    coarse_i: np.ndarray
    coarse_j: np.ndarray
    coarse_conf: np.ndarray
    fine_x1: np.ndarray  # (M, 2) coarse cell centres, image 1
    fine_x2: np.ndarray  # (M, 2) refined subpixel matches, image 2
    fine_conf: np.ndarray
    dropped: int = 0


def forward(image1, image2, params: MatcherParams, cfg: MatcherConfig, coarse_override=None):
    """Full two-stage pass. Returns (MatchPrediction, cache).

    coarse_override: optional (i_idx, j_idx) arrays to refine instead of the
    mutual-argmax selection (used for teacher-forced training).
    """
    f1 = extract_features(image1, cfg)
    f2 = extract_features(image2, cfg)
    C, ccache = confidence_matrix(f1, f2, params)
    if coarse_override is None:
        i_idx, j_idx, conf = select_coarse(C.values, cfg.match_threshold)
    else:
        i_idx, j_idx = (np.asarray(a, int) for a in coarse_override)
        conf = C.values[i_idx, j_idx]
    x1s, x2s, conf_kept, fcache, dropped = refine_fine(f1, f2, params, cfg, i_idx, j_idx, conf)
    pred = MatchPrediction(C, i_idx, j_idx, conf, x1s, x2s, conf_kept, dropped)
    cache = dict(cfg=cfg, params=params, coarse=ccache, fine=fcache, f1=f1, f2=f2)
    return pred, cache


def _normalize_backward(dD, D, n):
    """Backward through row normalization d = y / |y| (zero rows pass zeros)."""
    dY = np.zeros_like(dD)
    good = n > _NORM_EPS
    if dD.ndim == 2:
        dot = np.einsum("ij,ij->i", dD[good], D[good])
        dY[good] = (dD[good] - D[good] * dot[:, None]) / n[good][:, None]
    else:
        dot = np.einsum("...d,...d->...", dD[good], D[good])
        dY[good] = (dD[good] - D[good] * dot[..., None]) / n[good][..., None]
    return dY


def backward(cache, dC=None, dfine=None) -> MatcherGrads:
    """Exact reverse-mode gradients of the forward pass.

    dC: (m1, m2) upstream gradient on the confidence matrix.
    dfine: (M, 2) upstream gradient on the refined match coordinates, in the
    order of the prediction's fine matches.
    """
    params: MatcherParams = cache["params"]
    grads = zero_grads(params)

    if dC is not None and np.any(dC):
        tau = params.tau_coarse
        cc = cache["coarse"]
        RS, CS, S = cc["RS"], cc["CS"], cc["S"]
        G_RS = dC * CS
        G_CS = dC * RS
        dS = RS * (G_RS - np.sum(G_RS * RS, axis=1, keepdims=True))
        dS += CS * (G_CS - np.sum(G_CS * CS, axis=0, keepdims=True))
        grads.dtau_coarse += -float(np.sum(dS * S)) / tau
        dA = dS / tau
        dD1 = dA @ cc["D2"]
        dD2 = dA.T @ cc["D1"]
        dY1 = _normalize_backward(dD1, cc["D1"], cc["n1"])
        dY2 = _normalize_backward(dD2, cc["D2"], cc["n2"])
        grads.dW_coarse += cc["X1"].T @ dY1 + cc["X2"].T @ dY2

    fc = cache["fine"]
    if dfine is not None and fc["M"] > 0 and np.any(dfine):
        tau = params.tau_fine
        p, coords, corr = fc["p"], fc["coords"], fc["corr"]
        dp = np.einsum("mc,mkc->mk", dfine, coords)
        dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
        grads.dtau_fine += -float(np.sum(dlogits * corr)) / (tau * tau)
        dcorr = dlogits / tau
        de1 = np.einsum("mk,mkd->md", dcorr, fc["E2w"])
        dE2w = dcorr[:, :, None] * fc["e1"][:, None, :]
        dY1f = _normalize_backward(de1, fc["e1"], fc["nf1"])
        dY2w = _normalize_backward(dE2w, fc["E2w"], fc["n2w"])
        M, Kw, d_in_f = fc["Xf2"].shape
        grads.dW_fine += fc["Xf1"].T @ dY1f
        grads.dW_fine += fc["Xf2"].reshape(M * Kw, d_in_f).T @ dY2w.reshape(M * Kw, -1)

    return grads


@dataclass
class SgdState:
    v_coarse: np.ndarray
    v_fine: np.ndarray
    v_tau_coarse: float = 0.0
    v_tau_fine: float = 0.0

    @staticmethod
    def zeros(params: MatcherParams):
        return SgdState(np.zeros_like(params.W_coarse), np.zeros_like(params.W_fine), 0.0, 0.0)


def sgd_step(params: MatcherParams, grads: MatcherGrads, state: SgdState,
             lr, momentum=0.9, weight_decay=0.0, tau_lr=None) -> MatcherParams:
    """Momentum SGD: v = mu*v + g + wd*p, then p -= lr*v.

    Temperatures update multiplicatively (log-space step with rate tau_lr,
    default lr/10) and are clamped positive; their scale differs from the
    embedding weights by orders of magnitude, so they get their own rate.
    """
    for g in (grads.dW_coarse, grads.dW_fine):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite entries in parameter gradient")
    if not (np.isfinite(grads.dtau_coarse) and np.isfinite(grads.dtau_fine)):
        raise NonFiniteGradient("non-finite temperature gradient")
    if tau_lr is None:
        tau_lr = 0.1 * lr
    state.v_coarse = momentum * state.v_coarse + grads.dW_coarse + weight_decay * params.W_coarse
    state.v_fine = momentum * state.v_fine + grads.dW_fine + weight_decay * params.W_fine
    state.v_tau_coarse = momentum * state.v_tau_coarse + grads.dtau_coarse * params.tau_coarse
    state.v_tau_fine = momentum * state.v_tau_fine + grads.dtau_fine * params.tau_fine
    params.W_coarse = params.W_coarse - lr * state.v_coarse
    params.W_fine = params.W_fine - lr * state.v_fine
    params.tau_coarse = float(np.clip(params.tau_coarse * np.exp(-tau_lr * state.v_tau_coarse), _TAU_MIN, 10.0))
    params.tau_fine = float(np.clip(params.tau_fine * np.exp(-tau_lr * state.v_tau_fine), _TAU_MIN, 10.0))
    return params


def save_checkpoint(path, params: MatcherParams):
    """Flat binary: magic, version, dims, tau, then row-major float64 data."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIII", _CHECKPOINT_VERSION,
                             params.W_coarse.shape[0], params.W_coarse.shape[1],
                             params.W_fine.shape[0], params.W_fine.shape[1]))
        fh.write(struct.pack("<dd", params.tau_coarse, params.tau_fine))
        fh.write(np.ascontiguousarray(params.W_coarse, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.W_fine, dtype="<f8").tobytes())


def load_checkpoint(path) -> MatcherParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError("not a matcher checkpoint (bad magic)")
        version, a, b, c, d = struct.unpack("<IIIII", fh.read(20))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tau_coarse, tau_fine = struct.unpack("<dd", fh.read(16))
        Wc = np.frombuffer(fh.read(a * b * 8), dtype="<f8").reshape(a, b).copy()
        Wf = np.frombuffer(fh.read(c * d * 8), dtype="<f8").reshape(c, d).copy()
    return MatcherParams(Wc, Wf, tau_coarse, tau_fine)
