"""Training regimes: correspondence-supervised pretraining, pose-supervised
epipolar finetuning, and bootstrapped finetuning from estimated fundamental
matrices. All regimes are bit-deterministic given their seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateBaseline, EmptyDatasetAfterFilter, NonFiniteLoss
from .estimation import RansacConfig, ransac_fundamental
from .geometry import (
    FundamentalMatrix,
    RelativePose,
    fundamental_from_pose,
    rotation_from_axis_angle,
)
from .grid import GridSpec
from .losses import (
    LossConfig,
    coarse_loss_grad,
    epipolar_classification_mask,
    epipolar_line_set,
    fine_loss_grad,
    gt_classification_mask,
    gt_fine_loss_grad,
    naive_epipolar_mask,
)
from .matcher import (
    MatcherConfig,
    MatcherParams,
    SgdState,
    backward,
    forward,
    save_checkpoint,
    sgd_step,
    zero_grads,
)
from .synth import RenderedPair, gt_correspondence_grid


@dataclass
class TrainConfig:
    lr: float = 0.05
    weight_decay: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 25
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    replay_source: bool = True
    # temperatures move on their own scale; the coarse one is damped so the
    # selection stays sharp, the fine one may recalibrate freely
    tau_coarse_lr_scale: float = 0.2
    tau_fine_lr_scale: float = 3.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr, batch_size and epochs must be positive")


# pretraining wants a larger step and learns only the coarse temperature:
# the fine softmax stays sharp so the refinement head must really localize
PRETRAIN_DEFAULTS = dict(lr=0.3, weight_decay=0.001, batch_size=8, epochs=30,
                         tau_coarse_lr_scale=1.0, tau_fine_lr_scale=0.0)


def pretrain_config(**overrides) -> TrainConfig:
    kw = dict(PRETRAIN_DEFAULTS)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class BootstrapConfig:
    min_matches: int = 30
    min_inliers: int = 12
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(iterations=400, inlier_threshold=5e-4, seed=7))

    def __post_init__(self):
        if self.min_inliers > self.min_matches:
            raise ValueError("min_inliers must not exceed min_matches")


# the published filter thresholds, usable on full-scale data
PAPER_BOOTSTRAP_FILTER = BootstrapConfig(min_matches=100, min_inliers=20)


@dataclass
class PoseNoiseConfig:
    rotation_deg: float = 0.0
    translation_deg: float = 0.0

    def __post_init__(self):
        if self.rotation_deg < 0 or self.translation_deg < 0:
            raise ValueError("noise magnitudes must be non-negative")


def perturb_pose(pose: RelativePose, noise: PoseNoiseConfig, rng) -> RelativePose:
    """Perturb the rotation by a random-axis rotation of the given magnitude
    and tilt the translation direction by exactly the given angle."""
    if noise.rotation_deg == 0.0 and noise.translation_deg == 0.0:
        return pose
    R_delta = rotation_from_axis_angle(rng.normal(size=3), np.radians(noise.rotation_deg))
    t = pose.t
    if noise.translation_deg > 0.0 and np.linalg.norm(t) > 0.0:
        # rotate about a random axis perpendicular to t: the direction moves
        # by the full requested angle
        axis = np.cross(t, rng.normal(size=3))
        while np.linalg.norm(axis) < 1e-12:
            axis = np.cross(t, rng.normal(size=3))
        t = rotation_from_axis_angle(axis, np.radians(noise.translation_deg)) @ t
    return RelativePose(R_delta @ pose.R, t)


def _grid_of(pair: RenderedPair, mcfg: MatcherConfig) -> GridSpec:
    return GridSpec.for_image(*pair.image1.shape, mcfg.patch_width)


def _check_finite(loss, pair_index):
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss on pair {pair_index}")


def _supervised_pair_grads(pair, gt, params, mcfg, lam, fine_fraction, rng_key):
    """Forward + gradients for one correspondence-supervised pair."""
    targets, points = gt
    valid = np.where(targets >= 0)[0]
    grid = _grid_of(pair, mcfg)
    pred, cache = forward(pair.image1, pair.image2, params, mcfg,
                          coarse_override=(valid, targets[valid]))
    mask = gt_classification_mask(targets, grid.m)
    lc, dC = coarse_loss_grad(pred.C.values, mask)
    lf = 0.0
    dfine = None
    M = pred.fine_x2.shape[0]
    if M:
        kept = cache["fine"]["kept"]
        gt_pts = points[valid][kept]
        keep_n = max(1, int(round(fine_fraction * M)))
        sub = np.random.default_rng(rng_key).permutation(M)[:keep_n]
        lf_sub, df = gt_fine_loss_grad(pred.fine_x2[sub], gt_pts[sub])
        lf = lf_sub
        dfine = np.zeros_like(pred.fine_x2)
        dfine[sub] = lam * df
    grads = backward(cache, dC=(1.0 - lam) * dC, dfine=dfine)
    return grads, (1.0 - lam) * lc + lam * lf, lc, lf


def _epipolar_pair_grads(pair, F, params, mcfg, loss_cfg, naive_mask, rng_key):
    """Forward + gradients for one epipolar-supervised pair; None when the
    mask has no positives (counted by the caller)."""
    grid = _grid_of(pair, mcfg)
    pred, cache = forward(pair.image1, pair.image2, params, mcfg)
    sets = epipolar_line_set(F, grid, grid, loss_cfg.theta)
    mask = naive_epipolar_mask(sets) if naive_mask else epipolar_classification_mask(pred.C, sets)
    if not mask.values.any():
        return None
    lam = loss_cfg.lam
    lc, dC = coarse_loss_grad(pred.C.values, mask)
    lf = 0.0
    dfine = None
    M = pred.fine_x2.shape[0]
    if M:
        keep_n = max(1, int(round(loss_cfg.fine_supervision_fraction * M)))
        sub = np.random.default_rng(rng_key).permutation(M)[:keep_n]
        lf_sub, df = fine_loss_grad(F, pred.fine_x1[sub], pred.fine_x2[sub],
                                    scale=loss_cfg.fine_weight_scale)
        lf = lf_sub
        dfine = np.zeros_like(pred.fine_x2)
        dfine[sub] = lam * df
    grads = backward(cache, dC=(1.0 - lam) * dC, dfine=dfine)
    return grads, (1.0 - lam) * lc + lam * lf, lc, lf


def _apply_step(params, state, acc, count, cfg: TrainConfig):
    g = acc.scaled(1.0 / max(count, 1))
    g.dtau_coarse *= cfg.tau_coarse_lr_scale
    g.dtau_fine *= cfg.tau_fine_lr_scale
    sgd_step(params, g, state, lr=cfg.lr, momentum=cfg.momentum,
             weight_decay=cfg.weight_decay)


def pretrain(dataset_a, params0: MatcherParams, cfg: TrainConfig,
             mcfg: MatcherConfig | None = None, gts=None):
    """Correspondence-supervised training on ground-truth matches.

    Returns (params, history) where history rows carry per-epoch mean losses.
    """
    mcfg = mcfg or MatcherConfig()
    params = params0.copy()
    state = SgdState.zeros(params)
    rng = np.random.default_rng(cfg.seed)
    if gts is None:
        gts = [gt_correspondence_grid(p, _grid_of(p, mcfg)) for p in dataset_a]
    history = []
    lam = cfg.loss.lam
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset_a))
        tot = tot_c = tot_f = 0.0
        for s0 in range(0, len(order), cfg.batch_size):
            batch = order[s0:s0 + cfg.batch_size]
            acc = zero_grads(params)
            for k in batch:
                grads, loss, lc, lf = _supervised_pair_grads(
                    dataset_a[k], gts[k], params, mcfg, lam,
                    cfg.loss.fine_supervision_fraction, [cfg.seed, epoch, int(k)])
                _check_finite(loss, k)
                acc.add_(grads.scaled(1.0 / len(batch)))
                tot += loss
                tot_c += lc
                tot_f += lf
            _apply_step(params, state, acc, 1, cfg)
        n = len(dataset_a)
        history.append({"epoch": epoch, "loss": tot / n, "coarse_loss": tot_c / n,
                        "fine_loss": tot_f / n})
    return params, history


def finetune_pose_supervised(dataset_b, params0: MatcherParams, cfg: TrainConfig,
                             noise: PoseNoiseConfig | None = None,
                             mcfg: MatcherConfig | None = None,
                             replay_pairs=None, replay_gts=None,
                             f_override=None, naive_mask=False):
    """Epipolar finetuning with F from (optionally perturbed) poses.

    f_override: optional per-pair list of FundamentalMatrix (or None to skip
    the pair) replacing the pose-derived F; used by the bootstrap regime and
    test hooks. With replay_source, each batch adds an equal count of source
    pairs trained with the original supervised losses.
    """
    mcfg = mcfg or MatcherConfig()
    noise = noise or PoseNoiseConfig()
    params = params0.copy()
    state = SgdState.zeros(params)
    rng = np.random.default_rng(cfg.seed)

    if f_override is not None:
        f_per_pair = list(f_override)
        skipped = sum(1 for f in f_per_pair if f is None)
    else:
        f_per_pair = []
        skipped = 0
        for i, pair in enumerate(dataset_b):
            noise_rng = np.random.default_rng([cfg.seed, 101, i])
            try:
                pose = perturb_pose(pair.pose, noise, noise_rng)
                f_per_pair.append(fundamental_from_pose(pair.K, pair.K, pose))
            except DegenerateBaseline:
                f_per_pair.append(None)
                skipped += 1
    if all(f is None for f in f_per_pair):
        raise EmptyDatasetAfterFilter("no pair has a usable fundamental matrix")

    use_replay = cfg.replay_source and replay_pairs is not None and len(replay_pairs) > 0
    if use_replay and replay_gts is None:
        replay_gts = [gt_correspondence_grid(p, _grid_of(p, mcfg)) for p in replay_pairs]

    history = []
    lam = cfg.loss.lam
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset_b))
        tot = tot_c = tot_f = 0.0
        n_used = 0
        for s0 in range(0, len(order), cfg.batch_size):
            batch = order[s0:s0 + cfg.batch_size]
            acc = zero_grads(params)
            used = 0
            for k in batch:
                F = f_per_pair[k]
                if F is None:
                    continue
                out = _epipolar_pair_grads(dataset_b[k], F, params, mcfg, cfg.loss,
                                           naive_mask, [cfg.seed, epoch, int(k)])
                if out is None:
                    continue
                grads, loss, lc, lf = out
                _check_finite(loss, k)
                acc.add_(grads)
                used += 1
                tot += loss
                tot_c += lc
                tot_f += lf
            if use_replay:
                ridx = rng.choice(len(replay_pairs), size=len(batch), replace=False)
                for k in ridx:
                    grads, loss, lc, lf = _supervised_pair_grads(
                        replay_pairs[k], replay_gts[k], params, mcfg, lam,
                        cfg.loss.fine_supervision_fraction, [cfg.seed, 77, epoch, int(k)])
                    _check_finite(loss, k)
                    acc.add_(grads)
                    used += 1
            if used:
                _apply_step(params, state, acc, used, cfg)
                n_used += used
        denom = max(n_used, 1)
        history.append({"epoch": epoch, "loss": tot / denom, "coarse_loss": tot_c / denom,
                        "fine_loss": tot_f / denom, "skipped_pairs": skipped})
    return params, history


def bootstrap_fundamentals(dataset_b, params: MatcherParams, bcfg: BootstrapConfig,
                           mcfg: MatcherConfig | None = None):
    """Estimate a fundamental matrix per pair from the model's own matches.

    Returns (list of FundamentalMatrix or None, report dict). Pairs failing
    the match-count or inlier-count filters yield None.
    """
    mcfg = mcfg or MatcherConfig()
    f_list = []
    report = {"n_pairs": len(dataset_b), "kept": 0, "dropped_few_matches": 0,
              "dropped_few_inliers": 0, "dropped_estimation_failed": 0}
    for pair in dataset_b:
        pred, _ = forward(pair.image1, pair.image2, params, mcfg)
        if pred.fine_x2.shape[0] < bcfg.min_matches:
            f_list.append(None)
            report["dropped_few_matches"] += 1
            continue
        try:
            res = ransac_fundamental(pred.fine_x1, pred.fine_x2, pair.K, pair.K, bcfg.ransac)
        except Exception:
            f_list.append(None)
            report["dropped_estimation_failed"] += 1
            continue
        if res.inlier_count < bcfg.min_inliers:
            f_list.append(None)
            report["dropped_few_inliers"] += 1
            continue
        f_list.append(res.F)
        report["kept"] += 1
    return f_list, report


def bootstrap_finetune(dataset_b, params0: MatcherParams, cfg: TrainConfig,
                       bcfg: BootstrapConfig, mcfg: MatcherConfig | None = None,
                       replay_pairs=None, replay_gts=None, f_injected=None):
    """Estimate F per pair once up-front, then finetune against those
    estimates. f_injected replaces the estimation step (test hook)."""
    mcfg = mcfg or MatcherConfig()
    if f_injected is not None:
        f_list = f_injected
        report = {"n_pairs": len(dataset_b), "kept": sum(f is not None for f in f_list),
                  "injected": True}
    else:
        f_list, report = bootstrap_fundamentals(dataset_b, params0, bcfg, mcfg)
    if report["kept"] == 0:
        raise EmptyDatasetAfterFilter("bootstrap filter removed every pair")
    params, history = finetune_pose_supervised(
        dataset_b, params0, cfg, mcfg=mcfg, replay_pairs=replay_pairs,
        replay_gts=replay_gts, f_override=f_list)
    return params, history, report


def write_run_outputs(run_dir, params, history, config_snapshot, extra=None):
    """Persist the standard run directory: config, metrics CSV, checkpoint."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w") as fh:
        json.dump(config_snapshot, fh, indent=2, sort_keys=True, default=str)
    if history:
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
            writer.writeheader()
            writer.writerows(history)
    save_checkpoint(run_dir / "checkpoint.bin", params)
    if extra:
        with open(run_dir / "report.json", "w") as fh:
            json.dump(extra, fh, indent=2, sort_keys=True)
