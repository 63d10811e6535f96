"""Reconstruction metrics and reporting.

Two conventions matter for weak-perspective reconstructions and both are
configurable: the depth-flip (the reflection ``z -> -z`` leaves the
projection unchanged, so the per-frame best of both signs may be scored)
and the depth offset (the object's distance is unobservable; MPJPE removes
the mean depth or a root keypoint's depth before comparing).

Normalized error is ``||S_pred - S_gt||_F / ||S_gt||_F`` with no offset
removal. Metrics are never consumed by the trainer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import geometry, networks, trainer
from .errors import PaulError
from .geometry import GeometryError


class EvaluationError(PaulError):
    pass


@dataclass
class MetricConfig:
    flip_policy: str = "per-frame-best"  # "per-frame-best" | "none"
    depth_offset: str = "mean-depth"  # "mean-depth" | "root-joint"
    root_index: int = 0
    units: str = "normalized"  # "normalized" | "original"

    def __post_init__(self):
        if self.flip_policy not in ("per-frame-best", "none"):
            raise EvaluationError(f"unknown flip policy {self.flip_policy!r}")
        if self.depth_offset not in ("mean-depth", "root-joint"):
            raise EvaluationError(f"unknown depth offset policy {self.depth_offset!r}")
        if self.units not in ("normalized", "original"):
            raise EvaluationError(f"unknown units {self.units!r}")
        if self.root_index < 0:
            raise EvaluationError("root index must be >= 0")


def _flip_depth(points):
    """Mirror the reconstruction through the image plane (negate depth).

    Plain negation keeps per-frame-best scoring bit-exactly invariant to a
    global depth negation of either side; the depth offset it does not
    preserve is zero for centered shapes anyway.
    """
    out = points.copy()
    out[2] = -out[2]
    return out


def normalized_error(pred, gt, cfg=None):
    """Relative Frobenius error, optionally taking the better depth sign.

    Returns ``(error, flipped)``; ``flipped`` says whether the mirrored
    depth scored strictly lower.
    """
    cfg = cfg or MetricConfig()
    pred = pred.points if isinstance(pred, geometry.Shape3D) else np.asarray(pred)
    gt = gt.points if isinstance(gt, geometry.Shape3D) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = float(np.linalg.norm(gt))
    if denom == 0.0:
        raise EvaluationError("ground truth is identically zero")
    base = float(np.linalg.norm(pred - gt)) / denom
    if cfg.flip_policy == "none":
        return base, False
    flipped = float(np.linalg.norm(_flip_depth(pred) - gt)) / denom
    if flipped < base:
        return flipped, True
    return base, False


def _remove_depth_offset(points, cfg):
    out = points.copy()
    if cfg.depth_offset == "mean-depth":
        out[2] -= out[2].mean()
    else:
        if cfg.root_index >= out.shape[1]:
            raise EvaluationError(
                f"root index {cfg.root_index} out of range for P={out.shape[1]}"
            )
        out[2] -= out[2, cfg.root_index]
    return out


def mpjpe(pred, gt, cfg=None):
    """Mean per-joint position error after depth-offset removal.

    Returns ``(error, flipped)``.
    """
    cfg = cfg or MetricConfig()
    pred = pred.points if isinstance(pred, geometry.Shape3D) else np.asarray(pred)
    gt = gt.points if isinstance(gt, geometry.Shape3D) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = _remove_depth_offset(pred, cfg)
    g = _remove_depth_offset(gt, cfg)

    def joint_mean(x):
        return float(np.sqrt(((x - g) ** 2).sum(axis=0)).mean())

    base = joint_mean(p)
    if cfg.flip_policy == "none":
        return base, False
    mirrored = p.copy()
    mirrored[2] = -mirrored[2]
    flipped = joint_mean(mirrored)
    if flipped < base:
        return flipped, True
    return base, False


def evaluate(dataset, params, cfg=None):
    """Reconstruct every frame and score it against the ground truth.

    Returns a JSON-ready report with per-frame errors, dataset means, the
    stacked-matrix normalized error, flip counts, and skipped frames.
    """
    cfg = cfg or MetricConfig()
    if dataset.ground_truth is None:
        raise EvaluationError("dataset has no ground truth to evaluate against")

    per_frame = []
    skipped = []
    preds, gts = [], []
    flips_ne = flips_mpjpe = 0
    for frame, gt in zip(dataset.frames, dataset.ground_truth):
        try:
            cam, _, nf = trainer.reconstruct(params, frame)
        except (GeometryError, PaulError) as exc:
            skipped.append({"frame": frame.frame_id, "reason": str(exc)})
            continue
        if cfg.units == "original":
            pred = geometry.denormalize_points(cam.points, nf)
            target = gt
        else:
            pred = cam.points
            target = (gt - np.array([[nf.centroid[0]], [nf.centroid[1]], [0.0]])) / nf.scale
        ne, ne_flip = normalized_error(pred, target, cfg)
        pj, pj_flip = mpjpe(pred, target, cfg)
        flips_ne += int(ne_flip)
        flips_mpjpe += int(pj_flip)
        preds.append(_flip_depth(pred) if ne_flip else pred)
        gts.append(target)
        per_frame.append(
            {"frame": frame.frame_id, "ne": ne, "mpjpe": pj,
             "ne-flipped": ne_flip, "mpjpe-flipped": pj_flip}
        )
    if not per_frame:
        raise EvaluationError("no frame could be evaluated")

    stacked_pred = np.concatenate(preds, axis=1)
    stacked_gt = np.concatenate(gts, axis=1)
    stacked_ne = float(np.linalg.norm(stacked_pred - stacked_gt) / np.linalg.norm(stacked_gt))
    return {
        "n-evaluated": len(per_frame),
        "mean-ne": float(np.mean([f["ne"] for f in per_frame])),
        "mean-mpjpe": float(np.mean([f["mpjpe"] for f in per_frame])),
        "stacked-ne": stacked_ne,
        "flip-count-ne": flips_ne,
        "flip-count-mpjpe": flips_mpjpe,
        "units": cfg.units,
        "flip-policy": cfg.flip_policy,
        "depth-offset": cfg.depth_offset,
        "per-frame": per_frame,
        "skipped": skipped,
    }


def frame_codes(dataset, params):
    """Latent code per frame as an N x K array."""
    if params.code_mode == "free-code":
        codes = params.free_codes.value
        if codes.shape[0] != dataset.n_frames:
            raise EvaluationError(
                f"model stores {codes.shape[0]} codes but dataset has "
                f"{dataset.n_frames} frames"
            )
        return codes.copy()
    rows = []
    for frame in dataset.frames:
        nf = geometry.normalize_frame(frame)
        rows.append(networks.lifting_forward(params, [nf]).value[:, 0])
    return np.array(rows)


def export_latents(dataset, params, path):
    """Write one CSV row of latent coordinates per frame."""
    codes = frame_codes(dataset, params)
    k = codes.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_id"] + [f"phi_{i + 1}" for i in range(k)])
        for frame, row in zip(dataset.frames, codes):
            writer.writerow([frame.frame_id] + [f"{v:.17g}" for v in row])
    return codes


def latent_smoothness(codes):
    """Mean consecutive-code distance over mean pairwise distance.

    Lower values mean the codes trace a temporally coherent trajectory
    instead of scattering; defined for two or more frames.
    """
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.shape[0]
    if n < 2:
        raise EvaluationError("need at least two frames")
    consecutive = np.linalg.norm(np.diff(codes, axis=0), axis=1).mean()
    sq = (codes ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * codes @ codes.T
    np.fill_diagonal(d2, 0.0)
    pairwise = np.sqrt(np.maximum(d2, 0.0))
    mean_pairwise = pairwise.sum() / (n * (n - 1))
    if mean_pairwise == 0.0:
        return 0.0
    return float(consecutive / mean_pairwise)
