"""Weak-perspective camera model and the closed-form orthographic-N-point
(OnP) solver: rotation by least squares + SVD projection onto SO(3), then
depth in closed form.

Two layers live here. The ``*_node`` functions build differentiable graph
pieces and are what training backpropagates through. The plain functions
(``onp_fit_rotation``, ``onp_fit_depth``, ``onp_align_inference``,
``fuse_occluded``) are the numpy-level surface used at inference and in
tests; they run the same graph code on constants.

All operations are pure functions of their inputs and safe to call
concurrently across frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateNormalMatrix  # noqa: F401  (solver error surface)
from .errors import PaulError

MIN_VISIBLE_POINTS = 3
COLLINEARITY_RTOL = 1e-9
ROTATION_ATOL = 1e-10


class GeometryError(PaulError):
    pass


class InsufficientVisiblePoints(GeometryError):
    def __init__(self, count, frame_index=None):
        tag = "" if frame_index is None else f" (frame {frame_index})"
        super().__init__(
            f"need >= {MIN_VISIBLE_POINTS} visible points, got {count}{tag}"
        )
        self.count = count
        self.frame_index = frame_index


class DegenerateFrame(GeometryError):
    """Visible points with zero spread or collinear layout."""

    def __init__(self, reason, frame_index=None):
        tag = "" if frame_index is None else f" (frame {frame_index})"
        super().__init__(f"{reason}{tag}")
        self.frame_index = frame_index


def _as_mask(visibility, n_points):
    m = np.asarray(visibility)
    if m.shape != (n_points,):
        raise GeometryError(f"visibility must have length {n_points}, got {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise GeometryError("visibility entries must be 0 or 1")
    return m.astype(bool)


@dataclass
class ObservationFrame:
    """One frame of 2D keypoints with a binary visibility mask.

    ``frame_id`` is the 1-based index of the frame within its dataset.
    Occluded columns of ``keypoints`` are ignored by every consumer.
    """

    keypoints: np.ndarray  # 2 x P
    visibility: np.ndarray  # length P, entries in {0, 1}
    frame_id: int = 1

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.ndim != 2 or self.keypoints.shape[0] != 2:
            raise GeometryError(f"keypoints must be 2xP, got {self.keypoints.shape}")
        self.visibility = np.asarray(self.visibility, dtype=np.int8)
        _as_mask(self.visibility, self.keypoints.shape[1])
        if self.frame_id < 1:
            raise GeometryError(f"frame_id must be >= 1, got {self.frame_id}")

    @property
    def n_points(self):
        return self.keypoints.shape[1]

    @property
    def visible_index(self):
        return np.flatnonzero(self.visibility == 1)


@dataclass
class NormalizedFrame:
    """Visible-centered, unit-RMS-radius view of an observation frame."""

    keypoints: np.ndarray  # 2 x P, visible columns centered, RMS radius 1
    scale: float  # positive normalization scale removed from W
    centroid: np.ndarray  # 2-vector removed from W before scaling
    visibility: np.ndarray
    frame_id: int = 1

    _node: object = field(default=None, repr=False, compare=False)

    @property
    def n_points(self):
        return self.keypoints.shape[1]

    @property
    def visible_index(self):
        return np.flatnonzero(self.visibility == 1)

    @property
    def fully_visible(self):
        return bool(np.all(self.visibility == 1))

    def keypoints_node(self):
        """A cached graph constant for the normalized keypoints."""
        if self._node is None:
            self._node = ad.constant(self.keypoints)
        return self._node


@dataclass
class Rotation:
    """An element of SO(3); rows are r_x, r_y, r_z."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {self.matrix.shape}")
        if np.max(np.abs(self.matrix @ self.matrix.T - np.eye(3))) > ROTATION_ATOL:
            raise GeometryError("rotation rows are not orthonormal")
        if abs(np.linalg.det(self.matrix) - 1.0) > ROTATION_ATOL:
            raise GeometryError("rotation determinant is not +1")

    @property
    def rxy(self):
        return self.matrix[:2]

    @property
    def rz(self):
        return self.matrix[2]


@dataclass
class Shape3D:
    """A 3xP point matrix, in the camera or the canonical frame."""

    points: np.ndarray
    frame_kind: str = "canonical"  # "canonical" | "camera"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] != 3:
            raise GeometryError(f"shape must be 3xP, got {self.points.shape}")
        if self.frame_kind not in ("canonical", "camera"):
            raise GeometryError(f"unknown frame kind {self.frame_kind!r}")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("shape contains non-finite entries")

    @property
    def n_points(self):
        return self.points.shape[1]


def geodesic_angle(r1, r2):
    """Geodesic distance between two rotations, in radians.

    Computed from ``||R1 - R2||_F = 2 sqrt(2) sin(theta/2)``, which stays
    accurate for tiny angles where the arccos-of-trace form loses all
    precision to cancellation.
    """
    m1 = r1.matrix if isinstance(r1, Rotation) else np.asarray(r1)
    m2 = r2.matrix if isinstance(r2, Rotation) else np.asarray(r2)
    half_sin = np.linalg.norm(m1 - m2) / (2.0 * np.sqrt(2.0))
    return float(2.0 * np.arcsin(np.clip(half_sin, 0.0, 1.0)))


def project_weak_perspective(shape, rot, scale=1.0, trans=(0.0, 0.0)):
    """2D projection ``scale * R_xy @ S + t`` of a canonical shape."""
    pts = shape.points if isinstance(shape, Shape3D) else np.asarray(shape, dtype=np.float64)
    rxy = rot.rxy if isinstance(rot, Rotation) else np.asarray(rot)[:2]
    t = np.asarray(trans, dtype=np.float64).reshape(2, 1)
    return float(scale) * (rxy @ pts) + t


def normalize_frame(frame):
    """Center the visible points and rescale them to unit RMS radius.

    Rejects frames with fewer than ``MIN_VISIBLE_POINTS`` visible points or
    with zero spread; the scale and centroid are recorded so outputs can be
    mapped back to the original units.
    """
    vis = frame.visible_index
    if vis.size < MIN_VISIBLE_POINTS:
        raise InsufficientVisiblePoints(int(vis.size), frame.frame_id)
    w = frame.keypoints
    centroid = w[:, vis].mean(axis=1)
    centered = w - centroid[:, None]
    rms = float(np.sqrt((centered[:, vis] ** 2).sum(axis=0).mean()))
    if rms <= 0.0:
        raise DegenerateFrame("visible points have zero spread", frame.frame_id)
    return NormalizedFrame(
        keypoints=centered / rms,
        scale=rms,
        centroid=centroid,
        visibility=np.asarray(frame.visibility, dtype=np.int8).copy(),
        frame_id=frame.frame_id,
    )


def denormalize_points(points, frame):
    """Map camera-frame points in normalized units back to original units.

    The x-y centroid removed from the observations is restored; depth has
    no observable offset, so only the scale applies to it.
    """
    out = np.asarray(points, dtype=np.float64) * frame.scale
    out[0] += frame.centroid[0]
    out[1] += frame.centroid[1]
    return out


def adaptive_normalize(shape, visibility):
    """Occlusion-aware recentering ``S + S (I - M) 1 1^T``.

    Every column gains the sum of the occluded columns, which keeps the
    projection equation bilinear without a translation variable. Accepts a
    graph node or a plain array (or ``Shape3D``) and returns the same kind.
    With full visibility this is the identity map.
    """
    if isinstance(shape, Shape3D):
        shape = shape.points
    if isinstance(shape, ad.Node):
        n = shape.value.shape[1]
        mask = _as_mask(visibility, n)
        if mask.all():
            return shape
        corr = np.outer((~mask).astype(np.float64), np.ones(n))
        return ad.add(shape, ad.matmul(shape, ad.constant(corr)))
    pts = np.asarray(shape, dtype=np.float64)
    mask = _as_mask(visibility, pts.shape[1])
    if mask.all():
        return pts.copy()
    occluded_sum = pts[:, ~mask].sum(axis=1)
    return pts + occluded_sum[:, None]


def center_on_visible(shape, visibility):
    """Remove the visible-column centroid from every column.

    This is the translation gauge that matches visible-centered
    observations: ``S @ (I - m 1^T / |V|)`` with ``m`` the mask vector.
    Accepts a node or array and returns the same kind; unlike
    ``adaptive_normalize`` it is not the identity at full visibility (it
    removes the full centroid there).
    """
    if isinstance(shape, Shape3D):
        shape = shape.points
    n = shape.value.shape[1] if isinstance(shape, ad.Node) else np.asarray(shape).shape[1]
    mask = _as_mask(visibility, n)
    count = int(mask.sum())
    if count == 0:
        raise GeometryError("cannot center on an empty visible set")
    projector = np.eye(n) - np.outer(mask.astype(np.float64), np.ones(n)) / count
    if isinstance(shape, ad.Node):
        return ad.matmul(shape, ad.constant(projector))
    return np.asarray(shape, dtype=np.float64) @ projector


def _check_solvable(w_vis, frame_index):
    if w_vis.shape[1] < MIN_VISIBLE_POINTS:
        raise InsufficientVisiblePoints(int(w_vis.shape[1]), frame_index)
    centered = w_vis - w_vis.mean(axis=1, keepdims=True)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] <= 0.0:
        raise DegenerateFrame("visible points have zero spread", frame_index)
    if sv[1] <= COLLINEARITY_RTOL * sv[0]:
        raise DegenerateFrame("visible points are collinear", frame_index)


def rotation_node(targets, w, visible_index=None, frame_index=None):
    """Graph-level rotation solve against one or two 3xP canonical targets.

    Solves ``min_R~ sum_t || R~ T_v - W_v ||_F^2`` over unconstrained 2x3
    matrices via the normal equations (one ridged 3x3 inverse), then takes
    the nearest matrix with orthonormal rows through the SVD and completes
    it to a proper rotation with ``r_z = r_x x r_y``.
    """
    if not 1 <= len(targets) <= 2:
        raise GeometryError("rotation solve expects one or two targets")
    targets = [ad.constant(t) for t in targets]
    w = ad.constant(w)

    if visible_index is not None and len(visible_index) != w.value.shape[1]:
        w_v = ad.take_cols(w, visible_index)
        targets_v = [ad.take_cols(t, visible_index) for t in targets]
    else:
        w_v, targets_v = w, targets
    _check_solvable(w_v.value, frame_index)

    grams = [ad.matmul(t, ad.transpose(t)) for t in targets_v]
    normal = grams[0] if len(grams) == 1 else ad.add(grams[0], grams[1])
    target_sum = targets_v[0] if len(targets_v) == 1 else ad.add(targets_v[0], targets_v[1])
    rhs = ad.matmul(w_v, ad.transpose(target_sum))
    if len(targets_v) == 1:
        # Single-target solve: W T^T (T T^T)^-1 equals the two-target form
        # with both targets identical, where the factors of two cancel.
        pass
    r_free = ad.matmul(rhs, ad.inverse3(normal, frame_index=frame_index))

    u, _, v = ad.svd_small(r_free)
    rxy = ad.matmul(u, ad.transpose(v))
    rx = ad.take_rows(rxy, [0])
    ry = ad.take_rows(rxy, [1])
    rz = ad.cross3(rx, ry)
    return ad.vstack(rxy, rz)


def depth_node(a, b, rot):
    """Closed-form depth row ``0.5 * r_z^T (A + B)`` as a 1xP node."""
    a, b = ad.constant(a), ad.constant(b)
    rz = ad.take_rows(ad.constant(rot) if not isinstance(rot, ad.Node) else rot, [2])
    return ad.scale(ad.matmul(rz, ad.add(a, b)), 0.5)


def fused_target_node(a, b, w, z_row, visibility, rot, occluded_source=None):
    """Camera-frame target under occlusion.

    Visible columns carry the observed x-y and the solved depth; occluded
    columns take the per-column least-squares optimum ``R * (A + B) / 2``
    of the two reconstruction terms, or ``occluded_source`` when a free
    camera-frame variable supplies them instead. ``a`` and ``b`` are
    expected in adaptively normalized form.
    """
    w = ad.constant(w)
    n = w.value.shape[1]
    mask = _as_mask(visibility, n)
    observed = ad.vstack(w, z_row)
    if mask.all():
        return observed
    if occluded_source is not None:
        free = ad.constant(occluded_source) if not isinstance(occluded_source, ad.Node) else occluded_source
    else:
        rot = ad.constant(rot) if not isinstance(rot, ad.Node) else rot
        midpoint = ad.scale(ad.add(ad.constant(a) if not isinstance(a, ad.Node) else a,
                                   ad.constant(b) if not isinstance(b, ad.Node) else b), 0.5)
        free = ad.matmul(rot, midpoint)
    keep = np.diag(mask.astype(np.float64))
    drop = np.diag((~mask).astype(np.float64))
    return ad.add(ad.matmul(observed, ad.constant(keep)),
                  ad.matmul(free, ad.constant(drop)))


def onp_fit_rotation(targets, w, visibility=None, frame_index=None):
    """Numpy-level rotation solve; returns a validated ``Rotation``.

    ``targets`` is a list of one or two 3xP canonical shapes, ``w`` the 2xP
    (normalized) observations; occluded columns are excluded when a
    visibility mask is given.
    """
    arrays = [t.points if isinstance(t, Shape3D) else np.asarray(t) for t in targets]
    w = np.asarray(w, dtype=np.float64)
    vis = None
    if visibility is not None:
        vis = np.flatnonzero(_as_mask(visibility, w.shape[1]))
    node = rotation_node(arrays, w, visible_index=vis, frame_index=frame_index)
    return Rotation(node.value)


def onp_fit_depth(a, b, rot):
    """Closed-form depth vector ``0.5 (A^T r_z + B^T r_z)`` as a 1-D array."""
    a = a.points if isinstance(a, Shape3D) else np.asarray(a)
    b = b.points if isinstance(b, Shape3D) else np.asarray(b)
    rz = rot.rz if isinstance(rot, Rotation) else np.asarray(rot)[2]
    return 0.5 * (a.T @ rz + b.T @ rz)


def onp_align_inference(shape, frame):
    """Align a canonical shape to a normalized frame's camera.

    Single-target rotation solve on the visible columns, then the camera
    shape ``[R_xy S ; (S^T r_z)^T]`` (which is ``R @ S``).
    """
    pts = shape.points if isinstance(shape, Shape3D) else np.asarray(shape)
    vis = None if frame.fully_visible else frame.visible_index
    node = rotation_node(
        [pts], frame.keypoints, visible_index=vis, frame_index=frame.frame_id
    )
    rot = Rotation(node.value)
    cam = rot.matrix @ pts
    return rot, Shape3D(cam, frame_kind="camera")


def onp_align_occluded(shape, frame):
    """Occlusion-aware alignment with a split translation gauge.

    The rotation is fitted with the shape centered on its *visible*
    columns (the gauge of visible-centered observations), and so are the
    output x-y rows; the depth row instead uses the *full* centroid, whose
    offset relative to the observations is not observable but is exactly
    the convention of a centered ground-truth shape. Reduces to
    ``onp_align_inference`` for centered shapes under full visibility.
    """
    pts = shape.points if isinstance(shape, Shape3D) else np.asarray(shape)
    vis_idx = frame.visible_index
    vis_centered = pts - pts[:, vis_idx].mean(axis=1, keepdims=True)
    node = rotation_node(
        [vis_centered], frame.keypoints,
        visible_index=None if frame.fully_visible else vis_idx,
        frame_index=frame.frame_id,
    )
    rot = Rotation(node.value)
    full_centered = pts - pts.mean(axis=1, keepdims=True)
    cam = np.vstack([rot.rxy @ vis_centered, rot.rz @ full_centered])
    return rot, Shape3D(cam, frame_kind="camera")


def fuse_occluded(shape_free, w, z, visibility, rot):
    """Numpy-level fused camera target; see ``fused_target_node``.

    ``shape_free`` supplies both reconstruction targets (``A = B``), so the
    occluded columns reduce to ``R @ shape_free`` per column; with full
    visibility the result is ``[W ; z^T]`` and ``shape_free`` is ignored.
    """
    w = np.asarray(w, dtype=np.float64)
    z_row = np.asarray(z, dtype=np.float64).reshape(1, -1)
    pts = shape_free.points if isinstance(shape_free, Shape3D) else np.asarray(shape_free)
    node = fused_target_node(pts, pts, w, ad.constant(z_row), visibility,
                             rot.matrix if isinstance(rot, Rotation) else rot)
    return Shape3D(node.value, frame_kind="camera")
