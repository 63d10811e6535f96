"""Keypoint dataset file format (KPT v1) and the synthetic ground-truth
generator used as the benchmark oracle.

KPT v1 is a plain-text format chosen for diff-ability: a header line
``KPT 1 N P``, then for every frame one line of 2P reals (all x values,
then all y values) and one line of P mask bits. An optional section headed
``GT3D`` holds one line of 3P reals per frame (x row, y row, z row of the
camera-frame shape). Reals are printed with 17 significant digits so the
write/read round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PaulError
from .geometry import MIN_VISIBLE_POINTS, ObservationFrame

OCCLUSION_REDRAWS = 100


class DataError(PaulError):
    pass


class KptParseError(DataError):
    def __init__(self, message, line=None):
        where = "" if line is None else f" (line {line})"
        super().__init__(f"{message}{where}")
        self.line = line


@dataclass
class Dataset:
    """N frames sharing one keypoint layout, plus optional 3D ground truth.

    Ground truth is for evaluation only; the trainer never reads it.
    """

    frames: list
    ground_truth: object = None  # list of 3xP arrays | None

    def __post_init__(self):
        if not self.frames:
            raise DataError("dataset must contain at least one frame")
        p = self.frames[0].n_points
        if any(f.n_points != p for f in self.frames):
            raise DataError("all frames must share the same point count")
        if self.ground_truth is not None:
            if len(self.ground_truth) != len(self.frames):
                raise DataError("ground truth must cover every frame")
            self.ground_truth = [np.asarray(g, dtype=np.float64) for g in self.ground_truth]
            if any(g.shape != (3, p) for g in self.ground_truth):
                raise DataError("ground-truth shapes must be 3xP")

    @property
    def n_frames(self):
        return len(self.frames)

    @property
    def n_points(self):
        return self.frames[0].n_points

    def without_ground_truth(self):
        return Dataset(frames=self.frames, ground_truth=None)


@dataclass
class SynthSpec:
    """Recipe for one synthetic dataset; same spec (with seed) means a
    bit-identical dataset."""

    points: int
    frames: int
    true_code_dim: int = 2
    basis_scale: float = 0.3
    camera_mode: str = "random"  # "random" | "smooth"
    occlusion_rate: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.points < MIN_VISIBLE_POINTS:
            raise DataError(f"need at least {MIN_VISIBLE_POINTS} points")
        if self.frames < 1:
            raise DataError("need at least one frame")
        if self.true_code_dim < 0:
            raise DataError("true_code_dim must be >= 0")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise DataError("occlusion_rate must be in [0, 1)")
        if self.noise_sigma < 0.0:
            raise DataError("noise_sigma must be >= 0")
        if self.camera_mode not in ("random", "smooth"):
            raise DataError(f"unknown camera mode {self.camera_mode!r}")

    FIELD_KEYS = {
        "points": "points",
        "frames": "frames",
        "true-code-dim": "true_code_dim",
        "basis-scale": "basis_scale",
        "camera-mode": "camera_mode",
        "occlusion-rate": "occlusion_rate",
        "noise-sigma": "noise_sigma",
        "seed": "seed",
    }

    @staticmethod
    def from_dict(d):
        unknown = set(d) - set(SynthSpec.FIELD_KEYS)
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        kwargs = {attr: d[key] for key, attr in SynthSpec.FIELD_KEYS.items() if key in d}
        return SynthSpec(**kwargs)


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def _slerp(q0, q1, t):
    if np.dot(q0, q1) < 0:
        q1 = -q1
    dot = np.clip(np.dot(q0, q1), -1.0, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-9:
        q = (1 - t) * q0 + t * q1
    else:
        q = (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / np.sin(theta)
    return q / np.linalg.norm(q)


def _rotations(rng, spec):
    if spec.camera_mode == "random":
        return [_quat_to_matrix(_random_quat(rng)) for _ in range(spec.frames)]
    # Smooth mode: geodesic interpolation between random keyframe poses.
    segment = max(8, spec.frames // 8)
    n_keys = spec.frames // segment + 2
    keys = [_random_quat(rng) for _ in range(n_keys)]
    out = []
    for t in range(spec.frames):
        k, frac = divmod(t, segment)
        out.append(_quat_to_matrix(_slerp(keys[k], keys[k + 1], frac / segment)))
    return out


def _smooth_codes(rng, spec):
    """Per-dimension sums of 2-3 random-phase sinusoids, RMS basis_scale."""
    t = np.arange(spec.frames) / max(1, spec.frames)
    codes = np.zeros((spec.true_code_dim, spec.frames))
    for i in range(spec.true_code_dim):
        n_harm = int(rng.integers(2, 4))
        c = np.zeros(spec.frames)
        for _ in range(n_harm):
            freq = rng.uniform(1.0, 4.0)
            phase = rng.uniform(0.0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            c += amp * np.sin(2 * np.pi * freq * t + phase)
        rms = np.sqrt((c ** 2).mean())
        codes[i] = spec.basis_scale * c / (rms if rms > 0 else 1.0)
    return codes


def _orthonormal_bases(rng, spec):
    """Centered random 3xP deformation bases, orthonormalized as flattened
    vectors (Gram-Schmidt) so code magnitudes compare across seeds."""
    bases = []
    flat = []
    for _ in range(spec.true_code_dim):
        while True:
            b = rng.normal(size=(3, spec.points))
            b -= b.mean(axis=1, keepdims=True)
            v = b.reshape(-1)
            for u in flat:
                v = v - (v @ u) * u
            norm = np.linalg.norm(v)
            if norm > 1e-6:
                break
        v /= norm
        flat.append(v)
        bases.append(v.reshape(3, spec.points))
    return bases


def _masks(rng, spec):
    masks = []
    for i in range(spec.frames):
        if spec.occlusion_rate == 0.0:
            masks.append(np.ones(spec.points, dtype=np.int8))
            continue
        for attempt in range(OCCLUSION_REDRAWS):
            m = (rng.random(spec.points) >= spec.occlusion_rate).astype(np.int8)
            if m.sum() >= MIN_VISIBLE_POINTS:
                break
        else:
            raise DataError(
                f"could not draw a mask with >= {MIN_VISIBLE_POINTS} visible "
                f"points after {OCCLUSION_REDRAWS} tries (frame {i + 1})"
            )
        masks.append(m)
    return masks


def generate_synthetic(spec):
    """Build a dataset from a mean shape plus low-dimensional deformation.

    The mean shape is centered with unit RMS point radius; per-frame shapes
    are ``S0 + sum_i c_i(t) B_i`` with smooth code trajectories, cameras
    are uniform on SO(3) (or geodesic-interpolated in smooth mode), and
    observations are exact orthographic projections before optional
    Gaussian noise on the visible entries. Ground truth stores the
    camera-frame shapes ``R S``.
    """
    rng = np.random.default_rng(spec.seed)

    s0 = rng.normal(size=(3, spec.points))
    s0 -= s0.mean(axis=1, keepdims=True)
    s0 /= np.sqrt((s0 ** 2).sum(axis=0).mean())

    bases = _orthonormal_bases(rng, spec)
    codes = _smooth_codes(rng, spec) if spec.true_code_dim else np.zeros((0, spec.frames))
    rotations = _rotations(rng, spec)
    masks = _masks(rng, spec)

    frames = []
    ground_truth = []
    for t in range(spec.frames):
        shape = s0.copy()
        for i, basis in enumerate(bases):
            shape += codes[i, t] * basis
        cam = rotations[t] @ shape
        w = cam[:2].copy()
        if spec.noise_sigma > 0.0:
            vis = masks[t] == 1
            w[:, vis] += rng.normal(0.0, spec.noise_sigma, size=(2, int(vis.sum())))
        frames.append(ObservationFrame(keypoints=w, visibility=masks[t], frame_id=t + 1))
        ground_truth.append(cam)
    return Dataset(frames=frames, ground_truth=ground_truth)


def _fmt(values):
    return " ".join(f"{v:.17g}" for v in values)


def write_dataset(path, dataset):
    lines = [f"KPT 1 {dataset.n_frames} {dataset.n_points}"]
    for frame in dataset.frames:
        lines.append(_fmt(frame.keypoints.reshape(-1)))
        lines.append(" ".join(str(int(v)) for v in frame.visibility))
    if dataset.ground_truth is not None:
        lines.append("GT3D")
        for g in dataset.ground_truth:
            lines.append(_fmt(g.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_reals(text, expected, line_no, what):
    parts = text.split()
    if len(parts) != expected:
        raise KptParseError(
            f"expected {expected} {what} values, got {len(parts)}", line_no
        )
    try:
        values = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise KptParseError(f"bad real value: {exc}", line_no) from exc
    if not np.all(np.isfinite(values)):
        raise KptParseError(f"non-finite {what} value", line_no)
    return values


def read_dataset(path):
    with open(path) as fh:
        raw = fh.read().splitlines()
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln.strip()]
    if not lines:
        raise KptParseError("empty file", 1)

    line_no, header = lines[0]
    parts = header.split()
    if len(parts) != 4 or parts[0] != "KPT":
        raise KptParseError(f"bad header {header!r}, expected 'KPT 1 N P'", line_no)
    if parts[1] != "1":
        raise KptParseError(f"unsupported KPT version {parts[1]}", line_no)
    try:
        n, p = int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise KptParseError(f"bad header counts: {exc}", line_no) from exc
    if n < 1:
        raise KptParseError("N must be >= 1", line_no)
    if p < 1:
        raise KptParseError("P must be >= 1", line_no)

    body = lines[1:]
    if len(body) < 2 * n:
        raise KptParseError(
            f"expected {2 * n} frame lines for N={n}, found {len(body)}",
            body[-1][0] if body else line_no,
        )

    frames = []
    for i in range(n):
        kp_no, kp_line = body[2 * i]
        mask_no, mask_line = body[2 * i + 1]
        w = _parse_reals(kp_line, 2 * p, kp_no, "keypoint").reshape(2, p)
        mask_parts = mask_line.split()
        if len(mask_parts) != p:
            raise KptParseError(
                f"expected {p} mask bits, got {len(mask_parts)}", mask_no
            )
        if any(tok not in ("0", "1") for tok in mask_parts):
            raise KptParseError("mask entries must be 0 or 1", mask_no)
        mask = np.array([int(tok) for tok in mask_parts], dtype=np.int8)
        frames.append(ObservationFrame(keypoints=w, visibility=mask, frame_id=i + 1))

    rest = body[2 * n:]
    ground_truth = None
    if rest:
        gt_no, gt_header = rest[0]
        if gt_header.strip() != "GT3D":
            raise KptParseError(
                f"unexpected content {gt_header!r} after frames", gt_no
            )
        gt_lines = rest[1:]
        if len(gt_lines) != n:
            raise KptParseError(
                f"GT3D section must have {n} lines, found {len(gt_lines)}", gt_no
            )
        ground_truth = [
            _parse_reals(text, 3 * p, no, "ground-truth").reshape(3, p)
            for no, text in gt_lines
        ]
    return Dataset(frames=frames, ground_truth=ground_truth)
