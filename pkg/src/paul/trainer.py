"""Bilevel training loop: per frame, solve the pose/depth subproblem in
closed form, assemble the reconstruction objective, and update parameters
with Adam.

Modes:
  * ``paul``        auto-encoder + auto-decoder residuals + regularizers;
  * ``adl``         auto-decoder residual + regularizers (decoder only);
  * ``adl-lowrank`` adl plus 0.01 x nuclear norm of the decoded shape.

Under ``solver_grad="full"`` the solved rotation, depth, and fused target
are graph nodes and gradients flow through the solver; under ``"stop"``
they are detached constants. One trainer owns the parameters exclusively;
updates replace the arrays wholesale so older graphs keep their snapshots.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, networks, objectives
from .errors import ConfigError, NumericalAbort
from .geometry import GeometryError, NormalizedFrame, Rotation, Shape3D

log = logging.getLogger("paul")

MODES = ("paul", "adl", "adl-lowrank")
CODE_MODES = ("free-code", "lifting")
SOLVER_GRADS = ("full", "stop")


@dataclass
class TrainConfig:
    mode: str = "paul"
    code_mode: str = "free-code"
    bottleneck: int = 4
    batch_size: int = 64
    steps: int = 20000
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    solver_grad: str = "full"
    squared_recon: bool = False
    occluded_free_variable: bool = False

    FIELD_KEYS = {
        "mode": "mode",
        "code-mode": "code_mode",
        "bottleneck": "bottleneck",
        "batch-size": "batch_size",
        "steps": "steps",
        "learning-rate": "learning_rate",
        "adam-betas": "adam_betas",
        "adam-eps": "adam_eps",
        "seed": "seed",
        "solver-grad": "solver_grad",
        "squared-recon": "squared_recon",
        "occluded-free-variable": "occluded_free_variable",
    }

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.code_mode not in CODE_MODES:
            raise ConfigError(f"code-mode must be one of {CODE_MODES}, got {self.code_mode!r}")
        if self.solver_grad not in SOLVER_GRADS:
            raise ConfigError(f"solver-grad must be one of {SOLVER_GRADS}")
        if self.bottleneck < 1:
            raise ConfigError("bottleneck must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch-size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning-rate must be > 0")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("adam-betas must be two values in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam-eps must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")

    @staticmethod
    def from_dict(d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(TrainConfig.FIELD_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {attr: d[key] for key, attr in TrainConfig.FIELD_KEYS.items() if key in d}
        try:
            return TrainConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def to_dict(self):
        out = {}
        for key, attr in self.FIELD_KEYS.items():
            v = getattr(self, attr)
            out[key] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass
class LossBreakdown:
    recon_ae: float = 0.0
    recon_ad: float = 0.0
    reg_code: float = 0.0
    reg_weights: float = 0.0
    low_rank: float = 0.0
    total: float = 0.0

    def to_dict(self):
        return {
            "recon-ae": self.recon_ae,
            "recon-ad": self.recon_ad,
            "reg-code": self.reg_code,
            "reg-weights": self.reg_weights,
            "low-rank": self.low_rank,
            "total": self.total,
        }


@dataclass
class StepReport:
    step: int
    losses: LossBreakdown
    mean_reproj: float
    wall_time: float
    skipped: int = 0

    def to_json_line(self):
        payload = {"step": self.step}
        payload.update(self.losses.to_dict())
        payload["mean-reproj"] = self.mean_reproj
        payload["wall-time"] = self.wall_time
        payload["skipped"] = self.skipped
        return json.dumps(payload, sort_keys=True)


@dataclass
class StepGraph:
    """Everything train_step needs from one assembled batch graph."""

    total: object
    breakdown: LossBreakdown
    used: list
    skipped: list
    frame_losses: list  # (frame_id, ae value, ad value)
    mean_reproj: float


class Adam:
    """Canonical Adam with bias correction, one instance for all parameters."""

    def __init__(self, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, leaves):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in leaves:
            g = ad.grad_of(p)
            m = self.m.get(p.nid)
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
            else:
                v = self.v[p.nid]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[p.nid] = m
            self.v[p.nid] = v
            p.value = p.value - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def active_leaves(params, config):
    """Parameters updated in this run, in a fixed deterministic order.

    The shape encoder is trained only in paul mode; the decoder always;
    then the 2D-3D encoder or the free codes, then any per-frame free
    camera shapes.
    """
    leaves = []
    if config.mode == "paul":
        leaves.extend(params.encoder_leaves())
    leaves.extend(params.decoder_leaves())
    if params.code_mode == "lifting":
        leaves.extend(params.lifting_leaves())
    else:
        leaves.append(params.free_codes)
    for fid in sorted(params.occluded_free):
        leaves.append(params.occluded_free[fid])
    return leaves


def prepare_frames(dataset_or_frames):
    """Normalize every frame; unusable frames become None with a warning."""
    frames = getattr(dataset_or_frames, "frames", dataset_or_frames)
    out = []
    for frame in frames:
        try:
            out.append(geometry.normalize_frame(frame))
        except GeometryError as exc:
            log.warning("skipping frame %d: %s", frame.frame_id, exc)
            out.append(None)
    return out


def _solve_frame(a, b, frame, params, config):
    """Lower-level solve for one frame from its two target nodes.

    Returns ``(rotation node, depth row node, fused target node or None,
    gauge-fixed (a, b) nodes)``; the gauge-fixed pair equals the inputs
    when the frame is fully visible.

    Occluded frames compare both sides in the visible-centroid gauge:
    the decoder outputs are recentered on their visible columns, matching
    the visible-mean centering of the observations. Recentering after the
    occluded-sum operator cancels it exactly, so this is the translation
    gauge in which that operator's projection identity holds without
    leaking per-mask translations into the latent space.
    """
    w = frame.keypoints_node()
    fid = frame.frame_id
    if frame.fully_visible:
        a_n, b_n = a, b
        vis = None
    else:
        a_n = geometry.center_on_visible(a, frame.visibility)
        b_n = a_n if b is a else geometry.center_on_visible(b, frame.visibility)
        vis = frame.visible_index

    targets = [b_n] if a is b else [a_n, b_n]
    rot = geometry.rotation_node(targets, w, visible_index=vis, frame_index=fid)
    z = geometry.depth_node(a_n, b_n, rot)

    fused = None
    if not frame.fully_visible:
        if config.occluded_free_variable:
            # Fidelity mode: per-frame free camera-frame parameters supply
            # the occluded columns instead of the closed-form optimum.
            free = params.occluded_free.get(fid)
            if free is None:
                free = ad.leaf(np.zeros((3, frame.n_points)))
                params.occluded_free[fid] = free
            fused = geometry.fused_target_node(
                a_n, b_n, w, z, frame.visibility, rot, occluded_source=free
            )
        else:
            fused = geometry.fused_target_node(a_n, b_n, w, z, frame.visibility, rot)

    if config.solver_grad == "stop":
        rot = ad.stop_gradient(rot)
        z = ad.stop_gradient(z)
        if fused is not None:
            fused = ad.stop_gradient(fused)
    return rot, z, fused, (a_n, b_n)


def lower_level_solve(params, code, frame, config=None):
    """Solve pose and depth for one frame given its latent code node.

    Builds the decoder (and, in paul mode, the encoder chain) targets and
    runs the closed-form solver. Returns ``(rotation node, depth node,
    fused target node or None)``.
    """
    config = config or TrainConfig(batch_size=1, steps=1)
    code = code if isinstance(code, ad.Node) else ad.constant(np.asarray(code).reshape(-1, 1))
    b_flat = networks.decoder_forward(params, code)
    b = ad.reshape(b_flat, 3, params.points)
    if config.mode == "paul":
        a = ad.reshape(
            networks.decoder_forward(params, networks.encoder_forward(params, b_flat)),
            3, params.points,
        )
    else:
        a = b
    rot, z, fused, _ = _solve_frame(a, b, frame, params, config)
    return rot, z, fused


def batch_loss(params, norm_frames, batch_idx, config):
    """Assemble the full differentiable loss for one batch.

    ``norm_frames`` is the per-dataset list from ``prepare_frames`` (may
    contain None); ``batch_idx`` holds 0-based positions into it. Frames
    whose solve degenerates are skipped and reported.
    """
    candidates = [
        (i, norm_frames[i]) for i in batch_idx if norm_frames[i] is not None
    ]
    if not candidates:
        raise GeometryError("no usable frames in batch")

    if config.code_mode == "free-code":
        rows = [i for i, _ in candidates]
        codes = ad.transpose(ad.take_rows(params.free_codes, rows))
    else:
        codes = networks.lifting_forward(params, [f for _, f in candidates])

    b_flat = networks.decoder_forward(params, codes)
    if config.mode == "paul":
        a_flat = networks.decoder_forward(
            params, networks.encoder_forward(params, b_flat)
        )
    else:
        a_flat = b_flat

    used, skipped, frame_losses = [], [], []
    ae_terms, ad_terms, nuc_terms = [], [], []
    reproj = []
    used_cols = []
    for col, (i, frame) in enumerate(candidates):
        b = networks.shape_from_column(b_flat, col, params.points)
        a = b if a_flat is b_flat else networks.shape_from_column(a_flat, col, params.points)
        try:
            rot, z, fused, (a_n, b_n) = _solve_frame(a, b, frame, params, config)
        except GeometryError as exc:
            log.warning("skipping frame %d in batch: %s", frame.frame_id, exc)
            skipped.append(frame.frame_id)
            continue
        except np.linalg.LinAlgError as exc:
            # Overflowing forwards surface as LAPACK failures inside the
            # solve; same failure class as a NaN loss, same hard abort.
            raise NumericalAbort(
                f"linear algebra failure at frame {frame.frame_id}: {exc}",
                diagnostics={"offending-frames": [frame.frame_id],
                             "cause": str(exc)},
            ) from exc

        if fused is None:
            target = objectives.camera_target(rot, frame.keypoints_node(), z)
        else:
            target = ad.matmul(ad.transpose(rot), fused)

        ad_loss = objectives.residual_norm(b_n, target, config.squared_recon)
        ad_terms.append(ad_loss)
        ae_val = 0.0
        if config.mode == "paul":
            ae_loss = objectives.residual_norm(a_n, target, config.squared_recon)
            ae_terms.append(ae_loss)
            ae_val = float(ae_loss.value[0, 0])
        if config.mode == "adl-lowrank":
            nuc_terms.append(objectives.nuclear_norm_loss(b))

        vis = frame.visible_index
        resid = (rot.value[:2] @ b_n.value - frame.keypoints)[:, vis]
        reproj.append(float(np.sqrt((resid ** 2).mean())))
        used.append(frame.frame_id)
        used_cols.append(col)
        frame_losses.append((frame.frame_id, ae_val, float(ad_loss.value[0, 0])))

    if not used:
        raise GeometryError("every frame in the batch failed to solve")
    n = len(used)

    def mean_of(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.scale(acc, 1.0 / n)

    if len(used_cols) == len(candidates):
        used_codes = codes
    else:
        used_codes = ad.take_cols(codes, used_cols)
    reg_code = ad.scale(ad.total(ad.square(used_codes)), objectives.CODE_WEIGHT / n)
    reg_weights = ad.scale(
        objectives.squared_l2(params.decoder_leaves()), objectives.DECODER_WEIGHT
    )

    recon_ad_node = mean_of(ad_terms)
    total = ad.add(recon_ad_node, ad.add(reg_code, reg_weights))
    recon_ae_val = 0.0
    if ae_terms:
        recon_ae_node = mean_of(ae_terms)
        total = ad.add(total, recon_ae_node)
        recon_ae_val = float(recon_ae_node.value[0, 0])
    low_rank_val = 0.0
    if nuc_terms:
        low_rank_node = mean_of(nuc_terms)
        total = ad.add(total, ad.scale(low_rank_node, objectives.LOW_RANK_WEIGHT))
        low_rank_val = float(low_rank_node.value[0, 0])

    breakdown = LossBreakdown(
        recon_ae=recon_ae_val,
        recon_ad=float(recon_ad_node.value[0, 0]),
        reg_code=float(reg_code.value[0, 0]),
        reg_weights=float(reg_weights.value[0, 0]),
        low_rank=low_rank_val,
        total=float(total.value[0, 0]),
    )
    return StepGraph(
        total=total,
        breakdown=breakdown,
        used=used,
        skipped=skipped,
        frame_losses=frame_losses,
        mean_reproj=float(np.mean(reproj)),
    )


def train_step(params, norm_frames, batch_idx, adam, config, step_index=0):
    """One optimization step over a batch; returns its StepReport."""
    t0 = time.perf_counter()
    for p in active_leaves(params, config):
        p.grad = None
    try:
        graph = batch_loss(params, norm_frames, batch_idx, config)
    except NumericalAbort as exc:
        exc.diagnostics.setdefault("step", step_index)
        raise
    if not np.isfinite(graph.breakdown.total):
        bad = [
            fid for fid, ae, adv in graph.frame_losses
            if not (np.isfinite(ae) and np.isfinite(adv))
        ]
        raise NumericalAbort(
            f"non-finite loss at step {step_index}",
            diagnostics={
                "step": step_index,
                "offending-frames": bad,
                "losses": graph.breakdown.to_dict(),
                "frame-losses": [
                    {"frame": fid, "recon-ae": ae, "recon-ad": adv}
                    for fid, ae, adv in graph.frame_losses
                ],
            },
        )
    ad.backward(graph.total)
    adam.step(active_leaves(params, config))
    return StepReport(
        step=step_index,
        losses=graph.breakdown,
        mean_reproj=graph.mean_reproj,
        wall_time=time.perf_counter() - t0,
        skipped=len(graph.skipped),
    )


@dataclass
class FitResult:
    params: object
    reports: list = field(default_factory=list)
    skipped_frames: int = 0


def fit(dataset, config, out_dir=None, checkpoint_interval=0, log_stream=None,
        widths=networks.DEFAULT_WIDTHS):
    """Run the full training loop over a dataset.

    Deterministic given the config seed: initialization and the per-epoch
    shuffles all draw from one seeded generator. Writes periodic and final
    checkpoints into ``out_dir`` when given. ``steps=0`` returns the
    initialized parameters unchanged.
    """
    rng = np.random.default_rng(config.seed)
    params = networks.build_model(
        points=dataset.n_points,
        bottleneck=config.bottleneck,
        code_mode=config.code_mode,
        n_frames=dataset.n_frames,
        widths=widths,
        rng=rng,
    )
    norm_frames = prepare_frames(dataset)
    usable = [i for i, f in enumerate(norm_frames) if f is not None]
    if not usable:
        raise GeometryError("no usable frames in dataset")

    adam = Adam(config.learning_rate, config.adam_betas, config.adam_eps)
    result = FitResult(params=params)
    result.skipped_frames = len(norm_frames) - len(usable)

    order = []
    cursor = 0
    for step in range(config.steps):
        if cursor + config.batch_size > len(order):
            order = [usable[i] for i in rng.permutation(len(usable))]
            cursor = 0
        batch = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        report = train_step(params, norm_frames, batch, adam, config, step_index=step)
        result.reports.append(report)
        if log_stream is not None:
            log_stream.write(report.to_json_line() + "\n")
        if out_dir is not None and checkpoint_interval and (step + 1) % checkpoint_interval == 0:
            networks.save_checkpoint(
                f"{out_dir}/ckpt-{step + 1:06d}.paulckpt", params,
                extra={"mode": config.mode, "step": step + 1},
            )
    if out_dir is not None:
        networks.save_checkpoint(
            f"{out_dir}/ckpt-final.paulckpt", params,
            extra={"mode": config.mode, "step": config.steps},
        )
    return result


def reconstruct(params, frame, mode=None):
    """Camera-frame reconstruction of one frame in normalized units.

    Free-code mode reads the stored code for the frame's id; lifting mode
    runs the 2D-3D encoder. Frames with occlusion are aligned in the
    visible-centroid gauge (matching training) with the depth recentered
    on the full shape. Returns ``(Shape3D, Rotation, NormalizedFrame)``.
    """
    nf = frame if isinstance(frame, NormalizedFrame) else geometry.normalize_frame(frame)
    if params.code_mode == "free-code":
        code = networks.get_code(params, nf.frame_id)
    else:
        code = networks.lifting_forward(params, [nf])
    shape = networks.decoder_forward(params, code).value.reshape(3, params.points)
    if nf.fully_visible:
        rot, cam = geometry.onp_align_inference(shape, nf)
    else:
        rot, cam = geometry.onp_align_occluded(shape, nf)
    return cam, rot, nf


def predict(frame, params):
    """Single-frame 3D prediction for unseen data, in original units.

    Needs a lifting-mode model: the 2D-3D encoder maps the normalized
    observations to a code, the decoder to a canonical shape, and the
    closed-form alignment produces the camera-frame result, which is then
    mapped back through the frame's recorded scale and centroid.
    """
    if params.code_mode != "lifting":
        raise ConfigError("predict needs a lifting-mode model")
    cam, rot, nf = reconstruct(params, frame)
    return Shape3D(geometry.denormalize_points(cam.points, nf), frame_kind="camera"), rot
