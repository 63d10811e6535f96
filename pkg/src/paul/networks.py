"""The three neural maps: shape encoder, shape decoder, and the 2D-3D
lifting encoder, plus per-frame free latent codes for the direct
shape-recovery mode.

The encoder and decoder are exact architectural mirrors: hidden widths
{256, 128, 64, 32, 16} on the encoder side, reversed on the decoder side,
with a leaky activation between layers and linear input/output layers.
The 2D-3D encoder is a fully connected residual network (two blocks of
width 256) over the flattened, occlusion-zeroed keypoints concatenated
with the visibility mask.

Forward passes are pure given a parameter snapshot; the trainer replaces
parameter arrays wholesale on update, so snapshots stay immutable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, PaulError

DEFAULT_WIDTHS = (256, 128, 64, 32, 16)
LIFTING_WIDTH = 256
LIFTING_BLOCKS = 2

CHECKPOINT_MAGIC = b"PAULCKPT"
CHECKPOINT_VERSION = 1


class NetworkError(PaulError):
    pass


class CheckpointError(PaulError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Immutable layer plan for one multilayer perceptron."""

    input_dim: int
    hidden: tuple
    output_dim: int
    activation: str = "leaky"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden):
            raise NetworkError("all layer widths must be >= 1")

    @property
    def widths(self):
        return (self.input_dim, *self.hidden, self.output_dim)

    def param_count(self):
        """Closed-form parameter count: sum of (fan_in + 1) * fan_out."""
        ws = self.widths
        return sum((ws[i] + 1) * ws[i + 1] for i in range(len(ws) - 1))

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @staticmethod
    def from_dict(d):
        return MlpSpec(
            input_dim=int(d["input_dim"]),
            hidden=tuple(int(w) for w in d["hidden"]),
            output_dim=int(d["output_dim"]),
            activation=d.get("activation", "leaky"),
        )


def _init_layer(rng, fan_in, fan_out):
    # Uniform +/- sqrt(6 / (fan_in + fan_out)); biases drawn from the same
    # law so a zero latent code still decodes to a usable nonzero shape.
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=(fan_out, 1))
    return ad.leaf(w), ad.leaf(b)


def init_mlp(spec, rng):
    """Leaf nodes [(W, b), ...] for every layer of the spec."""
    ws = spec.widths
    return [_init_layer(rng, ws[i], ws[i + 1]) for i in range(len(ws) - 1)]


def mlp_forward(layers, x):
    """Columns-as-samples MLP: activation between layers, linear last layer."""
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.add_bias(ad.matmul(w, h), b)
        if i != last:
            h = ad.leaky(h)
    return h


@dataclass
class ModelParams:
    """All trainable state for one run.

    Exactly one of ``lift`` (2D-3D encoder weights) and ``free_codes``
    (per-frame latent parameters, N x K) is active, depending on the run's
    code mode. The encoder/decoder weights are always present.
    """

    points: int
    bottleneck: int
    code_mode: str  # "free-code" | "lifting"
    encoder_spec: MlpSpec
    decoder_spec: MlpSpec
    lifting_spec: object  # MlpSpec | None
    enc: list  # [(W, b) leaf nodes]
    dec: list
    lift: object = None  # list of leaf nodes | None
    free_codes: object = None  # leaf node, N x K | None
    occluded_free: dict = field(default_factory=dict)  # frame_id -> 3xP leaf

    @property
    def n_frames(self):
        return None if self.free_codes is None else self.free_codes.value.shape[0]

    def decoder_leaves(self):
        return [n for pair in self.dec for n in pair]

    def encoder_leaves(self):
        return [n for pair in self.enc for n in pair]

    def lifting_leaves(self):
        return [] if self.lift is None else list(self.lift)


def build_model(points, bottleneck, code_mode, n_frames=None,
                widths=DEFAULT_WIDTHS, rng=None):
    """Initialize all parameters for a run.

    The bottleneck must be strictly undercomplete (K < 3P). Draw order is
    fixed (encoder, decoder, then lifting net or free codes) so a seeded
    generator reproduces weights bit-identically.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    flat = 3 * points
    if bottleneck < 1:
        raise ConfigError(f"bottleneck must be >= 1, got {bottleneck}")
    if bottleneck >= flat:
        raise ConfigError(
            f"bottleneck {bottleneck} must be < 3P = {flat}: the shape code "
            "has to be undercomplete"
        )
    if code_mode not in ("free-code", "lifting"):
        raise ConfigError(f"unknown code mode {code_mode!r}")

    widths = tuple(int(w) for w in widths)
    enc_spec = MlpSpec(flat, widths, bottleneck)
    dec_spec = MlpSpec(bottleneck, tuple(reversed(widths)), flat)
    enc = init_mlp(enc_spec, rng)
    dec = init_mlp(dec_spec, rng)

    lift = None
    lift_spec = None
    free_codes = None
    if code_mode == "lifting":
        lift_spec = MlpSpec(3 * points, (LIFTING_WIDTH,) * LIFTING_BLOCKS, bottleneck)
        lift = _init_lifting(lift_spec, rng)
    else:
        if n_frames is None or n_frames < 1:
            raise ConfigError("free-code mode needs the number of frames")
        # Zero init: with the L2 code penalty, zero is the prior mean.
        free_codes = ad.leaf(np.zeros((n_frames, bottleneck)))

    params = ModelParams(
        points=points,
        bottleneck=bottleneck,
        code_mode=code_mode,
        encoder_spec=enc_spec,
        decoder_spec=dec_spec,
        lifting_spec=lift_spec,
        enc=enc,
        dec=dec,
        lift=lift,
        free_codes=free_codes,
    )
    _assert_param_counts(params)
    return params


def _assert_param_counts(params):
    for spec, layers in ((params.encoder_spec, params.enc),
                         (params.decoder_spec, params.dec)):
        actual = sum(w.value.size + b.value.size for w, b in layers)
        if actual != spec.param_count():
            raise NetworkError(
                f"parameter count {actual} != closed form {spec.param_count()}"
            )


def _init_lifting(spec, rng):
    """Input layer, two residual blocks (linear-act-linear + skip), output."""
    width = spec.hidden[0]
    leaves = []
    leaves.extend(_init_layer(rng, spec.input_dim, width))
    for _ in range(len(spec.hidden)):
        leaves.extend(_init_layer(rng, width, width))
        leaves.extend(_init_layer(rng, width, width))
    leaves.extend(_init_layer(rng, width, spec.output_dim))
    return leaves


def decoder_forward(params, code):
    """Decode K x B codes into a 3P x B batch of flattened canonical shapes."""
    return mlp_forward(params.dec, code)


def encoder_forward(params, shapes_flat):
    """Encode 3P x B flattened canonical shapes into K x B codes."""
    return mlp_forward(params.enc, shapes_flat)


def shape_from_column(flat_batch, column, points):
    """Reshape one column of a 3P x B batch into its 3 x P shape node."""
    return ad.reshape(ad.take_cols(flat_batch, [column]), 3, points)


def lifting_input(frame):
    """Flattened x-y rows with occluded entries zeroed, then the mask."""
    w = frame.keypoints.copy()
    mask = np.asarray(frame.visibility, dtype=np.float64)
    w[:, mask == 0] = 0.0
    return np.concatenate([w.reshape(-1), mask]).reshape(-1, 1)


def lifting_forward(params, frames):
    """Run the 2D-3D encoder on a list of normalized frames; K x B codes."""
    if params.lift is None:
        raise NetworkError("model has no 2D-3D encoder (free-code mode)")
    x = ad.constant(np.concatenate([lifting_input(f) for f in frames], axis=1))
    leaves = params.lift
    h = ad.leaky(ad.add_bias(ad.matmul(leaves[0], x), leaves[1]))
    pos = 2
    for _ in range(LIFTING_BLOCKS):
        w1, b1, w2, b2 = leaves[pos:pos + 4]
        pos += 4
        inner = ad.leaky(ad.add_bias(ad.matmul(w1, h), b1))
        h = ad.add(h, ad.add_bias(ad.matmul(w2, inner), b2))
    w_out, b_out = leaves[pos:pos + 2]
    return ad.add_bias(ad.matmul(w_out, h), b_out)


def get_code(params, frame_id, frames=None):
    """Latent code for one frame by its 1-based id.

    Free-code mode returns the stored row as a graph node sliced from the
    trainable leaf; lifting mode runs the 2D-3D encoder (``frames`` must
    then supply the normalized frame).
    """
    if params.code_mode == "free-code":
        n = params.n_frames
        if not 1 <= frame_id <= n:
            raise ConfigError(f"frame id {frame_id} out of range [1..{n}]")
        return ad.transpose(ad.take_rows(params.free_codes, [frame_id - 1]))
    if frames is None:
        raise ConfigError("lifting mode needs the normalized frame")
    frame = frames if not isinstance(frames, (list, tuple)) else frames[0]
    return lifting_forward(params, [frame])


def _pack_arrays(params):
    arrays = []
    for prefix, layers in (("enc", params.enc), ("dec", params.dec)):
        for i, (w, b) in enumerate(layers):
            arrays.append((f"{prefix}.{i}.w", w.value))
            arrays.append((f"{prefix}.{i}.b", b.value))
    if params.lift is not None:
        for i, node in enumerate(params.lift):
            arrays.append((f"lift.{i}", node.value))
    if params.free_codes is not None:
        arrays.append(("free_codes", params.free_codes.value))
    for fid in sorted(params.occluded_free):
        arrays.append((f"occ_free.{fid}", params.occluded_free[fid].value))
    return arrays


def save_checkpoint(path, params, extra=None):
    """Binary checkpoint: magic, version, count-prefixed named float64
    arrays (little endian), then a JSON trailer with the layer specs and
    run mode. The round trip is bit-exact.
    """
    arrays = _pack_arrays(params)
    trailer = {
        "points": params.points,
        "bottleneck": params.bottleneck,
        "code_mode": params.code_mode,
        "n_frames": params.n_frames,
        "encoder_spec": params.encoder_spec.to_dict(),
        "decoder_spec": params.decoder_spec.to_dict(),
        "lifting_spec": None if params.lifting_spec is None else params.lifting_spec.to_dict(),
    }
    if extra:
        trailer.update(extra)
    blob = json.dumps(trailer, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, value in arrays:
            nb = name.encode("utf-8")
            rows, cols = value.shape
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(ModelParams, trailer dict)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        n = rows * cols * 8
        arrays[name] = np.frombuffer(data[off:off + n], dtype="<f8").reshape(rows, cols).copy()
        off += n
    try:
        trailer = json.loads(data[off:].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt JSON trailer: {exc}") from exc

    enc_spec = MlpSpec.from_dict(trailer["encoder_spec"])
    dec_spec = MlpSpec.from_dict(trailer["decoder_spec"])
    lift_spec = (
        None if trailer["lifting_spec"] is None
        else MlpSpec.from_dict(trailer["lifting_spec"])
    )

    def take_layers(prefix, spec):
        out = []
        for i in range(len(spec.widths) - 1):
            out.append((ad.leaf(arrays[f"{prefix}.{i}.w"]), ad.leaf(arrays[f"{prefix}.{i}.b"])))
        return out

    lift = None
    if lift_spec is not None:
        lift = []
        i = 0
        while f"lift.{i}" in arrays:
            lift.append(ad.leaf(arrays[f"lift.{i}"]))
            i += 1
    free_codes = ad.leaf(arrays["free_codes"]) if "free_codes" in arrays else None
    occluded_free = {}
    for name, value in arrays.items():
        if name.startswith("occ_free."):
            occluded_free[int(name.split(".", 1)[1])] = ad.leaf(value)

    params = ModelParams(
        points=int(trailer["points"]),
        bottleneck=int(trailer["bottleneck"]),
        code_mode=trailer["code_mode"],
        encoder_spec=enc_spec,
        decoder_spec=dec_spec,
        lifting_spec=lift_spec,
        enc=take_layers("enc", enc_spec),
        dec=take_layers("dec", dec_spec),
        lift=lift,
        free_codes=free_codes,
        occluded_free=occluded_free,
    )
    return params, trailer
