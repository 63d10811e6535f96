"""Central finite-difference gradient checking for every differentiable op.

The harness perturbs each input entry by +/-step (default 1e-6), compares
against the analytic adjoint, and reports the max relative error with a
small denominator floor so near-zero gradients compare absolutely. Random
inputs are drawn away from clamping thresholds (activation kinks, repeated
singular values, zero norms) because gradients there are intentionally
subgradients or clamped.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-6
# Central differences on O(1) losses carry ~1e-10..1e-9 of roundoff noise;
# the denominator floor keeps that noise from dominating the relative error
# where the true gradient is itself near zero.
REL_FLOOR = 1e-4
OP_TOLERANCE = 1e-5
FULL_STEP_TOLERANCE = 1e-4


def central_diff(f, x, step=FD_STEP):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g


def max_rel_err(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float((np.abs(analytic - numeric) / denom).max())


def check_scalar_graph(build, inputs, step=FD_STEP):
    """Compare analytic and FD gradients of ``build(*leaves) -> scalar node``.

    ``inputs`` is a list of arrays; returns the max relative error over all
    of them.
    """
    leaves = [ad.leaf(x) for x in inputs]
    loss = build(*leaves)
    ad.backward(loss)
    worst = 0.0
    for pos, x in enumerate(inputs):
        def f(xp, pos=pos):
            trial = [ad.leaf(xp if j == pos else inputs[j]) for j in range(len(inputs))]
            return float(build(*trial).value[0, 0])

        worst = max(worst, max_rel_err(ad.grad_of(leaves[pos]), central_diff(f, x, step)))
    return worst


def _well_separated_svd_input(rng, shape):
    while True:
        a = rng.normal(size=shape)
        s = np.linalg.svd(a, compute_uv=False)
        if s[-1] > 0.1 and np.min(np.abs(np.diff(s))) > 0.1:
            return a


def _away_from_kink(rng, shape, margin=1e-4):
    while True:
        a = rng.normal(size=shape)
        if np.min(np.abs(a)) > margin:
            return a


def _probe(rng, shape):
    """A random linear functional, used to reduce matrix outputs to scalars."""
    return ad.constant(rng.normal(size=shape))


def check_elementary_ops(seed):
    """Gradient-check every differentiable op once; returns {op: max rel err}."""
    rng = np.random.default_rng(seed)
    out = {}

    a34, b34 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a23, b35 = rng.normal(size=(2, 3)), rng.normal(size=(3, 5))

    out["matmul"] = check_scalar_graph(
        lambda a, b: ad.total(ad.matmul(a, b)), [a23, b35]
    )
    out["add"] = check_scalar_graph(
        lambda a, b: ad.frobenius_norm(ad.add(a, b)), [a34, b34]
    )
    out["sub"] = check_scalar_graph(
        lambda a, b: ad.frobenius_norm(ad.sub(a, b)), [a34, b34]
    )
    out["mul"] = check_scalar_graph(
        lambda a, b: ad.total(ad.mul(a, b)), [a34, b34]
    )
    out["scale"] = check_scalar_graph(
        lambda a: ad.total(ad.scale(a, -1.7)), [a34]
    )
    out["square"] = check_scalar_graph(lambda a: ad.total(ad.square(a)), [a34])
    out["leaky"] = check_scalar_graph(
        lambda a: ad.total(ad.leaky(a)), [_away_from_kink(rng, (4, 5))]
    )
    out["total"] = check_scalar_graph(lambda a: ad.total(a), [a34])
    out["frobenius_norm"] = check_scalar_graph(
        lambda a: ad.frobenius_norm(a), [rng.normal(size=(5, 7))]
    )
    p22 = _probe(rng, (2, 2))
    out["transpose"] = check_scalar_graph(
        lambda a: ad.total(ad.matmul(ad.transpose(a), p22)), [a23]
    )
    out["reshape"] = check_scalar_graph(
        lambda a: ad.frobenius_norm(ad.reshape(a, 4, 3)), [a34]
    )
    idx = rng.integers(0, 3, size=4)
    out["take_rows"] = check_scalar_graph(
        lambda a: ad.frobenius_norm(ad.take_rows(a, idx)), [a34]
    )
    cidx = rng.integers(0, 4, size=3)
    out["take_cols"] = check_scalar_graph(
        lambda a: ad.frobenius_norm(ad.take_cols(a, cidx)), [a34]
    )
    out["vstack"] = check_scalar_graph(
        lambda a, b: ad.frobenius_norm(ad.vstack(a, b)),
        [rng.normal(size=(2, 4)), rng.normal(size=(3, 4))],
    )
    out["add_bias"] = check_scalar_graph(
        lambda x, b: ad.frobenius_norm(ad.add_bias(x, b)),
        [rng.normal(size=(3, 5)), rng.normal(size=(3, 1))],
    )
    out["cross3"] = check_scalar_graph(
        lambda a, b: ad.frobenius_norm(ad.cross3(a, b)),
        [rng.normal(size=(1, 3)), rng.normal(size=(1, 3))],
    )

    # Well-conditioned symmetric-positive input, the solver's regime.
    m = rng.normal(size=(3, 3))
    spd = m @ m.T + 3.0 * np.eye(3)
    p33 = _probe(rng, (3, 3))
    out["inverse3"] = check_scalar_graph(
        lambda a: ad.total(ad.mul(ad.inverse3(a), p33)), [spd]
    )

    for label, shape in (("svd_small_2x3", (2, 3)), ("svd_small_3x5", (3, 5))):
        a = _well_separated_svd_input(rng, shape)
        k = shape[0]
        pu, ps, pv = (
            _probe(rng, (k, k)),
            _probe(rng, (1, k)),
            _probe(rng, (shape[1], k)),
        )

        def build(x, pu=pu, ps=ps, pv=pv):
            u, s, v = ad.svd_small(x)
            return ad.add(
                ad.add(ad.total(ad.mul(pu, u)), ad.total(ad.mul(ps, s))),
                ad.total(ad.mul(pv, v)),
            )

        out[label] = check_scalar_graph(build, [a])
    return out


def run_op_suite(seeds=100, base_seed=0):
    """Run the elementary-op checks over many seeds; returns {op: worst err}."""
    worst = {}
    for k in range(seeds):
        for op, err in check_elementary_ops(base_seed + k).items():
            worst[op] = max(worst.get(op, 0.0), err)
    return worst


def check_training_step(points=4, frames=3, bottleneck=2, seed=0,
                        coords_per_param=None, mode="paul",
                        solver_grad="full", occlusion=False):
    """FD-check the full training-step loss w.r.t. every active parameter.

    Builds a toy problem and compares analytic gradients against central
    differences, optionally on a random coordinate subset per parameter
    (full coverage when ``coords_per_param`` is None). Returns the max
    relative error.
    """
    # Imported here: trainer depends on this module's constants.
    from .data import SynthSpec, generate_synthetic
    from .networks import build_model
    from .trainer import TrainConfig, active_leaves, batch_loss, prepare_frames

    rng = np.random.default_rng(seed)
    if occlusion and points < 6:
        points = 6
    spec = SynthSpec(points=points, frames=frames, true_code_dim=1,
                     basis_scale=0.3, seed=seed)
    dataset = generate_synthetic(spec)
    if occlusion:
        # Deterministic masks keeping >= 4 points visible per frame: with
        # exactly 3 visible the visible-centered single-target solve is
        # rank deficient and its ridge-pinned direction is untestable by
        # finite differences.
        for i, frame in enumerate(dataset.frames):
            if i % 3 == 0:
                continue
            occ = rng.choice(points, size=min(2, points - 4), replace=False)
            frame.visibility[occ] = 0
    config = TrainConfig(
        mode=mode,
        code_mode="free-code",
        bottleneck=bottleneck,
        batch_size=frames,
        steps=1,
        seed=seed,
        solver_grad=solver_grad,
    )
    params = build_model(
        points=points,
        bottleneck=bottleneck,
        code_mode="free-code",
        n_frames=frames,
        widths=(8, 6),
        rng=rng,
    )
    # Random codes: the zero prior-mean start makes several gradients vanish.
    params.free_codes.value = rng.normal(scale=0.5, size=(frames, bottleneck))

    norm_frames = prepare_frames(dataset)
    idx = list(range(frames))
    leaves = active_leaves(params, config)
    for p in leaves:
        p.grad = None
    graph = batch_loss(params, norm_frames, idx, config)
    ad.backward(graph.total)
    analytic = [ad.grad_of(p).copy() for p in leaves]

    worst = 0.0
    for p, g_an in zip(leaves, analytic):
        base = p.value.copy()
        flat = base.reshape(-1)
        if coords_per_param is None or coords_per_param >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=coords_per_param, replace=False)

        def loss_at(values):
            p.value = values
            try:
                return float(
                    batch_loss(params, norm_frames, idx, config).total.value[0, 0]
                )
            finally:
                p.value = base

        for c in coords:
            mutated = base.copy()
            mutated.reshape(-1)[c] = flat[c] + FD_STEP
            fp = loss_at(mutated)
            mutated.reshape(-1)[c] = flat[c] - FD_STEP
            fm = loss_at(mutated)
            fd = (fp - fm) / (2.0 * FD_STEP)
            worst = max(worst, max_rel_err(g_an.reshape(-1)[c], fd))
    return worst


def run_full_suite(op_seeds=100, step_seeds=100, step_coords=12, verbose=False):
    """The complete check: all ops over ``op_seeds`` seeds, then the full
    training-step loss over ``step_seeds`` toy instances (sampled
    coordinates each, plus one exhaustive pass). Returns a report dict.
    """
    report = {"ops": run_op_suite(seeds=op_seeds)}
    worst_step = check_training_step(seed=0, coords_per_param=None)
    for k in range(1, step_seeds):
        worst_step = max(
            worst_step,
            check_training_step(seed=k, coords_per_param=step_coords),
        )
    report["full_step"] = worst_step
    report["max_op_err"] = max(report["ops"].values())
    report["passed"] = (
        report["max_op_err"] <= OP_TOLERANCE
        and report["full_step"] <= FULL_STEP_TOLERANCE
    )
    if verbose:
        for op, err in sorted(report["ops"].items()):
            print(f"  {op:<16s} max rel err {err:.3e}")
        print(f"  full training step max rel err {report['full_step']:.3e}")
    return report
