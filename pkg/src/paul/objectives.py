"""Loss terms: code/weight regularizers, the auto-encoder and auto-decoder
reconstruction residuals (plain and occlusion-aware), and the nuclear-norm
penalty used by the low-rank baseline.

Reconstruction losses use the unsquared Frobenius norm; the `squared`
switch exists for ablation. All terms are plain functions over graph
nodes, parallel per frame before reduction.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geometry, networks

CODE_WEIGHT = 0.01
DECODER_WEIGHT = 1e-4
LOW_RANK_WEIGHT = 0.01


def _node(x):
    if isinstance(x, geometry.Rotation):
        return ad.constant(x.matrix)
    if isinstance(x, geometry.Shape3D):
        return ad.constant(x.points)
    return ad.constant(x)


def _code_node(code):
    code = _node(code)
    if code.value.ndim == 2 and code.value.shape[1] != 1 and code.value.shape[0] == 1:
        code = ad.transpose(code)
    return code


def residual_norm(shape, target, squared=False):
    """``||shape - target||_F`` (or its square), with the zero-residual
    subgradient guard from the autodiff layer."""
    diff = ad.sub(shape, target)
    if squared:
        return ad.total(ad.square(diff))
    return ad.frobenius_norm(diff)


def camera_target(rot, w, z_row):
    """The canonical-frame target ``R^T [W ; z^T]``."""
    cam = ad.vstack(_node(w), z_row if isinstance(z_row, ad.Node) else _node(z_row))
    return ad.matmul(ad.transpose(_node(rot)), cam)


def squared_l2(nodes):
    """Sum of squared entries across a list of nodes, as a scalar node."""
    acc = None
    for n in nodes:
        term = ad.total(ad.square(n))
        acc = term if acc is None else ad.add(acc, term)
    return acc if acc is not None else ad.constant(0.0)


def reg_loss(code, decoder_leaves):
    """``0.01 ||code||^2 + 1e-4 ||decoder weights||^2``.

    When ``code`` holds a whole batch (K x B), the code term sums over the
    frames in the batch.
    """
    code_term = ad.scale(ad.total(ad.square(_node(code))), CODE_WEIGHT)
    if decoder_leaves:
        return ad.add(code_term, ad.scale(squared_l2(decoder_leaves), DECODER_WEIGHT))
    return code_term


def ae_chain(params, code):
    """Decoder -> encoder -> decoder composition, as a 3P x B node."""
    return networks.decoder_forward(
        params, networks.encoder_forward(params, networks.decoder_forward(params, code))
    )


def recon_ae_loss(params, code, rot, z, frame, squared=False):
    """Auto-encoder residual ``|| f_d f_e f_d(code) - R^T [W ; z^T] ||_F``."""
    code = _code_node(code)
    shape = ad.reshape(ae_chain(params, code), 3, params.points)
    z_row = z if isinstance(z, ad.Node) else ad.constant(np.asarray(z).reshape(1, -1))
    return residual_norm(shape, camera_target(rot, frame.keypoints, z_row), squared)


def recon_ad_loss(params, code, rot, z, frame, squared=False):
    """Auto-decoder residual ``|| f_d(code) - R^T [W ; z^T] ||_F``."""
    code = _code_node(code)
    shape = ad.reshape(networks.decoder_forward(params, code), 3, params.points)
    z_row = z if isinstance(z, ad.Node) else ad.constant(np.asarray(z).reshape(1, -1))
    return residual_norm(shape, camera_target(rot, frame.keypoints, z_row), squared)


def recon_losses_occluded(params, code, rot, fused, visibility, squared=False):
    """Occlusion-aware residual pair against a fused camera target.

    Both decoder outputs pass through the adaptive normalization before the
    residual; with a full mask this reduces exactly to the plain losses.
    Returns ``(ae_loss, ad_loss)``.
    """
    code = _code_node(code)
    ae = ad.reshape(ae_chain(params, code), 3, params.points)
    adres = ad.reshape(networks.decoder_forward(params, code), 3, params.points)
    ae_n = geometry.adaptive_normalize(ae, visibility)
    ad_n = geometry.adaptive_normalize(adres, visibility)
    target = ad.matmul(ad.transpose(_node(rot)), _node(fused))
    return (
        residual_norm(ae_n, target, squared),
        residual_norm(ad_n, target, squared),
    )


def nuclear_norm_loss(shape):
    """Sum of the singular values of a 3xP shape."""
    _, s, _ = ad.svd_small(_node(shape))
    return ad.total(s)
