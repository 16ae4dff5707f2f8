"""Training objective: overlap content similarity, mesh shape
preservation, and the perceptual hinge on differences exceeding the
just-noticeable thresholds.

All means run over the full pixel grid; masked-out pixels contribute
zero to the numerator but still count in the denominator, which keeps
the loss scale independent of how much of the frame overlaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Var

SHAPE_DEGENERATE_PENALTY = 1e3
_EDGE_EPS = 1e-9


@dataclass
class LossBreakdown:
    l_content: float
    l_shape: float
    l_jnd: float
    total: float
    alpha: float
    beta: float
    total_var: Var

    def as_row(self, step: int) -> dict:
        return {"step": step, "l_content": self.l_content, "l_shape": self.l_shape,
                "l_jnd": self.l_jnd, "total": self.total}


def _mask_channels(mask: np.ndarray, channels: int) -> Var:
    return T.constant(np.broadcast_to(mask.astype(np.float64),
                                      (channels,) + mask.shape).copy())


def jnd_loss(ref: Var, warped: Var, jnd: np.ndarray, mask: np.ndarray) -> Var:
    """Mean over the grid of ReLU(masked |ref - warped| - masked JND);
    differences below the per-pixel threshold cost nothing."""
    if ref.shape != warped.shape:
        raise T.ShapeError(f"image shapes differ: {ref.shape} vs {warped.shape}")
    c = ref.shape[0]
    if jnd.shape != ref.shape[1:] or mask.shape != ref.shape[1:]:
        raise T.ShapeError("JND map and mask must match the image extents")
    mc = _mask_channels(mask, c)
    diff = T.mul(T.abs_(T.sub(ref, warped)), mc)
    thresh = T.constant(np.broadcast_to(jnd * mask, (c,) + jnd.shape).copy())
    return T.reduce_mean(T.relu(T.sub(diff, thresh)))


def _stage_l1(ref: Var, warped: Var, mask: np.ndarray) -> Var:
    mc = _mask_channels(mask, ref.shape[0])
    return T.reduce_mean(T.abs_(T.sub(T.mul(ref, mc), T.mul(warped, mc))))


def content_loss(out, ref: Var, lambda_hom: float = 1.0, lambda_mesh: float = 1.0) -> Var:
    """Masked L1 photometric error, summed over the homography stage and
    the mesh stage of a forward pass."""
    hom_term = _stage_l1(ref, out.warped_hom, out.mask_hom)
    mesh_term = _stage_l1(ref, out.warped, out.mask)
    return T.add(T.mul(hom_term, lambda_hom), T.mul(mesh_term, lambda_mesh))


def _edge_sets(mesh: Var):
    horiz = T.sub(mesh[:, 1:], mesh[:, :-1])
    vert = T.sub(mesh[1:, :], mesh[:-1, :])
    return horiz, vert


def _norms(edges: Var) -> Var:
    return T.sqrt(T.reduce_sum(T.mul(edges, edges), axis=2))


def shape_loss(mesh_final: Var, mesh_regular: np.ndarray) -> Var:
    """Collinearity of consecutive same-direction edges (squared unit
    vector differences) plus edge-length preservation against the
    regular grid (squared relative stretch), each averaged over its
    edge/pair population.  Degenerate zero-length edges return a fixed
    large penalty instead of exploding."""
    rows, cols, _ = mesh_final.shape
    reg_h = mesh_regular[:, 1:] - mesh_regular[:, :-1]
    reg_v = mesh_regular[1:, :] - mesh_regular[:-1, :]
    horiz, vert = _edge_sets(mesh_final)
    if (min(np.linalg.norm(horiz.value, axis=2).min(initial=np.inf),
            np.linalg.norm(vert.value, axis=2).min(initial=np.inf)) < _EDGE_EPS):
        return T.constant(SHAPE_DEGENERATE_PENALTY)

    sq_sum = None
    pair_count = 0
    ratio_sum = None
    edge_count = 0
    for edges, reg, axis in ((horiz, reg_h, 1), (vert, reg_v, 0)):
        n = _norms(edges)
        shape3 = n.shape + (1,)
        unit = T.div(edges, T.broadcast_to(T.reshape(n, shape3), edges.shape))
        if edges.shape[axis] >= 2:
            if axis == 1:
                d = T.sub(unit[:, 1:], unit[:, :-1])
            else:
                d = T.sub(unit[1:, :], unit[:-1, :])
            s = T.reduce_sum(T.mul(d, d))
            sq_sum = s if sq_sum is None else T.add(sq_sum, s)
            pair_count += d.size // 2
        stretch = T.sub(T.div(n, T.constant(np.linalg.norm(reg, axis=2))), 1.0)
        s = T.reduce_sum(T.mul(stretch, stretch))
        ratio_sum = s if ratio_sum is None else T.add(ratio_sum, s)
        edge_count += n.size

    inter = T.mul(ratio_sum, 1.0 / edge_count)
    if sq_sum is None or pair_count == 0:
        return inter
    return T.add(T.mul(sq_sum, 1.0 / pair_count), inter)


def total_loss(out, ref: Var, jnd: np.ndarray, mesh_regular: np.ndarray,
               alpha: float = 10.0, beta: float = 1.0,
               lambda_hom: float = 1.0, lambda_mesh: float = 1.0) -> LossBreakdown:
    """Weighted sum of the three objectives, applied at the mesh stage
    for the perceptual term."""
    l_c = content_loss(out, ref, lambda_hom, lambda_mesh)
    l_s = shape_loss(out.mesh_final, mesh_regular)
    l_j = jnd_loss(ref, out.warped, jnd, out.mask)
    total = T.add(T.add(l_c, T.mul(l_s, alpha)), T.mul(l_j, beta))
    c, s, j = l_c.item(), l_s.item(), l_j.item()
    return LossBreakdown(l_content=c, l_shape=s, l_jnd=j,
                         total=c + s * alpha + j * beta,
                         alpha=alpha, beta=beta, total_var=total)
