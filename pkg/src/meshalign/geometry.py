"""Mesh construction, four-point homography solving, and mesh-driven warping.

Conventions: a mesh is a (rows, cols, 2) array of (x, y) pixel positions;
row index follows y, column index follows x.  A homography is a 3x3
matrix normalised to H[2,2] == 1 acting on homogeneous pixel coordinates.
Corner order for global offsets is top-left, top-right, bottom-left,
bottom-right.
"""

from __future__ import annotations

import functools

import numpy as np

from . import tensor as T
from .tensor import Var

MASK_THRESHOLD = 0.999


class DegenerateCornersError(ValueError):
    """Corner configuration does not determine a homography."""


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else T.constant(x)


def regular_mesh(rows: int, cols: int, h: int, w: int) -> np.ndarray:
    """Uniform (rows, cols) vertex grid covering [0, w-1] x [0, h-1]."""
    if rows < 2 or cols < 2 or h < 2 or w < 2:
        raise ValueError(f"degenerate mesh request rows={rows} cols={cols} h={h} w={w}")
    xs = np.linspace(0.0, w - 1.0, cols)
    ys = np.linspace(0.0, h - 1.0, rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.ascontiguousarray(np.stack([gx, gy], axis=-1))


def image_corners(h: int, w: int) -> np.ndarray:
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]])


def _norm_matrices(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    # map pixel coords into [-1, 1] so the 8x8 system stays well conditioned
    n = np.array([[2.0 / (w - 1.0), 0.0, -1.0],
                  [0.0, 2.0 / (h - 1.0), -1.0],
                  [0.0, 0.0, 1.0]])
    return n, np.linalg.inv(n)


@functools.lru_cache(maxsize=None)
def _dlt_bases(h: int, w: int):
    """Constant pieces of the normalised DLT system.

    The 8x8 matrix is affine in the destination coordinates (u, v):
    A = A0 + sum_i u_i Eu_i + v_i Ev_i, and the right-hand side is a
    fixed selection of (u, v), so the solve stays differentiable.
    """
    norm, _ = _norm_matrices(h, w)
    src = image_corners(h, w)
    sn = (src * norm[[0, 1], [0, 1]]) + norm[[0, 1], [2, 2]]  # normalised sources
    a0 = np.zeros((8, 8))
    eu = np.zeros((4, 8, 8))
    ev = np.zeros((4, 8, 8))
    bu = np.zeros((8, 4))
    bv = np.zeros((8, 4))
    for i, (x, y) in enumerate(sn):
        a0[2 * i, 0:3] = (x, y, 1.0)
        a0[2 * i + 1, 3:6] = (x, y, 1.0)
        eu[i, 2 * i, 6:8] = (-x, -y)
        ev[i, 2 * i + 1, 6:8] = (-x, -y)
        bu[2 * i, i] = 1.0
        bv[2 * i + 1, i] = 1.0
    return sn, a0, eu.reshape(4, 64), ev.reshape(4, 64), bu, bv


def dlt_solve(offsets, h: int, w: int) -> Var:
    """Homography mapping each image corner to corner + offset.

    offsets: (4, 2) corner displacements in pixels (Var or array).
    Solved as the standard 8x8 direct linear system in normalised
    coordinates; gradients propagate through the solve.
    """
    offsets = _as_var(offsets)
    if offsets.shape != (4, 2):
        raise T.ShapeError(f"corner offsets must be (4, 2), got {offsets.shape}")
    norm, norm_inv = _norm_matrices(h, w)
    sn, a0, eu, ev, bu, bv = _dlt_bases(h, w)

    dst = T.add(offsets, image_corners(h, w))
    scale = np.broadcast_to(norm[[0, 1], [0, 1]], (4, 2)).copy()
    dst_n = T.add(T.mul(dst, T.constant(scale)), -1.0)
    u = dst_n[:, 0]
    v = dst_n[:, 1]

    a = T.add(T.add(T.constant(a0),
                    T.reshape(T.matmul(T.reshape(u, (1, 4)), T.constant(eu)), (8, 8))),
              T.reshape(T.matmul(T.reshape(v, (1, 4)), T.constant(ev)), (8, 8)))
    b = T.add(T.matmul(T.constant(bu), T.reshape(u, (4, 1))),
              T.matmul(T.constant(bv), T.reshape(v, (4, 1))))

    if abs(np.linalg.det(a.value)) < 1e-12:
        raise DegenerateCornersError("displaced corners are collinear or coincident")
    hvec = T.solve(a, b)
    hn = T.reshape(T.concat([hvec, T.constant(np.ones((1, 1)))], axis=0), (3, 3))
    hm = T.matmul(T.matmul(T.constant(norm_inv), hn), T.constant(norm))
    hm = T.div(hm, hm[2, 2])
    if abs(np.linalg.det(hm.value)) < 1e-12:
        raise DegenerateCornersError("solved homography is singular")
    return hm


def apply_homography(mesh, hom) -> Var:
    """Projective transform of every mesh vertex."""
    mesh = _as_var(mesh)
    hom = _as_var(hom)
    rows, cols, _ = mesh.shape
    n = rows * cols
    pts = T.permute(T.reshape(mesh, (n, 2)), (1, 0))
    pts = T.concat([pts, T.constant(np.ones((1, n)))], axis=0)
    q = T.matmul(hom, pts)
    den = q[2]
    if np.min(np.abs(den.value)) < 1e-9:
        raise DegenerateCornersError("homography denominator vanished at a vertex")
    out = T.concat([T.reshape(T.div(q[0], den), (1, n)),
                    T.reshape(T.div(q[1], den), (1, n))], axis=0)
    return T.reshape(T.permute(out, (1, 0)), (rows, cols, 2))


def homography_grid(hom, h: int, w: int, scale: float = 1.0) -> Var:
    """Sampling grid (h, w, 2) of the projective map applied on a pixel
    lattice whose coordinates are scaled by `scale` (feature maps at
    stride s use scale=s)."""
    hom = _as_var(hom)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pts = np.stack([xs.ravel() * scale, ys.ravel() * scale, np.ones(h * w)], axis=0)
    q = T.matmul(hom, T.constant(pts))
    den = q[2]
    if np.min(np.abs(den.value)) < 1e-9:
        raise DegenerateCornersError("homography denominator vanished on the pixel grid")
    inv = 1.0 / scale
    out = T.concat([T.reshape(T.mul(T.div(q[0], den), inv), (1, h * w)),
                    T.reshape(T.mul(T.div(q[1], den), inv), (1, h * w))], axis=0)
    return T.reshape(T.permute(out, (1, 0)), (h, w, 2))


def assemble_final_mesh(mesh, global_offsets, local_offsets, h: int, w: int) -> Var:
    """Homography from the corner offsets applied to the mesh, plus the
    per-vertex local offsets."""
    hom = dlt_solve(global_offsets, h, w)
    return T.add(apply_homography(mesh, hom), _as_var(local_offsets))


@functools.lru_cache(maxsize=None)
def _cell_lookup(rows: int, cols: int, h: int, w: int):
    """Per-pixel cell corner indices (into the flattened vertex grid) and
    within-cell fractions, fixed by the regular mesh."""
    cell_w = (w - 1.0) / (cols - 1)
    cell_h = (h - 1.0) / (rows - 1)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    txs = xs / cell_w
    tys = ys / cell_h
    cx = np.minimum(np.floor(txs).astype(np.int64), cols - 2)
    cy = np.minimum(np.floor(tys).astype(np.int64), rows - 2)
    fx = np.broadcast_to(txs - cx, (h, w)).ravel()
    fy = np.broadcast_to((tys - cy)[:, None], (h, w)).ravel()
    base = (cy[:, None] * cols + cx[None, :]).ravel()
    idx = np.stack([base, base + 1, base + cols, base + cols + 1], axis=0)
    gx, gy = np.meshgrid(xs, ys)
    pix = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    two = lambda f: np.ascontiguousarray(np.repeat(f[:, None], 2, axis=1))
    return idx, two(fx), two(fy), pix


def mesh_to_flow(mesh, h: int, w: int) -> Var:
    """Dense (h, w, 2) sampling grid interpolating the mesh per cell.

    Each pixel bilinearly blends the vertex displacements of its cell in
    the regular grid, then adds its own coordinates, so an undeformed
    mesh yields the identity grid bit-exactly and a uniformly shifted
    mesh yields an exactly shifted grid.
    """
    mesh = _as_var(mesh)
    rows, cols, _ = mesh.shape
    idx, fx, fy, pix = _cell_lookup(rows, cols, h, w)
    disp = T.reshape(T.sub(mesh, T.constant(regular_mesh(rows, cols, h, w))),
                     (rows * cols, 2))
    d00, d01, d10, d11 = (disp[idx[k]] for k in range(4))
    fx = T.constant(fx)
    fy = T.constant(fy)
    top = T.add(d00, T.mul(fx, T.sub(d01, d00)))
    bot = T.add(d10, T.mul(fx, T.sub(d11, d10)))
    d = T.add(top, T.mul(fy, T.sub(bot, top)))
    return T.reshape(T.add(d, T.constant(pix)), (h, w, 2))


def warp_image(img, mesh) -> Var:
    """Backward-warp img[c,h,w] by sampling at the mesh-defined grid."""
    img = _as_var(img)
    _, h, w = img.shape
    return T.grid_sample(img, mesh_to_flow(mesh, h, w))


def overlap_mask(mesh, h: int, w: int) -> np.ndarray:
    """Binary (h, w) footprint of the warped target: warp of an all-ones
    image thresholded to drop bilinear border bleed."""
    mesh_val = mesh.value if isinstance(mesh, Var) else np.asarray(mesh)
    with T.no_grad():
        ones = T.constant(np.ones((1, h, w)))
        warped = T.grid_sample(ones, mesh_to_flow(T.constant(mesh_val), h, w))
    return (warped.value[0] >= MASK_THRESHOLD).astype(np.uint8)
