"""Cross-scale offset regression over max-pool feature pyramids.

Every ordered pair of unequal pyramid levels gets its own regression
head (the flattened trunk dimensions differ per pair, so weights cannot
be shared); the per-pair offsets are summed in a fixed lexicographic
order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .correlation import FscHead, fsc_regress
from .tensor import Var


def build_pyramid(f: Var, n_levels: int) -> list[Var]:
    """Levels 0..n of repeated 2x2 max pooling; level 0 is the input."""
    if n_levels < 0:
        raise ValueError("pyramid depth must be >= 0")
    _, h, w = f.shape
    if min(h, w) < 2 ** n_levels:
        raise ValueError(f"feature map {h}x{w} too small for {n_levels} pooling levels")
    levels = [f]
    for _ in range(n_levels):
        levels.append(T.maxpool2d(levels[-1]))
    return levels


def enumerate_pairs(n_levels: int) -> list[tuple[int, int]]:
    """All ordered unequal level pairs (m, n), lexicographically sorted;
    there are n_levels**2 + n_levels of them."""
    if n_levels < 0:
        raise ValueError("pyramid depth must be >= 0")
    return [(m, n)
            for m in range(n_levels + 1)
            for n in range(n_levels + 1)
            if m != n]


def make_pair_heads(fine_shape: tuple[int, int], n_levels: int, out_dim: int,
                    c_r: int, fc_dim: int, rng: np.random.Generator) -> dict:
    """One head per ordered level pair, keyed (ref_level, tar_level)."""
    h, w = fine_shape
    heads = {}
    for m, n in enumerate_pairs(n_levels):
        heads[(m, n)] = FscHead((h >> m, w >> m), (h >> n, w >> n),
                                out_dim=out_dim, c_r=c_r, fc_dim=fc_dim, rng=rng)
    return heads


def cross_scale_offsets(pyr_ref: list[Var], pyr_tar: list[Var], heads: dict,
                        mesh_shape: tuple[int, int]) -> Var:
    """Sum of per-pair offset regressions, reshaped to the vertex grid.

    Empty pair set (single-level pyramids) yields exactly zero.
    """
    if len(pyr_ref) != len(pyr_tar):
        raise ValueError("pyramids were built with different depths")
    rows, cols = mesh_shape
    pairs = enumerate_pairs(len(pyr_ref) - 1)
    total = None
    for pair in pairs:
        if pair not in heads:
            raise KeyError(f"no regression head for level pair {pair}")
        out = fsc_regress(pyr_ref[pair[0]], pyr_tar[pair[1]], heads[pair])
        total = out if total is None else T.add(total, out)
    if total is None:
        return T.constant(np.zeros((rows, cols, 2)))
    return T.reshape(total, (rows, cols, 2))


def combine_local(o_intra: Var, o_cross: Var) -> Var:
    """Elementwise sum of the intra-scale and cross-scale offset fields."""
    if o_intra.shape != o_cross.shape:
        raise T.ShapeError(
            f"offset grids differ: {o_intra.shape} vs {o_cross.shape}")
    return T.add(o_intra, o_cross)
