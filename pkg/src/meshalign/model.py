"""End-to-end alignment network.

One shared conv extractor feeds a coarse stage that regresses four
corner offsets (turned into a homography) and a fine stage that
regresses per-vertex mesh offsets, the latter combining an intra-scale
head with the cross-scale pyramid heads.  Offsets are predicted in
normalised units and scaled to pixels here: corner offsets by the image
extents, vertex offsets by the mesh cell extents times a range factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cross_scale as cs
from . import geometry as geo
from . import tensor as T
from .correlation import FscHead, fsc_regress
from .layers import Conv2d
from .tensor import Var


def _log2_exact(n: int, what: str) -> int:
    k = int(n).bit_length() - 1
    if n <= 0 or 2 ** k != n:
        raise ValueError(f"{what} must be a positive power of two, got {n}")
    return k


class Extractor:
    """Shared conv stack producing fine (stride s_f) and coarse
    (stride s_c) feature maps; each halving is a stride-2 conv followed
    by a stride-1 refinement conv on the fine path."""

    def __init__(self, in_channels: int, c_f: int, c_c: int, s_f: int = 4,
                 s_c: int = 16, rng: np.random.Generator | None = None):
        k_f = _log2_exact(s_f, "fine stride")
        if s_c % s_f:
            raise ValueError(f"coarse stride {s_c} must be a multiple of fine stride {s_f}")
        k_c = _log2_exact(s_c // s_f, "stride ratio")
        if k_f < 1 or k_c < 1:
            raise ValueError("need at least one halving on each path")
        self.s_f, self.s_c = s_f, s_c
        self.c_f, self.c_c = c_f, c_c
        mid = max(c_f // 2, 4)
        self.fine_convs = []
        ch = in_channels
        for i in range(k_f):
            out = c_f if i == k_f - 1 else mid
            self.fine_convs.append(Conv2d(ch, out, 3, stride=2, padding=1, rng=rng))
            self.fine_convs.append(Conv2d(out, out, 3, stride=1, padding=1, rng=rng))
            ch = out
        self.coarse_convs = []
        for _ in range(k_c):
            self.coarse_convs.append(Conv2d(ch, c_c, 3, stride=2, padding=1, rng=rng))
            ch = c_c

    def __call__(self, img: Var) -> tuple[Var, Var]:
        _, h, w = img.shape
        if h % self.s_c or w % self.s_c:
            raise ValueError(f"image extents {h}x{w} not divisible by coarse stride {self.s_c}")
        x = img
        for conv in self.fine_convs:
            x = T.relu(conv(x))
        fine = x
        for conv in self.coarse_convs:
            x = T.relu(conv(x))
        return fine, x

    def named_params(self, prefix: str):
        for i, conv in enumerate(self.fine_convs):
            yield from conv.named_params(f"{prefix}.fine{i}")
        for i, conv in enumerate(self.coarse_convs):
            yield from conv.named_params(f"{prefix}.coarse{i}")


@dataclass
class ForwardOutput:
    """Everything one alignment pass produces.  Warped images and meshes
    stay on the tape; masks are detached binary arrays."""
    global_offsets: Var          # (4, 2) pixel corner displacements
    homography: Var              # (3, 3)
    local_intra: Var             # (rows, cols, 2) pixels
    local_cross: Var             # (rows, cols, 2) pixels
    local_offsets: Var           # intra + cross
    mesh_final: Var              # (rows, cols, 2)
    warped: Var                  # (c, h, w) mesh-stage warp of the target
    mask: np.ndarray             # (h, w) mesh-stage overlap
    warped_hom: Var              # homography-stage warp
    mask_hom: np.ndarray         # homography-stage overlap
    used_identity_fallback: bool = field(default=False)


class AlignModel:
    """Extractor plus the global head, the intra-scale local head and the
    cross-scale pair heads."""

    def __init__(self, image_size: int = 128, mesh_rows: int = 13, mesh_cols: int = 13,
                 scales: int = 2, c_f: int = 64, c_c: int = 128, c_r: int = 64,
                 s_f: int = 4, s_c: int = 16, fc_dim: int = 256, rho: float = 2.0,
                 in_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.image_size = image_size
        self.mesh_rows, self.mesh_cols = mesh_rows, mesh_cols
        self.scales = scales
        self.rho = rho
        self.in_channels = in_channels
        self.extractor = Extractor(in_channels, c_f, c_c, s_f, s_c, rng)
        hf = wf = image_size // s_f
        hc = wc = image_size // s_c
        local_dim = 2 * mesh_rows * mesh_cols
        self.global_head = FscHead((hc, wc), (hc, wc), out_dim=8,
                                   c_r=c_r, fc_dim=fc_dim, rng=rng)
        self.intra_head = FscHead((hf, wf), (hf, wf), out_dim=local_dim,
                                  c_r=c_r, fc_dim=fc_dim, rng=rng)
        self.cross_heads = cs.make_pair_heads((hf, wf), scales, local_dim,
                                              c_r, fc_dim, rng)
        self.regular = geo.regular_mesh(mesh_rows, mesh_cols, image_size, image_size)
        cell_w = (image_size - 1.0) / (mesh_cols - 1)
        cell_h = (image_size - 1.0) / (mesh_rows - 1)
        self._local_scale = np.broadcast_to(
            np.array([cell_w * rho, cell_h * rho]),
            (mesh_rows, mesh_cols, 2)).copy()
        self._global_scale = np.broadcast_to(
            np.array([float(image_size), float(image_size)]), (4, 2)).copy()

    # -- parameters -----------------------------------------------------

    def named_parameters(self) -> dict[str, Var]:
        params = {}
        for name, var in self.extractor.named_params("extractor"):
            params[name] = var
        for name, var in self.global_head.named_params("global_head"):
            params[name] = var
        for name, var in self.intra_head.named_params("intra_head"):
            params[name] = var
        for (m, n), head in sorted(self.cross_heads.items()):
            for name, var in head.named_params(f"cross_head_{m}_{n}"):
                params[name] = var
        return params

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for name, var in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != var.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {var.value.shape}")
            var.value = arr.copy()

    # -- stages ----------------------------------------------------------

    def extract(self, img: Var) -> tuple[Var, Var]:
        return self.extractor(img)

    def global_stage(self, coarse_ref: Var, coarse_tar: Var) -> tuple[Var, Var, bool]:
        """Corner offsets in pixels plus the homography they define.
        A degenerate corner configuration falls back to the identity so
        a training step can continue."""
        raw = fsc_regress(coarse_ref, coarse_tar, self.global_head)
        offsets = T.mul(T.reshape(raw, (4, 2)), T.constant(self._global_scale))
        try:
            hom = geo.dlt_solve(offsets, self.image_size, self.image_size)
            return offsets, hom, False
        except geo.DegenerateCornersError:
            return offsets, T.constant(np.eye(3)), True

    def local_stage(self, fine_ref: Var, fine_tar: Var, hom: Var) -> tuple[Var, Var, Var]:
        """Intra-scale and cross-scale vertex offsets (pixels) from fine
        features, the target side pre-aligned by the homography."""
        _, hf, wf = fine_tar.shape
        grid = geo.homography_grid(hom, hf, wf, scale=float(self.extractor.s_f))
        warped_tar = T.grid_sample(fine_tar, grid)
        scale = T.constant(self._local_scale)
        mesh_shape = (self.mesh_rows, self.mesh_cols)
        raw_intra = fsc_regress(fine_ref, warped_tar, self.intra_head)
        o_intra = T.mul(T.reshape(raw_intra, mesh_shape + (2,)), scale)
        pyr_ref = cs.build_pyramid(fine_ref, self.scales)
        pyr_tar = cs.build_pyramid(warped_tar, self.scales)
        raw_cross = cs.cross_scale_offsets(pyr_ref, pyr_tar, self.cross_heads, mesh_shape)
        o_cross = T.mul(raw_cross, scale)
        return o_intra, o_cross, cs.combine_local(o_intra, o_cross)

    def forward(self, ref: Var, tar: Var) -> ForwardOutput:
        if ref.shape != tar.shape:
            raise T.ShapeError(f"image shapes differ: {ref.shape} vs {tar.shape}")
        if ref.shape[1] != self.image_size or ref.shape[2] != self.image_size:
            raise T.ShapeError(f"model built for {self.image_size}px images, got {ref.shape}")
        fine_ref, coarse_ref = self.extract(ref)
        fine_tar, coarse_tar = self.extract(tar)
        offsets, hom, fell_back = self.global_stage(coarse_ref, coarse_tar)
        o_intra, o_cross, o_local = self.local_stage(fine_ref, fine_tar, hom)
        mesh_hom = geo.apply_homography(T.constant(self.regular), hom)
        mesh_final = T.add(mesh_hom, o_local)
        h = w = self.image_size
        return ForwardOutput(
            global_offsets=offsets,
            homography=hom,
            local_intra=o_intra,
            local_cross=o_cross,
            local_offsets=o_local,
            mesh_final=mesh_final,
            warped=geo.warp_image(tar, mesh_final),
            mask=geo.overlap_mask(mesh_final, h, w),
            warped_hom=geo.warp_image(tar, mesh_hom),
            mask_hom=geo.overlap_mask(mesh_hom, h, w),
            used_identity_fallback=fell_back,
        )

    __call__ = forward


def image_to_var(img: np.ndarray, requires_grad: bool = False) -> Var:
    """(h, w, c) image in [0, 1] to a channel-first Var."""
    arr = np.ascontiguousarray(np.moveaxis(np.asarray(img, dtype=np.float64), -1, 0))
    return Var(arr, requires_grad=requires_grad)


def var_to_image(v: Var) -> np.ndarray:
    """Channel-first Var back to a clipped (h, w, c) image."""
    return np.clip(np.moveaxis(v.value, 0, -1), 0.0, 1.0)
