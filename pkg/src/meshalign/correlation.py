"""Pairwise feature correlation and offset-regression heads.

The 4D correlation tensor holds every dot product between target and
reference feature vectors.  The full head processes two complementary
3D layouts of that tensor (one preserving the reference spatial grid,
one the target grid), so convolutions can exploit both; the classical
correlation-layer baseline keeps only the reference-grid layout.  An
analytic multiply-add estimator covers both plus the kernel-decomposition
alternative that is never instantiated as an operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, Linear
from .tensor import Var

_NORM_EPS = 1e-24  # added under the square root; keeps zero vectors finite


def corr4d(f_ref: Var, f_tar: Var, normalize: bool = True) -> Var:
    """Correlation tensor of shape (h2, w2, h1, w1) where entry
    [k, l, i, j] is the dot product of the target vector at (k, l) with
    the reference vector at (i, j), optionally L2-normalising each
    feature vector first."""
    c1, h1, w1 = f_ref.shape
    c2, h2, w2 = f_tar.shape
    if c1 != c2:
        raise T.ShapeError(f"channel mismatch: ref has {c1}, tar has {c2}")
    if normalize:
        f_ref = _l2_normalize(f_ref)
        f_tar = _l2_normalize(f_tar)
    tar = T.permute(T.reshape(f_tar, (c2, h2 * w2)), (1, 0))
    ref = T.reshape(f_ref, (c1, h1 * w1))
    return T.reshape(T.matmul(tar, ref), (h2, w2, h1, w1))


def _l2_normalize(f: Var) -> Var:
    c, h, w = f.shape
    norm = T.sqrt(T.add(T.reduce_sum(T.mul(f, f), axis=0), _NORM_EPS))
    return T.div(f, T.broadcast_to(T.reshape(norm, (1, h, w)), (c, h, w)))


def reshape_branches(corr: Var) -> tuple[Var, Var]:
    """The two 3D layouts of the correlation tensor: one with channels
    indexed by target position over the reference grid, one with
    channels indexed by reference position over the target grid."""
    h2, w2, h1, w1 = corr.shape
    ref_grid = T.reshape(corr, (h2 * w2, h1, w1))
    tar_grid = T.reshape(T.permute(corr, (2, 3, 0, 1)), (h1 * w1, h2, w2))
    return ref_grid, tar_grid


def _trunk_dims(h: int, w: int, depth: int) -> tuple[int, int]:
    for _ in range(depth):
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
    return h, w


class FscHead:
    """Offset-regression head over the correlation tensor.

    mode "fsc" compresses both tensor layouts, pads them to a common
    spatial extent and concatenates along channels; mode "cl" keeps only
    the reference-grid layout.  Either way a stride-2 conv trunk plus a
    two-layer perceptron regresses the offsets; the final layer is
    zero-initialised so a fresh head predicts zero offsets.
    """

    def __init__(self, ref_shape: tuple[int, int], tar_shape: tuple[int, int],
                 out_dim: int, c_r: int = 64, fc_dim: int = 256,
                 rng: np.random.Generator | None = None, mode: str = "fsc"):
        if mode not in ("fsc", "cl"):
            raise ValueError(f"unknown head mode {mode!r}")
        rng = rng or np.random.default_rng(0)
        h1, w1 = ref_shape
        h2, w2 = tar_shape
        self.ref_shape, self.tar_shape = (h1, w1), (h2, w2)
        self.out_dim, self.c_r, self.fc_dim, self.mode = out_dim, c_r, fc_dim, mode

        self.ref_compress = [Conv2d(h2 * w2, c_r, 1, rng=rng),
                             Conv2d(c_r, c_r, 3, padding=1, rng=rng)]
        if mode == "fsc":
            self.tar_compress = [Conv2d(h1 * w1, c_r, 1, rng=rng),
                                 Conv2d(c_r, c_r, 3, padding=1, rng=rng)]
            trunk_in, (th, tw) = 2 * c_r, (max(h1, h2), max(w1, w2))
        else:
            self.tar_compress = []
            trunk_in, (th, tw) = c_r, (h1, w1)
        self.trunk = [Conv2d(trunk_in, c_r, 3, stride=2, padding=1, rng=rng),
                      Conv2d(c_r, c_r, 3, stride=2, padding=1, rng=rng),
                      Conv2d(c_r, c_r, 3, stride=2, padding=1, rng=rng)]
        fh, fw = _trunk_dims(th, tw, 3)
        self.fc1 = Linear(c_r * fh * fw, fc_dim, rng=rng)
        self.fc2 = Linear(fc_dim, out_dim, zero_init=True)

    def __call__(self, f_ref: Var, f_tar: Var) -> Var:
        if f_ref.shape[1:] != self.ref_shape or f_tar.shape[1:] != self.tar_shape:
            raise T.ShapeError(
                f"head built for ref {self.ref_shape} / tar {self.tar_shape}, "
                f"got {f_ref.shape[1:]} / {f_tar.shape[1:]}")
        corr = corr4d(f_ref, f_tar)
        ref_grid, tar_grid = reshape_branches(corr)
        a = ref_grid
        for conv in self.ref_compress:
            a = T.relu(conv(a))
        if self.mode == "fsc":
            b = tar_grid
            for conv in self.tar_compress:
                b = T.relu(conv(b))
            ph = max(self.ref_shape[0], self.tar_shape[0])
            pw = max(self.ref_shape[1], self.tar_shape[1])
            x = T.pad_concat([a, b], ph, pw)
        else:
            x = a
        for conv in self.trunk:
            x = T.relu(conv(x))
        x = T.reshape(x, (x.size,))
        return self.fc2(T.relu(self.fc1(x)))

    def named_params(self, prefix: str):
        for i, conv in enumerate(self.ref_compress):
            yield from conv.named_params(f"{prefix}.ref_compress{i}")
        for i, conv in enumerate(self.tar_compress):
            yield from conv.named_params(f"{prefix}.tar_compress{i}")
        for i, conv in enumerate(self.trunk):
            yield from conv.named_params(f"{prefix}.trunk{i}")
        yield from self.fc1.named_params(f"{prefix}.fc1")
        yield from self.fc2.named_params(f"{prefix}.fc2")


def fsc_regress(f_ref: Var, f_tar: Var, head: FscHead) -> Var:
    """Offsets from the dual-layout correlation pipeline."""
    if head.mode != "fsc":
        raise ValueError("head was built in 'cl' mode")
    return head(f_ref, f_tar)


def cl_regress(f_ref: Var, f_tar: Var, head: FscHead) -> Var:
    """Ablation baseline: single-layout correlation pipeline."""
    if head.mode != "cl":
        raise ValueError("head was built in 'fsc' mode")
    return head(f_ref, f_tar)


# ---------------------------------------------------------------------------
# analytic FLOPs model


@dataclass(frozen=True)
class HeadSpec:
    """Architecture knobs the multiply-add estimator needs."""
    fc_dim: int = 256
    out_dim: int = 8
    compress_k: int = 3   # refinement conv after the 1x1 compression
    trunk_depth: int = 3
    ccl_kernel: int = 3   # modelled kernel size of the decomposition variant


def _conv_flops(c_in, c_out, k, oh, ow):
    return 2 * c_in * c_out * k * k * oh * ow


def _head_tail_flops(c_in: int, h: int, w: int, c_r: int, spec: HeadSpec) -> int:
    total = 0
    ch = c_in
    for _ in range(spec.trunk_depth):
        h = (h + 2 - 3) // 2 + 1
        w = (w + 2 - 3) // 2 + 1
        total += _conv_flops(ch, c_r, 3, h, w)
        ch = c_r
    total += 2 * (c_r * h * w) * spec.fc_dim
    total += 2 * spec.fc_dim * spec.out_dim
    return total


def flops_estimate(variant: str, c: int, h1: int, w1: int, h2: int, w2: int,
                   c_r: int, head_spec: HeadSpec | None = None) -> int:
    """Closed-form multiply-add count for one correlation + regression
    pass.  The decomposition variant ("ccl") is modelled as h2*w2
    kernels of size c x k x k convolved over the reference map; it has
    no executable counterpart here."""
    spec = head_spec or HeadSpec()
    for name, val in (("c", c), ("h1", h1), ("w1", w1), ("h2", h2), ("w2", w2), ("c_r", c_r)):
        if val <= 0:
            raise ValueError(f"{name} must be positive")
    variant = variant.lower()
    dot_corr = 2 * c * h1 * w1 * h2 * w2
    ref_branch = (_conv_flops(h2 * w2, c_r, 1, h1, w1)
                  + _conv_flops(c_r, c_r, spec.compress_k, h1, w1))
    if variant == "cl":
        return dot_corr + ref_branch + _head_tail_flops(c_r, h1, w1, c_r, spec)
    if variant == "fsc":
        tar_branch = (_conv_flops(h1 * w1, c_r, 1, h2, w2)
                      + _conv_flops(c_r, c_r, spec.compress_k, h2, w2))
        ph, pw = max(h1, h2), max(w1, w2)
        return (dot_corr + ref_branch + tar_branch
                + _head_tail_flops(2 * c_r, ph, pw, c_r, spec))
    if variant == "ccl":
        k = spec.ccl_kernel
        kernel_corr = 2 * (h2 * w2) * c * k * k * h1 * w1
        return kernel_corr + ref_branch + _head_tail_flops(c_r, h1, w1, c_r, spec)
    raise ValueError(f"unknown variant {variant!r} (expected cl, ccl, or fsc)")
