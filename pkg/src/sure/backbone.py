"""Convolutional feature pyramid and multi-scale spatial fusion.

A three-stage strided conv stack produces features at 1/2, 1/4 and 1/8
resolution plus coarse descriptors.  The fusion step projects all scales
to a common width, pools them to 1/8, fuses with a 1x1 conv and adds a
pooled high-resolution residual, yielding the fine features used for
sub-cell refinement.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class FeaturePyramid:
    f_half: Tensor
    f_quarter: Tensor
    f_eighth: Tensor
    f_coarse: Tensor
    f_fine: Tensor | None = None


class NormLayer:
    """Per-channel affine normalization with running statistics.

    During warm-up the per-image channel statistics are used (treated as
    constants for the gradient) while an EMA is accumulated; `freeze()`
    switches to the stored statistics permanently.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.frozen = False
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if self.frozen:
            mean, var = self.running_mean, self.running_var
        else:
            mean = x.data.mean(axis=(1, 2)).astype(np.float32)
            var = x.data.var(axis=(1, 2)).astype(np.float32)
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (var - self.running_var)
        scale = 1.0 / np.sqrt(var + self.eps)
        shift = Tensor((-mean * scale).astype(x.dtype)[:, None, None])
        factor = Tensor(scale.astype(x.dtype)[:, None, None])
        normalized = x * factor + shift
        g = dc.reshape(self.gamma, (-1, 1, 1))
        b = dc.reshape(self.beta, (-1, 1, 1))
        return normalized * g + b

    def freeze(self) -> None:
        self.frozen = True

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ConvUnit:
    """3x3 (or 1x1) conv -> norm -> optional ReLU."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 kernel: int = 3, stride: int = 1, relu: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(dc.kaiming_normal(rng, (c_out, c_in, kernel, kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.norm = NormLayer(c_out)
        self.stride = stride
        self.padding = kernel // 2
        self.relu = relu

    def __call__(self, x: Tensor) -> Tensor:
        y = dc.convolve_2d(x, self.weight, self.bias, stride=self.stride,
                           padding=self.padding)
        y = self.norm(y)
        return dc.relu(y) if self.relu else y

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}
        out.update({f"{prefix}.norm.{k}": v for k, v in self.norm.params().items()})
        return out


class ResidualBlock:
    """Two 3x3 conv units with an identity skip."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.unit1 = ConvUnit(rng, channels, channels)
        self.unit2 = ConvUnit(rng, channels, channels, relu=False)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.relu(self.unit2(self.unit1(x)) + x)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.unit1.params(f"{prefix}.unit1"),
                **self.unit2.params(f"{prefix}.unit2")}


class BackboneWeights:
    """Three stride-2 stages plus the coarse head."""

    def __init__(self, rng: np.random.Generator, stage_widths: tuple[int, int, int],
                 c_coarse: int):
        c1, c2, c3 = stage_widths
        self.down1 = ConvUnit(rng, 1, c1, stride=2)
        self.res1 = ResidualBlock(rng, c1)
        self.down2 = ConvUnit(rng, c1, c2, stride=2)
        self.res2 = ResidualBlock(rng, c2)
        self.down3 = ConvUnit(rng, c2, c3, stride=2)
        self.res3 = ResidualBlock(rng, c3)
        self.coarse_head = ConvUnit(rng, c3, c_coarse)
        self.stage_widths = stage_widths
        self.c_coarse = c_coarse

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in ("down1", "res1", "down2", "res2", "down3", "res3", "coarse_head"):
            out.update(getattr(self, name).params(f"backbone.{name}"))
        return out

    def norm_layers(self):
        for name in ("down1", "down2", "down3", "coarse_head"):
            yield f"backbone.{name}.norm", getattr(self, name).norm
        for name in ("res1", "res2", "res3"):
            block = getattr(self, name)
            yield f"backbone.{name}.unit1.norm", block.unit1.norm
            yield f"backbone.{name}.unit2.norm", block.unit2.norm


def extract_pyramid(image: Tensor, weights: BackboneWeights) -> FeaturePyramid:
    """Run the conv stack on a (1, H, W) image with H, W divisible by 8."""
    if image.data.ndim != 3 or image.shape[0] != 1:
        raise ValueError(f"expected image of shape (1, H, W), got {image.shape}")
    _, h, w = image.shape
    if h % 8 or w % 8:
        raise ValueError(f"image dims must be divisible by 8, got {h}x{w}")
    f_half = weights.res1(weights.down1(image))
    f_quarter = weights.res2(weights.down2(f_half))
    f_eighth = weights.res3(weights.down3(f_quarter))
    f_coarse = weights.coarse_head(f_eighth)
    return FeaturePyramid(f_half=f_half, f_quarter=f_quarter,
                          f_eighth=f_eighth, f_coarse=f_coarse)


class FusionWeights:
    """Per-scale 1x1 projections, the fuse conv, and the residual projection."""

    def __init__(self, rng: np.random.Generator, stage_widths: tuple[int, int, int],
                 c_fine: int):
        c1, c2, c3 = stage_widths

        def proj(c_in: int, c_out: int) -> tuple[Tensor, Tensor]:
            w = Tensor(dc.kaiming_normal(rng, (c_out, c_in, 1, 1), c_in), requires_grad=True)
            b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
            return w, b

        self.proj_half = proj(c1, c_fine)
        self.proj_quarter = proj(c2, c_fine)
        self.proj_eighth = proj(c3, c_fine)
        self.fuse = proj(3 * c_fine, c_fine)
        self.fuse_norm = NormLayer(c_fine)
        self.residual_proj = proj(c_fine, c_fine)
        self.c_fine = c_fine

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name in ("proj_half", "proj_quarter", "proj_eighth", "fuse", "residual_proj"):
            w, b = getattr(self, name)
            out[f"fusion.{name}.weight"] = w
            out[f"fusion.{name}.bias"] = b
        out.update({f"fusion.fuse_norm.{k}": v for k, v in self.fuse_norm.params().items()})
        return out

    def norm_layers(self):
        yield "fusion.fuse_norm", self.fuse_norm


def _conv1x1(x: Tensor, wb: tuple[Tensor, Tensor]) -> Tensor:
    return dc.convolve_2d(x, wb[0], wb[1])


def spatial_fusion(p: FeaturePyramid, w: FusionWeights) -> Tensor:
    """Fuse the pyramid to fine features at 1/8 resolution.

    fused path: concat of pooled per-scale projections -> 1x1 conv -> norm
    -> ReLU; residual path: separate 1x1 conv on the half-scale projection,
    pooled to 1/8, added elementwise.  The result is stored on p.f_fine.
    """
    ph = _conv1x1(p.f_half, w.proj_half)
    pq = _conv1x1(p.f_quarter, w.proj_quarter)
    pe = _conv1x1(p.f_eighth, w.proj_eighth)
    if not (ph.shape[0] == pq.shape[0] == pe.shape[0] == w.c_fine):
        raise ValueError("projection width mismatch")
    aligned = dc.concat([dc.avg_pool_2d(ph, 4), dc.avg_pool_2d(pq, 2), pe], axis=0)
    fused = dc.relu(w.fuse_norm(_conv1x1(aligned, w.fuse)))
    residual = dc.avg_pool_2d(_conv1x1(ph, w.residual_proj), 4)
    p.f_fine = fused + residual
    return p.f_fine


def sample_fine_descriptors(f_fine_a: Tensor, f_fine_b: Tensor,
                            cells_a: np.ndarray, cells_b: np.ndarray) -> Tensor:
    """Concatenate per-match descriptor columns of A and B; output (M, 2d)."""
    ca, ha, wa = f_fine_a.shape
    cb, hb, wb = f_fine_b.shape
    idx_a = np.asarray(cells_a, dtype=np.int64)
    idx_b = np.asarray(cells_b, dtype=np.int64)
    if idx_a.size and (idx_a.min() < 0 or idx_a.max() >= ha * wa):
        raise ValueError("match index out of range for image A grid")
    if idx_b.size and (idx_b.min() < 0 or idx_b.max() >= hb * wb):
        raise ValueError("match index out of range for image B grid")
    flat_a = dc.transpose(dc.reshape(f_fine_a, (ca, ha * wa)))
    flat_b = dc.transpose(dc.reshape(f_fine_b, (cb, hb * wb)))
    if idx_a.size == 0:
        return Tensor(np.zeros((0, ca + cb), dtype=f_fine_a.dtype))
    da = dc.index_select(flat_a, idx_a)
    db = dc.index_select(flat_b, idx_b)
    return dc.concat([da, db], axis=1)
