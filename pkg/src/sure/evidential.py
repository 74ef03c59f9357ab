"""Trustworthy sub-cell offset regression with normal-inverse-gamma heads.

Each axis gets its own two-layer 1-D conv head producing N spatial logits
plus three raw scalars.  Soft-argmax over the logits gives the offset in
[-0.5, 0.5]; shifted-softplus transforms give the remaining posterior
parameters, from which predictive moments split uncertainty into an
aleatoric and an epistemic part.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .coarse import CoarseMatchSet
from .diffcore import NumericError, Tensor
from .geometry import cell_centers

PARAM_FLOOR = 1e-6
LOG_FLOOR = 1e-30


@dataclass
class NigParams:
    """Normal-inverse-gamma posterior for one match along one axis.

    offset is the predicted sub-cell offset (the posterior mean), evidence
    weighs the mean prior, and shape/scale parameterize the inverse-gamma
    variance prior.
    """

    offset: float
    evidence: float
    shape: float
    scale: float

    def __post_init__(self):
        if not -0.5 <= self.offset <= 0.5:
            raise ValueError(f"offset {self.offset} outside [-0.5, 0.5]")
        if self.evidence <= 0 or self.scale <= 0 or self.shape <= 1:
            raise ValueError(
                f"invalid posterior parameters: evidence={self.evidence}, "
                f"shape={self.shape}, scale={self.scale}")


@dataclass
class HeadOutput:
    logits: Tensor          # (M, N)
    raw_evidence: Tensor    # (M,)
    raw_shape: Tensor       # (M,)
    raw_scale: Tensor       # (M,)


@dataclass
class MatchWithUncertainty:
    cell_a: int
    cell_b: int
    pa: tuple[float, float]
    pb: tuple[float, float]
    confidence: float
    u_a: float
    u_e: float


class RegressionHead:
    """Two pointwise 1-D conv layers with a ReLU between them."""

    def __init__(self, rng: np.random.Generator, in_width: int, out_width: int,
                 hidden: int | None = None):
        hidden = in_width if hidden is None else hidden
        self.w1 = Tensor(dc.kaiming_normal(rng, (hidden, in_width, 1), in_width),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor(dc.kaiming_normal(rng, (out_width, hidden, 1), hidden),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(out_width, dtype=np.float32), requires_grad=True)
        self.in_width = in_width
        self.out_width = out_width

    def __call__(self, fused: Tensor) -> Tensor:
        m, d = fused.shape
        if d != self.in_width:
            raise ValueError(f"descriptor width {d} != head input width {self.in_width}")
        if m == 0:
            return Tensor(np.zeros((0, self.out_width), dtype=fused.dtype))
        seq = dc.reshape(dc.transpose(fused), (1, d, m))
        hid = dc.relu(dc.convolve_1d(seq, self.w1, self.b1))
        out = dc.convolve_1d(hid, self.w2, self.b2)
        return dc.transpose(dc.reshape(out, (self.out_width, m)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def _slice_cols(t: Tensor, cols: np.ndarray) -> Tensor:
    return dc.transpose(dc.index_select(dc.transpose(t), cols))


def split_head_output(raw: Tensor, bins: int) -> HeadOutput:
    """Split an (M, N+3) head output into logits and the three raw scalars."""
    if raw.shape[0] and raw.shape[1] != bins + 3:
        raise ValueError(f"head output width {raw.shape[1]} != bins + 3 = {bins + 3}")
    logits = _slice_cols(raw, np.arange(bins))
    tail = _slice_cols(raw, np.arange(bins, bins + 3))
    flat = dc.transpose(tail)  # (3, M)
    return HeadOutput(
        logits=logits,
        raw_evidence=dc.index_select(flat, np.array([0])).reshape(-1),
        raw_shape=dc.index_select(flat, np.array([1])).reshape(-1),
        raw_scale=dc.index_select(flat, np.array([2])).reshape(-1),
    )


def head_forward(fused: Tensor, head_x: RegressionHead,
                 head_y: RegressionHead, bins: int) -> tuple[HeadOutput, HeadOutput]:
    """Run both axis heads on the same fused descriptors."""
    return (split_head_output(head_x(fused), bins),
            split_head_output(head_y(fused), bins))


def bin_centers(bins: int, dtype=np.float32) -> np.ndarray:
    return ((np.arange(bins) + 0.5) / bins - 0.5).astype(dtype)


def soft_argmax(logits: Tensor) -> Tensor:
    """Expected bin center under the softmax distribution; in [-0.5, 0.5]."""
    m, n = logits.shape
    if n < 2:
        raise ValueError("soft_argmax needs at least 2 bins")
    probs = dc.apply_softmax(logits, axis=1)
    centers = Tensor(bin_centers(n, logits.dtype)[None, :])
    return (probs * centers).sum(axis=1)


def nig_from_raw(raw_evidence: Tensor, raw_shape: Tensor,
                 raw_scale: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Positivity-preserving transforms: evidence > 0, shape > 1, scale > 0."""
    evidence = dc.apply_softplus(raw_evidence) + PARAM_FLOOR
    shape = dc.apply_softplus(raw_shape) + (1.0 + PARAM_FLOOR)
    scale = dc.apply_softplus(raw_scale) + PARAM_FLOOR
    return evidence, shape, scale


def predictive_moments(p: NigParams) -> tuple[float, float, float]:
    """Posterior mean plus aleatoric and epistemic variances."""
    if p.shape <= 1:
        raise ValueError("predictive moments need shape > 1")
    u_a = p.scale / (p.shape - 1.0)
    u_e = p.scale / (p.evidence * (p.shape - 1.0))
    return p.offset, u_a, u_e


def _checked_log(t: Tensor, context: str) -> Tensor:
    if np.any(t.data < LOG_FLOOR):
        bad = float(t.data.min())
        raise NumericError(f"log argument {bad} below floor in {context}")
    return dc.log(t)


def nll_terms(offset: Tensor, evidence: Tensor, shape: Tensor, scale: Tensor,
              targets: np.ndarray) -> Tensor:
    """Per-match negative log evidence of the posterior at the targets."""
    y = Tensor(np.asarray(targets, dtype=offset.dtype))
    theta = 2.0 * scale * (evidence + 1.0)
    resid = y - offset
    inner = resid * resid * evidence + theta
    return (0.5 * (math.log(math.pi) - _checked_log(evidence, "evidence"))
            - shape * _checked_log(theta, "theta")
            + (shape + 0.5) * _checked_log(inner, "residual term")
            + dc.lgamma(shape) - dc.lgamma(shape + 0.5))


def reg_terms(offset: Tensor, evidence: Tensor, shape: Tensor,
              targets: np.ndarray) -> Tensor:
    """Per-match error-scaled total evidence |y - offset| * (2*evidence + shape)."""
    y = Tensor(np.asarray(targets, dtype=offset.dtype))
    return dc.absolute(y - offset) * (2.0 * evidence + shape)


def _params_to_tensors(params: list[NigParams]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    arr = np.array([[p.offset, p.evidence, p.shape, p.scale] for p in params],
                   dtype=np.float64)
    return (Tensor(arr[:, 0]), Tensor(arr[:, 1]), Tensor(arr[:, 2]), Tensor(arr[:, 3]))


def evidential_nll(p: NigParams, y_star: float) -> float:
    """Scalar negative log evidence for one match (64-bit path)."""
    if not -0.5 <= y_star <= 0.5:
        raise ValueError(f"target {y_star} outside [-0.5, 0.5]")
    o, e, s, r = _params_to_tensors([p])
    value = float(nll_terms(o, e, s, r, np.array([y_star], dtype=np.float64)).data[0])
    if not math.isfinite(value):
        raise NumericError(f"non-finite negative log evidence for {p}")
    return value


def evidential_reg(p: NigParams, y_star: float) -> float:
    """Scalar evidence regularizer for one match."""
    o, e, s, _ = _params_to_tensors([p])
    return float(reg_terms(o, e, s, np.array([y_star], dtype=np.float64)).data[0])


def fine_loss(params: list[NigParams], y_stars, zeta: float) -> tuple[float, int]:
    """Mean of nll + zeta * regularizer over matches; (0.0, 0) when empty."""
    targets = np.asarray(y_stars, dtype=np.float64)
    if len(params) != targets.size:
        raise ValueError("params and targets differ in length")
    if zeta < 0:
        raise ValueError("zeta must be non-negative")
    if not params:
        return 0.0, 0
    o, e, s, r = _params_to_tensors(params)
    total = nll_terms(o, e, s, r, targets) + zeta * reg_terms(o, e, s, targets)
    return float(total.data.mean()), len(params)


def aggregate_uncertainty(ux: tuple[float, float], uy: tuple[float, float]) -> tuple[float, float]:
    """Average aleatoric and epistemic parts across the two axes."""
    if min(*ux, *uy) < 0:
        raise ValueError("uncertainties must be non-negative")
    return 0.5 * (ux[0] + uy[0]), 0.5 * (ux[1] + uy[1])


def nearest_rank_quantile(values: np.ndarray, q: float) -> float:
    """Nearest-rank quantile: smallest value with rank >= ceil(q * n)."""
    if not 0.0 < q <= 1.0:
        raise ValueError("quantile level must lie in (0, 1]")
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(q * v.size)), 1)
    return float(v[rank - 1])


def filter_by_uncertainty(matches: list[MatchWithUncertainty], q_a: float,
                          q_e: float, mode: str = "quantile") -> list[MatchWithUncertainty]:
    """Drop matches whose uncertainty exceeds the batch thresholds.

    Thresholds are the q_a / q_e nearest-rank quantiles of this batch's
    uncertainties (mode="quantile") or q_a / q_e themselves
    (mode="absolute").  Comparison is strict, so a degenerate batch with
    identical uncertainties is fully retained.  Order is preserved.
    """
    if mode not in ("quantile", "absolute"):
        raise ValueError(f"unknown filter mode {mode!r}")
    if not matches:
        return []
    if mode == "quantile":
        tau_a = nearest_rank_quantile(np.array([m.u_a for m in matches]), q_a)
        tau_e = nearest_rank_quantile(np.array([m.u_e for m in matches]), q_e)
    else:
        tau_a, tau_e = float(q_a), float(q_e)
    return [m for m in matches if not (m.u_a > tau_a or m.u_e > tau_e)]


def refine_matches(matches: CoarseMatchSet, offsets_x: np.ndarray,
                   offsets_y: np.ndarray, stride: float,
                   uncertainties_x: np.ndarray | None = None,
                   uncertainties_y: np.ndarray | None = None) -> list[MatchWithUncertainty]:
    """Shift each match's B-side point by stride-scaled offsets.

    uncertainties_{x,y} are optional (M, 2) arrays of per-axis (aleatoric,
    epistemic) values; omitted axes contribute zero.
    """
    ox = np.asarray(offsets_x, dtype=np.float64)
    oy = np.asarray(offsets_y, dtype=np.float64)
    if np.any(np.abs(ox) > 0.5 + 1e-6) or np.any(np.abs(oy) > 0.5 + 1e-6):
        raise ValueError("offsets must lie in [-0.5, 0.5]")
    ua_x = np.zeros(len(matches)) if uncertainties_x is None else uncertainties_x[:, 0]
    ue_x = np.zeros(len(matches)) if uncertainties_x is None else uncertainties_x[:, 1]
    ua_y = np.zeros(len(matches)) if uncertainties_y is None else uncertainties_y[:, 0]
    ue_y = np.zeros(len(matches)) if uncertainties_y is None else uncertainties_y[:, 1]

    centers = cell_centers(matches.grid, stride)
    out: list[MatchWithUncertainty] = []
    for m in range(len(matches)):
        ca, cb = int(matches.cells_a[m]), int(matches.cells_b[m])
        pa = (float(centers[ca, 0]), float(centers[ca, 1]))
        pb = (float(centers[cb, 0] + stride * ox[m]),
              float(centers[cb, 1] + stride * oy[m]))
        u_a, u_e = aggregate_uncertainty((ua_x[m], ue_x[m]), (ua_y[m], ue_y[m]))
        out.append(MatchWithUncertainty(cell_a=ca, cell_b=cb, pa=pa, pb=pb,
                                        confidence=float(matches.confidence[m]),
                                        u_a=u_a, u_e=u_e))
    return out
