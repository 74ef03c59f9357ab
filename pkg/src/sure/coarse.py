"""Coarse grid matching: attention enhancement, dual softmax, MNN filtering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MAX_COARSE_CELLS = 4096


@dataclass
class CoarseMatchSet:
    """Mutually-nearest coarse matches above the confidence threshold."""

    cells_a: np.ndarray        # (M,) flat indices into A's grid
    cells_b: np.ndarray        # (M,) flat indices into B's grid
    confidence: np.ndarray     # (M,) in [0, 1]
    grid: tuple[int, int]

    def __len__(self) -> int:
        return int(self.cells_a.size)


class AttentionLayer:
    """Single-head scaled dot-product attention with residual output."""

    def __init__(self, rng: np.random.Generator, width: int):
        def proj() -> Tensor:
            return Tensor(dc.kaiming_normal(rng, (width, width), width), requires_grad=True)

        self.wq, self.wk, self.wv, self.wo = proj(), proj(), proj(), proj()
        self.width = width

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        q = queries @ self.wq
        k = context @ self.wk
        v = context @ self.wv
        logits = (q @ k.T) * (1.0 / np.sqrt(self.width))
        attn = dc.apply_softmax(logits, axis=1)
        return queries + (attn @ v) @ self.wo

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
                f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}


class AttentionWeights:
    """One self-attention and one cross-attention layer, shared across images."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.self_attn = AttentionLayer(rng, width)
        self.cross_attn = AttentionLayer(rng, width)

    def params(self) -> dict[str, Tensor]:
        return {**self.self_attn.params("coarse.self_attn"),
                **self.cross_attn.params("coarse.cross_attn")}


def enhance_features(fa: Tensor, fb: Tensor, w: AttentionWeights) -> tuple[Tensor, Tensor]:
    """Self then cross attention over flattened coarse grids.

    Maps must share a shape; cells are limited to MAX_COARSE_CELLS (tile
    larger inputs upstream).  Returns maps reshaped to the input layout.
    """
    if fa.shape != fb.shape:
        raise ValueError(f"feature maps differ in shape: {fa.shape} vs {fb.shape}")
    c, h, wd = fa.shape
    if h * wd > MAX_COARSE_CELLS:
        raise ValueError(f"{h * wd} coarse cells exceed the {MAX_COARSE_CELLS} guard; tile the input")
    seq_a = dc.transpose(dc.reshape(fa, (c, h * wd)))
    seq_b = dc.transpose(dc.reshape(fb, (c, h * wd)))
    sa = w.self_attn(seq_a, seq_a)
    sb = w.self_attn(seq_b, seq_b)
    ca = w.cross_attn(sa, sb)
    cb = w.cross_attn(sb, sa)
    out_a = dc.reshape(dc.transpose(ca), (c, h, wd))
    out_b = dc.reshape(dc.transpose(cb), (c, h, wd))
    return out_a, out_b


def similarity_matrix(fa: Tensor, fb: Tensor, tau: float) -> Tensor:
    """Temperature-scaled inner products over flattened cells."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    c = fa.shape[0]
    seq_a = dc.transpose(dc.reshape(fa, (c, -1)))
    seq_b = dc.transpose(dc.reshape(fb, (c, -1)))
    return (seq_a @ seq_b.T) * (1.0 / tau)


def dual_softmax(s: Tensor) -> tuple[Tensor, Tensor]:
    """Row-normalized and column-normalized match probabilities."""
    return dc.apply_softmax(s, axis=1), dc.apply_softmax(s, axis=0)


def mnn_filter(p_ab: np.ndarray, p_ba: np.ndarray, tau_c: float,
               grid: tuple[int, int]) -> CoarseMatchSet:
    """Keep mutual argmax pairs whose confidence p_ab * p_ba reaches tau_c.

    Argmax ties break toward the lowest index.
    """
    if not 0.0 <= tau_c < 1.0:
        raise ValueError("tau_c must lie in [0, 1)")
    pab = np.asarray(p_ab)
    pba = np.asarray(p_ba)
    best_b = pab.argmax(axis=1)                 # per row of A
    best_a = pba.argmax(axis=0)                 # per column of B
    rows = np.arange(pab.shape[0])
    mutual = best_a[best_b] == rows
    conf = pab[rows, best_b] * pba[rows, best_b]
    keep = mutual & (conf >= tau_c)
    return CoarseMatchSet(cells_a=rows[keep].astype(np.int64),
                          cells_b=best_b[keep].astype(np.int64),
                          confidence=conf[keep].astype(np.float64),
                          grid=grid)
