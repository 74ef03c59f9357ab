"""Run configuration: training hyperparameters plus ablation switches."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

HEAD_MODES = ("direct_l2", "coord_l2", "coord_kl", "evidential")
FILTER_MODES = ("quantile", "absolute")
FINE_SUPERVISION_MODES = ("teacher_forced", "predicted")


@dataclass
class RunConfig:
    # optimization
    lr: float = 2e-3
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    warmup_steps: int = 100
    # losses
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_c: float = 1.0
    lambda_f: float = 0.25
    zeta: float = 1.0
    # matching
    tau: float = 0.1
    tau_c: float = 0.2
    bins: int = 16
    # filtering
    q_a: float = 0.95
    q_e: float = 0.95
    filter_mode: str = "quantile"
    # architecture
    image_size: int = 64
    c_coarse: int = 64
    c_fine: int = 64
    # ablation switches
    head_mode: str = "evidential"
    fusion_enabled: bool = True
    filtering_enabled: bool = True
    fine_supervision: str = "teacher_forced"
    focal_negatives: bool = False
    kl_sigma_bins: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if self.image_size % 8:
            raise ValueError(f"image_size {self.image_size} not divisible by 8")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.filter_mode not in FILTER_MODES:
            raise ValueError(f"filter_mode must be one of {FILTER_MODES}")
        if self.fine_supervision not in FINE_SUPERVISION_MODES:
            raise ValueError(f"fine_supervision must be one of {FINE_SUPERVISION_MODES}")
        if not 0 <= self.tau_c < 1:
            raise ValueError("tau_c must lie in [0, 1)")
        if self.tau <= 0 or self.bins < 2:
            raise ValueError("tau must be positive and bins >= 2")

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        return (max(self.c_fine // 4, 4), max(self.c_fine // 2, 8), self.c_fine)

    def to_json(self) -> str:
        """Canonical serialization: sorted keys, compact separators."""
        return json.dumps(dataclasses.asdict(self), sort_keys=True,
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**raw)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]
