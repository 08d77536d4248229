"""Run configuration and its stable fingerprint.

The fingerprint hashes every field that affects model structure or
training math. Dataset/output paths are deliberately excluded so a
checkpoint stays loadable after files move. Checkpoints and evaluation
reports embed the fingerprint and refuse to mix configs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

__all__ = ["RunConfig"]

_PATH_FIELDS = ("train_dataset", "eval_dataset", "out_dir")


@dataclass
class RunConfig:
    # prediction grid
    grid_rows: int = 32
    grid_cols: int = 32
    resolution_m: float = 1.0
    # cameras / images
    image_size: int = 64
    # backbone channel widths: three stem stages then the two downsample stages;
    # feature taps sit at indices 2, 3, 4 (strides 8, 16, 32 of the input)
    backbone_widths: tuple = (16, 32, 48, 64, 80)
    # per-scale token/key dims, finest first (the full-scale analog is {256,128,64})
    proj_dims: tuple = (64, 48, 32)
    query_channels: int = 32
    history_widths: tuple = (16, 32)
    attention_heads: int = 1
    decoder_width: int = 32
    # loss
    smooth_l1_beta: float = 1.0
    mu_grad: float = 1.0
    lambda_tc: float = 0.05
    gamma_tv: float = 0.01
    # optimizer
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"  # or "constant"
    lr_min_factor: float = 0.05  # cosine floor as a fraction of learning_rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0  # 0 disables clipping
    train_steps: int = 2000
    checkpoint_every: int = 500
    log_every: int = 25
    # seeds
    param_seed: int = 0
    eval_sdr_seed: int = 0
    eval_sdr_pairs: int = 100
    eval_sdr_tau: float = 0.1
    # ablation switches: use_ope False falls back to the camera-only encoding,
    # use_history False drops the previous-prediction query channels
    use_ope: bool = True
    use_history: bool = True
    use_tc_loss: bool = True
    # paths (excluded from the fingerprint)
    train_dataset: str | None = None
    eval_dataset: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        self.backbone_widths = tuple(self.backbone_widths)
        self.proj_dims = tuple(self.proj_dims)
        self.history_widths = tuple(self.history_widths)
        if len(self.backbone_widths) != 5:
            raise ConfigurationError("backbone_widths needs exactly 5 stage widths")
        if len(self.proj_dims) != 3:
            raise ConfigurationError("proj_dims needs exactly 3 per-scale dims")
        if len(self.history_widths) != 2:
            raise ConfigurationError("history_widths needs exactly 2 conv widths")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")
        for d in self.proj_dims:
            if d % self.attention_heads != 0:
                raise ConfigurationError(
                    f"proj dim {d} not divisible by {self.attention_heads} heads"
                )
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def effective_lambda_tc(self) -> float:
        return self.lambda_tc if self.use_tc_loss else 0.0

    def canonical(self) -> dict:
        doc = dataclasses.asdict(self)
        for k in _PATH_FIELDS:
            doc.pop(k, None)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc

    def fingerprint(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_json(self, path: str | Path) -> None:
        doc = dataclasses.asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys in {path}: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)
