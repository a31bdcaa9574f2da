"""Run configuration: one flat key space, JSON file + flag overrides.

Unknown keys are rejected so typos fail loudly. Every command echoes the
effective configuration into its output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 = logical core count
    budget: int = 64
    latent_dim: int = 16
    grid_size: int = 16
    curve_samples: int = 32
    cloud_points: int = 2048
    fpe_bands: int = 8
    lpe_k: int = 8
    # encoder/decoder
    vae_dim: int = 128
    vae_heads: int = 4
    vae_enc_layers: int = 4
    vae_dec_layers: int = 4
    vae_cloud_points: int = 512
    vae_lr: float = 1e-4
    vae_batch: int = 16
    vae_steps: int = 6000
    kl_weight: float = 2e-6
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # flow
    flow_dim: int = 128
    flow_layers: int = 6
    flow_heads: int = 4
    flow_lr: float = 1e-4
    flow_batch: int = 16
    flow_steps: int = 4000
    ema_decay: float = 0.9999
    dir_loss_weight: float = 0.1
    euler_steps: int = 50
    inpaint_fix_fraction: float = 0.2
    tau_cluster: float = 0.0  # 0 = derive from training latents
    # evaluation
    tau_novelty: float = 0.03
    tau_unique: float = 0.015
    eval_gen: int = 300
    eval_ref: int = 100
    eval_runs: int = 3
    metric_cloud_points: int = 2000
    # split
    split_train: float = 0.9
    split_test: float = 0.05
    split_val: float = 0.05

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - cls.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def override(self, **kwargs) -> "RunConfig":
        unknown = sorted(set(kwargs) - self.field_names())
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        clean = {k: v for k, v in kwargs.items() if v is not None}
        return dataclasses.replace(self, **clean)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
