"""Run configuration: one versioned JSON document drives every stage.

Defaults follow the quantization protocol: candidate bit-widths bracket the
nominal width ({2,3,4} for W3 runs, {3,4,8} for W4), and the "auto" budget
resolves to nominal_bits * sum(pack parameter counts) so mixed-precision runs
are memory-equivalent to uniform ones.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigError

CONFIG_VERSION = 1

_DEFAULT_CANDIDATES = {3: [2, 3, 4], 4: [3, 4, 8]}


class DatasetSpec(BaseModel):
    kind: str = "gaussian-blobs"
    n: int = 256
    test_n: int = 2048
    seed: int = 11
    class_count: int | None = None
    dim: int = 2


class ScoreSettings(BaseModel):
    sigma: float | None = None
    sigma_rel: float = 0.01
    num_samples: int = 4000
    items: int = 16


class PackingSettings(BaseModel):
    strategy: Literal["hada", "random", "fixed", "none"] = "hada"
    target_packs: int | None = None  # random strategy; None -> match the hada pack count
    fixed_size: int = 2
    max_pack_size: int | None = None


class ReconstructionSettings(BaseModel):
    iterations: int = 500
    batch_size: int = 32
    base_lr: float = 4e-5
    act_scale_lr_mult: float = 0.01
    input_source: Literal["quantized-upstream", "full-precision"] = "quantized-upstream"
    log_interval: int = 25


class TrainSettings(BaseModel):
    arch: str = "resmlp-8x32"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 3e-3
    min_accuracy: float = 0.95
    train_n: int = 2048
    train_seed: int = 7


class RunConfig(BaseModel):
    version: int = CONFIG_VERSION
    model: str = ""                       # path to a model document
    dataset: Union[DatasetSpec, str] = Field(default_factory=DatasetSpec)
    weight_bits: int = 3
    act_bits: int = 3
    mixed_precision: bool = False
    candidates: list[int] | None = None   # None -> bracketing default
    budget: Union[int, Literal["auto"]] = "auto"
    packing: PackingSettings = Field(default_factory=PackingSettings)
    score: ScoreSettings = Field(default_factory=ScoreSettings)
    reconstruction: ReconstructionSettings = Field(default_factory=ReconstructionSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    seed: int = 0
    out_dir: str = "runs/out"

    def resolved_candidates(self) -> list[int]:
        """Candidate widths bracket the nominal one (also sets the stem/head width)."""
        if self.candidates is not None:
            return sorted(set(int(k) for k in self.candidates))
        k = self.weight_bits
        if k >= 32:  # bypass runs
            return [k]
        if k in _DEFAULT_CANDIDATES:
            return list(_DEFAULT_CANDIDATES[k])
        return sorted({max(2, k - 1), k, k + 1})

    def resolved_budget(self, total_params: int) -> int:
        if self.budget == "auto":
            return self.weight_bits * total_params
        return int(self.budget)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}")
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}; expected {CONFIG_VERSION}")
    return cfg


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply KEY=VALUE overrides with dotted paths; values parse as JSON."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VALUE")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare strings are allowed
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends through a non-object")
        node[parts[-1]] = parsed
    return raw
