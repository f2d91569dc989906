"""Serializable run configuration: every knob a training/evaluation run
needs, round-trippable through JSON so a run can be reproduced exactly."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Optional


@dataclasses.dataclass
class LoraSettings:
    enabled: bool = False
    targets: object = ("attn.q", "attn.v")  # substrings or the string "all"
    rank: int = 4
    alpha: Optional[float] = None  # defaults to 2*rank at injection
    base_checkpoint: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.targets, list):
            self.targets = tuple(self.targets)


@dataclasses.dataclass
class OptimSettings:
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclasses.dataclass
class RunConfig:
    model: str = "nano"
    model_overrides: dict = dataclasses.field(default_factory=dict)
    data_roots: list[str] = dataclasses.field(default_factory=list)
    eval_source: Optional[str] = None
    dedup_mode: str = "exact"
    train_fraction: float = 1.0
    augment: bool = False
    epochs: int = 10
    max_steps: Optional[int] = None
    batch_size: int = 8
    seed: int = 0
    image_size: Optional[int] = None
    eval_split: str = "test"
    threshold: float = 0.5
    out_dir: str = "runs/run"
    lora: LoraSettings = dataclasses.field(default_factory=LoraSettings)
    optim: OptimSettings = dataclasses.field(default_factory=OptimSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        if "lora" in d and isinstance(d["lora"], dict):
            d["lora"] = LoraSettings(**d["lora"])
        if "optim" in d and isinstance(d["optim"], dict):
            d["optim"] = OptimSettings(**d["optim"])
        return RunConfig(**d)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(text))

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)
