"""Run configuration: one JSON document of named keys, every key defaulted here."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import GeneratorConfig

ABLATIONS = ("edges", "slgc", "otag")


@dataclass
class RunConfig:
    seed: int = 0
    knn: int = 10
    slgc_layers: int = 1
    quintuplets: bool = True
    hidden: int = 256
    epochs: int = 30
    batch_size: int = 12
    lr: float = 1e-4
    weight_decay: float = 1e-5
    embeddings: str | None = None
    ablate: list[str] = field(default_factory=list)
    val_percent: int = 20
    max_len: int = 30
    data: GeneratorConfig = field(default_factory=GeneratorConfig)

    def validate(self) -> None:
        for name in ("knn", "slgc_layers", "hidden", "epochs", "batch_size", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if not 0 <= self.val_percent < 100:
            raise ValueError("val_percent must be in [0, 100)")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation(s) {bad}; choose from {list(ABLATIONS)}")
        self.data.validate()

    # "edges" removes semantic edges and OTAG (the plain baseline), "slgc"
    # removes semantic edges, "otag" removes OTAG; switches combine by union
    @property
    def use_edges(self) -> bool:
        return not ({"edges", "slgc"} & set(self.ablate))

    @property
    def use_otag(self) -> bool:
        return not ({"edges", "otag"} & set(self.ablate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["classes"] = {k: list(v) for k, v in self.data.classes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        data = d.pop("data", {}) or {}
        dknown = {f.name for f in fields(GeneratorConfig)}
        dunknown = set(data) - dknown
        if dunknown:
            raise ValueError(f"unknown data config key(s): {sorted(dunknown)}")
        if "classes" in data:
            data["classes"] = {k: tuple(v) for k, v in data["classes"].items()}
        cfg = cls(**d, data=GeneratorConfig(**data))
        cfg.ablate = list(cfg.ablate)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_dict(json.loads(Path(path).read_text()))
