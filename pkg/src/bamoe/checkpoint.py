"""JSON checkpoints: a header (format version, config, step) plus one entry
per named parameter.  Floats are written with ``repr`` precision, so a
save/load/save cycle reproduces the file byte for byte."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ModelParams
from .config import TrainConfig
from .errors import CompatibilityError, ParseError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    step: int = 0
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        doc = {
            "format_version": self.version,
            "step": self.step,
            "config": self.config.to_dict(),
            "params": [
                {"name": p.name, "shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
                for p in self.params
            ],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
            version = doc["format_version"]
            if version != FORMAT_VERSION:
                raise CompatibilityError(f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
            params = ModelParams()
            for entry in doc["params"]:
                shape = tuple(entry["shape"])
                params.add(entry["name"], np.asarray(entry["data"], dtype=np.float64).reshape(shape))
            return cls(params, TrainConfig.from_dict(doc["config"]), int(doc["step"]), version)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed checkpoint: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text())
