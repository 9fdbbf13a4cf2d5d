"""JSON checkpoints: config, vocabulary maps, and bitwise-exact parameters.

Parameters are stored as decimal float lists; python's shortest-roundtrip
float repr makes the save/load cycle bitwise exact for float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterStore
from .basemodel import Vocab
from .model import ModelConfig, TimeStreamModel
from .ode import SolverConfig

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint load/save problems."""


class CheckpointFormatError(CheckpointError):
    """Malformed JSON or missing keys."""


class CheckpointVersionError(CheckpointError):
    """Unsupported format_version."""


class CheckpointShapeError(CheckpointError):
    """Declared shape disagrees with values or with the model layout."""


@dataclass
class TrainConfig:
    base_kind: str = "dnn"
    dynamics: str = "none"  # none | simple | complex
    solver: SolverConfig = field(default_factory=SolverConfig)
    guide_weight: float = 0.5
    guide_mode: str = "bpr"
    adaptive_time: bool = True
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.001
    seed: int = 0

    def __post_init__(self):
        # a model config validates the shared enum fields
        self.model_config()
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            base_kind=self.base_kind,
            dynamics=self.dynamics,
            solver=self.solver,
            guide_weight=self.guide_weight,
            guide_mode=self.guide_mode,
            adaptive_time=self.adaptive_time,
        )

    def to_dict(self) -> dict:
        return {
            "base_kind": self.base_kind,
            "dynamics": self.dynamics,
            "solver": {
                "method": self.solver.method,
                "substeps_per_unit": self.solver.substeps_per_unit,
                "rtol": self.solver.rtol,
                "atol": self.solver.atol,
                "max_steps": self.solver.max_steps,
            },
            "guide_weight": self.guide_weight,
            "guide_mode": self.guide_mode,
            "adaptive_time": self.adaptive_time,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        try:
            solver = SolverConfig(**obj["solver"])
            return cls(
                base_kind=obj["base_kind"],
                dynamics=obj["dynamics"],
                solver=solver,
                guide_weight=float(obj["guide_weight"]),
                guide_mode=obj["guide_mode"],
                adaptive_time=bool(obj["adaptive_time"]),
                epochs=int(obj["epochs"]),
                batch_size=int(obj["batch_size"]),
                learning_rate=float(obj["learning_rate"]),
                seed=int(obj["seed"]),
            )
        except (KeyError, TypeError) as e:
            raise CheckpointFormatError(f"bad config block: {e}") from None


@dataclass
class Checkpoint:
    format_version: int
    config: TrainConfig
    vocab: Vocab
    parameters: dict  # path -> float64 ndarray

    def has_timestream_params(self) -> bool:
        return any(path.startswith(("ts.", "dyn.")) for path in self.parameters)


def checkpoint_from_model(model: TimeStreamModel, config: TrainConfig) -> Checkpoint:
    params = {path: tensor.data.copy() for path, tensor in model.store.items()}
    return Checkpoint(FORMAT_VERSION, config, model.vocab, params)


def save_checkpoint(ckpt: Checkpoint, path):
    doc = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "vocab": {
            "item": ckpt.vocab.item_index,
            "category": ckpt.vocab.category_index,
            "user": ckpt.vocab.user_index,
        },
        "parameters": {
            p: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
            for p, a in ckpt.parameters.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"malformed checkpoint JSON: {e}") from None

    try:
        version = doc["format_version"]
        config_block = doc["config"]
        vocab_block = doc["vocab"]
        param_block = doc["parameters"]
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"checkpoint missing section: {e}") from None

    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format_version {version}, expected {FORMAT_VERSION}")

    config = TrainConfig.from_dict(config_block)
    try:
        vocab = Vocab(
            item_index={k: int(v) for k, v in vocab_block["item"].items()},
            category_index={k: int(v) for k, v in vocab_block["category"].items()},
            user_index={k: int(v) for k, v in vocab_block["user"].items()},
        )
    except (KeyError, TypeError, AttributeError) as e:
        raise CheckpointFormatError(f"bad vocab block: {e}") from None

    parameters = {}
    for p, entry in param_block.items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"bad parameter entry {p!r}: {e}") from None
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if values.size != expected:
            raise CheckpointShapeError(
                f"parameter {p!r}: shape {shape} expects {expected} values, got {values.size}"
            )
        parameters[p] = values.reshape(shape)
    return Checkpoint(version, config, vocab, parameters)


def apply_parameters(store: ParameterStore, parameters: dict, require_all: bool = True):
    """Copy checkpoint arrays into matching store entries (shape-checked)."""
    for path, values in parameters.items():
        if path not in store:
            raise CheckpointShapeError(f"checkpoint parameter {path!r} has no slot in the model")
        if store[path].data.shape != values.shape:
            raise CheckpointShapeError(
                f"parameter {path!r}: checkpoint shape {values.shape} vs model shape {store[path].data.shape}"
            )
        store.set_(path, values)
    if require_all:
        missing = [p for p in store.paths() if p not in parameters]
        if missing:
            raise CheckpointShapeError(f"checkpoint lacks parameters for {missing}")


def model_from_checkpoint(ckpt: Checkpoint) -> TimeStreamModel:
    model = TimeStreamModel.build(ckpt.config.model_config(), ckpt.vocab, seed=ckpt.config.seed)
    apply_parameters(model.store, ckpt.parameters, require_all=True)
    return model
