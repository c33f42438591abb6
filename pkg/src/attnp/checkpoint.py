"""JSON checkpoints: model config, parameters, vocabulary and training echo."""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .data import Vocabulary
from .model import ModelConfig, ModelParameters

FORMAT = "attnp-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, params: ModelParameters, config: ModelConfig, vocab: Vocabulary,
                    train_config: dict[str, Any] | None = None) -> None:
    """Write a checkpoint atomically.

    Parameter values are stored row-major; ``repr`` of a float64 round-trips
    exactly, so save/load is lossless.
    """
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": config.to_dict(),
        "params": [{"name": name, "shape": list(t.shape), "values": t.values}
                   for name, t in params.items()],
        "vocab": vocab.to_list(),
        "vocab_min_count": vocab.min_count,
        "train_config": train_config or {},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelParameters, ModelConfig, Vocabulary, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {payload.get('format')!r}")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')!r}")
    config = ModelConfig(**payload["model_config"])
    arrays = {}
    for entry in payload["params"]:
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: parameter {entry['name']} has {values.size} values "
                                  f"for shape {shape}")
        arrays[entry["name"]] = values.reshape(shape)
    params = ModelParameters.from_arrays(arrays)
    params.check(config)
    vocab = Vocabulary.from_list(payload["vocab"])
    vocab.min_count = payload.get("vocab_min_count", 1)
    return params, config, vocab, payload.get("train_config", {})
