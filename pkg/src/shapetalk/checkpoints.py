"""Checkpoint container on top of the tensor store.

One file holds any number of named models (parameter tensors keyed
``model/group.leaf``), optional tokenizer vocabularies, the subword-to-word
transform, and a free-form JSON meta block stored as a u8 tensor.
"""

import json
from dataclasses import dataclass

import numpy as np

from .tensorstore import read_tensorstore, write_tensorstore
from .tokenizers import TransformMatrix, Vocabulary

CHECKPOINT_VERSION = 1
_META_KEY = "meta/json"
_TRANSFORM_KEY = "transform/mapping"


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict  # "model/group.leaf" -> ndarray
    vocabs: dict  # name -> Vocabulary
    transform: object  # TransformMatrix or None

    def model_tensors(self, name: str) -> dict:
        prefix = name + "/"
        out = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if not out:
            raise CheckpointError(f"checkpoint holds no tensors for model {name!r}")
        return out

    def load_into(self, name: str, model) -> None:
        model.load_state_tensors(self.model_tensors(name))


def save_checkpoint(path, models: dict, meta=None, vocabs=None, transform=None,
                    extra_tensors=None) -> None:
    """``models`` maps name -> GroupedModel; everything else is optional."""
    tensors = {}
    for name, model in models.items():
        for key, arr in model.state_tensors().items():
            tensors[f"{name}/{key}"] = arr
    if extra_tensors:
        tensors.update(extra_tensors)
    if transform is not None:
        tensors[_TRANSFORM_KEY] = np.asarray(transform.mapping, dtype=np.int64)
    header = {
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "vocabs": {n: list(v.tokens) for n, v in (vocabs or {}).items()},
        "transform_target_size": transform.target_size if transform is not None else None,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tensors[_META_KEY] = np.frombuffer(blob, dtype=np.uint8).copy()
    write_tensorstore(path, tensors)


def load_checkpoint(path) -> Checkpoint:
    tensors = read_tensorstore(path)
    if _META_KEY not in tensors:
        raise CheckpointError(f"{path}: not a checkpoint (missing {_META_KEY})")
    try:
        header = json.loads(tensors.pop(_META_KEY).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint meta: {e}") from e
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION}"
        )
    vocabs = {n: Vocabulary(toks) for n, toks in header.get("vocabs", {}).items()}
    transform = None
    if _TRANSFORM_KEY in tensors:
        transform = TransformMatrix(
            mapping=tensors.pop(_TRANSFORM_KEY),
            target_size=header["transform_target_size"],
        )
    return Checkpoint(header.get("meta", {}), tensors, vocabs, transform)
