"""Dataset generation and loading.

A dataset directory holds ``records.jsonl`` (one JSON object per record,
without the image), ``images.tstore`` (u8 renders keyed by record id), and
``meta.json`` (config + seed + format version). Byte content is a pure
function of (config, seed).
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from ..rngs import np_stream
from ..tensorstore import read_tensorstore, write_tensorstore
from .grammar import describe, extract_tuples, scene_tuples
from .rendering import render_u8
from .scenes import DOMAINS, Scene, sample_scene

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class DatasetConfig:
    train_size: int = 8000
    val_size: int = 500
    test_size_per_domain: int = 500
    n_refs: int = 5
    resolution: int = 32
    seed: int = 0


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    split: str
    domain: str
    captions: tuple
    scene: Scene

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "domain": self.domain,
            "captions": list(self.captions),
            "scene": self.scene.to_json(),
        }

    @staticmethod
    def from_json(d: dict) -> "DatasetRecord":
        return DatasetRecord(
            d["id"], d["split"], d["domain"], tuple(d["captions"]),
            Scene.from_json(d["scene"]),
        )


def _record_plan(config: DatasetConfig):
    plan = []
    plan += [("train", "in")] * config.train_size
    plan += [("val", "in")] * config.val_size
    for domain in ("in", "near", "out"):
        plan += [("test", domain)] * config.test_size_per_domain
    return plan


def generate_record(config: DatasetConfig, rec_id: int, split: str, domain: str):
    scene = sample_scene(np_stream(config.seed, "scene", rec_id), DOMAINS[domain])
    captions = describe(scene, np_stream(config.seed, "caption", rec_id), config.n_refs)
    expected = scene_tuples(scene)
    for cap in captions:
        if extract_tuples(cap) != expected:
            raise AssertionError(
                f"record {rec_id}: caption {cap!r} does not round-trip to scene tuples"
            )
    return DatasetRecord(rec_id, split, domain, tuple(captions), scene)


def build_dataset(config: DatasetConfig, out_dir) -> None:
    """Generate and persist the full dataset."""
    os.makedirs(out_dir, exist_ok=True)
    plan = _record_plan(config)
    images = {}
    try:
        with open(os.path.join(out_dir, "records.jsonl"), "w") as f:
            for rec_id, (split, domain) in enumerate(plan):
                rec = generate_record(config, rec_id, split, domain)
                f.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")))
                f.write("\n")
                images[f"img/{rec_id}"] = render_u8(rec.scene, config.resolution)
        write_tensorstore(os.path.join(out_dir, "images.tstore"), images)
        meta = {
            "format_version": FORMAT_VERSION,
            "config": dataclasses.asdict(config),
            "seed": config.seed,
        }
        with open(os.path.join(out_dir, "meta.json"), "w") as f:
            json.dump(meta, f, sort_keys=True, indent=1)
            f.write("\n")
    except OSError as e:
        raise OSError(f"failed writing dataset under {out_dir}: {e}") from e


class ShapeWorldDataset:
    """In-memory view over a persisted dataset directory."""

    def __init__(self, path):
        self.path = path
        try:
            with open(os.path.join(path, "meta.json")) as f:
                self.meta = json.load(f)
            with open(os.path.join(path, "records.jsonl")) as f:
                self.records = [DatasetRecord.from_json(json.loads(line)) for line in f]
        except OSError as e:
            raise OSError(f"failed reading dataset under {path}: {e}") from e
        if self.meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"{path}: dataset format {self.meta.get('format_version')!r}, "
                f"expected {FORMAT_VERSION!r}"
            )
        self._images = read_tensorstore(os.path.join(path, "images.tstore"))
        self._by_id = {r.id: r for r in self.records}

    def record(self, rec_id: int) -> DatasetRecord:
        return self._by_id[rec_id]

    def image(self, rec_id: int) -> np.ndarray:
        """Float32 HxWx3 image in [0, 1]."""
        return self._images[f"img/{rec_id}"].astype(np.float32) / 255.0

    def split(self, name: str, domain=None) -> list:
        return [
            r for r in self.records
            if r.split == name and (domain is None or r.domain == domain)
        ]
