"""Dataset manifests and patient-level splitting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

TASKS = ("segment", "detect", "translate", "enhance", "sr", "inpaint", "outpaint", "progress", "exemplar")
SPLITS = ("train", "val", "test", "unassigned")
TARGET_KINDS = ("mask", "boxes", "image")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    record_id: str
    patient_id: str
    task: str
    input_refs: tuple[str, ...]
    target_ref: str
    prompt: str
    volume_id: str | None = None
    delta_t: float | None = None
    split: str = "unassigned"
    target_kind: str = "image"
    category: str | None = None
    aux_refs: dict[str, str] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError(f"record {self.record_id!r}: patient_id must be non-empty")
        if self.task not in TASKS:
            raise ManifestError(f"record {self.record_id!r}: unknown task {self.task!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.record_id!r}: unknown split {self.split!r}")
        if self.target_kind not in TARGET_KINDS:
            raise ManifestError(f"record {self.record_id!r}: unknown target_kind {self.target_kind!r}")
        if self.delta_t is not None and self.delta_t < 0:
            raise ManifestError(f"record {self.record_id!r}: delta_t must be >= 0")
        object.__setattr__(self, "input_refs", tuple(self.input_refs))
        object.__setattr__(self, "warnings", tuple(self.warnings))
        object.__setattr__(self, "aux_refs", dict(self.aux_refs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_refs"] = list(self.input_refs)
        d["warnings"] = list(self.warnings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ManifestError(f"unknown record fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[SampleRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_split(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def to_json(self) -> str:
        return json.dumps([r.to_dict() for r in self.records], indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        if not isinstance(data, list):
            raise ManifestError("manifest must be a JSON array of records")
        return cls(tuple(SampleRecord.from_dict(d) for d in data))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def split_counts(n_patients: int, ratios=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """Floor the val/test patient counts; train absorbs the remainder."""
    n_val = math.floor(ratios[1] * n_patients + 1e-9)
    n_test = math.floor(ratios[2] * n_patients + 1e-9)
    return n_patients - n_val - n_test, n_val, n_test


def patient_split(manifest: DatasetManifest, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetManifest:
    """Assign train/val/test by patient so no patient spans two splits."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ManifestError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    ids = [r.record_id for r in manifest.records]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate record ids in manifest")
    if any(r.split != "unassigned" for r in manifest.records):
        raise ManifestError("patient_split expects unassigned records")

    patients = manifest.patients()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_train, n_val, _ = split_counts(len(patients), ratios)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            assignment[patients[idx]] = "train"
        elif rank < n_train + n_val:
            assignment[patients[idx]] = "val"
        else:
            assignment[patients[idx]] = "test"
    return DatasetManifest(tuple(replace(r, split=assignment[r.patient_id]) for r in manifest.records))
