"""Loading forged corpora into tensors at a training resolution."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np

from ..imagecore import DatasetManifest, SampleRecord, read_image, resize, resize_mask
from .core import to_tensor
from .text import DEFAULT_VOCAB, Prompt, Vocab, segment_tokens
from .train import TrainItem


def record_prompt(record: SampleRecord) -> Prompt:
    # exemplar conditioning images are (demo input, demo output, query); the query carries the structure
    structure = 2 if record.task == "exemplar" else 0
    return Prompt.with_images(record.prompt, len(record.input_refs), record.delta_t, structure)


class Corpus:
    """A manifest plus its image files, cached per resolution."""

    def __init__(self, manifest: DatasetManifest, root, vocab: Vocab = DEFAULT_VOCAB):
        self.manifest = manifest
        self.root = Path(root)
        self.vocab = vocab
        self._load = lru_cache(maxsize=None)(self._load_uncached)

    @classmethod
    def open(cls, manifest_path, root=None) -> "Corpus":
        manifest_path = Path(manifest_path)
        return cls(DatasetManifest.load(manifest_path), root or manifest_path.parent)

    def _load_uncached(self, ref: str, res: int) -> np.ndarray:
        img = read_image(self.root / ref)
        if res is None or img.shape[:2] == (res, res):
            return img
        return resize(img, (res, res))

    def image(self, ref: str, res: int | None) -> np.ndarray:
        return self._load(ref, res)

    def mask(self, ref: str, res: int | None) -> np.ndarray:
        m = read_image(self.root / ref).max(axis=2) > 0.5
        if res is None or m.shape == (res, res):
            return m.astype(np.int64)
        return resize_mask(m.astype(np.int64), (res, res))

    def records(self, split: str) -> list[SampleRecord]:
        return self.manifest.by_split(split)

    def item(self, record: SampleRecord, res: int, cond_override=None) -> TrainItem:
        prompt = record_prompt(record)
        conds = cond_override or [self.image(r, res) for r in record.input_refs]
        lesion = self.mask(record.aux_refs["lesions"], res) if "lesions" in record.aux_refs else None
        return TrainItem(
            record_id=record.record_id,
            task=record.task,
            segments=segment_tokens(prompt, self.vocab),
            cond=[to_tensor(c) for c in conds],
            target=to_tensor(self.image(record.target_ref, res)),
            structure_ref=prompt.structure_ref,
            lesion_mask=lesion,
        )
