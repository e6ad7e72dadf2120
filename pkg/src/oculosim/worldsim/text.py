"""Prompts, vocabulary and tokenisation."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

PAD, UNK = 0, 1
_WORD = re.compile(r"[a-z0-9]+")

# every word the forge's prompt templates can emit
TEMPLATE_TEXT = """
segment highlight outline the optic disc cup vessels fovea lesions rpe layer macular hole using red blue green
yellow cyan magenta white detect with boxes translate color fundus photograph into a fluorescein angiogram
enhance quality of this image restore high resolution from downsampled by factor fill in missing rectangular
regions extend beyond visible elliptical field predict stable recovery progression follow up oct at months
align retinal position according to mask 2 1 according demonstration shown apply same process image
"""


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._index.get(word, UNK)


def build_vocab(texts=(TEMPLATE_TEXT,), max_number: int = 120) -> Vocab:
    vocab = {str(n) for n in range(max_number + 1)}
    for t in texts:
        vocab.update(words(t))
    return Vocab(("<pad>", "<unk>") + tuple(sorted(vocab)))


DEFAULT_VOCAB = build_vocab()


def tokenize(text: str, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
    """Lower-case, split on anything that is not a letter or digit, map unknown words to UNK."""
    ws = words(text)
    if not ws:
        raise ValueError("cannot tokenize an empty prompt")
    return [vocab.id(w) for w in ws]


@dataclass(frozen=True)
class ImageRef:
    index: int


@dataclass(frozen=True)
class Prompt:
    """Text interleaved with references into the conditioning image list.

    ``structure_ref`` picks the conditioning image whose latent becomes the
    structural condition; exemplar prompts point it at the query.
    """

    text: str
    segments: tuple = ()
    delta_t: float | None = None
    structure_ref: int = 0

    def __post_init__(self):
        segs = tuple(self.segments) or (self.text,)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("prompt needs at least one segment")

    @property
    def full_text(self) -> str:
        text = self.text
        if self.delta_t is not None:
            n = int(self.delta_t) if float(self.delta_t).is_integer() else self.delta_t
            phrase = f"at {n} months"
            if phrase not in text:
                text = f"{text} {phrase}"
        return text

    @property
    def image_refs(self) -> list[int]:
        return [s.index for s in self.segments if isinstance(s, ImageRef)]

    @classmethod
    def with_images(cls, text: str, n_images: int, delta_t: float | None = None, structure_ref: int = 0) -> "Prompt":
        """Text first, then each conditioning image in order."""
        return cls(text, (text,) + tuple(ImageRef(i) for i in range(n_images)), delta_t, structure_ref)


def segment_tokens(prompt: Prompt, vocab: Vocab = DEFAULT_VOCAB) -> list:
    """Expand text segments to token-id lists; image refs pass through."""
    out = []
    for s in prompt.segments:
        if isinstance(s, ImageRef):
            out.append(s)
        else:
            text = prompt.full_text if s == prompt.text else s
            out.append(tokenize(text, vocab))
    return out
