"""Message in, ordered stego images out, and back again.

A stego sequence is a list of images plus a small JSON manifest recording
what the recipient needs besides the key: the base N, k, the message bit
length and the per-image chunk lengths. The manifest travels next to the
images; it is not hidden inside them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import codec
from . import neuralkey as nk
from .attack import AttackConfig, sata_embed
from .data import from_uint8, load_png, save_png, to_uint8

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


class EmbeddingError(RuntimeError):
    def __init__(self, message, failed_chunks=()):
        super().__init__(message)
        self.failed_chunks = list(failed_chunks)


class ManifestError(ValueError):
    pass


def quantize_image(img) -> np.ndarray:
    """round(x * 255) / 255 with halves rounded up; idempotent."""
    return from_uint8(to_uint8(img))


@dataclass
class Manifest:
    n: int
    k: int
    bit_length: int
    chunk_lengths: list[int]
    images: list[str] = field(default_factory=list)
    key_fingerprint: str | None = None
    version: int = MANIFEST_VERSION

    def validate(self) -> "Manifest":
        if self.version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {self.version}")
        if self.n < 2 or not 1 <= self.k <= self.n or self.bit_length < 0:
            raise ManifestError("manifest has invalid n/k/bit_length")
        if any(not 1 <= c <= self.k for c in self.chunk_lengths):
            raise ManifestError("chunk length outside 1..k")
        if sum(self.chunk_lengths) != codec.required_images(self.bit_length, self.n):
            raise ManifestError("chunk lengths do not add up to the digit count")
        if self.images and len(self.images) != len(self.chunk_lengths):
            raise ManifestError("image count does not match chunk count")
        return self

    def to_json(self) -> str:
        d = {"version": self.version, "n": self.n, "k": self.k,
             "bit_length": self.bit_length, "chunk_lengths": list(self.chunk_lengths),
             "images": list(self.images)}
        if self.key_fingerprint is not None:
            d["key_fingerprint"] = self.key_fingerprint
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            d = json.loads(text)
            m = cls(n=int(d["n"]), k=int(d["k"]), bit_length=int(d["bit_length"]),
                    chunk_lengths=[int(c) for c in d["chunk_lengths"]],
                    images=[str(s) for s in d.get("images", [])],
                    key_fingerprint=d.get("key_fingerprint"),
                    version=int(d.get("version", -1)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"unreadable manifest: {exc}") from exc
        return m.validate()


@dataclass
class StegoSequence:
    images: np.ndarray
    manifest: Manifest

    def __len__(self):
        return len(self.manifest.chunk_lengths)


def image_name(index: int) -> str:
    return f"stego_{index:05d}.png"


def embed_message(bits: Sequence[int], model: nk.ModelKey, cover_pool: np.ndarray,
                  config: AttackConfig, rng, outcome_sink: list | None = None) -> StegoSequence:
    """Encode ``bits`` in base N, split into chunks and attack one cover per chunk.

    All or nothing: if any chunk still fails after every restart an
    EmbeddingError lists the failing chunk indices and no images are
    returned. ``outcome_sink``, if given, receives the raw AttackOutcome.
    """
    config.validate(model.num_classes)
    digits = codec.encode_base_n(bits, model.num_classes)
    plan = codec.split_into_chunks(digits, config.k)
    if len(plan):
        outcome = sata_embed(model, cover_pool, plan, config, rng)
        if outcome_sink is not None:
            outcome_sink.append(outcome)
        if outcome.best_rate < 1.0:
            failed = np.flatnonzero(~outcome.per_chunk_success).tolist()
            raise EmbeddingError(
                f"{len(failed)} of {len(plan)} chunks failed after "
                f"{outcome.restarts_used} restarts: {failed}", failed)
        images = outcome.stego_images
    else:
        images = np.zeros((0,) + tuple(model.input_shape), dtype=np.float32)
    manifest = Manifest(n=model.num_classes, k=config.k, bit_length=digits.bit_length,
                        chunk_lengths=plan.lengths,
                        images=[image_name(i) for i in range(len(plan))],
                        key_fingerprint=model.fingerprint)
    return StegoSequence(images, manifest.validate())


def read_digits(model: nk.ModelKey, images: np.ndarray, chunk_lengths: Sequence[int]) -> list[int]:
    if len(images) != len(chunk_lengths):
        raise ManifestError(f"{len(images)} images for {len(chunk_lengths)} chunks")
    if not len(images):
        return []
    order = nk.rank_classes(nk.forward(model, np.asarray(images, dtype=np.float32)))
    digits: list[int] = []
    for row, m in zip(order, chunk_lengths):
        digits.extend(int(c) for c in row[:m])
    return digits


def extract_message(stego: StegoSequence, model: nk.ModelKey) -> list[int]:
    """Read each image's top-(chunk length) classes in order and decode base N."""
    man = stego.manifest.validate()
    if man.n != model.num_classes:
        raise ManifestError(f"manifest is for N={man.n}, key has N={model.num_classes}")
    digits = read_digits(model, stego.images, man.chunk_lengths)
    return codec.decode_base_n(codec.DigitMessage(tuple(digits), man.n, man.bit_length))


def decoding_rate(stego: StegoSequence, crafted_with: nk.ModelKey, decoder: nk.ModelKey) -> float:
    """Fraction of images where ``decoder`` ranks the top classes like ``crafted_with``."""
    if crafted_with.input_shape != decoder.input_shape or \
            crafted_with.num_classes != decoder.num_classes:
        raise ValueError("models must share input dims and class count")
    lengths = stego.manifest.chunk_lengths
    if not lengths:
        return 1.0
    images = np.asarray(stego.images, dtype=np.float32)
    ref = nk.rank_classes(nk.forward(crafted_with, images))
    got = nk.rank_classes(nk.forward(decoder, images))
    hits = [np.array_equal(r[:m], g[:m]) for r, g, m in zip(ref, got, lengths)]
    return float(np.mean(hits))


def save_stego(stego: StegoSequence, directory) -> Path:
    """Write zero-padded, ordered PNGs plus manifest.json into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(stego.manifest.images, stego.images):
        save_png(img, out / name)
    (out / MANIFEST_NAME).write_text(stego.manifest.to_json(), encoding="utf-8")
    return out


def load_stego(directory) -> StegoSequence:
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"no {MANIFEST_NAME} in {root}")
    manifest = Manifest.from_json(path.read_text(encoding="utf-8"))
    if len(manifest.images) != len(manifest.chunk_lengths):
        raise ManifestError("manifest image list does not match chunk count")
    images = []
    for name in manifest.images:
        f = root / name
        if not f.is_file():
            raise ManifestError(f"missing stego image {name}")
        images.append(load_png(f))
    arr = np.stack(images) if images else np.zeros((0, 1, 1, 1), dtype=np.float32)
    return StegoSequence(arr, manifest)
