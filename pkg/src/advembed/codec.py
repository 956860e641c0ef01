"""Message arithmetic: binary <-> base-N digits, chunk splitting, capacity.

Everything here is pure Python integer arithmetic so that conversions are
exact for arbitrarily long messages.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence


class CorruptMessageError(ValueError):
    """Digits decode to a value that does not fit in the declared bit length."""


@dataclass(frozen=True)
class DigitMessage:
    digits: tuple[int, ...]
    base: int
    bit_length: int

    def __post_init__(self):
        if self.base < 2:
            raise ValueError(f"base must be >= 2, got {self.base}")
        for d in self.digits:
            if not 0 <= d < self.base:
                raise ValueError(f"digit {d} out of range for base {self.base}")

    def __len__(self):
        return len(self.digits)


@dataclass(frozen=True)
class ChunkPlan:
    chunks: tuple[tuple[int, ...], ...]
    k: int
    base: int

    def __len__(self):
        return len(self.chunks)

    @property
    def lengths(self) -> list[int]:
        return [len(c) for c in self.chunks]

    def flatten(self) -> list[int]:
        return [d for c in self.chunks for d in c]


def _check_bits(bits: Sequence[int]) -> list[int]:
    out = [int(b) for b in bits]
    if any(b not in (0, 1) for b in out):
        raise ValueError("bits must be 0 or 1")
    return out


def bits_to_int(bits: Sequence[int]) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | b
    return value


def int_to_bits(value: int, length: int) -> list[int]:
    return [(value >> (length - 1 - i)) & 1 for i in range(length)]


def bytes_to_bits(data: bytes) -> list[int]:
    return [(byte >> (7 - i)) & 1 for byte in data for i in range(8)]


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    """Pack bits MSB-first; a trailing partial byte is zero-padded on the right."""
    bits = list(bits)
    pad = (-len(bits)) % 8
    bits = bits + [0] * pad
    return bytes(bits_to_int(bits[i:i + 8]) for i in range(0, len(bits), 8))


def required_images(bit_length: int, base: int) -> int:
    """Smallest L' with base**L' >= 2**bit_length, i.e. ceil(L * log 2 / log N).

    The float estimate is only a starting point; the answer is settled with
    exact integer comparisons so exact powers never land on the wrong side.
    """
    if bit_length < 0:
        raise ValueError("bit_length must be >= 0")
    if base < 2:
        raise ValueError("base must be >= 2")
    if bit_length == 0:
        return 0
    target = 1 << bit_length
    n = max(0, math.ceil(bit_length * math.log(2) / math.log(base)) - 1)
    while base ** n >= target and n > 0:
        n -= 1
    while base ** n < target:
        n += 1
    return n


def encode_base_n(bits: Sequence[int], base: int) -> DigitMessage:
    """Big-endian positional conversion, left-padded to ``required_images`` digits."""
    bits = _check_bits(bits)
    if base < 2:
        raise ValueError("base must be >= 2")
    n_digits = required_images(len(bits), base)
    value = bits_to_int(bits)
    digits = [0] * n_digits
    for i in range(n_digits - 1, -1, -1):
        value, digits[i] = divmod(value, base)
    return DigitMessage(tuple(digits), base, len(bits))


def decode_base_n(message: DigitMessage) -> list[int]:
    value = 0
    for d in message.digits:
        value = value * message.base + d
    if value >> message.bit_length:
        raise CorruptMessageError(
            f"digit value needs more than {message.bit_length} bits"
        )
    return int_to_bits(value, message.bit_length)


def split_into_chunks(message: DigitMessage, k: int) -> ChunkPlan:
    """Greedy left-to-right split into runs of at most ``k`` distinct digits.

    A chunk is closed when it holds ``k`` digits or when the next digit is
    already in it.
    """
    if not 1 <= k <= message.base:
        raise ValueError(f"k must be in [1, {message.base}], got {k}")
    chunks: list[tuple[int, ...]] = []
    current: list[int] = []
    for d in message.digits:
        if len(current) == k or d in current:
            chunks.append(tuple(current))
            current = []
        current.append(d)
    if current:
        chunks.append(tuple(current))
    return ChunkPlan(tuple(chunks), k, message.base)


def digit_bits(base: int) -> int:
    """Worst-case bits carried by one base-N digit (floor(log2 N))."""
    return base.bit_length() - 1


def expected_capacity_k2(base: int) -> float:
    """Average bits per image for k=2, counting ``digit_bits(base)`` per digit.

    A pair of digits fits in one image unless both are equal (probability 1/N),
    in which case that image carries a single digit.
    """
    if base < 2:
        raise ValueError("base must be >= 2")
    b = digit_bits(base)
    return 2 * b * (1 - 1 / base) + b * (1 / base)


def simulate_density(
    base: int,
    k: int,
    num_messages: int = 1000,
    message_bits: int = 6643,
    pixels_per_image: int = 32 * 32 * 3,
    seed: int = 0,
    accounting: str = "exact",
) -> tuple[float, float]:
    """Monte-Carlo embedding density of random messages.

    Returns ``(average images per message, bits per pixel)``.

    ``accounting`` picks how many message bits an image is credited with:
    ``"exact"`` divides the true message length by the image count;
    ``"worst_case"`` credits ``digit_bits(base)`` bits per embedded digit, the
    guaranteed capacity of a base-N digit.
    """
    if accounting not in ("exact", "worst_case"):
        raise ValueError(f"unknown accounting {accounting!r}")
    if not 1 <= k <= base:
        raise ValueError(f"k must be in [1, {base}]")
    rng = random.Random(seed)
    total_images = 0
    total_digits = 0
    for _ in range(num_messages):
        value = rng.getrandbits(message_bits) if message_bits else 0
        digits = encode_base_n(int_to_bits(value, message_bits), base)
        total_digits += len(digits)
        total_images += len(split_into_chunks(digits, k))
    avg_images = total_images / num_messages
    if avg_images == 0:
        return 0.0, 0.0
    if accounting == "exact":
        bits_per_image = message_bits / avg_images
    else:
        bits_per_image = digit_bits(base) * total_digits / total_images
    return avg_images, bits_per_image / pixels_per_image
