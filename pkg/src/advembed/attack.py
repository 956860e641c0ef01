"""Targeted L2 PGD and the sorted top-k variant (SATA).

The attack works on batches: every chunk of the message gets its own cover
image and its own row of class weights, and all chunks step together.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import neuralkey as nk
from .codec import ChunkPlan
from .data import from_uint8, to_uint8

NOISE_MODES = ("restart-only", "every-step")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.5
    epsilon_step: float = 0.1
    iterations: int = 40
    restarts: int = 10
    k: int = 1
    gamma: float = 1.0
    noise_mode: str = "restart-only"
    clamp: tuple[float, float] = (0.0, 1.0)
    # minimum logit gap between consecutive forced ranks when checking success;
    # keeps decoding stable against float32 reordering between batch sizes
    margin: float = 1e-3

    def validate(self, num_classes: int | None = None) -> "AttackConfig":
        if self.epsilon <= 0 or self.epsilon_step <= 0:
            raise ValueError("epsilon and epsilon_step must be > 0")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.k < 1 or (num_classes is not None and self.k > num_classes):
            raise ValueError(f"k must be in [1, {num_classes}], got {self.k}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")
        lo, hi = self.clamp
        if not lo < hi:
            raise ValueError("clamp must be (low, high) with low < high")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        return self


@dataclass
class AttackOutcome:
    stego_images: np.ndarray
    best_rate: float
    per_chunk_success: np.ndarray
    restarts_used: int
    cover_indices: np.ndarray
    covers: np.ndarray
    rate_history: list[float] = field(default_factory=list)


def build_weighted_logits(chunk: Sequence[int], k: int, gamma: float) -> np.ndarray:
    """w_i = (1 - (i - 1) / k) ** gamma for ranks i = 1..len(chunk)."""
    if len(chunk) > k:
        raise ValueError("chunk longer than k")
    if len(set(chunk)) != len(chunk):
        raise ValueError("chunk digits must be distinct")
    ranks = np.arange(len(chunk), dtype=np.float64)
    return (1.0 - ranks / k) ** gamma


def class_weight_matrix(chunks: Sequence[Sequence[int]], num_classes: int, k: int,
                        gamma: float) -> np.ndarray:
    """One row per chunk: the rank weights scattered onto the chunk's classes."""
    weights = np.zeros((len(chunks), num_classes), dtype=np.float32)
    for row, chunk in enumerate(chunks):
        weights[row, list(chunk)] = build_weighted_logits(chunk, k, gamma)
    return weights


def random_sphere(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the L2 ball of radius ``epsilon`` in R^shape."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    d = int(np.prod(shape))
    direction = rng.standard_normal(d)
    norm = np.linalg.norm(direction)
    while norm == 0:
        direction = rng.standard_normal(d)
        norm = np.linalg.norm(direction)
    radius = epsilon * rng.uniform() ** (1.0 / d)
    return (direction * (radius / norm)).reshape(shape).astype(np.float32)


def project_l2(v: np.ndarray, epsilon: float) -> np.ndarray:
    """Scale ``v`` back onto the L2 ball of radius ``epsilon`` if it is outside."""
    v = np.asarray(v, dtype=np.float32)
    norm = float(np.linalg.norm(v.astype(np.float64)))
    if norm <= epsilon:
        return v.copy()
    return (v * np.float32(epsilon / norm)).astype(np.float32)


def _project_batch(v: np.ndarray, epsilon: float) -> np.ndarray:
    return np.stack([project_l2(x, epsilon) for x in v]) if len(v) else v


def quantize_in_ball(images: np.ndarray, covers: np.ndarray, epsilon: float) -> np.ndarray:
    """Round to 8 bits without leaving the epsilon ball around 8-bit covers.

    Plain round-half-up first. If that pushes an image past ``epsilon``,
    pixels that were rounded away from the cover are re-rounded toward it,
    largest saving first, until the image is back inside. Rounding every
    pixel toward the cover can never increase its distance, so this always
    terminates inside the ball.
    """
    x = np.asarray(images, dtype=np.float64) * 255.0
    c = to_uint8(covers).astype(np.float64)
    q = np.clip(np.floor(x + 0.5), 0, 255)
    limit = (epsilon * 255.0) ** 2
    for b in range(len(q)):
        d2 = ((q[b] - c[b]) ** 2).sum()
        if d2 <= limit:
            continue
        toward = np.where(x[b] >= c[b], np.floor(x[b]), np.ceil(x[b]))
        gain = ((q[b] - c[b]) ** 2 - (toward - c[b]) ** 2).ravel()
        order = np.argsort(-gain, kind="stable")
        flat_q, flat_t = q[b].ravel(), toward.ravel()
        excess = d2 - limit
        for idx in order:
            if excess <= 0 or gain[idx] <= 0:
                break
            flat_q[idx] = flat_t[idx]
            excess -= gain[idx]
        q[b] = flat_q.reshape(q[b].shape)
    return (q / 255.0).astype(np.float32)


def compute_adv(adv_x: np.ndarray, class_weights: np.ndarray, covers: np.ndarray,
                config: AttackConfig, model: nk.ModelKey, rng,
                first_iteration: bool = False) -> np.ndarray:
    """One SATA/PGD step for a batch of images.

    Adds ball noise (on the first iteration, or every step in ``every-step``
    mode), moves ``epsilon_step`` along the normalised descent direction of
    the class-weighted cross-entropy, projects the perturbation back onto the
    epsilon ball around ``covers`` and clamps to the pixel range. An image
    whose gradient is exactly zero takes no directional step.

    ``rng`` is a Generator or one Generator per image.
    """
    adv_x = np.array(adv_x, dtype=np.float32)
    covers = np.asarray(covers, dtype=np.float32)
    if adv_x.shape != covers.shape or len(class_weights) != len(adv_x):
        raise ValueError("adv_x, covers and class_weights must agree on batch shape")
    n = len(adv_x)
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng] * n
    if first_iteration or config.noise_mode == "every-step":
        for b in range(n):
            adv_x[b] += random_sphere(adv_x.shape[1:], config.epsilon, rngs[b])
    grad = -nk.weighted_loss_gradient(model, adv_x, class_weights)
    norms = np.sqrt((grad.astype(np.float64) ** 2).reshape(n, -1).sum(axis=1))
    for b in range(n):
        if norms[b] > 0:
            adv_x[b] += (grad[b] * (config.epsilon_step / norms[b])).astype(np.float32)
    pert = _project_batch(adv_x - covers, config.epsilon)
    lo, hi = config.clamp
    return np.clip(covers + pert, lo, hi).astype(np.float32)


def chunk_success_flags(logits: np.ndarray, chunks: Sequence[Sequence[int]],
                        margin: float = 0.0) -> np.ndarray:
    """True where the top-len(chunk) ranking equals the chunk, in order.

    With ``margin > 0`` every forced rank must also beat the next one (and
    the best unforced class) by at least ``margin`` in logit space.
    """
    order = nk.rank_classes(logits)
    flags = np.zeros(len(chunks), dtype=bool)
    for i, chunk in enumerate(chunks):
        m = len(chunk)
        if list(order[i, :m]) != list(chunk):
            continue
        if margin > 0:
            ranked = logits[i, order[i, :m + 1]] if m < logits.shape[1] else logits[i, order[i, :m]]
            if np.any(np.diff(ranked) > -margin):
                continue
        flags[i] = True
    return flags


def compute_success(model: nk.ModelKey, stego_images: np.ndarray, chunk_plan) -> float:
    """Mean over chunks of 1[top-len(chunk) classes equal the chunk in order]."""
    chunks = chunk_plan.chunks if isinstance(chunk_plan, ChunkPlan) else list(chunk_plan)
    stego_images = np.asarray(stego_images, dtype=np.float32)
    if len(stego_images) != len(chunks):
        raise ValueError(f"{len(stego_images)} images for {len(chunks)} chunks")
    if not chunks:
        return 1.0
    logits = nk.forward(model, stego_images)
    return float(chunk_success_flags(logits, chunks).mean())


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def random_pick(pool_size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices into the pool: without replacement when the pool is big enough."""
    if pool_size < 1:
        raise ValueError("empty cover pool")
    if count <= pool_size:
        return rng.choice(pool_size, size=count, replace=False)
    return rng.integers(0, pool_size, size=count)


def sata_embed(model: nk.ModelKey, cover_pool: np.ndarray, chunk_plan,
               config: AttackConfig, rng) -> AttackOutcome:
    """Force each chunk's ordered top-k ranking onto a randomly picked cover.

    Covers are taken at their 8-bit value. Each restart draws fresh covers
    for the chunks that have not succeeded yet and runs ``iterations`` steps
    on them; a chunk's image is frozen at the first iteration where its
    8-bit version decodes correctly. Stops early once every chunk succeeded.

    Randomness: one base seed is drawn from ``rng``; chunk ``i`` in restart
    ``j`` uses the stream ``(base, i, j)`` and cover picks use ``(base, j)``,
    so a chunk's noise does not depend on which other chunks share its batch.
    """
    chunks = chunk_plan.chunks if isinstance(chunk_plan, ChunkPlan) else list(chunk_plan)
    config.validate(model.num_classes)
    for chunk in chunks:
        if len(chunk) > config.k:
            raise ValueError(f"chunk {chunk} longer than k={config.k}")
        if any(not 0 <= d < model.num_classes for d in chunk):
            raise ValueError(f"chunk {chunk} has classes outside the model's range")
    pool = from_uint8(to_uint8(cover_pool))
    if pool.ndim != 4 or len(pool) == 0:
        raise ValueError("cover pool must be a non-empty (n, H, W, C) array")
    if tuple(pool.shape[1:]) != model.input_shape:
        raise ValueError("cover images do not match the model input shape")

    n = len(chunks)
    base = int(_as_generator(rng).integers(0, 2 ** 63 - 1))
    weights = class_weight_matrix(chunks, model.num_classes, config.k, config.gamma)
    stego = np.zeros((n,) + pool.shape[1:], dtype=np.float32)
    cover_idx = np.full(n, -1, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    history: list[float] = []
    restarts_used = 0

    for restart in range(config.restarts):
        todo = np.flatnonzero(~success)
        if len(todo) == 0:
            break
        restarts_used += 1
        picks = random_pick(len(pool), len(todo), np.random.default_rng([base, restart]))
        covers = pool[picks]
        stego[todo] = covers
        cover_idx[todo] = picks
        rngs = [np.random.default_rng([base, int(i), restart]) for i in todo]
        adv = covers.copy()
        active = np.arange(len(todo))
        for it in range(config.iterations):
            adv[active] = compute_adv(adv[active], weights[todo[active]], covers[active],
                                      config, model, [rngs[a] for a in active],
                                      first_iteration=it == 0)
            q = quantize_in_ball(adv[active], covers[active], config.epsilon)
            logits = nk.forward(model, q)
            ok = chunk_success_flags(logits, [chunks[i] for i in todo[active]], config.margin)
            stego[todo[active]] = q
            success[todo[active[ok]]] = True
            active = active[~ok]
            if len(active) == 0:
                break
        history.append(float(success.mean()))
    best_rate = float(success.mean()) if n else 1.0
    return AttackOutcome(stego, best_rate, success, restarts_used, cover_idx,
                         pool[np.maximum(cover_idx, 0)] if n else stego, history)


def random_chunk_plan(num_classes: int, k: int, count: int, rng) -> list[tuple[int, ...]]:
    """``count`` chunks of ``k`` distinct random classes (full-length SATA targets)."""
    rng = _as_generator(rng)
    return [tuple(int(c) for c in rng.permutation(num_classes)[:k]) for _ in range(count)]


def gamma_sweep(model: nk.ModelKey, covers: np.ndarray, k: int,
                gamma_candidates: Sequence[float], config: AttackConfig, rng,
                num_messages: int = 20) -> dict[float, float]:
    """Success rate per gamma on one fixed sample of full-length k-chunks."""
    rng = _as_generator(rng)
    chunks = random_chunk_plan(model.num_classes, k, num_messages, rng)
    seed = int(rng.integers(0, 2 ** 63 - 1))
    rates = {}
    for gamma in gamma_candidates:
        cfg = replace(config, k=k, gamma=float(gamma))
        rates[float(gamma)] = sata_embed(model, covers, chunks, cfg, seed).best_rate
    return rates


def grid_search_gamma(model: nk.ModelKey, covers: np.ndarray, k: int,
                      gamma_candidates: Sequence[float], config: AttackConfig, rng,
                      num_messages: int = 20) -> tuple[float, float]:
    """(best gamma, its success rate); ties go to the smaller gamma."""
    if not gamma_candidates:
        raise ValueError("no gamma candidates")
    rates = gamma_sweep(model, covers, k, gamma_candidates, config, rng, num_messages)
    best = min(rates, key=lambda g: (-rates[g], g))
    return best, rates[best]
