"""The secret classifier: a small numpy CNN with backprop to the input.

Images are float32 arrays shaped ``(H, W, C)`` with pixels in ``[0, 1]``;
batches are ``(B, H, W, C)``. Everything runs in float32 with a fixed
operation order so that (architecture, seed, dataset, schedule) always
reproduces the same weights.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

DTYPE = np.float32
KEY_MAGIC = b"ADVK"
KEY_VERSION = 1
INPUT_CENTER = 0.5


class ArchitectureError(ValueError):
    pass


class KeyFileError(ValueError):
    pass


class BadMagicError(KeyFileError):
    pass


class VersionMismatchError(KeyFileError):
    pass


class TruncatedFileError(KeyFileError):
    pass


class WeightCountError(KeyFileError):
    pass


# --------------------------------------------------------------------------
# architecture

@dataclass(frozen=True)
class Conv:
    kernel: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


Layer = Union[Conv, ReLU, MaxPool, Flatten, Dense]
_LAYER_TYPES = {"conv": Conv, "relu": ReLU, "maxpool": MaxPool, "flatten": Flatten, "dense": Dense}
_LAYER_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.output_shapes()  # validates

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Shape after each layer; raises ArchitectureError if layers don't chain."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ArchitectureError(f"bad input shape {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ArchitectureError("final layer must be dense(N)")
        if self.layers[-1].units < 2:
            raise ArchitectureError("need at least 2 classes")
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ArchitectureError("conv needs a (H, W, C) input")
                if layer.kernel < 1 or layer.stride < 1 or layer.out_channels < 1:
                    raise ArchitectureError(f"bad conv {layer}")
                pad = (layer.kernel - 1) // 2
                h = (shape[0] + 2 * pad - layer.kernel) // layer.stride + 1
                w = (shape[1] + 2 * pad - layer.kernel) // layer.stride + 1
                shape = (h, w, layer.out_channels)
            elif isinstance(layer, MaxPool):
                if len(shape) != 3:
                    raise ArchitectureError("maxpool needs a (H, W, C) input")
                shape = (shape[0] // layer.size, shape[1] // layer.size, shape[2])
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ArchitectureError("dense needs a flat input; add flatten")
                if layer.units < 1:
                    raise ArchitectureError(f"bad dense {layer}")
                shape = (layer.units,)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ArchitectureError(f"unknown layer {layer!r}")
            if min(shape) < 1:
                raise ArchitectureError(f"layer {layer} produces empty shape {shape}")
            shapes.append(shape)
        return shapes

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        prev: tuple[int, ...] = self.input_shape
        for layer, out in zip(self.layers, self.output_shapes()):
            if isinstance(layer, Conv):
                shapes += [(layer.kernel, layer.kernel, prev[2], layer.out_channels),
                           (layer.out_channels,)]
            elif isinstance(layer, Dense):
                shapes += [(prev[0], layer.units), (layer.units,)]
            prev = out
        return shapes

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": _LAYER_NAMES[type(layer)]}
            d.update(layer.__dict__)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            if kind not in _LAYER_TYPES:
                raise ArchitectureError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers))


def desk_arch(input_shape=(32, 32, 3), num_classes=10, width=1.0, depth=2,
              dense_units=64) -> ArchSpec:
    """conv(3,16)-relu-pool-conv(3,32)-relu-pool-flatten-dense(64)-relu-dense(N).

    ``width`` scales every channel/unit count; ``depth`` is the number of
    conv-relu-pool blocks (channels double per block).
    """
    layers: list[Layer] = []
    for i in range(depth):
        layers += [Conv(3, max(1, int(round(16 * width * 2 ** i))), 1), ReLU(), MaxPool(2)]
    layers += [Flatten(), Dense(max(1, int(round(dense_units * width)))), ReLU(),
               Dense(num_classes)]
    return ArchSpec(tuple(input_shape), tuple(layers))


ARCH_PRESETS = {
    "desk": dict(width=1.0, depth=2),
    "narrow": dict(width=0.5, depth=2),
    "shallow": dict(width=1.0, depth=1),
}


# --------------------------------------------------------------------------
# model key

@dataclass
class ModelKey:
    arch: ArchSpec
    params: list[np.ndarray]
    seed: int
    fingerprint: str
    train_accuracy: float | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.arch.input_shape

    def copy(self) -> "ModelKey":
        return replace(self, params=[p.copy() for p in self.params],
                       history=list(self.history))


def _digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_model(arch: ArchSpec, seed: int) -> ModelKey:
    """He-uniform init (limit sqrt(6 / fan_in)), zero biases, seeded."""
    rng = np.random.default_rng(seed)
    params = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=DTYPE))
        else:
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-limit, limit, size=shape).astype(DTYPE))
    fingerprint = _digest({"arch": arch.to_dict(), "seed": int(seed)})
    return ModelKey(arch, params, int(seed), fingerprint)


# --------------------------------------------------------------------------
# forward / backward

def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    # im2col with columns ordered (kernel row, kernel col, channel) like w
    cols = np.concatenate([xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
                           for i in range(k) for j in range(k)], axis=-1)
    n = x.shape[0]
    cols = cols.reshape(n * ho * wo, -1)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape)


def _conv_backward(dout, cache, w, stride, need_dx=True, need_dw=True):
    cols, xshape = cache
    k = w.shape[0]
    pad = (k - 1) // 2
    n, ho, wo, co = dout.shape
    d2 = dout.reshape(-1, co)
    dw = db = None
    if need_dw:
        dw = (cols.T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    c = xshape[3]
    dcols = (d2 @ w.reshape(-1, co).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, xshape[1] + 2 * pad, xshape[2] + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
    return dxp[:, pad:pad + xshape[1], pad:pad + xshape[2]], dw, db


def _pool_forward(x, s):
    n, h, w, c = x.shape
    ho, wo = h // s, w // s
    views = [x[:, i:ho * s:s, j:wo * s:s] for i in range(s) for j in range(s)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)
    # walk backwards so ties keep the first maximum and route gradient deterministically
    idx = np.full(out.shape, s * s - 1, dtype=np.int8)
    for t in range(s * s - 2, -1, -1):
        idx = np.where(views[t] == out, np.int8(t), idx)
    return out, (idx, x.shape)


def _pool_backward(dout, cache, s):
    idx, xshape = cache
    n, ho, wo, c = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    for t in range(s * s):
        i, j = divmod(t, s)
        dx[:, i:ho * s:s, j:wo * s:s] = np.where(idx == t, dout, 0)
    return dx


def forward(model: ModelKey, x: np.ndarray, keep_cache=False, dtype=DTYPE):
    """Logits for a batch. With ``keep_cache`` also returns what backward needs.

    ``dtype`` exists so tests can run a float64 forward as a finite-difference
    oracle; the key itself always computes in float32.
    """
    # inputs are centred on mid-grey; a constant shift leaves input gradients unchanged
    x = np.asarray(x, dtype=dtype) - dtype(INPUT_CENTER)
    caches = []
    p = iter(model.params)
    for layer in model.arch.layers:
        if isinstance(layer, Conv):
            w, b = next(p).astype(dtype, copy=False), next(p).astype(dtype, copy=False)
            x, cache = _conv_forward(x, w, b, layer.stride)
        elif isinstance(layer, Dense):
            w, b = next(p).astype(dtype, copy=False), next(p).astype(dtype, copy=False)
            cache = x
            x = x @ w + b
        elif isinstance(layer, ReLU):
            cache = x > 0
            x = x * cache
        elif isinstance(layer, MaxPool):
            x, cache = _pool_forward(x, layer.size)
        else:  # Flatten
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        caches.append(cache)
    if keep_cache:
        return x, caches
    return x


def backward(model: ModelKey, caches, dlogits, need_param_grads=True,
             need_input_grad=True):
    """Backpropagate ``dlogits``; returns (d input or None, param grads or None)."""
    grads: list[np.ndarray | None] = [None] * len(model.params)
    pi = len(model.params)
    d = dlogits
    n_layers = len(model.arch.layers)
    for li in range(n_layers - 1, -1, -1):
        layer, cache = model.arch.layers[li], caches[li]
        if isinstance(layer, Conv):
            pi -= 2
            w = model.params[pi]
            d, grads[pi], grads[pi + 1] = _conv_backward(
                d, cache, w, layer.stride, need_dx=li > 0 or need_input_grad,
                need_dw=need_param_grads)
            if d is None:
                break
        elif isinstance(layer, Dense):
            pi -= 2
            w = model.params[pi]
            if need_param_grads:
                grads[pi], grads[pi + 1] = cache.T @ d, d.sum(axis=0)
            d = d @ w.T
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, MaxPool):
            d = _pool_backward(d, cache, layer.size)
        else:
            d = d.reshape(cache)
    return d, (grads if need_param_grads else None)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: ModelKey, image: np.ndarray) -> tuple[np.ndarray, bool]:
    image = np.asarray(image, dtype=DTYPE)
    single = image.ndim == 3
    batch = image[None] if single else image
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise ValueError(f"image shape {image.shape} does not match model input "
                         f"{model.input_shape}")
    return batch, single


def predict(model: ModelKey, image: np.ndarray) -> np.ndarray:
    """Softmax probabilities for one image ``(H, W, C)`` or a batch."""
    batch, single = _as_batch(model, image)
    probs = softmax(forward(model, batch))
    return probs[0] if single else probs


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties go to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")


def top_k_classes(model: ModelKey, image: np.ndarray, k: int) -> list[int]:
    if not 1 <= k <= model.num_classes:
        raise ValueError(f"k must be in [1, {model.num_classes}]")
    probs = predict(model, image)
    if probs.ndim != 1:
        raise ValueError("top_k_classes takes a single image")
    return [int(c) for c in rank_classes(probs)[:k]]


def weighted_loss_gradient(model: ModelKey, images: np.ndarray,
                           class_weights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. each image of sum_c class_weights[b, c] * CE(f(x_b), c).

    For one-hot rows this is the per-image cross-entropy gradient; because
    d CE(p, c) / d logits = p - e_c, the weighted sum collapses to a single
    backward pass with d logits = (sum_c w_c) p - w.
    """
    batch, single = _as_batch(model, images)
    class_weights = np.asarray(class_weights, dtype=DTYPE).reshape(len(batch), -1)
    logits, caches = forward(model, batch, keep_cache=True)
    probs = softmax(logits)
    dlogits = class_weights.sum(axis=1, keepdims=True) * probs - class_weights
    dx, _ = backward(model, caches, dlogits.astype(DTYPE), need_param_grads=False)
    return dx[0] if single else dx


def loss_gradient_wrt_input(model: ModelKey, image: np.ndarray, target_class) -> np.ndarray:
    """d CE(predict(image), target_class) / d image, same shape as ``image``."""
    batch, single = _as_batch(model, image)
    targets = np.atleast_1d(np.asarray(target_class, dtype=int))
    if np.any((targets < 0) | (targets >= model.num_classes)):
        raise ValueError("target class out of range")
    weights = np.zeros((len(batch), model.num_classes), dtype=DTYPE)
    weights[np.arange(len(batch)), np.broadcast_to(targets, (len(batch),))] = 1.0
    grad = weighted_loss_gradient(model, batch, weights)
    return grad[0] if single else grad


def cross_entropy(model: ModelKey, images: np.ndarray, labels, dtype=DTYPE) -> np.ndarray:
    """Per-image cross-entropy; ``dtype=np.float64`` gives a high-precision oracle."""
    logits = forward(model, np.asarray(images), dtype=dtype)
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    labels = np.broadcast_to(np.asarray(labels, dtype=int), (len(logits),))
    return -logp[np.arange(len(logits)), labels]


# --------------------------------------------------------------------------
# training

def accuracy(model: ModelKey, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    images = np.asarray(images, dtype=DTYPE)
    hits = 0
    for i in range(0, len(images), batch_size):
        logits = forward(model, images[i:i + batch_size])
        hits += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return hits / len(images)


def train(model: ModelKey, dataset, epochs: int, learning_rate: float = 0.01,
          batch_size: int = 32, seed: int = 0, momentum: float = 0.9) -> ModelKey:
    """Minibatch SGD with momentum on mean cross-entropy.

    ``dataset`` needs ``images`` (n, H, W, C), ``labels`` (n,) and ``id``.
    Returns a new ModelKey; the input model is left untouched. The shuffle
    order comes from ``seed`` alone, so identical calls give identical weights.
    """
    images = np.asarray(dataset.images, dtype=DTYPE)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty dataset")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    if tuple(images.shape[1:]) != model.input_shape:
        raise ValueError(f"dataset images {images.shape[1:]} do not match model "
                         f"input {model.input_shape}")
    if epochs < 0 or batch_size < 1 or learning_rate <= 0:
        raise ValueError("bad training schedule")

    out = model.copy()
    params = out.params
    velocity = [np.zeros_like(p) for p in params]
    lr, mom = DTYPE(learning_rate), DTYPE(momentum)
    rng = np.random.default_rng(seed)
    n, n_classes = len(images), model.num_classes
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, caches = forward(out, images[idx], keep_cache=True)
            dlogits = softmax(logits)
            dlogits[np.arange(len(idx)), labels[idx]] -= 1.0
            dlogits /= DTYPE(len(idx))
            _, grads = backward(out, caches, dlogits.astype(DTYPE),
                                need_input_grad=False)
            for p, v, g in zip(params, velocity, grads):
                v *= mom
                v -= lr * g
                p += v
    schedule = {"dataset": str(dataset.id), "epochs": int(epochs),
                "learning_rate": float(learning_rate), "batch_size": int(batch_size),
                "seed": int(seed)}
    out.fingerprint = _digest({"parent": model.fingerprint, **schedule})
    out.history = model.history + [schedule]
    out.train_accuracy = accuracy(out, images, labels)
    return out


# --------------------------------------------------------------------------
# key files

def save_key(model: ModelKey, path) -> None:
    """ADVK magic, u16 version, u32 header length, JSON header, float32 LE weights."""
    header = {
        "arch": model.arch.to_dict(),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "fingerprint": model.fingerprint,
        "train_accuracy": model.train_accuracy,
        "history": model.history,
        "shapes": [list(p.shape) for p in model.params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(KEY_MAGIC)
        fh.write(struct.pack("<H", KEY_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_key(path) -> ModelKey:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != KEY_MAGIC:
        raise BadMagicError(f"{path}: not a key file (bad magic)")
    if len(data) < 10:
        raise TruncatedFileError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != KEY_VERSION:
        raise VersionMismatchError(f"{path}: key version {version}, expected {KEY_VERSION}")
    (hlen,) = struct.unpack_from("<I", data, 6)
    if len(data) < 10 + hlen:
        raise TruncatedFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        arch = ArchSpec.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise KeyFileError(f"{path}: unreadable header ({exc})") from exc
    shapes = [tuple(s) for s in header["shapes"]]
    if shapes != arch.param_shapes() or header.get("num_classes") != arch.num_classes:
        raise WeightCountError(f"{path}: weight shapes do not match the architecture")
    expected = sum(int(np.prod(s)) for s in shapes) * 4
    payload = data[10 + hlen:]
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: weight payload has {len(payload)} bytes, "
                                 f"expected {expected}")
    if len(payload) > expected:
        raise WeightCountError(f"{path}: {len(payload) - expected} trailing bytes")
    params, off = [], 0
    for s in shapes:
        count = int(np.prod(s))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        params.append(arr.astype(DTYPE).reshape(s))
        off += count * 4
    return ModelKey(arch, params, int(header["seed"]), header["fingerprint"],
                    header.get("train_accuracy"), header.get("history", []))


# --------------------------------------------------------------------------
# model families

def arch_grid(input_shape, num_classes, widths: Iterable[float] = (0.5, 1.0),
              depths: Iterable[int] = (1, 2)) -> list[ArchSpec]:
    return [desk_arch(input_shape, num_classes, width=w, depth=d)
            for w in widths for d in depths]


def generate_model_family(base_arch_grid: Sequence[ArchSpec], seeds: Sequence[int],
                          dataset=None, **train_kwargs) -> list[ModelKey]:
    """One model per (architecture, seed), optionally trained on ``dataset``.

    Stand-in for an architecture search: diversity comes from the width/depth
    grid and the initialisation seed. Each member trains with its own seed.
    """
    if not base_arch_grid or not seeds:
        raise ValueError("empty architecture grid or seed list")
    shapes = {(a.input_shape, a.num_classes) for a in base_arch_grid}
    if len(shapes) != 1:
        raise ArchitectureError("family members must share input dims and class count")
    family = []
    for arch in base_arch_grid:
        for seed in seeds:
            model = build_model(arch, seed)
            if dataset is not None:
                model = train(model, dataset, seed=seed, **train_kwargs)
            family.append(model)
    return family
