"""advembed command line: keygen, embed, extract, experiment.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 attack
failure, 5 extraction failure.
"""

from __future__ import annotations

import argparse
import hashlib
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codec, data, experiments
from . import neuralkey as nk
from . import steganalysis as sa
from .attack import AttackConfig
from .pipeline import EmbeddingError, ManifestError, embed_message, extract_message, load_stego, save_stego

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ATTACK, EXIT_EXTRACT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_dataset(source: str, classes: int, per_class: int, seed: int) -> data.LabeledDataset:
    if source == "synth":
        return data.synth_dataset(classes, per_class, seed=seed)
    path = Path(source)
    try:
        if path.is_dir():
            return data.load_png_dir(path)
        if path.is_file():
            return data.load_cifar10_binary(path)
    except (data.DatasetError, OSError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    raise CliError(EXIT_DATA, f"dataset {source} not found")


def _load_key(path: str) -> nk.ModelKey:
    try:
        return nk.load_key(path)
    except (nk.KeyFileError, OSError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load key {path}: {exc}") from exc


def _read_message(arg: str) -> bytes:
    path = Path(arg)
    if path.is_file():
        return path.read_bytes()
    text = arg[2:] if arg.lower().startswith("0x") else arg
    if re.fullmatch(r"(?:[0-9a-fA-F]{2})*", text):
        return bytes.fromhex(text)
    raise CliError(EXIT_CONFIG, f"--message {arg!r} is neither a file nor hex bytes")


def _covers(source: str, model: nk.ModelKey, seed: int) -> np.ndarray:
    if source == "synth":
        per_class = max(1, -(-100 // model.num_classes))
        ds = data.synth_dataset(model.num_classes, per_class, model.input_shape,
                                seed=model.seed, sample_seed=seed + 1)
        return ds.images
    try:
        pool = data.load_image_pool(source)
    except (data.DatasetError, OSError) as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    if tuple(pool.shape[1:]) != model.input_shape:
        raise CliError(EXIT_DATA, f"covers are {pool.shape[1:]}, key expects {model.input_shape}")
    return pool


def cmd_keygen(args) -> int:
    if args.arch not in nk.ARCH_PRESETS:
        raise CliError(EXIT_CONFIG, f"unknown arch {args.arch!r}; choose from {sorted(nk.ARCH_PRESETS)}")
    if args.epochs < 0 or args.classes < 2 or args.per_class < 1:
        raise CliError(EXIT_CONFIG, "need --epochs >= 0, --classes >= 2, --per-class >= 1")
    ds = _load_dataset(args.dataset, args.classes, args.per_class, args.seed)
    arch = nk.desk_arch(ds.dims, ds.num_classes, **nk.ARCH_PRESETS[args.arch])
    model = nk.build_model(arch, args.seed)
    try:
        model = nk.train(model, ds, args.epochs, learning_rate=args.lr,
                         batch_size=args.batch_size, seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from exc
    nk.save_key(model, args.out)
    print(f"fingerprint {model.fingerprint}")
    print(f"train accuracy {model.train_accuracy:.4f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = _load_key(args.key)
    config = AttackConfig(epsilon=args.epsilon, epsilon_step=args.epsilon_step,
                          iterations=args.iters, restarts=args.restarts, k=args.k,
                          gamma=args.gamma, noise_mode=args.noise_mode)
    try:
        config.validate(model.num_classes)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    message = _read_message(args.message)
    covers = _covers(args.covers, model, args.seed)
    bits = codec.bytes_to_bits(message)
    outcomes = []
    try:
        stego = embed_message(bits, model, covers, config, np.random.default_rng(args.seed),
                              outcome_sink=outcomes)
    except EmbeddingError as exc:
        if outcomes:
            for i, ok in enumerate(outcomes[0].per_chunk_success):
                print(f"chunk {i}: {'ok' if ok else 'FAILED'}")
        raise CliError(EXIT_ATTACK, str(exc)) from exc
    for i, length in enumerate(stego.manifest.chunk_lengths):
        print(f"chunk {i}: ok ({length} digit{'s' if length > 1 else ''})")
    if outcomes:
        res = outcomes[0]
        losses = [sa.ssim_loss_percent(c, s) for c, s in zip(res.covers, res.stego_images)]
        print(f"mean SSIM loss {np.mean(losses):.3f}%")
    save_stego(stego, args.out)
    print(f"wrote {len(stego)} images to {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    model = _load_key(args.key)
    try:
        stego = load_stego(args.stego)
        bits = extract_message(stego, model)
    except (ManifestError, codec.CorruptMessageError, OSError) as exc:
        raise CliError(EXIT_EXTRACT, str(exc)) from exc
    payload = codec.bits_to_bytes(bits)
    Path(args.out).write_bytes(payload)
    print(f"{len(bits)} bits, sha256 {hashlib.sha256(payload).hexdigest()}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    settings = experiments.Settings(
        seed=args.seed, classes=args.classes, per_class=args.per_class, epochs=args.epochs,
        models=args.models, messages=args.messages, message_bits=args.bits,
        images=args.images, trials=args.trials, max_k=args.max_k)
    settings = replace(settings, attack=replace(settings.attack, restarts=args.restarts,
                                                iterations=args.iters))
    if settings.models < 1 or settings.images < 1 or settings.classes < 2:
        raise CliError(EXIT_CONFIG, "need --models >= 1, --images >= 1, --classes >= 2")
    experiments.EXPERIMENTS[args.name](settings, Path(args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advembed",
                                     description="Hide messages in the class rankings of adversarial images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="train a classifier and write it as a key file")
    p.add_argument("--arch", default="desk", help=f"one of {', '.join(nk.ARCH_PRESETS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", default="synth", help="'synth', a PNG class directory or a CIFAR-10 .bin")
    p.add_argument("--classes", type=int, default=4, help="class count for synth data")
    p.add_argument("--per-class", type=int, default=200, help="images per class for synth data")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("embed", help="hide a message in a sequence of stego images")
    p.add_argument("--key", required=True)
    p.add_argument("--message", required=True, help="file path or hex bytes")
    p.add_argument("--covers", required=True, help="directory of PNG covers or 'synth'")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--epsilon-step", type=float, default=0.1)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--iters", type=int, default=40)
    p.add_argument("--noise-mode", default="restart-only", choices=["restart-only", "every-step"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover a message from stego images")
    p.add_argument("--key", required=True)
    p.add_argument("--stego", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("experiment", help="run a desk-scale experiment")
    p.add_argument("name", choices=sorted(experiments.EXPERIMENTS))
    p.add_argument("--out", required=True)
    defaults = experiments.Settings()
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--classes", type=int, default=defaults.classes)
    p.add_argument("--per-class", type=int, default=defaults.per_class)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--models", type=int, default=defaults.models)
    p.add_argument("--messages", type=int, default=defaults.messages)
    p.add_argument("--bits", type=int, default=defaults.message_bits)
    p.add_argument("--images", type=int, default=defaults.images)
    p.add_argument("--trials", type=int, default=defaults.trials)
    p.add_argument("--max-k", type=int, default=defaults.max_k)
    p.add_argument("--restarts", type=int, default=defaults.attack.restarts)
    p.add_argument("--iters", type=int, default=defaults.attack.iterations)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
