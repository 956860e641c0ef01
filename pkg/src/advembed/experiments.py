"""Desk-scale experiment harness (rq1..rq5).

Each experiment writes CSV tables (header row, comma separated) plus
whitespace ``.dat`` files and a gnuplot script next to them. Everything is
derived from ``Settings.seed``, so two runs with the same settings write
byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import codec, data
from . import neuralkey as nk
from . import steganalysis as sa
from . import tamper
from .attack import AttackConfig, grid_search_gamma, random_chunk_plan, sata_embed
from .pipeline import Manifest, StegoSequence, decoding_rate


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    classes: int = 10
    per_class: int = 200
    pool_per_class: int = 30
    epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 32
    models: int = 20
    messages: int = 100
    message_bits: int = 64
    images: int = 100
    trials: int = 100
    max_k: int = 7
    attack: AttackConfig = AttackConfig()


@dataclass
class Desk:
    model: nk.ModelKey
    train_set: data.LabeledDataset
    pool: data.LabeledDataset


def desk_data(settings: Settings) -> tuple[data.LabeledDataset, data.LabeledDataset]:
    """Synthetic training split and held-out cover pool for ``settings``."""
    total = settings.per_class + settings.pool_per_class
    ds = data.synth_dataset(settings.classes, total, seed=settings.seed)
    return data.split_dataset(ds, settings.classes * settings.per_class, seed=settings.seed)


def train_desk(settings: Settings, arch: nk.ArchSpec | None = None, seed: int | None = None,
               train_set: data.LabeledDataset | None = None) -> nk.ModelKey:
    if train_set is None:
        train_set, _ = desk_data(settings)
    seed = settings.seed if seed is None else seed
    arch = arch or nk.desk_arch(train_set.dims, settings.classes)
    return nk.train(nk.build_model(arch, seed), train_set, settings.epochs,
                    learning_rate=settings.learning_rate, batch_size=settings.batch_size,
                    seed=seed)


def desk(settings: Settings) -> Desk:
    train_set, pool = desk_data(settings)
    return Desk(train_desk(settings, train_set=train_set), train_set, pool)


def family(settings: Settings, train_set: data.LabeledDataset) -> list[nk.ModelKey]:
    """``settings.models`` keys over a 2x2 width/depth grid, seeds after the desk seed."""
    grid = nk.arch_grid(train_set.dims, settings.classes)
    per_arch = -(-settings.models // len(grid))
    seeds = [settings.seed + 1 + i for i in range(per_arch)]
    members = nk.generate_model_family(grid, seeds, train_set, epochs=settings.epochs,
                                       learning_rate=settings.learning_rate,
                                       batch_size=settings.batch_size)
    return members[:settings.models]


def describe(model: nk.ModelKey) -> tuple[int, float]:
    """(conv blocks, first conv width) of a desk-style architecture."""
    convs = [layer for layer in model.arch.layers if isinstance(layer, nk.Conv)]
    return len(convs), convs[0].out_channels if convs else 0


def single_digit_stego(model: nk.ModelKey, covers: np.ndarray, count: int, rng,
                       config: AttackConfig) -> tuple[StegoSequence, np.ndarray]:
    """(stego sequence, covers) for ``count`` random single digits; failed chunks are dropped."""
    rng = np.random.default_rng(rng)
    digits = rng.integers(0, model.num_classes, size=count)
    out = sata_embed(model, covers, [(int(d),) for d in digits], replace(config, k=1), rng)
    keep = np.flatnonzero(out.per_chunk_success)
    manifest = Manifest(n=model.num_classes, k=1, bit_length=0, chunk_lengths=[1] * len(keep))
    return StegoSequence(out.stego_images[keep], manifest), out.covers[keep]


# --------------------------------------------------------------------------
# output helpers

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_table(directory: Path, name: str, header: Sequence[str], rows: Iterable[Sequence],
                plot: str | None = None) -> None:
    """``name``.csv, ``name``.dat and, given a gnuplot body, ``name``.gp."""
    rows = [[_fmt(v) for v in row] for row in rows]
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{name}.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    with open(directory / f"{name}.dat", "w", encoding="utf-8") as f:
        f.write("# " + " ".join(header) + "\n")
        for row in rows:
            f.write(" ".join(v.replace(" ", "_") or "-" for v in row) + "\n")
    if plot:
        script = (f"set terminal pngcairo size 800,500\nset output '{name}.png'\n"
                  f"set datafile commentschars '#'\n{plot}\n")
        (directory / f"{name}.gp").write_text(script, encoding="utf-8")


def _mean_std(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if not len(values):
        return float("nan"), float("nan")
    return float(values.mean()), float(values.std())


# --------------------------------------------------------------------------
# experiments

def rq1(settings: Settings, out: Path, log=print) -> list[list]:
    """SSIM loss of stego sets (k = 1, 2) next to a JPEG-75 baseline."""
    d = desk(settings)
    rng = np.random.default_rng([settings.seed, 1])
    covers = d.pool.images
    rows = []
    for k in (1, 2):
        chunks = random_chunk_plan(settings.classes, k, settings.images, rng)
        res = sata_embed(d.model, covers, chunks, replace(settings.attack, k=k), rng)
        ok = np.flatnonzero(res.per_chunk_success)
        losses = [sa.ssim_loss_percent(res.covers[i], res.stego_images[i]) for i in ok]
        mean, std = _mean_std(losses)
        rows.append([f"sata_k{k}", k, len(ok), mean, std])
        log(f"rq1 k={k}: {len(ok)}/{len(chunks)} stego images, SSIM loss {mean:.3f}% +/- {std:.3f}")
    picks = rng.choice(len(covers), size=min(settings.images, len(covers)), replace=False)
    losses = [sa.ssim_loss_percent(covers[i], tamper.jpeg_compress(covers[i], 75)) for i in picks]
    mean, std = _mean_std(losses)
    rows.append(["jpeg_q75", 0, len(picks), mean, std])
    log(f"rq1 jpeg-75 baseline: SSIM loss {mean:.3f}% +/- {std:.3f}")
    write_table(out, "rq1_ssim", ["set", "k", "images", "ssim_loss_mean_pct", "ssim_loss_std_pct"],
                rows, "set style data histogram\nset ylabel 'SSIM loss (%)'\n"
                      "plot 'rq1_ssim.dat' using 4:xtic(1) title 'mean SSIM loss'")
    return rows


def rq2(settings: Settings, out: Path, log=print) -> list[list]:
    """Detector AUCs: adversarial stego vs clean, and an LSB-replacement sanity corpus."""
    d = desk(settings)
    rng = np.random.default_rng([settings.seed, 2])
    n = settings.images
    pool = d.pool.images
    order = rng.permutation(len(pool))
    cover_part, clean_part = pool[order[: len(pool) // 2]], pool[order[len(pool) // 2:]]
    stego, _ = single_digit_stego(d.model, cover_part, n, rng, settings.attack)
    clean = clean_part[:n]
    lsb = np.stack([sa.lsb_replace(x, 1.0, rng) for x in clean])
    detectors = {"spa": sa.spa_score, "chi_square": sa.lsb_chi_square_score}
    rows = []
    for corpus, positives in (("adversarial", stego.images), ("lsb_rate_1.0", lsb)):
        labels = [0] * len(clean) + [1] * len(positives)
        for name, score in detectors.items():
            scores = [score(x) for x in clean] + [score(x) for x in positives]
            auc = sa.auc_roc(scores, labels)
            rows.append([corpus, name, len(clean), len(positives), auc])
            log(f"rq2 {corpus:>12} {name:>10}: AUC {auc:.3f}")
    write_table(out, "rq2_auc", ["corpus", "detector", "clean", "stego", "auc"], rows)
    return rows


def rq3(settings: Settings, out: Path, log=print) -> list[list]:
    """Decoding rate of a fresh k=1 embedding over a model family."""
    d = desk(settings)
    rng = np.random.default_rng([settings.seed, 3])
    stego, _ = single_digit_stego(d.model, d.pool.images, settings.images, rng, settings.attack)
    rows = []
    for i, member in enumerate(family(settings, d.train_set)):
        depth, width = describe(member)
        rate = decoding_rate(stego, d.model, member)
        rows.append([i, depth, width, member.seed, member.train_accuracy, rate])
        log(f"rq3 model {i:2d} depth={depth} width={width:2d} seed={member.seed}: "
            f"accuracy {member.train_accuracy:.3f}, decoding rate {rate:.3f}")
    rates = [r[-1] for r in rows]
    log(f"rq3 max {max(rates):.3f}, median {float(np.median(rates)):.3f} over {len(rates)} models")
    write_table(out, "rq3_decoding", ["model", "depth", "width", "seed", "train_accuracy",
                                      "decoding_rate"], rows,
                "set xlabel 'model'\nset ylabel 'decoding rate'\nset yrange [0:1]\n"
                "plot 'rq3_decoding.dat' using 1:6 with impulses lw 4 title 'decoding rate'")
    return rows


def rq4(settings: Settings, out: Path, log=print) -> list[list]:
    """Recovery rate per transform for stego sets crafted with each family model."""
    d = desk(settings)
    rng = np.random.default_rng([settings.seed, 4])
    members = [d.model] + family(replace(settings, models=settings.models - 1), d.train_set)
    rows = []
    for i, member in enumerate(members):
        stego, _ = single_digit_stego(member, d.pool.images, settings.images, rng,
                                      settings.attack)
        reference = [[int(c)] for c in nk.rank_classes(nk.forward(member, stego.images))[:, 0]]
        transforms = {"identity": lambda x: x, **tamper.TRANSFORMS}
        for name, fn in transforms.items():
            rate = tamper.recovery_rate(member, stego.images, reference, fn)
            rows.append([i, name, len(reference), rate])
        log(f"rq4 model {i:2d}: " + ", ".join(f"{r[1]}={r[3]:.2f}" for r in rows[-len(transforms):]))
    write_table(out, "rq4_recovery", ["model", "transform", "images", "recovery_rate"], rows)
    best = {}
    for _, name, _, rate in rows:
        best[name] = max(best.get(name, 0.0), rate)
    summary = [[name, rate, float(np.median([r[3] for r in rows if r[1] == name]))]
               for name, rate in best.items()]
    write_table(out, "rq4_best", ["transform", "best_recovery_rate", "median_recovery_rate"],
                summary, "set style data histogram\nset yrange [0:1]\n"
                         "plot 'rq4_best.dat' using 2:xtic(1) title 'best of family'")
    return rows


def rq5(settings: Settings, out: Path, log=print) -> list[list]:
    """Density (analytic + simulated) and attack success rate for k = 1..max_k."""
    d = desk(settings)
    rng = np.random.default_rng([settings.seed, 5])
    n = settings.classes
    pixels = int(np.prod(d.train_set.dims))
    rows = []
    for k in range(1, min(settings.max_k, n) + 1):
        images, bpp = codec.simulate_density(n, k, settings.messages, settings.message_bits,
                                             pixels, seed=settings.seed)
        _, bpp_wc = codec.simulate_density(n, k, settings.messages, settings.message_bits,
                                           pixels, seed=settings.seed, accounting="worst_case")
        gamma = 1.0
        if k > 1:
            gamma, _ = grid_search_gamma(d.model, d.pool.images, k, (0.5, 1.0, 2.0, 4.0),
                                         settings.attack, rng)
        chunks = random_chunk_plan(n, k, settings.trials, rng)
        res = sata_embed(d.model, d.pool.images, chunks,
                         replace(settings.attack, k=k, gamma=gamma), rng)
        rows.append([k, images, bpp, bpp_wc, gamma, res.best_rate])
        log(f"rq5 k={k}: {images:.2f} images/message, {bpp:.3e} bpp "
            f"(worst-case {bpp_wc:.3e}), gamma={gamma}, success {res.best_rate:.3f}")
    write_table(out, "rq5_density", ["k", "avg_images", "bpp_exact", "bpp_worst_case", "gamma",
                                     "success_rate"], rows,
                "set xlabel 'k'\nset ylabel 'bits per pixel'\nset y2label 'success rate'\n"
                "set y2tics\nplot 'rq5_density.dat' using 1:3 with linespoints title 'density', "
                "'' using 1:6 axes x1y2 with linespoints title 'success'")
    return rows


EXPERIMENTS = {"rq1": rq1, "rq2": rq2, "rq3": rq3, "rq4": rq4, "rq5": rq5}
