from __future__ import annotations

import numpy as np
import pytest

from advembed import data, experiments
from advembed import neuralkey as nk


@pytest.fixture(scope="session")
def desk_settings() -> experiments.Settings:
    return experiments.Settings()


@pytest.fixture(scope="session")
def desk(desk_settings) -> experiments.Desk:
    """The seed-pinned 10-class desk model, its training split and cover pool."""
    return experiments.desk(desk_settings)


# 16x16 images carry less class signal, so the gratings are made stronger
SMALL = dict(num_classes=4, dims=(16, 16, 3), seed=3, class_contrast=0.03)


@pytest.fixture(scope="session")
def small_data() -> data.LabeledDataset:
    return data.synth_dataset(per_class=100, **SMALL)


@pytest.fixture(scope="session")
def small_pool() -> np.ndarray:
    """Fresh covers from the small classes."""
    return data.synth_dataset(per_class=10, sample_seed=77, **SMALL).images


@pytest.fixture(scope="session")
def small_model(small_data) -> nk.ModelKey:
    arch = nk.desk_arch(small_data.dims, 4, dense_units=32)
    return nk.train(nk.build_model(arch, 3), small_data, 10, learning_rate=0.02, seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_verdicts: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; returns ``ok``."""
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _verdicts.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_verdicts, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
