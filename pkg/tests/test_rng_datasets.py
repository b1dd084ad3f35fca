"""Deterministic streams and the synthetic density menu."""

import subprocess
import sys

import numpy as np
import pytest

from flowtune.datasets import (SUPPORT_BOX, DatasetConfigError, DatasetSpec,
                               sample, two_moons_labeled, write_csv)
from flowtune.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).normal(1000)
    b = Rng(42).normal(1000)
    assert np.array_equal(a, b)


def test_cross_process_stream_identical():
    code = ("from flowtune.rng import Rng; "
            "print(Rng(1234).normal(1000).tobytes().hex())")
    outs = [subprocess.run([sys.executable, "-c", code], capture_output=True,
                           text=True, check=True).stdout.strip()
            for _ in range(2)]
    local = Rng(1234).normal(1000).tobytes().hex()
    assert outs[0] == outs[1] == local


def test_split_streams_differ():
    base = Rng(3)
    assert not np.array_equal(base.split(1).normal(10), base.split(2).normal(10))


def test_gaussian_moments():
    batch = sample(DatasetSpec("gaussian", 1.0, 10_000), Rng(0))
    assert np.abs(batch.mean(axis=0)).max() < 0.05
    assert np.abs(batch.var(axis=0) - 1.0).max() < 0.05


def test_eight_gaussians_degenerate_centers():
    batch = sample(DatasetSpec("eight_gaussians", 0.0, 500), Rng(1))
    radii = np.linalg.norm(batch, axis=1)
    assert np.allclose(radii, 2.0, atol=1e-12)
    angles = np.mod(np.arctan2(batch[:, 1], batch[:, 0]), 2 * np.pi)
    steps = np.mod(angles / (np.pi / 4), 1.0)
    assert np.allclose(np.minimum(steps, 1 - steps), 0.0, atol=1e-9)


def test_two_moons_class_balance():
    _, labels = two_moons_labeled(Rng(5), 10_000, 1.0)
    frac = labels.mean()
    assert abs(frac - 0.5) < 0.02


def test_determinism_identical_batches():
    spec = DatasetSpec("spiral", 1.0, 256)
    assert np.array_equal(sample(spec, Rng(9)), sample(spec, Rng(9)))


@pytest.mark.parametrize("name", ["gaussian", "two_moons", "eight_gaussians",
                                  "checkerboard", "spiral"])
def test_bounded_support(name):
    batch = sample(DatasetSpec(name, 1.0, 100_000), Rng(3))
    assert np.abs(batch).max() <= SUPPORT_BOX


def test_shift_moves_gaussian():
    batch = sample(DatasetSpec("gaussian", 1.0, 20_000, (2.0, 0.0)), Rng(4))
    assert batch[:, 0].mean() == pytest.approx(2.0, abs=0.08)


def test_unknown_name_rejected():
    with pytest.raises(DatasetConfigError):
        DatasetSpec("mnist", 1.0, 10)


def test_csv_export_header(tmp_path):
    path = tmp_path / "batch.csv"
    write_csv(path, sample(DatasetSpec("gaussian", 1.0, 5), Rng(0)))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "x,y"
    assert len(lines) == 6
