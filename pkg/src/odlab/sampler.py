"""Probe sequences (OMS) and the resampled training datasets built from them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    ModelError,
    Network,
    TimeGrid,
    check_od_sequence,
    global_distributions,
    normalize_counts,
    save_counts,
)
from .simulator import simulate


@dataclass
class Sample:
    D_E: np.ndarray  # (o, n_sec)
    d_p: np.ndarray  # (I * n_od,)
    d_a: np.ndarray


@dataclass
class Dataset:
    samples: list[Sample]
    seed: int
    m: int
    network_id: str = ""

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, ratio: float = 0.8) -> tuple[list[Sample], list[Sample]]:
        cut = int(round(ratio * len(self.samples)))
        return self.samples[:cut], self.samples[cut:]

    def arrays(self, kind: str = "production") -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([s.D_E for s in self.samples])
        Y = np.stack([s.d_p if kind == "production" else s.d_a for s in self.samples])
        return X, Y


def build_oms(truth: np.ndarray, m: int) -> np.ndarray:
    """m probe trips for every pair-interval whose true demand exceeds m, none elsewhere."""
    if m < 1:
        raise ModelError("m must be >= 1")
    truth = check_od_sequence(truth)
    return np.where(truth > m, float(m), 0.0)


def resample(oms: np.ndarray, seed, scale: np.ndarray | None = None) -> np.ndarray:
    """Scale every nonzero cell by an independent U[0, 1] draw, rounded to whole trips.

    ``seed`` may be anything accepted by ``np.random.default_rng``.  ``scale``
    overrides the draws (same shape as ``oms``).
    """
    oms = check_od_sequence(oms)
    if scale is None:
        scale = np.random.default_rng(seed).uniform(0.0, 1.0, size=oms.shape)
    return np.rint(oms * scale)


def generate_dataset(network: Network, truth: np.ndarray, grid: TimeGrid, m: int, n_samples: int,
                     seed: int, network_id: str = "", max_attempts: int = 100) -> Dataset:
    if n_samples < 1:
        raise ModelError("n_samples must be >= 1")
    oms = build_oms(truth, m)
    if not oms.any():
        raise ModelError("no important pairs at this m")
    samples = [_one_sample(network, oms, grid, seed, idx, max_attempts) for idx in range(n_samples)]
    return Dataset(samples, seed, m, network_id)


def _one_sample(network, oms, grid, seed, idx, max_attempts) -> Sample:
    for attempt in range(max_attempts):
        seq = resample(oms, [seed, idx, attempt])
        if seq.sum() <= 0:
            continue
        counts, _ = simulate(network, seq, grid)
        if counts.sum() <= 0:
            continue
        d_p, d_a = global_distributions(seq)
        return Sample(normalize_counts(counts), d_p.values.copy(), d_a.values.copy())
    raise ModelError(f"sample {idx}: no valid draw in {max_attempts} attempts")


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": ds.seed, "m": ds.m, "n_samples": len(ds), "network_id": ds.network_id}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for k, s in enumerate(ds.samples):
        save_counts(s.D_E, d / f"sample_{k:05d}_DE.csv")
        with open(d / f"sample_{k:05d}_dist.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "d_p", "d_a"])
            for c, (p, a) in enumerate(zip(s.d_p, s.d_a)):
                w.writerow([c, repr(float(p)), repr(float(a))])


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"{d}: no dataset manifest")
    manifest = json.loads((d / "manifest.json").read_text())
    samples = []
    for k in range(manifest["n_samples"]):
        D_E = np.loadtxt(d / f"sample_{k:05d}_DE.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
        dist = np.loadtxt(d / f"sample_{k:05d}_dist.csv", delimiter=",", skiprows=1, ndmin=2)
        samples.append(Sample(D_E, dist[:, 1].copy(), dist[:, 2].copy()))
    return Dataset(samples, manifest["seed"], manifest["m"], manifest.get("network_id", ""))
