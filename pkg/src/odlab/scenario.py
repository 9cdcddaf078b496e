"""Synthetic ground-truth demand with a morning and an evening peak."""

from __future__ import annotations

import numpy as np

from .core import ModelError


def peak_profile(I: int, peaks=(0.15, 0.85), width: float = 0.2, base: float = 0.4) -> np.ndarray:
    """Relative demand per estimation interval: flat base plus two Gaussian bumps."""
    if I < 1 or width <= 0 or base < 0:
        raise ModelError("invalid profile parameters")
    centres = (np.arange(I) + 0.5) / I
    w = base + sum(np.exp(-0.5 * ((centres - c) / width) ** 2) for c in peaks)
    return w / w.sum()


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    # largest-remainder rounding; sums to total exactly
    raw = total * weights / weights.sum()
    out = np.floor(raw)
    rest = int(total - out.sum())
    order = np.lexsort((np.arange(raw.size), -(raw - out)))
    out[order[:rest]] += 1
    return out


def make_truth(n_od: int, I: int, total: int, seed: int, spread: float = 1.2, drift: float = 0.4,
               peaks=(0.15, 0.85), width: float = 0.2, base: float = 0.4) -> np.ndarray:
    """Integer OD sequence whose interval totals follow ``peak_profile`` and sum to ``total``.

    Pair weights are log-normal (``spread``) with a per-interval log-normal
    perturbation (``drift``), so a few pairs carry most of the trips.
    """
    if n_od < 2 or total < 0 or spread < 0 or drift < 0:
        raise ModelError("invalid truth parameters")
    rng = np.random.default_rng(seed)
    pair_w = rng.lognormal(0.0, spread, size=(n_od, n_od))
    seq = np.zeros((I, n_od, n_od))
    interval_totals = _apportion(total, peak_profile(I, peaks, width, base))
    off = ~np.eye(n_od, dtype=bool)
    for t in range(I):
        w = pair_w * rng.lognormal(0.0, drift, size=(n_od, n_od))
        seq[t][off] = _apportion(int(interval_totals[t]), w[off])
    return seq
