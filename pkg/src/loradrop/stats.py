"""Seed-sweep summary statistics and the paired sign-flip permutation test."""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError


def median_and_mad(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


def paired_permutation_test(a, b, max_exact: int = 20, n_resamples: int = 20000,
                            seed: int = 0) -> float:
    """Two-sided sign-flip permutation test on paired samples.

    The statistic is the mean paired difference; the null flips each
    pair's sign independently. Exact enumeration up to max_exact pairs,
    Monte-Carlo beyond that.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be equal-length vectors")
    n = a.size
    if n < 2:
        raise ContractError("need at least 2 pairs")
    diffs = a - b
    observed = abs(float(np.mean(diffs)))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(diffs), initial=0.0)))

    if n <= max_exact:
        hits = 0
        total = 2 ** n
        for signs in itertools.product((1.0, -1.0), repeat=n):
            stat = abs(float(np.mean(diffs * np.asarray(signs))))
            if stat >= observed - tol:
                hits += 1
        return hits / total

    rng = np.random.default_rng(seed)
    signs = rng.choice((1.0, -1.0), size=(n_resamples, n))
    stats = np.abs((signs * diffs).mean(axis=1))
    # add-one correction keeps Monte-Carlo p-values strictly positive
    return (1 + int(np.sum(stats >= observed - tol))) / (n_resamples + 1)
