"""Monte Carlo estimates of the loss and gradient from their defining expectations.

These estimators share no code with the closed forms in :mod:`popgrad.objective`
and serve as an independent check on them.

Reproducibility: samples are produced in fixed-size chunks. Chunk ``c`` draws
its uniforms from a Philox-4x64 counter-based generator keyed by ``seed`` with
counter ``(0, 0, 0, c)``, so any chunk can be generated independently of the
others. Uniform pairs are turned into standard normals by the Marsaglia polar
method: draw ``u1, u2 ~ U(-1, 1)``, keep pairs with ``0 < s = u1^2 + u2^2 < 1``
and emit ``u1 * f`` and ``u2 * f`` with ``f = sqrt(-2 ln(s) / s)``. Per-chunk
means and centred sums of squares are merged in chunk order (Chan et al.),
so the result does not depend on how many worker threads ran.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BadParam
from .geometry import Teacher, as_params, neuron_norms

CHUNK = 16384
DEFAULT_SAMPLES = 1_000_000


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_error: float
    n_samples: int
    seed: int


def worker_count() -> int:
    env = os.environ.get("POPGRAD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(4, os.cpu_count() or 1)


def polar_normals(bitgen: np.random.Generator, size: int) -> np.ndarray:
    """``size`` standard normal variates by the Marsaglia polar method."""
    out = np.empty(size)
    filled = 0
    while filled < size:
        pairs = max(16, int((size - filled) * 0.66) + 16)
        u = bitgen.uniform(-1.0, 1.0, size=(2, pairs))
        s = u[0] ** 2 + u[1] ** 2
        ok = (s > 0.0) & (s < 1.0)
        f = np.sqrt(-2.0 * np.log(s[ok]) / s[ok])
        vals = np.concatenate([u[0, ok] * f, u[1, ok] * f])
        take = min(vals.size, size - filled)
        out[filled:filled + take] = vals[:take]
        filled += take
    return out


def gaussian_chunk(seed: int, chunk: int, m: int, d: int) -> np.ndarray:
    """The ``(m, d)`` block of inputs belonging to chunk index ``chunk``."""
    bitgen = np.random.Generator(np.random.Philox(counter=[0, 0, 0, chunk], key=seed))
    return polar_normals(bitgen, m * d).reshape(m, d)


def residual_pointwise(W, teacher: Teacher, x) -> float:
    """``sum_j relu(w_j . x) - relu(v . x)`` at a single input ``x``."""
    W = as_params(W)
    x = np.asarray(x, dtype=float)
    return float(np.sum(np.maximum(W @ x, 0.0)) - max(float(teacher.v @ x), 0.0))


def _residuals(W, v, X):
    return np.maximum(X @ W.T, 0.0).sum(axis=1) - np.maximum(X @ v, 0.0)


def _merge(parts):
    """Combine ``(count, mean, m2)`` triples in order."""
    count, mean, m2 = parts[0]
    for nb, mb, m2b in parts[1:]:
        total = count + nb
        delta = mb - mean
        mean = mean + delta * (nb / total)
        m2 = m2 + m2b + delta * delta * (count * nb / total)
        count = total
    return count, mean, m2


def _chunk_sizes(n_samples):
    full, rest = divmod(n_samples, CHUNK)
    return [CHUNK] * full + ([rest] if rest else [])


def _run_chunks(fn, n_samples):
    sizes = _chunk_sizes(n_samples)
    workers = worker_count()
    if workers == 1 or len(sizes) == 1:
        return [fn(c, m) for c, m in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(len(sizes)), sizes))


def _check(n_samples, seed):
    if n_samples < 2:
        raise BadParam("n_samples must be at least 2")
    if not 0 <= seed < 2**64:
        raise BadParam("seed must be a 64-bit unsigned integer")


def mc_loss(W, teacher: Teacher, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> McEstimate:
    _check(n_samples, seed)
    W = as_params(W)
    v = teacher.v

    def chunk(c, m):
        X = gaussian_chunk(seed, c, m, W.shape[1])
        vals = 0.5 * _residuals(W, v, X) ** 2
        mu = vals.mean()
        return m, mu, float(np.sum((vals - mu) ** 2))

    count, mean, m2 = _merge(_run_chunks(chunk, n_samples))
    std = np.sqrt(m2 / (count - 1))
    return McEstimate(float(mean), float(std / np.sqrt(count)), n_samples, seed)


def mc_gradient(W, teacher: Teacher, n_samples: int = DEFAULT_SAMPLES, seed: int = 0):
    """Estimate of ``E[R(x) 1{w_i . x >= 0} x]`` per neuron.

    Returns ``(mean, std_error)``, both of shape ``(n, d)``.
    """
    _check(n_samples, seed)
    W = as_params(W)
    neuron_norms(W)
    v = teacher.v

    def chunk(c, m):
        X = gaussian_chunk(seed, c, m, W.shape[1])
        R = _residuals(W, v, X)
        active = (X @ W.T >= 0.0).astype(float)
        contrib = (R[:, None] * active)[:, :, None] * X[:, None, :]
        mu = contrib.mean(axis=0)
        return m, mu, np.sum((contrib - mu) ** 2, axis=0)

    count, mean, m2 = _merge(_run_chunks(chunk, n_samples))
    se = np.sqrt(m2 / (count - 1)) / np.sqrt(count)
    return mean, se
