"""Closed-form population loss, gradient and Hessian under x ~ N(0, I).

The student is ``x -> sum_i relu(w_i . x)`` and the teacher is
``x -> relu(v . x)``; the loss is ``E[0.5 * (student(x) - teacher(x))**2]``.
"""
from __future__ import annotations

import numpy as np

from .errors import BadParam, ZeroVector
from .geometry import (
    TINY_NORM,
    Teacher,
    as_params,
    neuron_norms,
    pairwise_unit_angles,
    unit_angles,
)

TWO_PI = 2.0 * np.pi
PARALLEL_CUTOFF = 1e-8  # below this angle the sin-weighted Hessian terms are set to their limit 0


def sin_minus_theta_cos(theta):
    """``sin(t) - t*cos(t)`` evaluated without cancellation for small ``t``."""
    theta = np.asarray(theta, dtype=float)
    out = np.sin(theta) - theta * np.cos(theta)
    small = theta < 0.1
    if np.any(small):
        t = theta[small]
        t2 = t * t
        out[small] = t * t2 * (1.0 / 3 - t2 * (1.0 / 30 - t2 * (1.0 / 840 - t2 * (1.0 / 45360 - t2 / 3991680))))
    return out


def upsilon(w, v) -> float:
    """``E[relu(w.x) relu(v.x)]`` for standard Gaussian ``x``."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    nw = np.linalg.norm(w)
    nv = np.linalg.norm(v)
    if nw < TINY_NORM or nv < TINY_NORM:
        raise ZeroVector("upsilon is undefined for a zero vector")
    t = float(unit_angles((w / nw)[None, :], v / nv)[0])
    return float(nw * nv * (np.sin(t) + (np.pi - t) * np.cos(t)) / TWO_PI)


class _State:
    """Shared intermediate quantities for the loss and its derivatives."""

    __slots__ = ("W", "v", "norm_v", "vbar", "norms", "Wbar", "theta", "theta_ij", "r")

    def __init__(self, W, teacher: Teacher):
        W = as_params(W)
        if W.shape[1] != teacher.d:
            raise BadParam(f"neuron dimension {W.shape[1]} != teacher dimension {teacher.d}")
        self.W = W
        self.v = teacher.v
        self.norm_v = teacher.norm_v
        self.vbar = teacher.v / teacher.norm_v
        self.norms = neuron_norms(W)
        self.Wbar = W / self.norms[:, None]
        self.theta = unit_angles(self.Wbar, self.vbar)
        self.theta_ij = pairwise_unit_angles(self.Wbar)
        self.r = W.sum(axis=0) - teacher.v

    def loss(self) -> float:
        n = self.W.shape[0]
        pair = 0.0
        if n > 1:
            iu = np.triu_indices(n, 1)
            pair = np.sum(sin_minus_theta_cos(self.theta_ij[iu]) * self.norms[iu[0]] * self.norms[iu[1]])
        single = np.sum(sin_minus_theta_cos(self.theta) * self.norms) * self.norm_v
        value = 0.25 * float(self.r @ self.r) + (pair - single) / TWO_PI
        return max(float(value), 0.0)

    def gradient(self) -> np.ndarray:
        T = self.theta_ij
        coef = np.sum(np.sin(T) * self.norms[None, :], axis=1) - self.norm_v * np.sin(self.theta)
        cross = np.sum(T[:, :, None] * self.W[None, :, :], axis=1)
        return 0.5 * self.r + (coef[:, None] * self.Wbar - cross + self.theta[:, None] * self.v) / TWO_PI


def loss(W, teacher: Teacher) -> float:
    """Exact population loss; raises ``DegenerateNeuron`` on a zero neuron.

    Evaluated in the rearranged form ``|r|^2/4 + (pair terms - teacher
    terms)/(2 pi)`` so that values near a global minimum keep their relative
    precision.
    """
    return _State(W, teacher).loss()


def gradient(W, teacher: Teacher) -> np.ndarray:
    """Exact population gradient, shape ``(n, d)``; row ``i`` is dL/dw_i."""
    return _State(W, teacher).gradient()


def loss_and_gradient(W, teacher: Teacher):
    s = _State(W, teacher)
    return s.loss(), s.gradient()


def loss_from_upsilon(W, teacher: Teacher) -> float:
    """Loss via the unrearranged kernel sum; used as a cross-check only."""
    W = as_params(W)
    n = W.shape[0]
    total = 0.5 * upsilon(teacher.v, teacher.v)
    for i in range(n):
        total -= upsilon(W[i], teacher.v)
        for j in range(n):
            total += 0.5 * upsilon(W[i], W[j])
    return float(total)


def _unit_normal(a: np.ndarray, b: np.ndarray, cos_ab: float) -> np.ndarray:
    """Normalized component of unit ``a`` orthogonal to unit ``b``."""
    nvec = a - cos_ab * b
    return nvec / np.linalg.norm(nvec)


def _zeta(wbar, w_norm, ubar, u_norm, t) -> np.ndarray:
    d = wbar.shape[0]
    if t < PARALLEL_CUTOFF or t > np.pi - PARALLEL_CUTOFF:
        return np.zeros((d, d))
    nbar = _unit_normal(ubar, wbar, float(ubar @ wbar))
    scale = np.sin(t) * u_norm / (TWO_PI * w_norm)
    return scale * (np.eye(d) - np.outer(wbar, wbar) + np.outer(nbar, nbar))


def hessian(W, teacher: Teacher) -> np.ndarray:
    """Dense ``(n*d, n*d)`` Hessian built from its closed-form ``d x d`` blocks.

    Near-parallel (or antiparallel) pairs, where the normal direction is
    undefined, contribute their continuous limit: the sin-weighted terms
    vanish.
    """
    s = _State(W, teacher)
    n, d = s.W.shape
    eye = np.eye(d)
    Lam = np.zeros((n * d, n * d))
    for i in range(n):
        block = 0.5 * eye - _zeta(s.Wbar[i], s.norms[i], s.vbar, s.norm_v, s.theta[i])
        for j in range(n):
            if j != i:
                block = block + _zeta(s.Wbar[i], s.norms[i], s.Wbar[j], s.norms[j], s.theta_ij[i, j])
        Lam[i * d:(i + 1) * d, i * d:(i + 1) * d] = block
    for i in range(n):
        for j in range(i + 1, n):
            t = s.theta_ij[i, j]
            block = (np.pi - t) * eye
            if PARALLEL_CUTOFF <= t <= np.pi - PARALLEL_CUTOFF:
                c = float(s.Wbar[i] @ s.Wbar[j])
                n_ij = _unit_normal(s.Wbar[i], s.Wbar[j], c)
                n_ji = _unit_normal(s.Wbar[j], s.Wbar[i], c)
                block = block + np.outer(n_ij, s.Wbar[j]) + np.outer(n_ji, s.Wbar[i])
            block = block / TWO_PI
            Lam[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
            Lam[j * d:(j + 1) * d, i * d:(i + 1) * d] = block.T
    return Lam


def hessian_norm_ratio(W, teacher: Teacher) -> float:
    """Spectral norm of the Hessian divided by ``n**2``."""
    n = as_params(W).shape[0]
    return float(np.linalg.norm(hessian(W, teacher), 2) / n**2)
