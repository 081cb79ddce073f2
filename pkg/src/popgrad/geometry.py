"""Geometric quantities of a student/teacher configuration.

Student parameters are a float array ``W`` of shape ``(n, d)`` whose rows are
the neurons ``w_i``; the teacher is a single vector ``v`` of length ``d``.
Everything here is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BadParam, DegenerateNeuron, NonFinite, ZeroVector

TINY_NORM = 1e-300
Z_TOLERANCE = 1e-12  # relative to |v|, membership threshold for Q+


def as_params(W) -> np.ndarray:
    """Validate student parameters and return them as a 2-D float array."""
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise BadParam(f"student parameters must have shape (n, d), got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NonFinite("student parameters contain NaN or Inf")
    return W


def neuron_norms(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=1)
    bad = np.flatnonzero(norms < TINY_NORM)
    if bad.size:
        raise DegenerateNeuron(int(bad[0]))
    return norms


@dataclass(frozen=True)
class Teacher:
    """The single teacher neuron ``v`` with its cached norm."""

    v: np.ndarray
    norm_v: float

    @classmethod
    def from_vector(cls, v) -> "Teacher":
        v = np.array(v, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise NonFinite("teacher vector contains NaN or Inf")
        norm = float(np.linalg.norm(v))
        if norm < TINY_NORM:
            raise ZeroVector("teacher vector has zero norm")
        v.setflags(write=False)
        return cls(v, norm)

    @classmethod
    def canonical(cls, d: int, norm_v: float = 1.0) -> "Teacher":
        """``norm_v * e_1`` in ``d`` dimensions."""
        if d < 1 or norm_v <= 0:
            raise BadParam("teacher needs d >= 1 and norm_v > 0")
        v = np.zeros(d)
        v[0] = norm_v
        return cls.from_vector(v)

    @classmethod
    def random(cls, d: int, norm_v: float = 1.0, seed: int = 0) -> "Teacher":
        """Uniformly random direction scaled to ``norm_v``."""
        if d < 1 or norm_v <= 0:
            raise BadParam("teacher needs d >= 1 and norm_v > 0")
        g = np.random.default_rng(seed).standard_normal(d)
        return cls.from_vector(norm_v * g / np.linalg.norm(g))

    @property
    def d(self) -> int:
        return self.v.shape[0]

    @property
    def unit(self) -> np.ndarray:
        return self.v / self.norm_v


def angle(u, w) -> float:
    """Angle between two nonzero vectors, in [0, pi].

    Uses ``2 atan2(| |w| u - |u| w |, | |w| u + |u| w |)``, which keeps full
    relative precision near 0 and pi where arccos of a dot product does not.
    """
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    nu = np.linalg.norm(u)
    nw = np.linalg.norm(w)
    if nu < TINY_NORM or nw < TINY_NORM:
        raise ZeroVector("angle is undefined for a zero vector")
    a = nw * u
    b = nu * w
    return float(2.0 * np.arctan2(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def unit_angles(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angles between each unit row of ``A`` and the unit vector ``b``."""
    return 2.0 * np.arctan2(np.linalg.norm(A - b, axis=-1), np.linalg.norm(A + b, axis=-1))


def pairwise_unit_angles(A: np.ndarray) -> np.ndarray:
    """Symmetric matrix of angles between unit rows of ``A``; zero diagonal."""
    D = A[:, None, :]
    E = A[None, :, :]
    T = 2.0 * np.arctan2(np.linalg.norm(D - E, axis=-1), np.linalg.norm(D + E, axis=-1))
    T = 0.5 * (T + T.T)
    np.fill_diagonal(T, 0.0)
    return T


@dataclass(frozen=True)
class GeometryView:
    """Every derived geometric quantity at one parameter point.

    ``kappa`` holds angles between the orthogonal components ``z_i`` for
    pairs inside ``q_plus`` and NaN elsewhere; ``kappa_max`` is ``None``
    when fewer than two ``z_i`` are nonzero.
    """

    W: np.ndarray
    teacher: Teacher
    norms: np.ndarray
    theta: np.ndarray
    theta_ij: np.ndarray
    h: np.ndarray
    H: float
    r: np.ndarray
    z: np.ndarray
    z_norms: np.ndarray
    q_plus: tuple
    kappa: np.ndarray
    kappa_max: Optional[float]
    Z: float
    V: float

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def unit_W(self) -> np.ndarray:
        return self.W / self.norms[:, None]

    @property
    def max_theta(self) -> float:
        return float(self.theta.max())

    @property
    def balance_ratio(self) -> Optional[float]:
        """``max h_i / min h_i``, or ``None`` unless every ``h_i > 0``."""
        if self.h.min() <= 0:
            return None
        return float(self.h.max() / self.h.min())


def geometry_view(W, teacher: Teacher) -> GeometryView:
    W = as_params(W)
    if W.shape[1] != teacher.d:
        raise BadParam(f"neuron dimension {W.shape[1]} != teacher dimension {teacher.d}")
    norms = neuron_norms(W)
    vbar = teacher.unit
    Wbar = W / norms[:, None]
    theta = unit_angles(Wbar, vbar)
    theta_ij = pairwise_unit_angles(Wbar)
    h = W @ vbar
    r = W.sum(axis=0) - teacher.v
    H = float(teacher.norm_v - h.sum())
    z = W - np.outer(h, vbar)
    z_norms = np.linalg.norm(z, axis=1)
    q_plus = tuple(int(i) for i in np.flatnonzero(z_norms > Z_TOLERANCE * teacher.norm_v))

    n = W.shape[0]
    kappa = np.full((n, n), np.nan)
    kappa_max = None
    if len(q_plus) >= 1:
        idx = np.array(q_plus)
        zbar = z[idx] / z_norms[idx, None]
        kappa[np.ix_(idx, idx)] = pairwise_unit_angles(zbar)
        if len(q_plus) >= 2:
            kappa_max = float(np.nanmax(kappa))

    return GeometryView(
        W=W,
        teacher=teacher,
        norms=norms,
        theta=theta,
        theta_ij=theta_ij,
        h=h,
        H=H,
        r=r,
        z=z,
        z_norms=z_norms,
        q_plus=q_plus,
        kappa=kappa,
        kappa_max=kappa_max,
        Z=_pairwise_distance_sum(z),
        V=float(np.sum(np.sin(theta / 2.0) ** 2)),
    )


def _pairwise_distance_sum(z: np.ndarray) -> float:
    n = z.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, 1)
    dist = np.linalg.norm(z[iu[0]] - z[iu[1]], axis=1)
    return float(np.sum(dist))


def potential_Z(view: GeometryView) -> float:
    """Sum of pairwise distances between the v-orthogonal components."""
    return view.Z


def potential_V(view: GeometryView) -> float:
    """Aggregate misalignment ``sum_i sin^2(theta_i / 2)``."""
    return view.V
