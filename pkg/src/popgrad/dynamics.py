"""Gradient descent and gradient flow on the population loss.

Both drivers return a :class:`Trajectory`: snapshots of the student at the
recorded times plus one row of scalar diagnostics per record.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BadParam, DegenerateUpdate, NonFinite, NotSymmetric, StiffnessFailure
from .geometry import TINY_NORM, Teacher, as_params, geometry_view
from .objective import _State

CSV_COLUMNS = (
    "time", "loss", "grad_norm", "H", "Z", "V", "kappa_max",
    "min_wnorm", "max_wnorm", "max_theta", "balance_ratio",
)

# Defaults of the shipped figure1 profile; d = 20 is a free choice
DEFAULT_SIGMA = 0.1
DEFAULT_ETA = 0.05
DEFAULT_NORM_V = 1.0
DEFAULT_D = 20


@dataclass(frozen=True)
class InitSpec:
    n: int
    d: int
    sigma: float = DEFAULT_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise BadParam("InitSpec needs n >= 1 and d >= 1")
        if not self.sigma > 0:
            raise BadParam("InitSpec.sigma must be positive")
        if not 0 <= self.seed < 2**64:
            raise BadParam("InitSpec.seed must be a 64-bit unsigned integer")

    @property
    def s1(self) -> float:
        return 0.5 * self.sigma * np.sqrt(self.d)

    @property
    def s2(self) -> float:
        return 2.0 * self.sigma * np.sqrt(self.d)


@dataclass(frozen=True)
class RunConfig:
    """How to run and record a trajectory.

    In ``discrete_gd`` mode ``t_end`` and ``record_every`` count steps; in
    ``gradient_flow`` mode they are continuous times. ``log_records`` adds
    that many log-spaced record points per decade on top of the uniform grid.
    """

    mode: str = "discrete_gd"
    eta: float = DEFAULT_ETA
    t_end: float = 1000
    record_every: float = 1
    log_records: int = 0
    stop_loss: float = 0.0
    ode_rel_tol: float = 1e-8
    ode_abs_tol: float = 1e-10
    keep_dense: bool = False
    max_steps: int = 50_000_000

    def __post_init__(self):
        if self.mode not in ("discrete_gd", "gradient_flow"):
            raise BadParam(f"unknown mode {self.mode!r}")
        if self.mode == "discrete_gd" and not self.eta > 0:
            raise BadParam("eta must be positive in discrete_gd mode")
        if self.t_end < 0:
            raise BadParam("t_end must be nonnegative")
        if not self.record_every > 0:
            raise BadParam("record_every must be positive")
        if self.log_records < 0 or self.stop_loss < 0:
            raise BadParam("log_records and stop_loss must be nonnegative")
        if not (self.ode_rel_tol > 0 and self.ode_abs_tol > 0):
            raise BadParam("ODE tolerances must be positive")


def record_schedule(t_end, record_every, log_records=0, integer=False) -> np.ndarray:
    pts = [0.0, float(t_end)]
    if t_end > 0:
        pts.extend(np.arange(record_every, t_end, record_every).tolist())
        if log_records > 0 and t_end > 1:
            k = int(np.ceil(np.log10(t_end) * log_records))
            pts.extend(np.logspace(0, np.log10(t_end), k + 1).tolist())
    arr = np.array(pts)
    if integer:
        arr = np.round(arr)
    arr = np.unique(arr[(arr >= 0) & (arr <= t_end)])
    return arr


# ----------------------------------------------------------------------------
# Trajectory container
# ----------------------------------------------------------------------------


class _Recorder:
    def __init__(self, teacher):
        self.teacher = teacher
        self.times = []
        self.snaps = []
        self.rows = {c: [] for c in CSV_COLUMNS[1:]}

    def add(self, t, W, loss_value, grad):
        if not np.isfinite(loss_value) or not np.all(np.isfinite(grad)):
            raise NonFinite(f"loss or gradient not finite at t={t}")
        view = geometry_view(W, self.teacher)
        self.times.append(t)
        self.snaps.append(np.array(W, copy=True))
        row = self.rows
        row["loss"].append(loss_value)
        row["grad_norm"].append(float(np.linalg.norm(grad)))
        row["H"].append(view.H)
        row["Z"].append(view.Z)
        row["V"].append(view.V)
        row["kappa_max"].append(np.nan if view.kappa_max is None else view.kappa_max)
        row["min_wnorm"].append(float(view.norms.min()))
        row["max_wnorm"].append(float(view.norms.max()))
        row["max_theta"].append(view.max_theta)
        br = view.balance_ratio
        row["balance_ratio"].append(np.nan if br is None else br)


@dataclass
class Trajectory:
    """Recorded run.

    ``times`` are step indices (``discrete_gd``) or continuous times
    (``gradient_flow``); ``columns`` maps each scalar name in
    :data:`CSV_COLUMNS` (minus ``time``) to an array aligned with ``times``.
    Undefined values (``kappa_max``, ``balance_ratio``) are NaN.
    """

    times: np.ndarray
    snapshots: np.ndarray
    columns: dict
    teacher: Teacher
    mode: str
    eta: Optional[float] = None
    stop_reason: str = "t_end"
    dense: Optional["DenseOutput"] = None

    @classmethod
    def _from_recorder(cls, rec: _Recorder, mode, eta, stop_reason, dense=None):
        return cls(
            times=np.array(rec.times, dtype=float),
            snapshots=np.array(rec.snaps),
            columns={k: np.array(v, dtype=float) for k, v in rec.rows.items()},
            teacher=rec.teacher,
            mode=mode,
            eta=eta,
            stop_reason=stop_reason,
            dense=dense,
        )

    def __len__(self):
        return len(self.times)

    def __getitem__(self, name) -> np.ndarray:
        if name == "time":
            return self.times
        return self.columns[name]

    @property
    def loss(self) -> np.ndarray:
        return self.columns["loss"]

    @property
    def n(self) -> int:
        return self.snapshots.shape[1]

    @property
    def d(self) -> int:
        return self.snapshots.shape[2]

    def view(self, k):
        return geometry_view(self.snapshots[k], self.teacher)

    def segment(self, start=0, stop=None) -> "Trajectory":
        sl = slice(start, stop)
        return Trajectory(
            times=self.times[sl],
            snapshots=self.snapshots[sl],
            columns={k: v[sl] for k, v in self.columns.items()},
            teacher=self.teacher,
            mode=self.mode,
            eta=self.eta,
            stop_reason=self.stop_reason,
            dense=self.dense,
        )

    def csv_text(self) -> str:
        lines = [",".join(CSV_COLUMNS)]
        integer_time = self.mode == "discrete_gd"
        for k, t in enumerate(self.times):
            cells = [str(int(t)) if integer_time else format_float(t)]
            cells.extend(format_float(self.columns[c][k]) for c in CSV_COLUMNS[1:])
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def snapshots_json(self) -> str:
        payload = {
            "mode": self.mode,
            "teacher": self.teacher.v.tolist(),
            "times": self.times.tolist(),
            "snapshots": self.snapshots.tolist(),
        }
        return json.dumps(payload)


def format_float(x) -> str:
    """Shortest round-trip decimal; empty for undefined values."""
    if x is None:
        return ""
    x = float(x)
    if np.isnan(x):
        return ""
    return repr(x)


def read_csv(path) -> dict:
    """Parse a trajectory CSV back into column arrays (empty cells -> NaN)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        cols = {h: [] for h in header}
        for line in fh:
            for h, cell in zip(header, line.rstrip("\n").split(",")):
                cols[h].append(float(cell) if cell else np.nan)
    return {h: np.array(v) for h, v in cols.items()}


# ----------------------------------------------------------------------------
# Initialization and discrete steps
# ----------------------------------------------------------------------------


def init_random(spec: InitSpec) -> np.ndarray:
    """Each neuron i.i.d. ``N(0, sigma^2 I_d)``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    return spec.sigma * rng.standard_normal((spec.n, spec.d))


def _check_update(W, step=None):
    norms = np.linalg.norm(W, axis=1)
    bad = np.flatnonzero(norms < TINY_NORM)
    if bad.size:
        raise DegenerateUpdate(int(bad[0]), step)


def gd_step(W, teacher: Teacher, eta: float) -> np.ndarray:
    if not eta > 0:
        raise BadParam("eta must be positive")
    W_new = as_params(W) - eta * _State(W, teacher).gradient()
    _check_update(W_new)
    return W_new


def run_gd(W0, teacher: Teacher, config: RunConfig) -> Trajectory:
    if config.mode != "discrete_gd":
        raise BadParam("run_gd needs a discrete_gd config")
    W = as_params(W0).copy()
    t_end = int(round(config.t_end))
    schedule = record_schedule(t_end, config.record_every, config.log_records, integer=True).astype(int)
    rec = _Recorder(teacher)
    eta = config.eta
    nxt = 0
    reason = "t_end"
    for t in range(t_end + 1):
        s = _State(W, teacher)
        g = s.gradient()
        if t == schedule[nxt]:
            value = s.loss()
            rec.add(t, W, value, g)
            nxt += 1
            if value <= config.stop_loss:
                reason = "stop_loss"
                break
        if t == t_end:
            break
        W = W - eta * g
        _check_update(W, t + 1)
    return Trajectory._from_recorder(rec, "discrete_gd", eta, reason)


# ----------------------------------------------------------------------------
# Gradient flow: Dormand-Prince 5(4) with cubic Hermite dense output
# ----------------------------------------------------------------------------

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
# fifth-order minus embedded fourth-order weights (last entry multiplies the FSAL stage)
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


def _hermite(y0, f0, y1, f1, h, s):
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * f0
            + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * f1)


class DenseOutput:
    """Piecewise cubic Hermite interpolant over accepted integrator steps."""

    def __init__(self, shape):
        self.shape = shape
        self._t0 = []
        self._h = []
        self._seg = []

    def _append(self, t0, h, y0, f0, y1, f1):
        self._t0.append(t0)
        self._h.append(h)
        self._seg.append((y0, f0, y1, f1))

    @property
    def t_min(self):
        return self._t0[0] if self._t0 else 0.0

    @property
    def t_max(self):
        return self._t0[-1] + self._h[-1] if self._t0 else 0.0

    def __call__(self, t) -> np.ndarray:
        if not self._t0:
            raise ValueError("no integrator steps recorded")
        if t < self.t_min or t > self.t_max:
            raise ValueError(f"t={t} outside [{self.t_min}, {self.t_max}]")
        k = int(np.searchsorted(self._t0, t, side="right")) - 1
        k = min(max(k, 0), len(self._t0) - 1)
        y0, f0, y1, f1 = self._seg[k]
        h = self._h[k]
        return _hermite(y0, f0, y1, f1, h, (t - self._t0[k]) / h).reshape(self.shape)


def run_flow(W0, teacher: Teacher, config: RunConfig) -> Trajectory:
    """Integrate ``dW/dt = -grad L(W)`` and record at the configured times."""
    if config.mode != "gradient_flow":
        raise BadParam("run_flow needs a gradient_flow config")
    W0 = as_params(W0)
    shape = W0.shape
    t_end = float(config.t_end)
    schedule = record_schedule(t_end, config.record_every, config.log_records)
    rtol, atol = config.ode_rel_tol, config.ode_abs_tol
    dense = DenseOutput(shape) if config.keep_dense else None

    def rhs(y):
        return -_State(y.reshape(shape), teacher).gradient().ravel()

    rec = _Recorder(teacher)

    def record(t, y, f):
        W = y.reshape(shape)
        value = _State(W, teacher).loss()
        rec.add(float(t), W, value, -f.reshape(shape))
        return value

    y = W0.ravel().copy()
    f = rhs(y)
    t = 0.0
    nxt = 0
    value = record(t, y, f)
    nxt = 1
    if value <= config.stop_loss or nxt >= len(schedule):
        reason = "stop_loss" if value <= config.stop_loss else "t_end"
        return Trajectory._from_recorder(rec, "gradient_flow", None, reason, dense)

    scale = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / scale) ** 2))
    d1 = np.sqrt(np.mean((f / scale) ** 2))
    h = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, t_end)
    reason = "t_end"
    steps = 0
    k = [None] * 7
    while nxt < len(schedule):
        steps += 1
        if steps > config.max_steps:
            raise StiffnessFailure(f"exceeded {config.max_steps} integrator steps at t={t}")
        h = min(h, t_end - t)
        if h < 1e-12 * max(1.0, abs(t)):
            raise StiffnessFailure(f"step size underflow at t={t}")
        k[0] = f
        for i in range(1, 6):
            yi = y + h * sum(a * k[j] for j, a in enumerate(_A[i]))
            k[i] = rhs(yi)
        y_new = y + h * sum(b * k[j] for j, b in enumerate(_B) if b != 0.0)
        f_new = rhs(y_new)
        k[6] = f_new
        err = h * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / sc) ** 2)))
        if not np.isfinite(err_norm):
            raise NonFinite(f"non-finite integrator state at t={t}")
        if err_norm > 1.0:
            h *= max(0.2, 0.9 * err_norm ** -0.2)
            continue
        t_new = t + h if t + h < t_end else t_end
        if dense is not None:
            dense._append(t, t_new - t, y, f, y_new, f_new)
        stop = False
        while nxt < len(schedule) and schedule[nxt] <= t_new:
            tr = schedule[nxt]
            if tr == t_new:
                yr, fr = y_new, f_new
            else:
                yr = _hermite(y, f, y_new, f_new, t_new - t, (tr - t) / (t_new - t))
                fr = rhs(yr)
            value = record(tr, yr, fr)
            nxt += 1
            if value <= config.stop_loss:
                stop = True
                reason = "stop_loss"
                break
        if stop:
            break
        _check_update(y_new.reshape(shape))
        factor = 10.0 if err_norm == 0.0 else min(10.0, max(0.2, 0.9 * err_norm ** -0.2))
        y, f, t = y_new, f_new, t_new
        h *= factor
    return Trajectory._from_recorder(rec, "gradient_flow", None, reason, dense)


def run(W0, teacher: Teacher, config: RunConfig) -> Trajectory:
    if config.mode == "discrete_gd":
        return run_gd(W0, teacher, config)
    return run_flow(W0, teacher, config)


# ----------------------------------------------------------------------------
# Toy configurations
# ----------------------------------------------------------------------------


def perpendicular(teacher: Teacher) -> np.ndarray:
    """Fixed vector orthogonal to ``v`` with the same norm."""
    if teacher.d < 2:
        raise BadParam("a perpendicular direction needs d >= 2")
    vbar = teacher.unit
    k = int(np.argmin(np.abs(vbar)))
    e = np.zeros(teacher.d)
    e[k] = 1.0
    p = e - (e @ vbar) * vbar
    return teacher.norm_v * p / np.linalg.norm(p)


def make_toycase(kind: str, teacher: Teacher, *, lambda1=None, lambda2=None,
                 lambdas: Sequence[float] = (), w=None, n=None) -> np.ndarray:
    """Structured initial configurations.

    ``symmetric_pair``: ``lambda1*v +/- lambda2*v_perp`` (``lambda2 = 0`` allowed).
    ``parallel``: ``lambda_i * v`` for each entry of ``lambdas``.
    ``equal``: ``n`` copies of ``w``.
    """
    if kind == "symmetric_pair":
        if lambda1 is None or lambda2 is None or not lambda1 > 0 or lambda2 < 0:
            raise BadParam("symmetric_pair needs lambda1 > 0 and lambda2 >= 0")
        vp = perpendicular(teacher)
        return np.stack([lambda1 * teacher.v + lambda2 * vp, lambda1 * teacher.v - lambda2 * vp])
    if kind == "parallel":
        lam = np.asarray(lambdas, dtype=float)
        if lam.size == 0 or np.any(~(lam > 0)):
            raise BadParam("parallel needs positive lambdas")
        return lam[:, None] * teacher.v[None, :]
    if kind == "equal":
        if w is None or n is None or n < 1:
            raise BadParam("equal needs a neuron w and n >= 1")
        w = np.asarray(w, dtype=float).reshape(-1)
        if w.shape[0] != teacher.d or np.linalg.norm(w) < TINY_NORM:
            raise BadParam("equal needs a nonzero neuron of the teacher's dimension")
        return np.tile(w, (n, 1))
    raise BadParam(f"unknown toy case {kind!r}")


def extract_lambda(W, teacher: Teacher, tol: float = 1e-9):
    """Coordinates ``(lambda1, lambda2)`` of a reflection-symmetric pair."""
    W = as_params(W)
    if W.shape[0] != 2:
        raise NotSymmetric("a symmetric pair has exactly two neurons")
    vbar = teacher.unit
    h = W @ vbar
    z = W - np.outer(h, vbar)
    scale = max(float(np.abs(W).max()), teacher.norm_v)
    if abs(h[0] - h[1]) > tol * scale or np.abs(z[0] + z[1]).max() > tol * scale:
        raise NotSymmetric("neurons are not reflections of each other about v")
    vp = perpendicular(teacher)
    sign = 1.0 if z[0] @ vp >= 0 else -1.0
    return float(h[0] / teacher.norm_v), float(sign * np.linalg.norm(z[0]) / teacher.norm_v)
