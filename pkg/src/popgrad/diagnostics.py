"""Trajectory checkers, phase detection and rate fits.

Each checker returns a :class:`CheckResult`. Only inequalities that hold
with no hidden constant are hard pass/fail; anything that depends on an
unknown constant is reported as a ratio with verdict ``report_only``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import InitSpec, Trajectory
from .errors import BadParam, BadProjection, InsufficientData
from .geometry import GeometryView, Teacher, as_params, geometry_view
from .objective import TWO_PI, _State

PASS, FAIL, REPORT = "pass", "fail", "report_only"
THETA_BOUND_SLACK = 1.0 + 1e-9
ALIGNED_THETA = 0.05


@dataclass(frozen=True)
class PhaseThresholds:
    eps1: float = 0.02
    eps2: float = 0.05
    h_floor_factor: float = 0.5   # h_i >= h_floor_factor * s1 during phase 2
    h_cap_factor: float = 2.0     # h_i <= h_cap_factor * |v| / n during phase 2
    balance_factor: float = 2.5

    def __post_init__(self):
        if not (0 < self.eps1 <= self.eps2 < 1):
            raise BadParam("thresholds need 0 < eps1 <= eps2 < 1")
        if self.balance_factor < 1:
            raise BadParam("balance_factor must be >= 1")
        if not (self.h_floor_factor > 0 and self.h_cap_factor > 0):
            raise BadParam("h bounds must be positive")


@dataclass
class CheckResult:
    name: str
    anchor: str
    verdict: str
    values: dict = field(default_factory=dict)
    threshold: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.verdict != FAIL

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "anchor": self.anchor,
            "values": _jsonable(self.values),
            "threshold": _jsonable(self.threshold),
            "verdict": self.verdict,
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not np.isfinite(x) else x
    return x


class DiagnosticsReport:
    """Ordered collection of checker results; each name appears once."""

    def __init__(self, results=()):
        self.results: list = []
        for r in results:
            self.add(r)

    def add(self, result: CheckResult):
        if any(r.name == result.name for r in self.results):
            raise ValueError(f"checker {result.name!r} already in report")
        self.results.append(result)

    def __getitem__(self, name) -> CheckResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def __iter__(self):
        return iter(self.results)

    def __len__(self):
        return len(self.results)

    @property
    def failures(self):
        return [r for r in self.results if r.verdict == FAIL]

    @property
    def ok(self) -> bool:
        return not self.failures

    def as_list(self):
        return [r.as_dict() for r in self.results]

    def to_json(self) -> str:
        return json.dumps(self.as_list(), indent=1, sort_keys=True)


# ----------------------------------------------------------------------------
# Initialization and phases
# ----------------------------------------------------------------------------


def check_init(W0, spec: InitSpec, teacher: Teacher) -> CheckResult:
    """Norm and angle window at initialization, plus non-degeneracy when n >= 2."""
    view = geometry_view(W0, teacher)
    norm_ok = (view.norms >= spec.s1) & (view.norms <= spec.s2)
    angle_ok = (view.theta >= np.pi / 3) & (view.theta <= 2 * np.pi / 3)
    values = {
        "norms": view.norms,
        "s1": spec.s1,
        "s2": spec.s2,
        "theta": view.theta,
        "norm_ok": norm_ok,
        "angle_ok": angle_ok,
    }
    ok = bool(norm_ok.all() and angle_ok.all())
    if view.n >= 2:
        all_z = len(view.q_plus) == view.n
        kappa_ok = view.kappa_max is not None and view.kappa_max > 0
        values.update(all_z_nonzero=all_z, kappa_max=view.kappa_max, non_degenerate=all_z and kappa_ok)
        ok = ok and all_z and kappa_ok
    return CheckResult("init", "initial norms in [s1, s2], angles in [pi/3, 2pi/3], non-degenerate z",
                       PASS if ok else FAIL, values)


@dataclass(frozen=True)
class PhaseMarkers:
    t1_index: Optional[int]
    t2_index: Optional[int]
    t1_time: Optional[float]
    t2_time: Optional[float]


def phase_detect(traj: Trajectory, thresholds: PhaseThresholds = PhaseThresholds()) -> PhaseMarkers:
    """First record with ``max theta <= 4 eps1``, then first record from there on
    with ``H <= eps2 |v|``. Either marker may be absent."""
    if len(traj) < 3:
        raise InsufficientData("phase detection needs at least 3 records")
    hit1 = np.flatnonzero(traj["max_theta"] <= 4 * thresholds.eps1)
    if hit1.size == 0:
        return PhaseMarkers(None, None, None, None)
    i1 = int(hit1[0])
    hit2 = np.flatnonzero(traj["H"][i1:] <= thresholds.eps2 * traj.teacher.norm_v)
    i2 = int(hit2[0]) + i1 if hit2.size else None
    return PhaseMarkers(i1, i2, float(traj.times[i1]), None if i2 is None else float(traj.times[i2]))


# ----------------------------------------------------------------------------
# Pointwise inequalities
# ----------------------------------------------------------------------------


def theta_bound_margin(W, teacher: Teacher, loss_value: Optional[float] = None) -> np.ndarray:
    """Per-neuron ``|w_i|^2 theta_i^3 / (30 pi L)`` (NaN-free: 0/0 -> 0)."""
    s = _State(W, teacher)
    L = s.loss() if loss_value is None else loss_value
    lhs = s.norms**2 * s.theta**3
    rhs = 30 * np.pi * L
    if rhs == 0:
        return np.where(lhs == 0, 0.0, np.inf)
    return lhs / rhs


def check_theta_bound(W, teacher: Teacher) -> CheckResult:
    ratio = theta_bound_margin(W, teacher)
    ok = bool(np.all(ratio <= THETA_BOUND_SLACK))
    return CheckResult("theta_bound", "|w_i|^2 theta_i^3 <= 30 pi L for every i",
                       PASS if ok else FAIL, {"max_ratio": float(ratio.max())}, THETA_BOUND_SLACK)


def check_balance(view: GeometryView, factor: float) -> CheckResult:
    anchor = "projections balanced: h_i <= factor * h_j"
    if view.h.min() <= 0:
        return CheckResult("balance", anchor, REPORT, {"h": view.h}, factor)
    ratio = float(view.h.max() / view.h.min())
    return CheckResult("balance", anchor, PASS if ratio <= factor else FAIL, {"ratio": ratio}, factor)


def descent_projection(W, teacher: Teacher) -> float:
    """``sum_i <grad_i L, w_i - w_i*>`` with ``w_i* = (h_i / sum_j h_j) v``."""
    s = _State(W, teacher)
    h = s.W @ s.vbar
    total = h.sum()
    if not total > 0:
        raise BadProjection("sum of projections onto v must be positive")
    target = np.outer(h / total, teacher.v)
    return float(np.sum(s.gradient() * (s.W - target)))


def check_residual_bound(view: GeometryView, loss_value: float, factor: float = 2.1) -> CheckResult:
    """Ratio ``|r| / (n sqrt L)``; for aligned neurons also ``|r| <= factor sqrt L``."""
    anchor = "|r| = O(n sqrt L); |r| <= 2 sqrt L when aligned"
    rn = float(np.linalg.norm(view.r))
    if not loss_value > 0:
        return CheckResult("residual_bound", anchor, REPORT, {"r_norm": rn, "ratio": None})
    sq = np.sqrt(loss_value)
    values = {"r_norm": rn, "ratio": rn / (view.n * sq), "r_over_sqrtL": rn / sq}
    if view.max_theta <= ALIGNED_THETA:
        return CheckResult("residual_bound", anchor, PASS if rn <= factor * sq else FAIL, values, factor)
    return CheckResult("residual_bound", anchor, REPORT, values, factor)


def h_update_terms(W, teacher: Teacher, eta: float):
    """Predicted change of each ``h_i`` under one GD step, split as
    ``(eta/2) H - Q_i``. Returns ``(eta/2 * H, Q)``."""
    s = _State(W, teacher)
    h = s.W @ s.vbar
    H = teacher.norm_v - h.sum()
    cos_t = s.Wbar @ s.vbar
    T = s.theta_ij
    coef = np.sum(np.sin(T) * s.norms[None, :], axis=1) - teacher.norm_v * np.sin(s.theta)
    Q = eta / TWO_PI * (coef * cos_t - T @ h + s.theta * teacher.norm_v)
    return 0.5 * eta * H, Q


def check_h_update_decomposition(W_t, W_next, teacher: Teacher, eta: float,
                                 tol: float = 1e-10) -> CheckResult:
    vbar = teacher.unit
    drift, Q = h_update_terms(W_t, teacher, eta)
    dh = as_params(W_next) @ vbar - as_params(W_t) @ vbar
    err = float(np.max(np.abs(dh - (drift - Q))))
    return CheckResult("h_update", "h_i(t+1) - h_i(t) = (eta/2) H(t) - Q_i(t)",
                       PASS if err <= tol else FAIL, {"max_abs_error": err, "Q": Q}, tol)


def z_dynamics_rhs(W, teacher: Teacher) -> np.ndarray:
    """Right side of the flow equation for the v-orthogonal components."""
    view = geometry_view(W, teacher)
    n = view.n
    T = view.theta_ij
    out = np.empty_like(view.z)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        coef = np.pi - teacher.norm_v / view.norms[i] * np.sin(view.theta[i])
        coef += sum(view.norms[j] / view.norms[i] * np.sin(T[i, j]) for j in others)
        out[i] = -coef / TWO_PI * view.z[i]
        for j in others:
            out[i] -= (np.pi - T[i, j]) / TWO_PI * view.z[j]
    return out


def z_dynamics_error(W, teacher: Teacher) -> float:
    vbar = teacher.unit
    g = _State(W, teacher).gradient()
    proj = -(g - np.outer(g @ vbar, vbar))
    return float(np.max(np.abs(proj - z_dynamics_rhs(W, teacher))))


# ----------------------------------------------------------------------------
# Fits
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    kind: str

    @property
    def factor(self) -> float:
        """Per-unit-time decay factor of an exponential fit."""
        return float(np.exp(self.slope))


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return float(slope), float(intercept), r2


def default_window(times: np.ndarray, kind: str) -> np.ndarray:
    """Index mask: ``t >= max(t_end/10, 10)``, then the trailing half of that
    range (in log-time for power laws, linear time otherwise)."""
    t_end = float(times[-1])
    base = times >= max(t_end / 10.0, 10.0)
    if not base.any():
        return base
    lo = float(times[base][0])
    if kind == "power_law" and lo > 0:
        mid = np.sqrt(lo * t_end)
    else:
        mid = 0.5 * (lo + t_end)
    return base & (times >= mid)


def estimate_rate(times, values, kind: str = "power_law", window=None, floor: float = 0.0) -> RateFit:
    """Least-squares decay rate of ``values`` over ``times``.

    ``power_law`` fits ``log value`` against ``log t``; ``exponential`` fits
    ``log value`` against ``t``. ``window`` is ``(t_min, t_max)`` or ``None``
    for :func:`default_window`. Values at or below ``floor`` are dropped.
    """
    if kind not in ("power_law", "exponential"):
        raise BadParam(f"unknown fit kind {kind!r}")
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is None:
        mask = default_window(t, kind)
    else:
        mask = (t >= window[0]) & (t <= window[1])
    mask &= np.isfinite(y) & (y > floor)
    if kind == "power_law":
        mask &= t > 0
    idx = np.flatnonzero(mask)
    if idx.size < 10:
        raise InsufficientData(f"rate fit needs >= 10 usable records, got {idx.size}")
    x = np.log(t[idx]) if kind == "power_law" else t[idx]
    slope, intercept, r2 = _linfit(x, np.log(y[idx]))
    return RateFit(slope, intercept, r2, (int(idx[0]), int(idx[-1]) + 1), kind)


def estimate_loss_rate(traj: Trajectory, kind: str = "power_law", window=None) -> RateFit:
    return estimate_rate(traj.times, traj.loss, kind, window)


def fit_lower_bound(traj: Trajectory, min_r2: float = 0.98, tail_from: Optional[float] = None) -> CheckResult:
    """Linear fit of ``L^(-1/3)`` against time on the trailing half.

    Linear growth means ``L`` decays no faster than ``t^-3``; exponential
    decay shows up as a poor linear fit.
    """
    t = traj.times
    L = traj.loss
    start = 0.5 * t[-1] if tail_from is None else tail_from
    mask = (t >= start) & (L > 0)
    if mask.sum() < 10:
        raise InsufficientData("lower-bound fit needs >= 10 positive-loss records in the tail")
    slope, intercept, r2 = _linfit(t[mask], L[mask] ** (-1.0 / 3.0))
    ok = r2 >= min_r2 and slope > 0
    return CheckResult("lower_bound_fit", "L^(-1/3) grows at most linearly in t",
                       PASS if ok else FAIL,
                       {"slope": slope, "intercept": intercept, "r_squared": r2, "n_points": int(mask.sum())},
                       min_r2)


# ----------------------------------------------------------------------------
# Trajectory checkers
# ----------------------------------------------------------------------------


def _norm_window(teacher: Teacher, n: int):
    return teacher.norm_v / (4 * n), 4 * teacher.norm_v / n


def gradient_ratio(traj: Trajectory) -> np.ndarray:
    """``|grad L| n^(2/3) |v|^(1/3) / L^(2/3)`` per record (NaN where L = 0)."""
    L = traj.loss
    with np.errstate(divide="ignore", invalid="ignore"):
        c = traj["grad_norm"] * traj.n ** (2 / 3) * traj.teacher.norm_v ** (1 / 3) / L ** (2 / 3)
    return np.where(L > 0, c, np.nan)


def check_grad_lower_bound(traj: Trajectory, start: int = 0, small_loss: Optional[float] = None,
                           threshold: float = 0.01, hard: bool = False) -> CheckResult:
    """Gradient-norm ratio over records where the neuron norms are regular and
    ``L <= small_loss`` (default ``1e-3 |v|^2``).

    ``trend`` compares the last qualifying record with the one a decade of
    time earlier; a ratio that does not vanish means ``|grad| >~ L^(2/3)``.
    """
    anchor = "|grad L| >= c L^(2/3) / (n^(2/3) |v|^(1/3)) near a minimum"
    small = 1e-3 * traj.teacher.norm_v**2 if small_loss is None else small_loss
    lo, hi = _norm_window(traj.teacher, traj.n)
    ok = ((traj["min_wnorm"] >= lo) & (traj["max_wnorm"] <= hi) & (traj.loss <= small) & (traj.loss > 0))
    ok[:start] = False
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return CheckResult("grad_lower_bound", anchor, REPORT, {"n_records": 0}, threshold)
    c = gradient_ratio(traj)[idx]
    t = traj.times[idx]
    trend = None
    earlier = np.flatnonzero(t <= t[-1] / 10.0)
    if earlier.size and t[-1] > 0:
        trend = float(c[-1] / c[earlier[-1]])
    values = {"min_c": float(c.min()), "last_c": float(c[-1]), "trend": trend, "n_records": int(idx.size)}
    verdict = REPORT
    if hard:
        verdict = PASS if c.min() >= threshold else FAIL
    return CheckResult("grad_lower_bound", anchor, verdict, values, threshold)


def check_descent_projection(traj: Trajectory) -> CheckResult:
    """``sum_i <grad_i, w_i - w_i*> >= L`` on aligned records with regular norms."""
    anchor = "sum_i <grad_i L, w_i - w_i*> >= L near a minimum"
    lo, hi = _norm_window(traj.teacher, traj.n)
    qual = ((traj["max_theta"] <= ALIGNED_THETA) & (traj["min_wnorm"] >= lo) & (traj["max_wnorm"] <= hi))
    idx = np.flatnonzero(qual)
    if idx.size == 0:
        return CheckResult("descent_projection", anchor, REPORT, {"n_records": 0})
    ratios = []
    bad = []
    for k in idx:
        L = traj.loss[k]
        p = descent_projection(traj.snapshots[k], traj.teacher)
        if L > 0:
            ratios.append(p / L)
        if p < L * (1 - 1e-9):
            bad.append(float(traj.times[k]))
    values = {"n_records": int(idx.size), "min_ratio": min(ratios) if ratios else None,
              "max_ratio": max(ratios) if ratios else None, "violations": bad[:20]}
    return CheckResult("descent_projection", anchor, FAIL if bad else PASS, values, 1.0)


def check_residual_bounds(traj: Trajectory, factor: float = 2.1) -> CheckResult:
    worst = None
    hard_fail = []
    asserted = 0
    for k in range(len(traj)):
        res = check_residual_bound(traj.view(k), traj.loss[k], factor)
        ratio = res.values.get("ratio")
        if ratio is not None:
            worst = ratio if worst is None else max(worst, ratio)
        if res.verdict == FAIL:
            hard_fail.append(float(traj.times[k]))
        if res.verdict != REPORT:
            asserted += 1
    verdict = FAIL if hard_fail else (PASS if asserted else REPORT)
    return CheckResult("residual_bound", "|r| = O(n sqrt L); |r| <= 2 sqrt L when aligned", verdict,
                       {"max_ratio": worst, "n_asserted": asserted, "violations": hard_fail[:20]}, factor)


def check_theta_bound_trajectory(traj: Trajectory) -> CheckResult:
    worst = 0.0
    for k in range(len(traj)):
        worst = max(worst, float(theta_bound_margin(traj.snapshots[k], traj.teacher, traj.loss[k]).max()))
    return CheckResult("theta_bound", "|w_i|^2 theta_i^3 <= 30 pi L for every i",
                       PASS if worst <= THETA_BOUND_SLACK else FAIL, {"max_ratio": worst}, THETA_BOUND_SLACK)


def check_balance_segment(traj: Trajectory, markers: PhaseMarkers, factor: float) -> CheckResult:
    anchor = "projections balanced: h_i <= factor * h_j (phase 2)"
    if markers.t1_index is None:
        return CheckResult("balance", anchor, REPORT, {"n_records": 0}, factor)
    stop = markers.t2_index + 1 if markers.t2_index is not None else len(traj)
    worst = 0.0
    bad = []
    for k in range(markers.t1_index, stop):
        res = check_balance(traj.view(k), factor)
        if res.verdict == FAIL:
            bad.append(float(traj.times[k]))
        if "ratio" in res.values:
            worst = max(worst, res.values["ratio"])
    return CheckResult("balance", anchor, FAIL if bad else PASS,
                       {"max_ratio": worst, "n_records": stop - markers.t1_index, "violations": bad[:20]}, factor)


def check_phase2_bounds(traj: Trajectory, markers: PhaseMarkers, thresholds: PhaseThresholds,
                        spec: Optional[InitSpec]) -> CheckResult:
    """Report how phase-2 records sit against the h window and the angle bound."""
    anchor = "phase 2: h_i within [s1/2, 2|v|/n], theta_i <= eps2"
    if markers.t1_index is None:
        return CheckResult("phase2_bounds", anchor, REPORT, {"n_records": 0})
    stop = markers.t2_index + 1 if markers.t2_index is not None else len(traj)
    sl = slice(markers.t1_index, stop)
    snaps = traj.snapshots[sl]
    h = snaps @ traj.teacher.unit
    cap = thresholds.h_cap_factor * traj.teacher.norm_v / traj.n
    values = {
        "n_records": int(snaps.shape[0]),
        "max_theta": float(traj["max_theta"][sl].max()),
        "frac_theta_within_eps2": float(np.mean(traj["max_theta"][sl] <= thresholds.eps2)),
        "max_h_over_cap": float(h.max() / cap),
    }
    if spec is not None:
        values["min_h_over_floor"] = float(h.min() / (thresholds.h_floor_factor * spec.s1))
    return CheckResult("phase2_bounds", anchor, REPORT, values)


def check_h_decay(traj: Trajectory, markers: PhaseMarkers, min_r2: float = 0.98) -> CheckResult:
    """Semilog fit of ``H`` across phase 2; geometric decay gives r^2 near 1."""
    anchor = "H decays geometrically in phase 2"
    if markers.t1_index is None or markers.t2_index is None:
        return CheckResult("h_decay", anchor, REPORT, {"n_records": 0}, min_r2)
    sl = slice(markers.t1_index, markers.t2_index + 1)
    t = traj.times[sl]
    H = traj["H"][sl]
    try:
        fit = estimate_rate(t, H, "exponential", window=(t[0], t[-1]))
    except InsufficientData:
        return CheckResult("h_decay", anchor, REPORT, {"n_records": int(t.size)}, min_r2)
    values = {"factor": fit.factor, "r_squared": fit.r_squared, "n_records": int(t.size)}
    if traj.eta is not None:
        values["reference_factor"] = 1 - traj.n * traj.eta / 2
    return CheckResult("h_decay", anchor, PASS if fit.r_squared >= min_r2 else FAIL, values, min_r2)


def check_phase1_envelope(traj: Trajectory, markers: PhaseMarkers, thresholds: PhaseThresholds,
                          spec: InitSpec) -> CheckResult:
    """Fraction of phase-1 records under the slow angle envelope (report only)."""
    anchor = "phase 1: sin^2(theta_i/2) - eps1^2 under a (1 + eta t / (s2/|v|))^(-1/24) envelope"
    if traj.eta is None:
        return CheckResult("phase1_envelope", anchor, REPORT, {"n_records": 0})
    stop = markers.t1_index + 1 if markers.t1_index is not None else len(traj)
    eps1sq = thresholds.eps1**2
    theta0 = traj.view(0).theta
    base = np.sin(theta0 / 2) ** 2 - eps1sq
    inside = 0
    for k in range(stop):
        th = traj.view(k).theta
        env = (1 + traj.eta * traj.times[k] / (spec.s2 / traj.teacher.norm_v)) ** (-1 / 24) * base
        inside += int(np.all(np.sin(th / 2) ** 2 - eps1sq <= env + 1e-12))
    return CheckResult("phase1_envelope", anchor, REPORT, {"fraction_inside": inside / stop, "n_records": stop})


def check_phase1_norm_growth(traj: Trajectory) -> CheckResult:
    """While ``max |w_i| <= |v|/(3n)``, no neuron norm decreases between records."""
    cap = traj.teacher.norm_v / (3 * traj.n)
    norms = np.linalg.norm(traj.snapshots, axis=2)
    checked = 0
    bad = []
    for k in range(len(traj) - 1):
        if norms[k].max() > cap or norms[k + 1].max() > cap:
            break
        checked += 1
        if np.any(norms[k + 1] < norms[k] * (1 - 1e-12)):
            bad.append(float(traj.times[k + 1]))
    verdict = REPORT if checked == 0 else (FAIL if bad else PASS)
    return CheckResult("phase1_norm_growth", "small neurons grow monotonically in phase 1", verdict,
                       {"n_steps_checked": checked, "violations": bad[:20]})


def check_h_updates(traj: Trajectory, tol: float = 1e-10, eps2: Optional[float] = None,
                    segment: Optional[tuple] = None) -> CheckResult:
    """The ``h`` update identity on every pair of records one step apart."""
    anchor = "h_i(t+1) - h_i(t) = (eta/2) H(t) - Q_i(t)"
    if traj.mode != "discrete_gd":
        return CheckResult("h_update", anchor, REPORT, {"n_pairs": 0}, tol)
    worst = 0.0
    pairs = 0
    q_small = []
    for k in range(len(traj) - 1):
        if traj.times[k + 1] - traj.times[k] != 1:
            continue
        res = check_h_update_decomposition(traj.snapshots[k], traj.snapshots[k + 1], traj.teacher, traj.eta, tol)
        worst = max(worst, res.values["max_abs_error"])
        pairs += 1
        if eps2 is not None and segment is not None and segment[0] <= k < segment[1]:
            q_small.append(float(np.max(np.abs(res.values["Q"]))) / (3 * eps2 * traj.eta * traj.teacher.norm_v))
    values = {"max_abs_error": worst, "n_pairs": pairs}
    if q_small:
        values["max_Q_over_3eps2_eta_v"] = max(q_small)
    verdict = REPORT if pairs == 0 else (PASS if worst <= tol else FAIL)
    return CheckResult("h_update", anchor, verdict, values, tol)


def check_implicit_regularization(traj: Trajectory, t2_index: Optional[int]) -> CheckResult:
    anchor = "after phase 2 every |w_i| stays in [|v|/(4n), 4|v|/n]"
    if t2_index is None:
        return CheckResult("implicit_regularization", anchor, REPORT, {"n_records": 0})
    lo, hi = _norm_window(traj.teacher, traj.n)
    norms = np.linalg.norm(traj.snapshots[t2_index:], axis=2)
    bad = np.argwhere((norms < lo) | (norms > hi))
    offending = [(float(traj.times[t2_index + k]), int(i)) for k, i in bad[:20]]
    return CheckResult("implicit_regularization", anchor, FAIL if bad.size else PASS,
                       {"min_norm": float(norms.min()), "max_norm": float(norms.max()),
                        "lower": lo, "upper": hi, "offending": offending})


def check_loss_monotone(traj: Trajectory, slack: float = 1e-12) -> CheckResult:
    """Loss never increases between records. Flagged, not failed, for GD."""
    inc = np.flatnonzero(np.diff(traj.loss) > slack)
    values = {"n_increases": int(inc.size), "at": [float(traj.times[k + 1]) for k in inc[:20]]}
    if traj.mode == "discrete_gd":
        return CheckResult("loss_monotone", "loss is non-increasing", REPORT, values, slack)
    return CheckResult("loss_monotone", "loss is non-increasing", FAIL if inc.size else PASS, values, slack)


def check_z_dynamics(traj: Trajectory, tol: float = 1e-9) -> CheckResult:
    worst = max(z_dynamics_error(traj.snapshots[k], traj.teacher) for k in range(len(traj)))
    return CheckResult("z_dynamics", "orthogonal part of -grad matches the z_i flow equation",
                       PASS if worst <= tol else FAIL, {"max_abs_error": worst}, tol)


def _cos_kappa(W, teacher, i, j):
    view = geometry_view(W, teacher)
    zi = view.z[i] / view.z_norms[i]
    zj = view.z[j] / view.z_norms[j]
    return float(zi @ zj)


def check_kappa_separation(traj: Trajectory, slack: float = 1e-3, fd_step: float = 1e-3,
                           rel_slack: float = 0.1) -> CheckResult:
    """At every record some ``z_i`` vanishes or ``kappa_max >= kappa_max(0)/3``.

    With dense output available, also compares a finite-difference estimate
    of ``d/dt cos kappa_ij`` against ``-(pi - theta_ij)/pi (1 - cos^2)`` at
    records where ``kappa_max < pi/2`` is attained by a unique pair.
    """
    anchor = "some z_i = 0 or kappa_max(t) >= kappa_max(0)/3"
    if traj.n < 2:
        return CheckResult("kappa_separation", anchor, REPORT, {"reason": "n < 2"})
    v0 = traj.view(0)
    k0 = v0.kappa_max
    if k0 is None or k0 <= 0 or len(v0.q_plus) < traj.n:
        return CheckResult("kappa_separation", anchor, REPORT,
                           {"reason": "degenerate initialization", "kappa_max0": k0})
    bound = k0 / 3 - slack
    bad = []
    zero_branch = 0
    skipped = 0
    fd_checked = 0
    fd_bad = []
    min_kappa = np.inf
    dense = traj.dense
    for k in range(len(traj)):
        view = traj.view(k)
        if len(view.q_plus) < traj.n:
            zero_branch += 1
            continue
        if view.kappa_max is None:
            skipped += 1
            continue
        min_kappa = min(min_kappa, view.kappa_max)
        if view.kappa_max < bound:
            bad.append(float(traj.times[k]))
        if dense is None or view.kappa_max >= np.pi / 2:
            continue
        kap = np.where(np.isnan(view.kappa), -np.inf, view.kappa)
        iu = np.triu_indices(traj.n, 1)
        vals = kap[iu]
        top = np.flatnonzero(vals >= view.kappa_max - 1e-12)
        if top.size != 1:
            continue
        i, j = int(iu[0][top[0]]), int(iu[1][top[0]])
        t = float(traj.times[k])
        lo_t = max(dense.t_min, t - fd_step)
        hi_t = min(dense.t_max, t + fd_step)
        if hi_t <= lo_t:
            continue
        deriv = (_cos_kappa(dense(hi_t), traj.teacher, i, j) - _cos_kappa(dense(lo_t), traj.teacher, i, j)) / (hi_t - lo_t)
        c = np.cos(view.kappa[i, j])
        rhs = -(np.pi - view.theta_ij[i, j]) / np.pi * (1 - c * c)
        fd_checked += 1
        if deriv > rhs + rel_slack * abs(rhs):
            fd_bad.append(float(t))
    values = {
        "kappa_max0": k0,
        "min_kappa_max": None if not np.isfinite(min_kappa) else float(min_kappa),
        "zero_branch_records": zero_branch,
        "skipped_undefined": skipped,
        "violations": bad[:20],
        "fd_checked": fd_checked,
        "fd_violations": fd_bad[:20],
    }
    verdict = FAIL if (bad or fd_bad) else PASS
    return CheckResult("kappa_separation", anchor, verdict, values, bound)


# ----------------------------------------------------------------------------
# Registry
# ----------------------------------------------------------------------------


@dataclass
class CheckContext:
    thresholds: PhaseThresholds = field(default_factory=PhaseThresholds)
    spec: Optional[InitSpec] = None
    W0: Optional[np.ndarray] = None
    _markers: Optional[PhaseMarkers] = None

    def markers(self, traj) -> PhaseMarkers:
        if self._markers is None:
            self._markers = (phase_detect(traj, self.thresholds) if len(traj) >= 3
                             else PhaseMarkers(None, None, None, None))
        return self._markers


def _phases(traj, ctx):
    m = ctx.markers(traj)
    return CheckResult("phases", "phase markers from angle and H thresholds", REPORT,
                       {"T1": m.t1_time, "T2": m.t2_time})


def _init(traj, ctx):
    # the window holds with high probability only, so a miss is reported, not failed
    spec = ctx.spec or InitSpec(traj.n, traj.d)
    res = check_init(traj.snapshots[0], spec, traj.teacher)
    res.values["conditions_met"] = res.verdict == PASS
    res.verdict = REPORT
    return res


def _rate(traj, ctx):
    try:
        fit = estimate_loss_rate(traj, "power_law")
    except InsufficientData as exc:
        return CheckResult("rate", "trailing log-log slope of the loss", REPORT, {"error": str(exc)})
    return CheckResult("rate", "trailing log-log slope of the loss", REPORT,
                       {"slope": fit.slope, "r_squared": fit.r_squared, "window": fit.window})


def _lower_bound(traj, ctx):
    try:
        return fit_lower_bound(traj)
    except InsufficientData as exc:
        return CheckResult("lower_bound_fit", "L^(-1/3) grows at most linearly in t", REPORT, {"error": str(exc)})


def _h_update(traj, ctx):
    m = ctx.markers(traj)
    seg = None
    if m.t1_index is not None:
        seg = (m.t1_index, m.t2_index if m.t2_index is not None else len(traj))
    return check_h_updates(traj, eps2=ctx.thresholds.eps2, segment=seg)


def _envelope(traj, ctx):
    spec = ctx.spec or InitSpec(traj.n, traj.d)
    return check_phase1_envelope(traj, ctx.markers(traj), ctx.thresholds, spec)


CHECKERS: dict = {
    "init": _init,
    "phases": _phases,
    "theta_bound": lambda tr, ctx: check_theta_bound_trajectory(tr),
    "balance": lambda tr, ctx: check_balance_segment(tr, ctx.markers(tr), ctx.thresholds.balance_factor),
    "phase2_bounds": lambda tr, ctx: check_phase2_bounds(tr, ctx.markers(tr), ctx.thresholds, ctx.spec),
    "h_decay": lambda tr, ctx: check_h_decay(tr, ctx.markers(tr)),
    "phase1_envelope": _envelope,
    "phase1_norm_growth": lambda tr, ctx: check_phase1_norm_growth(tr),
    "grad_lower_bound": lambda tr, ctx: check_grad_lower_bound(tr),
    "descent_projection": lambda tr, ctx: check_descent_projection(tr),
    "residual_bound": lambda tr, ctx: check_residual_bounds(tr),
    "rate": _rate,
    "lower_bound_fit": _lower_bound,
    "kappa_separation": lambda tr, ctx: check_kappa_separation(tr),
    "h_update": _h_update,
    "implicit_regularization": lambda tr, ctx: check_implicit_regularization(tr, ctx.markers(tr).t2_index),
    "loss_monotone": lambda tr, ctx: check_loss_monotone(tr),
    "z_dynamics": lambda tr, ctx: check_z_dynamics(tr),
}


def run_checkers(traj: Trajectory, names=None, thresholds: PhaseThresholds = PhaseThresholds(),
                 spec: Optional[InitSpec] = None) -> DiagnosticsReport:
    """Run the named checkers (all by default) in registry order.

    ``theta_bound`` is always included: it holds unconditionally and acts as
    a global guard on every recorded configuration.
    """
    names = list(CHECKERS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKERS]
    if unknown:
        raise BadParam(f"unknown checkers {unknown}; valid: {sorted(CHECKERS)}")
    if "theta_bound" not in names:
        names.append("theta_bound")
    ctx = CheckContext(thresholds=thresholds, spec=spec)
    report = DiagnosticsReport()
    for name in CHECKERS:
        if name in names:
            report.add(CHECKERS[name](traj, ctx))
    return report
