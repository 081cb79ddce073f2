"""Structured toy configurations run under GD with their exact reductions checked.

* ``symmetric_pair``: two neurons mirrored about ``v``. The pair stays mirrored
  and is described by two scalars ``(lambda1, lambda2)`` whose one-step maps
  are known in closed form.
* ``parallel``: every neuron a positive multiple of ``v``. The gradient reduces
  to ``r/2``, so the residual shrinks by exactly ``1 - n*eta/2`` per step.
* ``equal``: ``n`` identical neurons, equivalent to one neuron learning
  ``v/n`` with step ``n*eta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diagnostics import FAIL, PASS, REPORT, CheckResult, estimate_rate
from .dynamics import extract_lambda, gd_step, make_toycase, perpendicular, record_schedule
from .errors import BadParam, InsufficientData, NotSymmetric
from .geometry import Teacher
from .objective import _State

KIND_ALIASES = {
    "1": "symmetric_pair", "symmetric_pair": "symmetric_pair",
    "2": "parallel", "parallel": "parallel",
    "3": "equal", "equal": "equal",
}


@dataclass
class ToyResult:
    kind: str
    columns: dict
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.verdict != FAIL for c in self.checks)

    def check(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def csv_text(self, every=None) -> str:
        """Trace as CSV; ``every`` selects rows by index (default: all)."""
        from .dynamics import format_float

        names = list(self.columns)
        rows = range(len(self.columns[names[0]])) if every is None else every
        lines = [",".join(names)]
        for k in rows:
            cells = []
            for c in names:
                x = self.columns[c][k]
                cells.append(str(int(x)) if c == "time" else format_float(x))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def lambda1_factor(lambda1: float, theta: float, eta: float) -> float:
    """One-step multiplier of ``lambda1 - 1/2`` for the mirrored pair."""
    return 1.0 - eta * (1.0 - theta / np.pi + np.sin(2 * theta) / (2 * np.pi))


def lambda2_factor(lambda1: float, theta: float, eta: float) -> float:
    """One-step multiplier of ``lambda2`` for the mirrored pair."""
    return 1.0 - eta / (2 * np.pi) * (2 * theta + (lambda1 - 0.5) / lambda1 * np.sin(2 * theta))


def _fit_check(name, anchor, t, y, kind, lo, hi, window=None, min_r2=None):
    try:
        fit = estimate_rate(t, y, kind, window=window)
    except InsufficientData as exc:
        return CheckResult(name, anchor, FAIL, {"error": str(exc)}), None
    ok = lo <= fit.slope <= hi and (min_r2 is None or fit.r_squared >= min_r2)
    values = {"slope": fit.slope, "r_squared": fit.r_squared, "window": fit.window, "expected": [lo, hi]}
    return CheckResult(name, anchor, PASS if ok else FAIL, values), fit


def run_symmetric_pair(lambda1=0.4, lambda2=0.2, eta=0.05, steps=100_000, d=20,
                       teacher: Teacher = None) -> ToyResult:
    teacher = teacher or Teacher.canonical(d)
    if lambda2 <= 0:
        raise BadParam("the mirrored-pair experiment needs lambda2 > 0")
    W = make_toycase("symmetric_pair", teacher, lambda1=lambda1, lambda2=lambda2)
    vp = perpendicular(teacher) / teacher.norm_v
    vbar = teacher.unit
    l1 = np.empty(steps + 1)
    l2 = np.empty(steps + 1)
    L = np.empty(steps + 1)
    asym = 0.0
    rec1 = rec2 = 0.0
    for t in range(steps + 1):
        s = _State(W, teacher)
        L[t] = s.loss()
        # symmetry: equal projections on v and mirrored orthogonal parts
        h = W @ vbar
        z = W - np.outer(h, vbar)
        scale = max(float(np.abs(W).max()), teacher.norm_v)
        asym = max(asym, abs(h[0] - h[1]) / scale, float(np.abs(z[0] + z[1]).max()) / scale)
        l1[t] = h[0] / teacher.norm_v
        l2[t] = (z[0] @ vp) / teacher.norm_v
        if t > 0:
            th = np.arctan2(l2[t - 1], l1[t - 1])
            rec1 = max(rec1, abs((l1[t] - 0.5) - (l1[t - 1] - 0.5) * lambda1_factor(l1[t - 1], th, eta)))
            rec2 = max(rec2, abs(l2[t] - l2[t - 1] * lambda2_factor(l1[t - 1], th, eta)))
        if t == steps:
            break
        W = W - eta * s.gradient()
    try:
        extract_lambda(W, teacher)
    except NotSymmetric:
        asym = max(asym, 1.0)
    times = np.arange(steps + 1, dtype=float)
    checks = [
        CheckResult("symmetry", "the pair stays mirrored about v", PASS if asym <= 1e-10 else FAIL,
                    {"max_asymmetry": asym}, 1e-10),
        CheckResult("lambda_recursions", "one-step maps of lambda1 and lambda2 hold exactly",
                    PASS if max(rec1, rec2) <= 1e-12 else FAIL,
                    {"lambda1_error": rec1, "lambda2_error": rec2}, 1e-12),
    ]
    dev = np.abs(l1 - 0.5)
    live = np.flatnonzero(dev > 1e-10)
    if live.size >= 10 and live[0] == 0:
        stop = int(live[-1])
        fit = estimate_rate(times[: stop + 1], dev[: stop + 1], "exponential", window=(0, stop))
        target = 1 - eta
        ok = fit.r_squared >= 0.99 and abs(fit.factor - target) <= 0.1 * target
        checks.append(CheckResult("lambda1_exponential", "lambda1 - 1/2 decays geometrically at about 1 - eta",
                                  PASS if ok else FAIL,
                                  {"factor": fit.factor, "reference": target, "r_squared": fit.r_squared,
                                   "n_steps": stop + 1}, 0.1))
    else:
        checks.append(CheckResult("lambda1_exponential", "lambda1 - 1/2 decays geometrically at about 1 - eta",
                                  REPORT, {"n_steps": int(live.size)}))
    c, _ = _fit_check("lambda2_rate", "lambda2 ~ t^-1", times, l2, "power_law", -1.15, -0.85)
    checks.append(c)
    c, _ = _fit_check("loss_rate", "L ~ t^-3", times, L, "power_law", -3.3, -2.7)
    checks.append(c)
    return ToyResult("symmetric_pair", {"time": times, "lambda1": l1, "lambda2": l2, "loss": L}, checks)


def run_parallel(lambdas=(0.3, 0.4), eta=0.05, steps=2000, d=20, teacher: Teacher = None) -> ToyResult:
    teacher = teacher or Teacher.canonical(d)
    W = make_toycase("parallel", teacher, lambdas=lambdas)
    n = W.shape[0]
    vbar = teacher.unit
    resid = np.empty(steps + 1)
    L = np.empty(steps + 1)
    off_axis = 0.0
    for t in range(steps + 1):
        s = _State(W, teacher)
        L[t] = s.loss()
        h = W @ vbar
        off_axis = max(off_axis, float(np.abs(W - np.outer(h, vbar)).max()))
        resid[t] = h.sum() / teacher.norm_v - 1.0
        if t == steps:
            break
        W = W - eta * s.gradient()
    target = 1 - n * eta / 2
    big = np.flatnonzero(np.abs(resid[:-1]) >= 1e-3)
    err = float(np.max(np.abs(resid[big + 1] / resid[big] - target))) if big.size else 0.0
    times = np.arange(steps + 1, dtype=float)
    checks = [
        CheckResult("parallel_preserved", "neurons stay on the teacher ray", PASS if off_axis == 0 else FAIL,
                    {"max_off_axis": off_axis}),
        CheckResult("residual_factor", "residual shrinks by 1 - n eta / 2 per step",
                    PASS if big.size and err <= 1e-12 else FAIL,
                    {"max_abs_error": err, "reference": target, "n_steps": int(big.size)}, 1e-12),
    ]
    live = np.flatnonzero(np.abs(resid) > 1e-12)
    if live.size >= 10:
        stop = int(live[-1])
        fit = estimate_rate(times[: stop + 1], np.abs(resid[: stop + 1]), "exponential", window=(0, stop))
        checks.append(CheckResult("residual_semilog", "log |sum lambda - 1| is linear in t",
                                  PASS if fit.r_squared >= 0.99 else FAIL,
                                  {"factor": fit.factor, "r_squared": fit.r_squared}, 0.99))
    return ToyResult("parallel", {"time": times, "sum_lambda": resid + 1.0, "residual": resid, "loss": L}, checks)


def run_equal(w=None, n=3, eta=0.05, steps=2000, d=20, teacher: Teacher = None, tol=1e-10) -> ToyResult:
    """Compare ``n`` equal neurons with one neuron learning ``v/n`` at step ``n*eta``."""
    teacher = teacher or Teacher.canonical(d)
    if w is None:
        w = 0.2 * teacher.v + 0.3 * perpendicular(teacher)
    W = make_toycase("equal", teacher, w=w, n=n)
    reduced_teacher = Teacher.from_vector(teacher.v / n)
    u = np.asarray(w, dtype=float)[None, :].copy()
    dev = np.empty(steps + 1)
    L = np.empty(steps + 1)
    for t in range(steps + 1):
        s = _State(W, teacher)
        L[t] = s.loss()
        dev[t] = float(np.abs(W - u).max())
        if t == steps:
            break
        W = W - eta * s.gradient()
        u = gd_step(u, reduced_teacher, n * eta)
    worst = float(dev.max())
    checks = [CheckResult("reduction", "n equal neurons track one neuron learning v/n at step n eta",
                          PASS if worst <= tol else FAIL, {"max_abs_deviation": worst}, tol)]
    times = np.arange(steps + 1, dtype=float)
    return ToyResult("equal", {"time": times, "deviation": dev, "loss": L}, checks)


def run_toycase(kind: str, *, lambda1=None, lambda2=None, lambdas=None, n=None, eta=0.05,
                steps=None, d=20) -> ToyResult:
    key = KIND_ALIASES.get(str(kind))
    if key is None:
        raise BadParam(f"unknown toy case {kind!r}; valid: 1, 2, 3 or {sorted(set(KIND_ALIASES.values()))}")
    if not eta > 0:
        raise BadParam("eta must be positive")
    if steps is not None and steps < 1:
        raise BadParam("steps must be positive")
    if key == "symmetric_pair":
        return run_symmetric_pair(0.4 if lambda1 is None else lambda1, 0.2 if lambda2 is None else lambda2,
                                  eta, steps or 100_000, d)
    if key == "parallel":
        return run_parallel(tuple(lambdas) if lambdas else (0.3, 0.4), eta, steps or 2000, d)
    teacher = Teacher.canonical(d)
    w = None
    if lambda1 is not None or lambda2 is not None:
        w = (0.2 if lambda1 is None else lambda1) * teacher.v + (0.3 if lambda2 is None else lambda2) * perpendicular(teacher)
    return run_equal(w, 3 if n is None else n, eta, steps or 2000, d, teacher)


def trace_rows(result: ToyResult, per_decade: int = 50):
    """Row indices of a log-spaced subsample of a per-step trace."""
    t_end = int(result.columns["time"][-1])
    return record_schedule(t_end, max(1, t_end // 200), per_decade, integer=True).astype(int)
