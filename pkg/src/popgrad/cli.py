"""Command-line front end.

Exit codes: 0 success, 1 a hard check failed, 2 bad configuration or
arguments, 3 a run could not complete.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import numpy as np

from .config import ExperimentConfig, load_config
from .diagnostics import FAIL, _jsonable, run_checkers
from .dynamics import format_float, init_random, run
from .errors import BadParam, ConfigError, PopgradError
from .plots import effective_time, loss_figure
from .sampling import worker_count
from .toycases import run_toycase, trace_rows
from .validation import SUITES, run_case, run_suite

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2, 3
TOYCASE_SCHEMA = "popgrad.toycases/1"
REPORT_SCHEMA = "popgrad.report/1"


def _err(msg):
    print(msg, file=sys.stderr)


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# run
# ----------------------------------------------------------------------------


def execute_task(cfg: ExperimentConfig, n: int, seed: int, mode: str) -> dict:
    """One ``(n, seed, mode)`` run plus its checkers; safe to call in a worker."""
    try:
        teacher = cfg.teacher.build()
        spec = cfg.init_spec(n, seed)
        traj = run(init_random(spec), teacher, cfg.run_config(mode))
        report = run_checkers(traj, cfg.checkers, cfg.thresholds, spec)
    except PopgradError as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {
        "csv": traj.csv_text(),
        "checks": report.as_list(),
        "stop_reason": traj.stop_reason,
        "final_loss": float(traj.loss[-1]),
        "x": effective_time(traj.times, mode, traj.eta).tolist(),
        "loss": traj.loss.tolist(),
    }


def _map_tasks(cfg, tasks):
    workers = min(worker_count(), len(tasks))
    args = ([cfg] * len(tasks), *zip(*tasks))
    if workers <= 1:
        return list(map(execute_task, *args))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute_task, *args))


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> int:
    tasks = cfg.tasks()
    results = _map_tasks(cfg, tasks)
    runs = []
    curves = []
    failed = []
    broken = []
    for (n, seed, mode), res in zip(tasks, results):
        tag = f"n={n} seed={seed} mode={mode}"
        if "error" in res:
            broken.append(f"{tag}: {res['error']}")
            runs.append({"n": n, "seed": seed, "mode": mode, "error": res["error"]})
            continue
        csv_name = cfg.outputs.csv_path.format(name=cfg.name, n=n, seed=seed, mode=mode)
        _write(os.path.join(out_dir, csv_name), res["csv"])
        bad = [c["name"] for c in res["checks"] if c["verdict"] == FAIL]
        failed.extend(f"{tag}: checker {b!r} failed" for b in bad)
        runs.append({"n": n, "seed": seed, "mode": mode, "csv": csv_name, "stop_reason": res["stop_reason"],
                     "final_loss": res["final_loss"], "checks": res["checks"]})
        curves.append((tag, n, res["x"], res["loss"]))
        print(f"{tag}: final loss {format_float(res['final_loss'])}, "
              f"{len(res['checks']) - len(bad)} checks ok, {len(bad)} failed")
    summary = {"schema": REPORT_SCHEMA, "name": cfg.name, "runs": runs,
               "hard_failures": failed, "run_errors": broken}
    _write(os.path.join(out_dir, cfg.outputs.json_path.format(name=cfg.name)), _dump(summary))
    if cfg.outputs.svg_path and curves:
        path = os.path.join(out_dir, cfg.outputs.svg_path.format(name=cfg.name))
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        loss_figure(curves, path, title=cfg.name)
    for line in broken:
        _err(f"run failed: {line}")
    for line in failed:
        _err(f"check failed: {line}")
    if broken:
        return EXIT_RUN
    return EXIT_CHECK if failed else EXIT_OK


def _toycase_entry(case: dict, index: int) -> dict:
    allowed = {"kind", "lambda1", "lambda2", "lambdas", "n", "eta", "steps", "d"}
    if not isinstance(case, dict):
        raise ConfigError(f"cases[{index}]", "must be a JSON object")
    extra = sorted(set(case) - allowed)
    if extra:
        raise ConfigError(f"cases[{index}].{extra[0]}", "unknown key")
    if "kind" not in case:
        raise ConfigError(f"cases[{index}].kind", "is required")
    return case


def run_toycase_profile(data: dict, out_dir: str) -> int:
    extra = sorted(set(data) - {"schema", "name", "cases"})
    if extra:
        raise ConfigError(extra[0], "unknown key")
    cases = data.get("cases")
    if not isinstance(cases, list) or not cases:
        raise ConfigError("cases", "must be a nonempty list")
    name = data.get("name", "toycases")
    code = EXIT_OK
    for i, case in enumerate(cases):
        params = dict(_toycase_entry(case, i))
        kind = params.pop("kind")
        try:
            rc = toycase_command(str(kind), params, os.path.join(out_dir, f"{name}_{i}_{kind}"))
        except BadParam as exc:
            raise ConfigError(f"cases[{i}]", str(exc)) from None
        code = max(code, rc)
    return code


def cmd_run(config_path: str, out_dir: str = ".") -> int:
    try:
        with open(config_path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        _err(f"config error: cannot read {config_path}: {exc.strerror}")
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        _err(f"config error: invalid JSON: {exc}")
        return EXIT_CONFIG
    try:
        if isinstance(raw, dict) and raw.get("schema") == TOYCASE_SCHEMA:
            return run_toycase_profile(raw, out_dir)
        cfg = load_config(config_path)
    except ConfigError as exc:
        _err(f"config error: {exc.field}: {exc}")
        return EXIT_CONFIG
    return run_experiment(cfg, out_dir)


# ----------------------------------------------------------------------------
# toycase
# ----------------------------------------------------------------------------


def toycase_command(kind: str, params: dict, out_prefix: str) -> int:
    result = run_toycase(kind, **params)
    rows = trace_rows(result)
    _write(out_prefix + ".csv", result.csv_text(rows))
    _write(out_prefix + ".json", _dump([c.as_dict() for c in result.checks]))
    for c in result.checks:
        print(f"{result.kind}: {c.name}: {c.verdict}")
    return EXIT_OK if result.ok else EXIT_CHECK


def cmd_toycase(args) -> int:
    params = {"eta": args.eta}
    for key in ("lambda1", "lambda2", "n", "steps", "d"):
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    if args.lambdas:
        try:
            params["lambdas"] = [float(x) for x in args.lambdas.split(",")]
        except ValueError:
            _err("bad parameter: --lambdas must be comma-separated numbers")
            return EXIT_CONFIG
    try:
        return toycase_command(args.kind, params, os.path.join(args.out, f"toycase_{args.kind}"))
    except BadParam as exc:
        _err(f"bad parameter: {exc}")
        return EXIT_CONFIG
    except PopgradError as exc:
        _err(f"run failed: {type(exc).__name__}: {exc}")
        return EXIT_RUN


# ----------------------------------------------------------------------------
# validate
# ----------------------------------------------------------------------------


def _case_payload(case, max_n, max_d):
    return {"suite": case.suite, "seed": case.seed, "max_n": max_n, "max_d": max_d,
            "W": case.W.tolist(), "v": case.v.tolist(), "values": case.values}


def cmd_validate(seeds: int, max_n: int, max_d: int, replay=None, replay_out="validate_failure.json") -> int:
    if replay:
        try:
            with open(replay) as fh:
                saved = json.load(fh)
            suite, seed = saved["suite"], int(saved["seed"])
            max_n, max_d = int(saved["max_n"]), int(saved["max_d"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            _err(f"bad replay file: {exc}")
            return EXIT_CONFIG
        if suite not in SUITES:
            _err(f"bad replay file: unknown suite {suite!r}")
            return EXIT_CONFIG
        case = run_case(suite, seed, max_n, max_d)
        same = np.array_equal(case.W, np.array(saved["W"]))
        print(_dump(_case_payload(case, max_n, max_d)), end="")
        print(f"configuration identical to saved case: {same}")
        return EXIT_OK if case.passed else EXIT_CHECK
    if seeds < 1 or max_n < 1 or max_d < 2:
        _err("bad parameter: need --seeds >= 1, --max-n >= 1 and --max-d >= 2")
        return EXIT_CONFIG
    print(f"{'suite':<18}{'cases':>6}{'failed':>8}{'allowed':>9}  verdict")
    first_bad = None
    for suite in SUITES:
        res = run_suite(suite, seeds, max_n, max_d)
        verdict = "pass" if res.passed else "FAIL"
        print(f"{suite:<18}{len(res.cases):>6}{res.n_failed:>8}{res.allowed_failures:>9}  {verdict}")
        if not res.passed and first_bad is None:
            first_bad = res.first_failure
    if first_bad is not None:
        _write(replay_out, _dump(_case_payload(first_bad, max_n, max_d)))
        _err(f"first failing case written to {replay_out}")
        return EXIT_CHECK
    return EXIT_OK


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def profile_path(name: str) -> str:
    return str(resources.files("popgrad").joinpath("profiles", name))


def cmd_reproduce_figure1(out_dir: str) -> int:
    return cmd_run(profile_path("figure1.json"), out_dir)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popgrad", description="Teacher-student ReLU training experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", default=".", help="output directory (default: current)")

    t = sub.add_parser("toycase", help="run a structured toy configuration")
    t.add_argument("kind", help="1|symmetric_pair, 2|parallel, 3|equal")
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--lambdas", help="comma-separated multiples of v (parallel case)")
    t.add_argument("--n", type=int)
    t.add_argument("--eta", type=float, default=0.05)
    t.add_argument("--steps", type=int)
    t.add_argument("--d", type=int)
    t.add_argument("--out", default=".")

    v = sub.add_parser("validate", help="cross-check closed forms against independent oracles")
    v.add_argument("--seeds", type=int, default=20, help="cases per suite")
    v.add_argument("--max-n", type=int, default=5)
    v.add_argument("--max-d", type=int, default=20)
    v.add_argument("--replay", help="re-run one case from a saved failure file")
    v.add_argument("--replay-out", default="validate_failure.json")

    f = sub.add_parser("reproduce-figure1", help="run the shipped figure1 profile")
    f.add_argument("--out", default="figure1_out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.command == "run":
        return cmd_run(args.config, args.out)
    if args.command == "toycase":
        return cmd_toycase(args)
    if args.command == "validate":
        return cmd_validate(args.seeds, args.max_n, args.max_d, args.replay, args.replay_out)
    return cmd_reproduce_figure1(args.out)


if __name__ == "__main__":
    sys.exit(main())
