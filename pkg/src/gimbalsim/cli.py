"""Command-line front end: single runs and shape x rate x policy sweeps.

Every simulation finishes before any file is written, so a failed
invocation leaves the output directory untouched.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import yaml

from .config import ENV_PREFIX, SimConfig, load_config, resolve_policy
from .sim import MetricsReport, run
from .workload import DistributionShape, TraceError, gen_arrivals, load_trace, shape_distribution, synthetic_trace

DEFAULT_RATES = (1.0, 1.2, 1.4)
DEFAULT_SWEEP_POLICIES = ("baseline_rr_fcfs", "gimbal")
SYNTHETIC_RECORDS = 5000
MATRIX_METRICS = ("ttft_mean", "tpot_mean", "throughput_rps")
TABLE_METRICS = ("ttft_mean", "ttft_p99", "tpot_mean", "throughput_rps", "hit_rate")


class CliError(Exception):
    pass


@dataclass
class RunSpec:
    config_path: Optional[str] = None
    trace_path: Optional[str] = None
    shapes: list = field(default_factory=lambda: [DistributionShape.RANDOM])
    n_requests: int = 1000
    rates: list = field(default_factory=lambda: [1.4])
    seeds: list = field(default_factory=lambda: [0])
    policies: list = field(default_factory=lambda: ["gimbal"])
    out_dir: str = "results"
    jobs: int = 1

    def validate(self) -> None:
        if self.n_requests < 1:
            raise CliError(f"--requests must be >= 1, got {self.n_requests}")
        for r in self.rates:
            if not r > 0:
                raise CliError(f"--rps must be > 0, got {r}")
        if not self.seeds:
            raise CliError("at least one seed is required")
        if not (self.shapes and self.rates and self.policies):
            raise CliError("empty experiment grid")
        if self.jobs < 1:
            raise CliError("--jobs must be >= 1")


def _cell_worker(args):
    cfg, records, shape, n, rps, seed, policy = args
    cfg = cfg.with_policy(policy)
    cfg = SimConfig.from_dict({**cfg.to_dict(), "seed": seed})
    sampled = shape_distribution(records, shape, n, seed)
    report = run(cfg, gen_arrivals(sampled, rps, seed))
    return report


def _run_cells(cfg, records, cells, jobs):
    tasks = [(cfg, records, shape, n, rps, seed, policy) for (shape, n, rps, seed, policy) in cells]
    if jobs == 1 or len(tasks) == 1:
        out = []
        for t, c in zip(tasks, cells):
            out.append(_guarded(t, c))
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_cell_worker, t) for t in tasks]
        out = []
        for fut, c in zip(futures, cells):
            try:
                out.append(fut.result())
            except Exception as exc:  # noqa: BLE001 - rewrapped with the cell id
                raise CliError(f"cell {_cell_name(c)} failed: {exc}") from exc
        return out


def _guarded(task, cell):
    try:
        return _cell_worker(task)
    except Exception as exc:  # noqa: BLE001
        raise CliError(f"cell {_cell_name(cell)} failed: {exc}") from exc


def _cell_name(cell) -> str:
    shape, _, rps, seed, policy = cell
    return f"shape={shape.value} rps={rps:g} seed={seed} policy={policy}"


def _report_name(policy, shape, rps, seed) -> str:
    return f"report_{policy}_{shape.value}_rps{rps:g}_seed{seed}.json"


def _mean_aggregates(reports: Sequence[MetricsReport]) -> dict:
    keys = reports[0].aggregates.keys()
    return {k: float(np.mean([r.aggregates[k] for r in reports])) for k in keys}


def _records(spec: RunSpec):
    if spec.trace_path is None:
        return synthetic_trace(SYNTHETIC_RECORDS, seed=0)
    return load_trace(spec.trace_path)


def _config(spec: RunSpec, overrides: dict) -> SimConfig:
    try:
        return load_config(spec.config_path, overrides or None)
    except (OSError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise CliError(f"bad config: {exc}") from exc


def _write_files(out_dir: str, files: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(files):
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(files[name])


def _table(rows, cols) -> str:
    widths = [max(len(str(c)), *(len(str(r[i])) for r in rows)) for i, c in enumerate(cols)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(cols, widths))]
    for r in rows:
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    return "\n".join(lines)


def cmd_run(spec: RunSpec, overrides: Optional[dict] = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    spec.validate()
    cfg = _config(spec, overrides or {})
    records = _records(spec)
    cells = [(shape, spec.n_requests, rps, seed, policy)
             for shape in spec.shapes for rps in spec.rates for policy in spec.policies for seed in spec.seeds]
    reports = _run_cells(cfg, records, cells, spec.jobs)

    files = {}
    groups: dict = {}
    for cell, rep in zip(cells, reports):
        shape, _, rps, seed, policy = cell
        files[_report_name(policy, shape, rps, seed)] = rep.to_json() + "\n"
        groups.setdefault((policy, shape, rps), []).append(rep)
    if len(spec.seeds) > 1:
        summary = []
        for (policy, shape, rps), reps in groups.items():
            summary.append({"policy": policy, "shape": shape.value, "rps": rps, "seeds": list(spec.seeds),
                            "aggregates": _mean_aggregates(reps)})
        files["summary.json"] = json.dumps(summary, sort_keys=True, indent=1) + "\n"
    _write_files(spec.out_dir, files)

    rows = []
    for (policy, shape, rps), reps in groups.items():
        agg = _mean_aggregates(reps)
        rows.append([policy, shape.value, f"{rps:g}", len(reps)] + [f"{agg[k]:.4f}" for k in TABLE_METRICS])
    print(_table(rows, ["policy", "shape", "rps", "seeds", *TABLE_METRICS]), file=stdout)
    return 0


def cmd_sweep(spec: RunSpec, overrides: Optional[dict] = None, stdout=None) -> int:
    """Write ``sweep.csv``: seed-averaged metrics per (shape, rps, policy)."""
    stdout = stdout or sys.stdout
    spec.validate()
    cfg = _config(spec, overrides or {})
    records = _records(spec)
    keys = [(shape, rps, policy) for shape in spec.shapes for rps in spec.rates for policy in spec.policies]
    cells = [(shape, spec.n_requests, rps, seed, policy) for (shape, rps, policy) in keys for seed in spec.seeds]
    reports = _run_cells(cfg, records, cells, spec.jobs)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shape", "rps", "policy", "n_seeds", *MATRIX_METRICS])
    n = len(spec.seeds)
    for i, (shape, rps, policy) in enumerate(keys):
        agg = _mean_aggregates(reports[i * n:(i + 1) * n])
        w.writerow([shape.value, repr(float(rps)), policy, n] + [repr(agg[k]) for k in MATRIX_METRICS])
    _write_files(spec.out_dir, {"sweep.csv": buf.getvalue()})
    print(buf.getvalue(), end="", file=stdout)
    return 0


def _env_default(name: str, environ):
    return environ.get(ENV_PREFIX + name)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gimbalsim", description="Simulate data-parallel MoE serving policies.")
    p.add_argument("--config", help="YAML file with SimConfig fields")
    p.add_argument("--trace", help="CSV trace (prefill_tokens,output_tokens[,user_id]); synthetic if omitted")
    p.add_argument("--shape", action="append", help="distribution shape (repeatable)")
    p.add_argument("--rps", action="append", type=float, help="request rate (repeatable)")
    p.add_argument("--requests", type=int, help="requests per cell (default 1000)")
    p.add_argument("--seed", action="append", type=int, help="seed (repeatable)")
    p.add_argument("--policy", action="append", help="policy name or alias (repeatable)")
    p.add_argument("--out", help="output directory (default ./results)")
    p.add_argument("--sweep", action="store_true", help="write a comparison matrix instead of per-run reports")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. kv_capacity=40000 or balancer.theta_kv=0.8")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _parse_sets(items) -> dict:
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def spec_from_args(ns, environ=None) -> RunSpec:
    """Flags win over ``GIMBALSIM_SHAPE/RPS/REQUESTS/SEED/POLICY/OUT`` which win over defaults."""
    environ = os.environ if environ is None else environ

    def pick(flag, name, conv, default):
        if flag is not None:
            return flag
        raw = _env_default(name, environ)
        if raw is None:
            return default
        try:
            return [conv(x) for x in raw.split(",")] if isinstance(default, list) else conv(raw)
        except ValueError as exc:
            raise CliError(f"bad {ENV_PREFIX}{name}={raw!r}: {exc}") from exc

    spec = RunSpec()
    shapes = pick(ns.shape, "SHAPE", str, None)
    if shapes is None:
        shapes = [s.value for s in DistributionShape] if ns.sweep else ["Random"]
    try:
        spec.shapes = [DistributionShape.parse(s) for s in shapes]
        policies = pick(ns.policy, "POLICY", str, list(DEFAULT_SWEEP_POLICIES) if ns.sweep else ["gimbal"])
        spec.policies = [resolve_policy(p) for p in policies]
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    spec.rates = pick(ns.rps, "RPS", float, list(DEFAULT_RATES) if ns.sweep else [1.4])
    spec.seeds = pick(ns.seed, "SEED", int, [0])
    spec.n_requests = pick(ns.requests, "REQUESTS", int, 1000)
    spec.out_dir = pick(ns.out, "OUT", str, "results")
    spec.config_path = ns.config
    spec.trace_path = ns.trace
    spec.jobs = ns.jobs
    return spec


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    try:
        spec = spec_from_args(ns)
        overrides = _parse_sets(ns.set)
        if ns.sweep:
            return cmd_sweep(spec, overrides)
        return cmd_run(spec, overrides)
    except (CliError, TraceError, OSError) as exc:
        print(f"gimbalsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
