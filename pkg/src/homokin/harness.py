"""Experiment orchestration: configs, presets, CSV artifacts, manifests.

Configuration is flat INI text (key = value under named sections), merged
with command-line flags.  Every experiment writes CSV files (comma
separator, dot decimal point, header row, 17 significant digits, LF line
endings) plus a JSON manifest listing inputs, code version, grids, wall
time, and a content hash per artifact.  Sweep points run in a process
pool; results are aggregated in sorted order so reruns are byte-identical
regardless of worker count.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .boltzmann import DEFAULT_SWEEP, sweep_point
from .cell import CellFunction, PeriodicGrid, sine_profile, two_valued_profile
from .kernels import KernelTable, verify_tartar_equivalence
from .multiscale import (
    OdeProblem,
    solve_eps_exact,
    three_route_report,
    weak_test_function_errors,
)
from .oscillator import (
    YoungMeasure,
    cell_averaged_limit,
    kernel_components,
    kernel_time_table,
    solve_oscillator_limit,
)
from .transport import (
    TransportGrids,
    coercivity_test,
    hat_initial_data,
    solve_characteristics_eps,
    solve_two_scale_transport,
    subcriticality_check,
    transport_preset,
    windowed_weak_error,
)
from .volterra import TimeGrid

KINDS = ("tartar", "ode", "boltzmann", "transport", "oscillator", "sweep", "kernel-dump")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    preset: str = "1"
    placement: str = "inside"
    init_mode: str = "oscillatory"
    epsilons: tuple = tuple(DEFAULT_SWEEP)
    n_cell: int = 256
    n_e: int = 64
    n_omega: int = 16
    n_r: int = 32
    n_y: int = 128
    out_dir: str = "."
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment kind {self.kind!r}")
        eps = tuple(float(e) for e in self.epsilons)
        if len(eps) == 0:
            raise ConfigError("eps: the sweep list must not be empty")
        if any(not (0.0 < e <= 1.0) for e in eps):
            raise ConfigError("eps: all sweep values must lie in (0, 1]")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("eps: sweep values must be strictly decreasing")
        if self.workers < 1:
            raise ConfigError("workers: worker count must be at least 1")
        if self.placement not in ("inside", "outside"):
            raise ConfigError(f"placement: must be inside or outside, got {self.placement!r}")
        if self.init_mode not in ("oscillatory", "profile"):
            raise ConfigError("init_mode: must be oscillatory or profile")
        if self.seed < 0:
            raise ConfigError("seed: must be a nonnegative integer")
        for name in ("n_cell", "n_e", "n_omega", "n_r", "n_y"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name}: grid sizes must be at least 2")


_SECTION_FIELDS = {
    "experiment": ("kind", "preset", "placement", "init_mode"),
    "sweep": ("eps",),
    "grids": ("n_cell", "n_e", "n_omega", "n_r", "n_y"),
    "run": ("out", "seed", "workers"),
}
_INT_FIELDS = {"n_cell", "n_e", "n_omega", "n_r", "n_y", "seed", "workers"}


def parse_config_file(path: str) -> dict:
    """Read the flat INI config into a plain override dict."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config: cannot read file {path!r}")
    overrides: dict = {}
    for section, keys in _SECTION_FIELDS.items():
        if not parser.has_section(section):
            continue
        for key, value in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{section}.{key}: unknown configuration key")
            if key == "eps":
                overrides["epsilons"] = tuple(
                    float(tok) for tok in value.split(",") if tok.strip()
                )
            elif key == "out":
                overrides["out_dir"] = value
            elif key in _INT_FIELDS:
                try:
                    overrides[key] = int(value)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: expected an integer") from exc
            else:
                overrides[key] = value
    return overrides


def default_out_dir() -> str:
    return os.environ.get("HOMOKIN_OUT", ".")


def write_csv(path, header: str, rows) -> None:
    """CSV dialect: comma, dot decimals, %.17g floats, LF endings."""

    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{v:.17g}"
        return str(v)

    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class ExperimentResult:
    status: int
    files: dict
    message: str = ""


def _write_manifest(config: ExperimentConfig, out_dir, files: dict, wall: float):
    manifest = {
        "kind": config.kind,
        "version": __version__,
        "config": {
            f.name: (list(getattr(config, f.name)) if f.name == "epsilons" else getattr(config, f.name))
            for f in fields(config)
        },
        "grids": {
            name: getattr(config, name)
            for name in ("n_cell", "n_e", "n_omega", "n_r", "n_y")
        },
        "wall_time_s": wall,
        "files": {name: _sha256(path) for name, path in files.items()},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _cell_sigma(preset: str) -> CellFunction:
    grid = PeriodicGrid(4096)
    if preset in ("1", "sine"):
        return CellFunction.from_function(grid, sine_profile(2.0, 0.5))
    if preset == "two-valued":
        return CellFunction.from_function(grid, two_valued_profile(1.0, 3.0))
    raise ConfigError(f"preset: unknown cell coefficient preset {preset!r}")


def _run_tartar(config: ExperimentConfig, out_dir: str) -> dict:
    sigma = _cell_sigma(config.preset)
    ps = np.array([0.1, 0.5, 1.0, 2.0, 5.0, 10.0])
    report = verify_tartar_equivalence(sigma, ps)
    path = os.path.join(out_dir, "tartar_equiv.csv")
    rows = zip(
        report.ps,
        report.khat,
        report.mhat,
        report.numeric,
        report.numeric_tail,
        np.abs(report.khat - report.mhat) / np.maximum(np.abs(report.mhat), 1e-14),
    )
    write_csv(path, "p,khat,mhat,numeric,numeric_tail,rel_err", rows)
    return {"tartar_equiv.csv": path}


def _run_ode(config: ExperimentConfig, out_dir: str) -> dict:
    grid = PeriodicGrid(config.n_cell)
    sigma = CellFunction.from_function(grid, sine_profile(2.0, 0.5))
    u_in = CellFunction.from_function(grid, lambda y: 1.0 + np.sin(2 * np.pi * y))
    problem = OdeProblem(sigma, None, u_in, 10.0)
    report = three_route_report(problem, TimeGrid.from_count(10.0, 10000))
    files = {}
    for route in ("closed", "coupled", "volterra"):
        path = os.path.join(out_dir, f"ode_{route}.csv")
        write_csv(path, "t,u_hom", zip(report["times"], report[route]))
        files[f"ode_{route}.csv"] = path
    summary = os.path.join(out_dir, "ode_summary.csv")
    write_csv(
        summary,
        "pair,sup_difference",
        [
            ("closed-coupled", report["sup_closed_coupled"]),
            ("closed-volterra", report["sup_closed_volterra"]),
            ("coupled-volterra", report["sup_coupled_volterra"]),
            ("max-mean-remainder", report["max_mean_remainder"]),
        ],
    )
    files["ode_summary.csv"] = summary
    # weak-convergence study of the oscillatory route
    target = report["closed"][-1]
    weak_rows = []
    for eps in config.epsilons:
        nx = max(64, round(100 / eps))
        x = (np.arange(nx) + 0.5) / nx
        eps_problem = OdeProblem(sigma, None, u_in, 10.0, epsilon=eps)
        sol = solve_eps_exact(eps_problem, x, nt=200)
        errs = weak_test_function_errors(x, sol.values[-1] - target)
        for name, err in sorted(errs.items()):
            weak_rows.append((eps, name, err))
    weak_path = os.path.join(out_dir, "ode_weak.csv")
    write_csv(weak_path, "epsilon,test_fn,weak_error", weak_rows)
    files["ode_weak.csv"] = weak_path
    return files


def _boltzmann_job(args):
    example_id, placement, eps, init_mode, n_cell = args
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return sweep_point(
                example_id, placement, eps, n_cell=n_cell, init_mode=init_mode
            )
    except ImportError:
        return sweep_point(
            example_id, placement, eps, n_cell=n_cell, init_mode=init_mode
        )


def _run_boltzmann(config: ExperimentConfig, out_dir: str) -> dict:
    example_id = int(config.preset)
    eps_sorted = sorted(config.epsilons)[::-1]
    jobs = [
        (example_id, config.placement, eps, config.init_mode, config.n_cell)
        for eps in eps_sorted
    ]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        points = list(pool.map(_boltzmann_job, jobs))
    points.sort(key=lambda p: -p.epsilon)
    from .diagnostics import ConvergenceReport

    report = ConvergenceReport.from_sweep(
        np.array([p.epsilon for p in points]),
        np.stack([p.mode_errors for p in points]),
        np.array([p.norm_diff for p in points]),
    )
    files = {}
    modes_path = os.path.join(out_dir, "modes.csv")
    rows = [
        (p.epsilon, k, p.mode_errors[k])
        for p in points
        for k in range(len(p.mode_errors))
    ]
    write_csv(modes_path, "epsilon,k,e_k", rows)
    files["modes.csv"] = modes_path
    norm_path = os.path.join(out_dir, "norm_diff.csv")
    write_csv(norm_path, "epsilon,norm_diff", [(p.epsilon, p.norm_diff) for p in points])
    files["norm_diff.csv"] = norm_path
    rates_path = os.path.join(out_dir, "rates.csv")
    write_csv(
        rates_path,
        "k,slope,residual",
        [(k, fit.slope, fit.residual) for k, fit in enumerate(report.fits)],
    )
    files["rates.csv"] = rates_path
    return files


def _run_transport(config: ExperimentConfig, out_dir: str) -> dict:
    preset_name = (
        config.preset
        if str(config.preset).startswith("transport-")
        else "transport-subcritical-1"
    )
    params = transport_preset(preset_name)
    grids = TransportGrids(
        n_omega=config.n_omega, n_e=config.n_e, n_y=config.n_y, n_r=config.n_r
    )
    rows = []
    for eps in config.epsilons:
        margin = subcriticality_check(params, eps, grids)
        quotient = coercivity_test(params, eps, grids, trials=100, seed=config.seed)
        rows.append((eps, margin, quotient))
    checks_path = os.path.join(out_dir, "transport_checks.csv")
    write_csv(checks_path, "epsilon,margin,min_quotient", rows)
    files = {"transport_checks.csv": checks_path}

    phi_in = hat_initial_data(0.5)
    t_end = 1.0
    hom = solve_two_scale_transport(params, phi_in, grids, t_end=t_end, n_steps=150)
    counts = [grids.eps_energy_count(eps) for eps in config.epsilons]
    # prefer window widths that hold a whole number of oscillation periods
    # for every sweep eps; otherwise the partial-period residual swamps the
    # weak-convergence signal.  Fall back to grid divisibility alone when
    # the sweep is not commensurable with any window count.
    periods = [(grids.e_max - grids.e_min) / eps for eps in config.epsilons]
    divides = lambda w: all(c % w == 0 for c in counts + [grids.n_e])
    aligned = lambda w: all(abs(q / w - round(q / w)) < 1e-9 for q in periods)
    n_windows = next(
        (w for w in (6, 5, 4, 3, 2, 1) if divides(w) and aligned(w)),
        next(w for w in (6, 5, 4, 3, 2, 1) if divides(w)),
    )
    weak_rows = []
    for eps in config.epsilons:
        sol = solve_characteristics_eps(
            params, phi_in, eps, grids, t_end=t_end, n_steps=150, n_windows=n_windows
        )
        weak_rows.append(
            (eps, windowed_weak_error(sol, hom.psi_hom, n_windows), sol.sup_l2)
        )
    weak_path = os.path.join(out_dir, "transport_weak.csv")
    write_csv(weak_path, "epsilon,weak_error,sup_l2", weak_rows)
    files["transport_weak.csv"] = weak_path
    return files


def _run_oscillator(config: ExperimentConfig, out_dir: str) -> dict:
    nu = YoungMeasure.two_atoms(1.0, 3.0)
    u_in = np.array([1.0, 0.0])
    grid = TimeGrid.from_count(10.0, 10000)
    u = solve_oscillator_limit(nu, u_in, grid)
    ref = cell_averaged_limit(nu, grid.times, u_in)
    table = kernel_time_table(nu, grid)
    alpha, beta = kernel_components(table)
    files = {}
    sol_path = os.path.join(out_dir, "oscillator_solution.csv")
    write_csv(sol_path, "t,u1,u2", zip(grid.times, u[:, 0], u[:, 1]))
    files["oscillator_solution.csv"] = sol_path
    ref_path = os.path.join(out_dir, "oscillator_reference.csv")
    write_csv(ref_path, "t,u1,u2", zip(grid.times, ref[:, 0], ref[:, 1]))
    files["oscillator_reference.csv"] = ref_path
    ker_path = os.path.join(out_dir, "oscillator_kernel.csv")
    write_csv(ker_path, "t,alpha,beta", zip(table.taus, alpha, beta))
    files["oscillator_kernel.csv"] = ker_path
    return files


def _run_kernel_dump(config: ExperimentConfig, out_dir: str) -> dict:
    sigma = _cell_sigma(config.preset)
    table = KernelTable.from_cell_coefficient(sigma, 1e-2, 2000)
    path = os.path.join(out_dir, "kernel.csv")
    table.to_csv(path)
    return {"kernel.csv": path}


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Execute the configured pipeline; returns status and artifact paths."""
    try:
        config.validate()
    except ConfigError as exc:
        return ExperimentResult(2, {}, str(exc))
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    start = time.time()
    runners = {
        "tartar": _run_tartar,
        "ode": _run_ode,
        "boltzmann": _run_boltzmann,
        "sweep": _run_boltzmann,
        "transport": _run_transport,
        "oscillator": _run_oscillator,
        "kernel-dump": _run_kernel_dump,
    }
    try:
        files = runners[config.kind](config, out_dir)
    except ConfigError as exc:
        return ExperimentResult(2, {}, str(exc))
    except (ValueError, MemoryError, RuntimeError) as exc:
        return ExperimentResult(1, {}, f"numerical failure in {config.kind}: {exc}")
    manifest = _write_manifest(config, out_dir, files, time.time() - start)
    files["manifest.json"] = manifest
    return ExperimentResult(0, files)


def emit_plot_script(csv_paths, out_path) -> str:
    """Write a declarative matplotlib script consuming only the CSVs.

    Rate CSVs (epsilon,k,e_k) are drawn log-log with one series per mode;
    norm differences on linear axes; both together become the two-panel
    layout.  The emitted script contains no computation beyond reading
    columns and plotting them.
    """
    paths = [str(p) for p in csv_paths]
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing CSV: {p}")
    headers = {}
    for p in paths:
        with open(p) as fh:
            headers[p] = fh.readline().strip()
    panels = []
    for p in paths:
        head = headers[p]
        if head.startswith("epsilon,k,"):
            panels.append(("loglog_modes", p))
        elif head.startswith("epsilon,norm_diff"):
            panels.append(("linear_norm", p))
        elif head.startswith("t,"):
            panels.append(("timeseries", p))
        elif head.startswith("tau,"):
            panels.append(("timeseries", p))
        else:
            panels.append(("table", p))
    drawable = [p for p in panels if p[0] != "table"]
    lines = [
        "#!/usr/bin/env python3",
        '"""Generated plotting script; reads the listed CSVs and draws them."""',
        "import csv",
        "import matplotlib",
        'matplotlib.use("Agg")',
        "import matplotlib.pyplot as plt",
        "",
        "def read_columns(path):",
        "    with open(path) as fh:",
        "        rows = list(csv.reader(fh))",
        "    header, data = rows[0], rows[1:]",
        "    cols = {name: [] for name in header}",
        "    for row in data:",
        "        for name, val in zip(header, row):",
        "            cols[name].append(val)",
        "    return cols",
        "",
        f"fig, axes = plt.subplots(1, {max(1, len(drawable))}, "
        f"figsize=({6 * max(1, len(drawable))}, 5), squeeze=False)",
        "axes = axes[0]",
    ]
    idx = 0
    for kind, p in panels:
        if kind == "table":
            continue
        lines.append(f"cols = read_columns({p!r})")
        lines.append(f"ax = axes[{idx}]")
        if kind == "loglog_modes":
            lines += [
                'eps = [float(v) for v in cols["epsilon"]]',
                'ks = sorted(set(cols["k"]), key=int)',
                "for k in ks:",
                '    xs = [e for e, kk in zip(eps, cols["k"]) if kk == k]',
                '    ys = [float(v) for v, kk in zip(cols["e_k"], cols["k"]) if kk == k]',
                '    ax.loglog(xs, ys, marker="o", label=f"k={k}")',
                'ax.set_xlabel("epsilon"); ax.set_ylabel("e_k"); ax.legend()',
            ]
        elif kind == "linear_norm":
            lines += [
                'ax.plot([float(v) for v in cols["epsilon"]],'
                ' [float(v) for v in cols["norm_diff"]], marker="s")',
                'ax.set_xlabel("epsilon"); ax.set_ylabel("norm difference")',
            ]
        else:
            lines += [
                "names = list(cols)",
                "for name in names[1:]:",
                "    ax.plot([float(v) for v in cols[names[0]]],"
                " [float(v) for v in cols[name]], label=name)",
                "ax.set_xlabel(names[0]); ax.legend()",
            ]
        idx += 1
    lines.append('fig.savefig("figure.png", dpi=150)')
    text = "\n".join(lines) + "\n"
    with open(out_path, "w", newline="\n") as fh:
        fh.write(text)
    return text
