"""Experiment driver and command-line interface.

Sub-commands: ``ground-state`` (prepare and serialize the trapped ground
state), ``propagate`` (one trajectory with per-step purification), ``scan``
(grid of interaction/quench strengths with the density-error metric and the
time-step convergence criterion), ``purify`` (standalone purification of a
serialized 2RDM) and ``validate`` (re-check emitted files).

Scan cells run in separate processes; the worker count comes from the
TD2RDM_SCAN_WORKERS environment variable.  Results are merged single-threaded
in grid order, so output is independent of scheduling.
"""

from __future__ import annotations

import argparse
import csv
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dynamics, matcore, oracle, purifier
from . import hubbard as hb
from .dynamics import PropagationConfig, TrajectoryRecord
from .matcore import SpinBlock2RDM

DT_CONVERGENCE_THRESHOLD = 5e-3

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class RunConfig:
    hubbard: hb.HubbardConfig
    prop: PropagationConfig
    u_grid: list[float] = field(default_factory=list)
    v_grid: list[float] = field(default_factory=list)
    out_dir: Path | None = None
    mode: str = "propagate"
    seed: int = 0


@dataclass
class ScanCell:
    u: float
    v: float
    delta_n1_bar: float
    dt_converged: bool
    dt_residual: float
    max_defect_after: float
    error: str | None = None


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metric_delta_n1(times: np.ndarray, n1: np.ndarray,
                    exact_times: np.ndarray, exact_n1: np.ndarray) -> float:
    """Time-averaged relative deviation of the first-site occupation.

    Trapezoidal quadrature of |n1 - n1_exact| over the common grid, divided
    by the integral of the exact occupation.
    """
    times = np.asarray(times, dtype=float)
    exact_times = np.asarray(exact_times, dtype=float)
    if times.shape != exact_times.shape or not np.allclose(times, exact_times,
                                                           rtol=0.0, atol=1e-12):
        raise ValueError("trajectories are not sampled on a common grid")
    num = _trapezoid(np.abs(np.asarray(n1) - np.asarray(exact_n1)), times)
    den = _trapezoid(np.asarray(exact_n1), times)
    return float(num / den)


def dt_convergence(records_dt: list[TrajectoryRecord],
                   records_half: list[TrajectoryRecord]) -> tuple[bool, float]:
    """Time-step criterion: compare n1 between runs at dt and dt/2.

    The finer run is sampled on the coarse grid; the residual is the
    time-averaged absolute difference.
    """
    if len(records_half) != 2 * len(records_dt) - 1:
        raise ValueError("second trajectory does not refine the first grid")
    t = np.array([r.t for r in records_dt])
    n1 = np.array([r.site_densities[0] for r in records_dt])
    n1_half = np.array([r.site_densities[0] for r in records_half[::2]])
    t_half = np.array([r.t for r in records_half[::2]])
    if not np.allclose(t, t_half, rtol=0.0, atol=1e-9):
        raise ValueError("refined trajectory grid does not match")
    horizon = t[-1] - t[0]
    residual = float(_trapezoid(np.abs(n1 - n1_half), t) / horizon)
    return residual < DT_CONVERGENCE_THRESHOLD, residual


# ---------------------------------------------------------------------------
# Scan driver
# ---------------------------------------------------------------------------

def _cell_payload(args: tuple) -> dict:
    (sites, particles, hopping, u, v, global_dt, horizon, rel_tol, abs_tol,
     alpha, k_max) = args
    cfg = hb.HubbardConfig(sites=sites, particles=particles, hopping=hopping,
                           interaction=u, trap=v)
    prop = PropagationConfig(global_dt=global_dt, horizon=horizon,
                             rkf_rel_tol=rel_tol, rkf_abs_tol=abs_tol,
                             purification=purifier.PurificationConfig(
                                 alpha=alpha, k_max=k_max))
    prop_half = replace(prop, global_dt=0.5 * global_dt)
    psi = oracle.ground_state(cfg)
    d12 = oracle.extract_rdm2_blocks(psi)
    records = dynamics.propagate(d12, cfg, prop)
    records_half = dynamics.propagate(d12, cfg, prop_half)
    times = np.array([r.t for r in records])
    exact_n1 = oracle.density_series(psi, times, cfg)[:, 0]
    n1 = np.array([r.site_densities[0] for r in records])
    metric = metric_delta_n1(times, n1, times, exact_n1)
    converged, residual = dt_convergence(records, records_half)
    return {
        "u": u, "v": v,
        "delta_n1_bar": metric,
        "dt_converged": converged,
        "dt_residual": residual,
        "max_defect_after": max(r.defect_after for r in records[1:]),
        "records": records,
        "records_half": records_half,
    }


def _limit_worker_threads() -> None:
    # dense blocks here are tiny; threaded BLAS only adds contention
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _scan_worker(args: tuple) -> dict:
    try:
        return _cell_payload(args)
    except Exception as exc:  # cell failures stay in the cell
        return {"u": args[3], "v": args[4], "error": f"{type(exc).__name__}: {exc}"}


def run_scan(cfg: RunConfig) -> list[ScanCell]:
    """Propagate every (U, V) grid cell and collect the error metrics.

    Cells are independent; failures are recorded per cell and do not stop
    the scan.  With an output directory set, per-cell trajectory CSVs and a
    merged scan summary are written.
    """
    if not cfg.u_grid or not cfg.v_grid:
        raise ValueError("scan mode needs non-empty U and V grids")
    h = cfg.hubbard
    p = cfg.prop
    tasks = [(h.sites, h.particles, h.hopping, u, v, p.global_dt, p.horizon,
              p.rkf_rel_tol, p.rkf_abs_tol, p.purification.alpha,
              p.purification.k_max)
             for u in cfg.u_grid for v in cfg.v_grid]
    workers = int(os.environ.get("TD2RDM_SCAN_WORKERS", "0")) or min(
        len(tasks), os.cpu_count() or 1)
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_limit_worker_threads) as pool:
            payloads = list(pool.map(_scan_worker, tasks))
    else:
        payloads = [_scan_worker(t) for t in tasks]

    cells = []
    for payload in payloads:
        if "error" in payload:
            cells.append(ScanCell(u=payload["u"], v=payload["v"],
                                  delta_n1_bar=float("nan"), dt_converged=False,
                                  dt_residual=float("nan"),
                                  max_defect_after=float("nan"),
                                  error=payload["error"]))
            continue
        cells.append(ScanCell(u=payload["u"], v=payload["v"],
                              delta_n1_bar=payload["delta_n1_bar"],
                              dt_converged=payload["dt_converged"],
                              dt_residual=payload["dt_residual"],
                              max_defect_after=payload["max_defect_after"]))
        if cfg.out_dir is not None:
            tag = f"U{payload['u']:g}_V{payload['v']:g}"
            write_trajectory_csv(cfg.out_dir / f"traj_{tag}.csv", payload["records"])
            write_trajectory_csv(cfg.out_dir / f"traj_{tag}_halfdt.csv",
                                 payload["records_half"])
    if cfg.out_dir is not None:
        _write_scan_summary(cfg.out_dir / "scan_summary.json", cells)
    return cells


def _write_scan_summary(path: Path, cells: list[ScanCell]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [{"U": c.u, "V": c.v, "delta_n1_bar": c.delta_n1_bar,
                "dt_converged": c.dt_converged, "dt_residual": c.dt_residual,
                "max_defect_after": c.max_defect_after, "error": c.error}
               for c in cells]
    path.write_text(json.dumps(payload, indent=2))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("t", "E_total", "E_int", "eta", "defect_before", "defect_after",
               "purif_iters")


def write_trajectory_csv(path: Path, records: list[TrajectoryRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sites = len(records[0].site_densities)
    header = ["t"] + [f"n_{i+1}" for i in range(sites)] + [
        "E_total", "E_int", "eta", "defect_before", "defect_after", "purif_iters"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in records:
            row = [f"{r.t:.17g}"] + [f"{x:.17g}" for x in r.site_densities] + [
                f"{r.total_energy:.17g}", f"{r.interaction_energy:.17g}",
                f"{r.eta:.17g}", f"{r.defect_before:.17g}",
                f"{r.defect_after:.17g}", str(r.purification_iterations)]
            writer.writerow(row)


def read_trajectory_csv(path: Path) -> list[TrajectoryRecord]:
    path = Path(path)
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        sites = sum(1 for name in header if name.startswith("n_"))
        records = []
        for row in reader:
            vals = [float(x) for x in row[:-1]] + [int(row[-1])]
            records.append(TrajectoryRecord(
                t=vals[0], site_densities=np.array(vals[1:1 + sites]),
                total_energy=vals[1 + sites], interaction_energy=vals[2 + sites],
                eta=vals[3 + sites], defect_before=vals[4 + sites],
                defect_after=vals[5 + sites], purification_iterations=vals[6 + sites]))
    return records


def save_blocks(path: Path, d: SpinBlock2RDM) -> None:
    """Serialize block storage as diffable structured text (17 digits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["spinblock2rdm v1", f"sites {d.sites}", f"particles {d.particle_number}"]
    for name, block in (("singlet", d.singlet), ("triplet", d.triplet)):
        lines.append(f"block {name} {block.shape[0]}")
        for i in range(block.shape[0]):
            for j in range(block.shape[0]):
                z = complex(block[i, j])
                lines.append(f"{i} {j} {z.real:.17g} {z.imag:.17g}")
    path.write_text("\n".join(lines) + "\n")


def load_blocks(path: Path) -> SpinBlock2RDM:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "spinblock2rdm v1":
        raise ValueError(f"{path}: not a spinblock2rdm file")
    sites = particles = None
    blocks: dict[str, np.ndarray] = {}
    current = None
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "sites":
            sites = int(parts[1])
        elif parts[0] == "particles":
            particles = int(parts[1])
        elif parts[0] == "block":
            name, dim = parts[1], int(parts[2])
            blocks[name] = np.zeros((dim, dim), dtype=complex)
            current = name
        else:
            if current is None:
                raise ValueError(f"{path}: entry before any block header")
            i, j = int(parts[0]), int(parts[1])
            blocks[current][i, j] = float(parts[2]) + 1j * float(parts[3])
    if sites is None or particles is None or set(blocks) != {"singlet", "triplet"}:
        raise ValueError(f"{path}: incomplete spinblock2rdm file")
    d = SpinBlock2RDM(blocks["singlet"], blocks["triplet"], particles, sites)
    expected = (matcore.singlet_dim(sites), matcore.triplet_dim(sites))
    if (d.singlet.shape[0], d.triplet.shape[0]) != expected:
        raise ValueError(f"{path}: block dimensions do not match {sites} sites")
    return d


# ---------------------------------------------------------------------------
# Standalone purification and validation
# ---------------------------------------------------------------------------

def purify_file(input_path: Path, out_dir: Path,
                cfg: purifier.PurificationConfig,
                interaction: float = 1.0,
                perturb: float = 0.0, seed: int = 0) -> tuple[Path, purifier.PurificationReport]:
    """Purify a serialized 2RDM and write the result plus a report.

    ``perturb`` adds a random Hermitian kernel-space direction orthogonal to
    the conserved operators before purifying (for exercising the engine).
    """
    d = load_blocks(input_path)
    matcore.check_hermitian(d.singlet, name="singlet block")
    matcore.check_hermitian(d.triplet, name="triplet block")
    model = hb.HubbardConfig(sites=d.sites, particles=d.particle_number,
                             interaction=interaction)
    x1, x2 = hb.conserved_ops(model)
    ys = purifier.build_conserved_set([x1, x2], d.sites)
    if perturb > 0.0:
        d = perturb_in_kernel(d, ys, perturb, seed)
    out, report = purifier.purify_blocks(d, ys, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / (Path(input_path).stem + "_purified.txt")
    save_blocks(out_path, out)
    report_path = out_dir / (Path(input_path).stem + "_report.json")
    report_path.write_text(json.dumps({
        "iterations_used": report.iterations_used,
        "defect_initial": report.defect_initial,
        "defect_final": report.defect_final,
        "converged": report.converged,
        "per_iteration_defects": report.per_iteration_defects,
    }, indent=2))
    return out_path, report


def perturb_in_kernel(d: SpinBlock2RDM, ys: purifier.ConservedOperatorSet,
                      hs_norm: float, seed: int) -> SpinBlock2RDM:
    """Add a random Hermitian, contraction-free, conserved-orthogonal
    perturbation of the given joint Hilbert-Schmidt norm."""
    rng = np.random.default_rng(seed)
    pert = d.copy()
    parts = []
    for name, block in (("singlet", d.singlet), ("triplet", d.triplet)):
        n = block.shape[0]
        x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        x = 0.5 * (x + x.conj().T)
        x = matcore.project_to_contraction_kernel(x, d.sites, name)
        if name == "singlet":
            x = purifier.project_conserved(x, ys)
        parts.append(x)
    norm = np.sqrt(sum(matcore.hs_inner(x, x).real for x in parts))
    scale = hs_norm / norm
    pert.singlet = pert.singlet + scale * parts[0]
    pert.triplet = pert.triplet + scale * parts[1]
    return pert


def validate_file(path: Path) -> list[str]:
    """Re-check an emitted file; returns a list of problems (empty if clean)."""
    path = Path(path)
    problems = []
    text_head = path.open().readline().strip()
    if text_head == "spinblock2rdm v1":
        try:
            d = load_blocks(path)
            matcore.check_hermitian(d.singlet, name="singlet block")
            matcore.check_hermitian(d.triplet, name="triplet block")
        except ValueError as exc:
            problems.append(str(exc))
        return problems
    records = read_trajectory_csv(path)
    n = None
    for k, r in enumerate(records):
        dens_sum = float(np.sum(r.site_densities))
        if n is None:
            n = round(dens_sum)
        if abs(dens_sum - n) > 1e-8:
            problems.append(f"row {k}: density sum {dens_sum!r} deviates from {n}")
        if r.purification_iterations > 0 and r.defect_after > r.defect_before + 1e-15:
            problems.append(f"row {k}: defect grew during purification")
        vals = [r.t, r.total_energy, r.interaction_energy, r.eta,
                r.defect_before, r.defect_after]
        if not all(np.isfinite(v) for v in vals):
            problems.append(f"row {k}: non-finite entry")
    for k in range(1, len(records)):
        if records[k].t <= records[k - 1].t:
            problems.append(f"row {k}: time grid not increasing")
    return problems


# ---------------------------------------------------------------------------
# Configuration files and the CLI
# ---------------------------------------------------------------------------

def parse_config_file(path: Path) -> dict:
    """Key-value config: one ``key = value`` (or ``key value``) per line."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
        else:
            key, _, val = line.partition(" ")
            val = val.strip()
        out[key] = val
    return out


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = parse_config_file(args.config) if args.config else {}

    def pick(name, cli_value, cast, default):
        if cli_value is not None:
            return cli_value
        if name in raw:
            return cast(raw[name])
        return default

    sites = pick("sites", args.sites, int, 6)
    particles = pick("particles", args.particles, int, sites)
    cfg = hb.HubbardConfig(
        sites=sites, particles=particles,
        hopping=pick("J", None, float, 1.0),
        interaction=pick("U", args.U, float, 1.0),
        trap=pick("V", args.V, float, 0.4))
    prop = PropagationConfig(
        global_dt=pick("dt", args.dt, float, 0.01),
        horizon=pick("T", args.T, float, 25.0),
        rkf_rel_tol=pick("rkf_rel_tol", None, float, 1e-8),
        rkf_abs_tol=pick("rkf_abs_tol", None, float, 1e-10),
        purification=purifier.PurificationConfig(
            alpha=pick("alpha", args.alpha, float, 2.0),
            k_max=pick("kmax", args.kmax, int, 100)))
    u_grid = _floats(raw["U_grid"]) if "U_grid" in raw else []
    v_grid = _floats(raw["V_grid"]) if "V_grid" in raw else []
    if getattr(args, "U_grid", None):
        u_grid = _floats(args.U_grid)
    if getattr(args, "V_grid", None):
        v_grid = _floats(args.V_grid)
    out_dir = Path(args.out) if args.out else (
        Path(raw["out_dir"]) if "out_dir" in raw else None)
    return RunConfig(hubbard=cfg, prop=prop, u_grid=u_grid, v_grid=v_grid,
                     out_dir=out_dir, seed=pick("seed", args.seed, int, 0))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--sites", type=int, default=None)
    p.add_argument("--particles", type=int, default=None)
    p.add_argument("--U", type=float, default=None)
    p.add_argument("--V", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--T", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None, help="steering factor (default 2)")
    p.add_argument("--kmax", type=int, default=None, help="iteration cap (default 100)")
    p.add_argument("--seed", type=int, default=None)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="td2rdm",
                                     description="2RDM propagation with projective purification")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gs = sub.add_parser("ground-state", help="prepare and serialize the trapped ground state")
    _add_common(p_gs)

    p_prop = sub.add_parser("propagate", help="propagate one trajectory")
    _add_common(p_prop)

    p_scan = sub.add_parser("scan", help="scan a (U, V) grid")
    _add_common(p_scan)
    p_scan.add_argument("--U-grid", type=str, default=None)
    p_scan.add_argument("--V-grid", type=str, default=None)

    p_pur = sub.add_parser("purify", help="purify a serialized 2RDM")
    _add_common(p_pur)
    p_pur.add_argument("--input", type=Path, required=True)
    p_pur.add_argument("--perturb", type=float, default=0.0,
                       help="add a kernel-space perturbation of this HS norm first")

    p_val = sub.add_parser("validate", help="re-check emitted files")
    p_val.add_argument("paths", nargs="+", type=Path)

    args = parser.parse_args(argv)

    if args.command == "validate":
        status = 0
        for path in args.paths:
            try:
                problems = validate_file(path)
            except Exception as exc:
                print(f"{path}: ERROR {exc}")
                status = 1
                continue
            if problems:
                status = 1
                for p in problems:
                    print(f"{path}: {p}")
            else:
                print(f"{path}: ok")
        return status

    cfg = build_run_config(args)
    out_dir = cfg.out_dir or Path(".")

    if args.command == "ground-state":
        psi = oracle.ground_state(cfg.hubbard)
        d12 = oracle.extract_rdm2_blocks(psi)
        save_blocks(out_dir / "ground_state_blocks.txt", d12)
        obs = hb.observables_from_blocks(d12, cfg.hubbard, t=-1.0)
        summary = {
            "energy": oracle.ground_energy(cfg.hubbard),
            "site_densities": list(obs.site_densities),
            "interaction_energy": obs.interaction_energy,
            "eta": obs.eta,
            "total_spin_squared": oracle.total_spin_squared(psi),
        }
        (out_dir / "ground_state_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"ground state written to {out_dir}")
        return 0

    if args.command == "propagate":
        psi = oracle.ground_state(cfg.hubbard)
        d12 = oracle.extract_rdm2_blocks(psi)
        records = dynamics.propagate(d12, cfg.hubbard, cfg.prop)
        write_trajectory_csv(out_dir / "trajectory.csv", records)
        times = np.array([r.t for r in records])
        exact_n1 = oracle.density_series(psi, times, cfg.hubbard)[:, 0]
        n1 = np.array([r.site_densities[0] for r in records])
        summary = {
            "delta_n1_bar": metric_delta_n1(times, n1, times, exact_n1),
            "max_defect_before": max(r.defect_before for r in records[1:]),
            "max_defect_after": max(r.defect_after for r in records[1:]),
            "energy_drift": _relative_drift([r.total_energy for r in records]),
            "eta_drift": _relative_drift([r.eta for r in records]),
            "particle_drift": _relative_drift(
                [float(np.sum(r.site_densities)) for r in records]),
        }
        (out_dir / "run_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"trajectory written to {out_dir}")
        return 0

    if args.command == "scan":
        cells = run_scan(cfg if cfg.out_dir else replace(cfg, out_dir=out_dir))
        for c in cells:
            status = c.error or ("converged" if c.dt_converged else "NOT converged")
            print(f"U={c.u:g} V={c.v:g} delta_n1={c.delta_n1_bar:.3e} {status}")
        return 0 if all(c.error is None for c in cells) else 1

    if args.command == "purify":
        pcfg = purifier.PurificationConfig(
            alpha=cfg.prop.purification.alpha, k_max=cfg.prop.purification.k_max)
        try:
            out_path, report = purify_file(args.input, out_dir, pcfg,
                                           interaction=cfg.hubbard.interaction,
                                           perturb=args.perturb, seed=cfg.seed)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"purified matrix written to {out_path} "
              f"(iterations {report.iterations_used}, defect {report.defect_final:.3e})")
        return 0 if report.converged else 2

    raise AssertionError(f"unhandled command {args.command}")


def _relative_drift(series: list[float]) -> float:
    arr = np.asarray(series, dtype=float)
    scale = max(1e-300, abs(arr[0]))
    return float(np.max(np.abs(arr - arr[0])) / max(1.0, scale))


if __name__ == "__main__":
    sys.exit(main())
