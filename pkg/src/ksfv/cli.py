"""Config-driven experiment runner.

    ksfv run          --config cfg.json [--out DIR] [--full-scale] [--seed N]
    ksfv convergence  --config cfg.json ...
    ksfv decay        --config cfg.json ...
    ksfv inequalities --config cfg.json ...

Exit codes: 0 completed, 2 usage/config error, 3 blow-up, 4 Picard
nonconvergence, 1 any other failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from .dspace import Field, constant, project_initial, write_field_csv, write_field_vtk
from .mesh import Mesh, build_cartesian
from .scheme import ModelParams, PicardConfig, PicardNonConvergence, State, TimeGrid, run

log = logging.getLogger("ksfv")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_BLOWUP, EXIT_NONCONV = 0, 1, 2, 3, 4
STATUS_EXIT = {"completed": EXIT_OK, "blowup": EXIT_BLOWUP, "nonconvergence": EXIT_NONCONV}

CONFIG_DIR = Path(__file__).resolve().parent / "configs"

ORDER_COLUMNS = ("label", "nx", "ny", "h", "err_l1", "err_l2", "err_linf", "order_l1", "order_l2", "order_linf")
RATE_COLUMNS = ("tag", "nx", "ny", "delta", "mu", "dt", "status", "rate", "intercept", "fit_residual",
                "n_points", "monotone", "final_rel_entropy")
INEQ_COLUMNS = ("nx", "ny", "trials", "ck_max_ratio", "ck_violations", "ls_max_ratio", "ls_constant",
                "ls_exceeded", "const_ls_lhs", "const_ck_lhs")


class ConfigError(ValueError):
    pass


# -- initial data -------------------------------------------------------------------------

def gaussian(mass: float, theta: float, x0: float, y0: float):
    c = mass / (2 * math.pi * theta)
    return lambda x, y: c * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * theta))


def _sum(*fs):
    return lambda x, y: sum(f(x, y) for f in fs)


@dataclass(frozen=True)
class InitialDatum:
    """Named or custom Gaussian-mixture initial density.

    kind: gaussian1 (mass 6 pi at (0.1, 0.1)), gaussian2 (4 pi at (0.1, 0.1)
    plus 2 pi at (-0.2, -0.2)), gaussian_sym (mass M at the origin, default
    20 pi), gaussian (explicit ``masses`` and ``centers``) or constant.
    """

    kind: str = "gaussian1"
    theta: float = 1e-2
    mass: float | None = None  # gaussian_sym
    masses: tuple = ()
    centers: tuple = ()
    value: float = 1.0  # constant

    KINDS = ("gaussian1", "gaussian2", "gaussian_sym", "gaussian", "constant")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown initial datum {self.kind!r}; expected one of {self.KINDS}")
        if not self.theta > 0:
            raise ConfigError("theta must be positive")
        if self.kind == "gaussian":
            if len(self.masses) != len(self.centers) or not self.masses:
                raise ConfigError("custom gaussian needs matching, nonempty 'masses' and 'centers'")
        if self.kind == "constant" and not self.value >= 0:
            raise ConfigError("constant datum must be nonnegative")

    def components(self) -> list[tuple[float, float, float]]:
        if self.kind == "gaussian1":
            return [(6 * math.pi, 0.1, 0.1)]
        if self.kind == "gaussian2":
            return [(4 * math.pi, 0.1, 0.1), (2 * math.pi, -0.2, -0.2)]
        if self.kind == "gaussian_sym":
            return [(20 * math.pi if self.mass is None else self.mass, 0.0, 0.0)]
        if self.kind == "gaussian":
            return [(float(m), float(c[0]), float(c[1])) for m, c in zip(self.masses, self.centers)]
        return []

    def field(self, mesh: Mesh, quadrature_order: int = 5) -> Field:
        if self.kind == "constant":
            return constant(mesh, self.value, "n")
        f = _sum(*(gaussian(m, self.theta, x, y) for m, x, y in self.components()))
        return project_initial(f, mesh, quadrature_order)


# -- configuration ------------------------------------------------------------------------

def _mesh_size(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(a, int) for a in v):
        return (v[0], v[1])
    raise ConfigError(f"mesh size must be N or [nx, ny], got {v!r}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    command: str = "run"  # the subcommand this config is written for
    rect: tuple = (-0.5, 0.5, -0.5, 0.5)
    mesh_sizes: list = field(default_factory=lambda: [(32, 32)])
    reference: tuple | None = None  # convergence reference mesh
    dt: float = 1e-3
    T: float = 1.0
    delta: float = 1e-3
    mu: float = 1.0
    initial: InitialDatum = field(default_factory=InitialDatum)
    picard: PicardConfig = field(default_factory=PicardConfig)
    max_halvings: int = 3
    quadrature_order: int = 5
    out: str = "out"
    snapshot_times: list = field(default_factory=list)
    snapshot_format: str = "csv"  # csv | vtk | both
    sweep: dict = field(default_factory=dict)  # {"delta": [...]} and/or {"mu": [...]}
    decay_window: tuple | None = (0.5, 1.0)
    trials: int = 1000
    seed: int = 0
    workers: int = 0  # 0: one per CPU
    full_scale: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.rect) != 4 or not (self.rect[0] < self.rect[1] and self.rect[2] < self.rect[3]):
            raise ConfigError(f"rect must be (x0, x1, y0, y1) with x0 < x1, y0 < y1, got {self.rect}")
        self.rect = tuple(float(a) for a in self.rect)
        self.mesh_sizes = [_mesh_size(v) for v in self.mesh_sizes]
        if not self.mesh_sizes:
            raise ConfigError("mesh_sizes must not be empty")
        if self.reference is not None:
            self.reference = _mesh_size(self.reference)
        if not (self.dt > 0 and self.T > 0):
            raise ConfigError("dt and T must be positive")
        if self.command not in ("run", "convergence", "decay", "inequalities"):
            raise ConfigError(f"unknown command {self.command!r}")
        if self.snapshot_format not in ("csv", "vtk", "both"):
            raise ConfigError(f"snapshot_format must be csv, vtk or both, got {self.snapshot_format!r}")
        if set(self.sweep) - {"delta", "mu"}:
            raise ConfigError(f"sweep keys must be 'delta' and/or 'mu', got {sorted(self.sweep)}")
        if self.decay_window is not None:
            self.decay_window = tuple(float(a) for a in self.decay_window)
        try:
            ModelParams(self.delta, self.mu)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.delta, self.mu)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.from_final_time(self.T, self.dt)

    def mesh(self, size=None) -> Mesh:
        nx, ny = self.mesh_sizes[0] if size is None else size
        return build_cartesian(nx, ny, self.rect)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "initial" in data:
                ini = dict(data["initial"])
                for k in ("masses", "centers"):
                    if k in ini:
                        ini[k] = tuple(tuple(c) if isinstance(c, list) else c for c in ini[k])
                data["initial"] = InitialDatum(**ini)
            if "picard" in data:
                data["picard"] = PicardConfig(**data["picard"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, full_scale: bool = False) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if full_scale:
            over = data.get("full_scale", {})
            if not over:
                log.warning("%s has no full_scale overrides; running desk scale", path.name)
            data = {**data, **over}
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def bundled_config(name: str) -> Path:
    path = CONFIG_DIR / (name if name.endswith(".json") else name + ".json")
    if not path.exists():
        raise ConfigError(f"no bundled config {name!r} in {CONFIG_DIR}")
    return path


# -- run ------------------------------------------------------------------------------------

class SnapshotWriter:
    """Observer writing n (and S) at the first step reaching each requested time."""

    def __init__(self, out: Path, times, fmt: str = "csv", dt: float = 0.0):
        self.out = Path(out)
        self.pending = sorted(float(t) for t in times)
        self.fmt = fmt
        self.eps = 1e-9 * max(dt, 1e-300)
        self.written: list[Path] = []

    def write(self, state: State) -> None:
        stem = f"t{state.t:.6f}"
        if self.fmt in ("csv", "both"):
            for f, name in ((state.n, "n"), (state.S, "S")):
                p = self.out / f"{name}_{stem}.csv"
                write_field_csv(f, p)
                self.written.append(p)
        if self.fmt in ("vtk", "both") and state.n.mesh.is_cartesian():
            p = self.out / f"n_{stem}.vtk"
            write_field_vtk(state.n, p, "n")
            self.written.append(p)

    def __call__(self, state: State) -> None:
        hit = False
        while self.pending and state.t >= self.pending[0] - self.eps:
            self.pending.pop(0)
            hit = True
        if hit:
            self.write(state)


def simulate(cfg: ExperimentConfig, size=None, out: Path | None = None, snapshots: bool = True,
             observers=()):
    """One run of ``cfg`` on mesh ``size``; writes record.csv (and snapshots) under ``out``."""
    mesh = cfg.mesh(size)
    n0 = cfg.initial.field(mesh, cfg.quadrature_order)
    observers = list(observers)
    writer = None
    if out is not None and snapshots:
        writer = SnapshotWriter(Path(out) / "snapshots", cfg.snapshot_times, cfg.snapshot_format, cfg.dt)
        observers.append(writer)
    try:
        record, state = run(n0, cfg.params, cfg.grid, cfg.picard, mesh, observers, cfg.max_halvings)
    except PicardNonConvergence as exc:
        log.error("%s", exc)
        record, state = exc.record, exc.state
        record.status = "nonconvergence"
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        record.to_csv(out / "record.csv")
        if writer is not None:
            writer.write(state)
        k = int(np.argmax(state.n.values))
        summary = dict(name=cfg.name, status=record.status, blowup_time=record.blowup_time,
                       final_time=state.t, steps=state.k, mesh=list(mesh.shape or ()),
                       max_n=float(state.n.values[k]), argmax_cell=k,
                       argmax_center=[float(c) for c in mesh.centers[k]])
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return record, state


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    record, state = simulate(cfg, None, out)
    log.info("%s: %s at t=%.6g (%d steps), max n = %.6g", cfg.name, record.status, state.t, state.k,
             state.n.values.max())
    return STATUS_EXIT[record.status]


# -- convergence ------------------------------------------------------------------------------

def inject(u: Field, fine: Mesh) -> Field:
    """Copy each coarse cell value onto the fine cells it contains (nested Cartesian grids)."""
    coarse = u.mesh
    if not (coarse.is_cartesian() and fine.is_cartesian()):
        raise ValueError("injection needs Cartesian meshes")
    if not np.allclose(coarse.rect, fine.rect, rtol=0, atol=1e-14):
        raise ValueError(f"meshes cover different rectangles: {coarse.rect} vs {fine.rect}")
    (cx, cy), (fx, fy) = coarse.shape, fine.shape
    if fx % cx or fy % cy:
        raise ValueError(f"{cx}x{cy} mesh is not nested in {fx}x{fy}")
    rx, ry = fx // cx, fy // cy
    grid = u.values.reshape(cy, cx)
    return Field(fine, np.repeat(np.repeat(grid, ry, axis=0), rx, axis=1).ravel(), u.name, u.time)


def error_norms(u: Field, ref: Field) -> tuple[float, float, float]:
    """L1, L2 and L-infinity norms of ``u - ref`` on the reference mesh."""
    e = np.abs(inject(u, ref.mesh).values - ref.values)
    a = ref.mesh.areas
    return float(a @ e), float(np.sqrt(a @ (e * e))), float(e.max())


def fit_order(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h, err = np.asarray(h, float), np.asarray(err, float)
    if h.size < 2 or np.any(err <= 0):
        return math.nan
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def convergence_table(cfg: ExperimentConfig) -> list[dict]:
    ref_size = cfg.reference or max(cfg.mesh_sizes, key=lambda s: s[0] * s[1])
    for s in cfg.mesh_sizes:
        if ref_size[0] % s[0] or ref_size[1] % s[1]:
            raise ValueError(f"mesh {s[0]}x{s[1]} is not nested in reference {ref_size[0]}x{ref_size[1]}")
    _, ref_state = simulate(cfg, ref_size, snapshots=False)
    rows = []
    for s in sorted(cfg.mesh_sizes, key=lambda s: s[0] * s[1]):
        record, state = simulate(cfg, s, snapshots=False)
        if record.status != "completed":
            raise RuntimeError(f"{s[0]}x{s[1]} run ended with status {record.status}")
        errs = error_norms(state.n, ref_state.n)
        rows.append(dict(label=f"{s[0]}x{s[1]}", nx=s[0], ny=s[1], h=state.n.mesh.h,
                         err_l1=errs[0], err_l2=errs[1], err_linf=errs[2]))
    norms = ("l1", "l2", "linf")
    for prev, cur in zip(rows, rows[1:]):
        for p in norms:
            a, b = prev[f"err_{p}"], cur[f"err_{p}"]
            cur[f"order_{p}"] = (math.log(a / b) / math.log(prev["h"] / cur["h"])
                                 if a > 0 and b > 0 and prev["h"] != cur["h"] else math.nan)
    fitted = dict(label="lsq", nx="", ny="", h="", err_l1="", err_l2="", err_linf="")
    for p in norms:
        fitted[f"order_{p}"] = fit_order([r["h"] for r in rows], [r[f"err_{p}"] for r in rows])
    return rows + [fitted]


def cmd_convergence(cfg: ExperimentConfig, out: Path) -> int:
    rows = convergence_table(cfg)
    write_table(rows, ORDER_COLUMNS, Path(out) / "orders.csv")
    f = rows[-1]
    log.info("fitted orders: L1 %.3f, L2 %.3f, Linf %.3f", f["order_l1"], f["order_l2"], f["order_linf"])
    return EXIT_OK


# -- decay sweeps --------------------------------------------------------------------------------

def decay_jobs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig, tuple]]:
    deltas = cfg.sweep.get("delta", [cfg.delta])
    mus = cfg.sweep.get("mu", [cfg.mu])
    jobs = []
    for size, d, m in itertools.product(cfg.mesh_sizes, deltas, mus):
        tag = f"n{size[0]}x{size[1]}_delta{d:g}_mu{m:g}"
        jobs.append((tag, dataclasses.replace(cfg, delta=float(d), mu=float(m), sweep={}), size))
    return jobs


def _decay_job(args) -> dict:
    tag, cfg, size, out = args
    record, _ = simulate(cfg, size, Path(out) / "runs" / tag, snapshots=False)
    E = record["rel_entropy"]
    row = dict(tag=tag, nx=size[0], ny=size[1], delta=cfg.delta, mu=cfg.mu, dt=cfg.dt, status=record.status,
               monotone=bool(np.all(np.diff(E) < 0)), final_rel_entropy=float(E[-1]))
    try:
        fit = dg.fit_decay_rate(record, cfg.decay_window)
        row.update(rate=fit.rate, intercept=fit.intercept, fit_residual=fit.residual, n_points=fit.n_points)
    except ValueError as exc:
        log.warning("%s: no decay fit (%s)", tag, exc)
        row.update(rate=math.nan, intercept=math.nan, fit_residual=math.nan, n_points=0)
    return row


def decay_table(cfg: ExperimentConfig, out: Path) -> list[dict]:
    jobs = [(tag, c, size, str(out)) for tag, c, size in decay_jobs(cfg)]
    workers = min(len(jobs), cfg.workers or os.cpu_count() or 1)
    if workers <= 1:
        return [_decay_job(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_decay_job, jobs))


def cmd_decay(cfg: ExperimentConfig, out: Path) -> int:
    rows = decay_table(cfg, Path(out))
    write_table(rows, RATE_COLUMNS, Path(out) / "rates.csv")
    for r in rows:
        log.info("%s: rate %.4g (%s, monotone=%s)", r["tag"], r["rate"], r["status"], r["monotone"])
    return max(STATUS_EXIT[r["status"]] for r in rows)


# -- inequalities --------------------------------------------------------------------------------

def inequality_table(cfg: ExperimentConfig) -> list[dict]:
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for size in cfg.mesh_sizes:
        mesh = cfg.mesh(size)
        n_star = 1.0 + rng.uniform()
        ck, ls = [], []
        C_L = dg.log_sobolev_constant(mesh.xi)
        for _ in range(cfg.trials):
            ck.append(dg.csiszar_kullback_check(dg.random_mass_consistent_field(mesh, n_star * mesh.domain_measure,
                                                                                rng), n_star))
            ls.append(dg.log_sobolev_check(dg.random_field(mesh, rng)))
        const = constant(mesh, n_star)
        rows.append(dict(nx=size[0], ny=size[1], trials=cfg.trials,
                         ck_max_ratio=max((c.ratio for c in ck), default=0.0),
                         ck_violations=sum(not c.holds for c in ck),
                         ls_max_ratio=max((c.ratio for c in ls), default=0.0), ls_constant=C_L,
                         ls_exceeded=sum(not c.holds for c in ls),
                         const_ls_lhs=dg.log_sobolev_check(const).lhs,
                         const_ck_lhs=dg.csiszar_kullback_check(const, n_star).lhs))
    return rows


def cmd_inequalities(cfg: ExperimentConfig, out: Path) -> int:
    rows = inequality_table(cfg)
    write_table(rows, INEQ_COLUMNS, Path(out) / "inequalities.csv")
    for r in rows:
        log.info("%dx%d: CK max ratio %.4f (%d violations), log-Sobolev max ratio %.4f vs C_L %.4f",
                 r["nx"], r["ny"], r["ck_max_ratio"], r["ck_violations"], r["ls_max_ratio"], r["ls_constant"])
    return EXIT_OK


# -- tables -------------------------------------------------------------------------------------

def write_table(rows: list[dict], columns, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, columns, extrasaction="raise")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})


def read_table(path) -> list[dict]:
    """Read any CSV written by ``write_table``; numeric cells become floats."""
    def conv(v):
        if v in ("True", "False"):
            return v == "True"
        try:
            return float(v)
        except ValueError:
            return v
    with Path(path).open(newline="") as fh:
        return [{k: conv(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- entry point ----------------------------------------------------------------------------------

COMMANDS = {"run": cmd_run, "convergence": cmd_convergence, "decay": cmd_decay, "inequalities": cmd_inequalities}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksfv", description="Finite volume Keller-Segel experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True,
                       help="JSON config file, or the name of a bundled config (e.g. decay_delta)")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--full-scale", action="store_true", help="apply the config's full_scale overrides")
        s.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        path = Path(args.config)
        if not path.exists() and not path.suffix:
            path = bundled_config(args.config)
        cfg = ExperimentConfig.load(path, args.full_scale)
        if args.seed is not None:
            cfg.seed = args.seed
        out = Path(args.out or cfg.out)
    except ConfigError as exc:
        print(f"ksfv: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    try:
        return COMMANDS[args.command](cfg, out)
    except ValueError as exc:
        print(f"ksfv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and map to a nonzero exit
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
