"""Entropy functionals, decay fits and functional-inequality verifiers."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import xlogy

from .dspace import Field, edge_jumps, mass, norm_0p, norm_1p, seminorm_1p
from .mesh import Mesh


# -- steady state and entropies ---------------------------------------------------

@dataclass(frozen=True)
class SteadyState:
    n_star: float
    S_star: float

    @classmethod
    def from_initial(cls, n0: Field, mu: float) -> "SteadyState":
        n_star = mass(n0) / n0.mesh.domain_measure
        return cls(n_star, mu * n_star)


def _nonnegative(n: Field, what: str) -> np.ndarray:
    v = n.values
    if np.any(v < 0):
        raise ValueError(f"{what} needs a nonnegative density (min {v.min():.3e})")
    return v


def entropy(n: Field) -> float:
    """E = sum m(K) H(n_K) with H(s) = s(log s - 1) + 1 and H(0) = 1."""
    v = _nonnegative(n, "entropy")
    H = xlogy(v, v) - v + 1.0
    return float(np.dot(n.mesh.areas, H))


def _h(r: np.ndarray) -> np.ndarray:
    """h(r) = r log r - r + 1, accurate near r = 1 where it behaves like (r - 1)^2 / 2."""
    eps = r - 1.0
    out = xlogy(r, r) - r + 1.0
    small = np.abs(eps) < 1e-3
    if small.any():
        e = eps[small]
        # h(1 + e) = sum_{j >= 2} (-1)^j e^j / (j (j - 1))
        acc = np.zeros_like(e)
        for j in range(9, 1, -1):
            acc = (-1) ** j / (j * (j - 1)) + e * acc
        out[small] = e * e * acc
    return out


def relative_entropy(n: Field, n_star: float, include_mass_defect: bool = True) -> float:
    """E[n | n*] = sum m(K) n_K log(n_K / n*), with 0 log 0 = 0.

    Evaluated as n* sum m(K) h(n_K / n*) plus the mass defect
    sum m(K) n_K - n* m(Omega); the first part is free of cancellation near
    equilibrium. The defect vanishes when the mass of ``n`` is n* m(Omega);
    ``include_mass_defect=False`` drops it, so that round-off drift of a
    conserved mass does not put a floor under long-time decay curves.
    """
    if not n_star > 0:
        raise ValueError(f"n* must be positive, got {n_star}")
    v = _nonnegative(n, "relative_entropy")
    areas = n.mesh.areas
    core = n_star * float(np.dot(areas, _h(v / n_star)))
    if not include_mass_defect:
        return core
    return core + (float(np.dot(areas, v)) - n_star * n.mesh.domain_measure)


# -- functional inequalities ----------------------------------------------------------

def log_sobolev_constant(xi: float, q: float = 4.0, C_S: float = 1.0, C_P: float = 1.0) -> float:
    """C_L from the Sobolev exponent q > 2 and the Sobolev/Poincare constants."""
    if not q > 2:
        raise ValueError(f"q must exceed 2, got {q}")
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    return q / ((q - 2) * xi) * (C_S**2 + C_S**2 * C_P**2 / xi + (q - 4) / q * C_P**2)


@dataclass(frozen=True)
class LogSobolevCheck:
    lhs: float
    rhs: float
    ratio: float  # lhs / |u|_{1,2}^2, the empirical constant
    constant: float  # C_L used for rhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-300


def log_sobolev_check(u: Field, xi: float | None = None, q: float = 4.0,
                      C_S: float = 1.0, C_P: float = 1.0) -> LogSobolevCheck:
    """Both sides of int u^2 log(u^2 / (|u|_{0,2}^2 / m(Omega))) <= C_L |u|_{1,2}^2.

    The default ``C_S = C_P = 1`` are placeholders, so ``holds`` is
    informative only; ``ratio`` is the quantity worth tracking.
    """
    xi = u.mesh.xi if xi is None else xi
    C_L = log_sobolev_constant(xi, q, C_S, C_P)
    v = u.values
    l2sq = float(np.dot(u.mesh.areas, v * v))
    if l2sq == 0:
        raise ValueError("log-Sobolev check needs a nonzero field")
    semi_sq = seminorm_1p(u, 2) ** 2
    if semi_sq == 0:
        # constant field: u^2 equals its mean everywhere
        return LogSobolevCheck(0.0, 0.0, 0.0, C_L)
    w = v * v
    lhs = float(np.dot(u.mesh.areas, xlogy(w, w / (l2sq / u.mesh.domain_measure))))
    return LogSobolevCheck(lhs, C_L * semi_sq, lhs / semi_sq, C_L)


@dataclass(frozen=True)
class CsiszarKullbackCheck:
    lhs: float  # ||n - n*||_{0,1}^2
    rhs: float  # 4 ||n0||_{L1} E[n | n*]

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12) + 1e-300

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs


def csiszar_kullback_check(n: Field, n_star: float, rtol: float = 1e-8) -> CsiszarKullbackCheck:
    total = n_star * n.mesh.domain_measure
    m = mass(n)
    if abs(m - total) > rtol * abs(total):
        raise ValueError(f"mass {m!r} inconsistent with n* m(Omega) = {total!r}")
    lhs = norm_0p(n.with_values(n.values - n_star), 1) ** 2
    return CsiszarKullbackCheck(lhs, 4 * total * relative_entropy(n, n_star))


def random_mass_consistent_field(mesh: Mesh, total_mass: float, rng: np.random.Generator) -> Field:
    """Nonnegative random field with prescribed mass; mixes smooth, rough, sparse and near-constant draws."""
    kind = rng.integers(4)
    n = mesh.n_cells
    if kind == 0:
        v = rng.exponential(size=n)
    elif kind == 1:
        v = rng.uniform(size=n) ** rng.uniform(1, 8)
    elif kind == 2:
        v = np.where(rng.uniform(size=n) < rng.uniform(0.05, 0.5), rng.exponential(size=n), 0.0)
        if not v.any():
            v[rng.integers(n)] = 1.0
    else:
        v = 1.0 + rng.uniform(-1e-3, 1e-3) * rng.standard_normal(n)
        v = np.abs(v)
    v = v * (total_mass / np.dot(mesh.areas, v))
    return Field(mesh, v)


def random_field(mesh: Mesh, rng: np.random.Generator) -> Field:
    """Signed random field for log-Sobolev ratio studies."""
    kind = rng.integers(3)
    n = mesh.n_cells
    if kind == 0:
        v = rng.standard_normal(n)
    elif kind == 1:
        v = 1.0 + 0.1 * rng.standard_normal(n)
    else:
        v = np.where(rng.uniform(size=n) < 0.2, rng.standard_normal(n), 0.0)
        v[rng.integers(n)] += 1.0
    return Field(mesh, v)


def cstar(params, total_mass: float, mesh_or_xi, c_omega: float = 1.0) -> float:
    """C* = mu^2 C(Omega)^2 ||n0||_{L1} / (delta xi).

    ``c_omega`` is the BV -> L^2 embedding constant, which has no known
    closed form; 1 is a placeholder.
    """
    if not params.delta > 0:
        raise ValueError("C* is defined for delta > 0 only")
    xi = mesh_or_xi.xi if isinstance(mesh_or_xi, Mesh) else float(mesh_or_xi)
    return params.mu**2 * c_omega**2 * total_mass / (params.delta * xi)


# -- run records --------------------------------------------------------------------

RECORD_COLUMNS = ("k", "t", "mass", "entropy", "rel_entropy", "linf_n", "s_h1_err", "picard_iters",
                  "dissip_sqrt_n", "dissip_s_l2", "dissip_s_grad", "ent_stab_lhs")


@dataclass
class RunRecord:
    """Per-step diagnostics, one row per accepted step (k = 0 is the initial state)."""

    rows: list[dict] = field(default_factory=list)
    status: str = "running"
    blowup_time: float | None = None

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, column: str) -> np.ndarray:
        return np.array([r[column] for r in self.rows], dtype=float)

    def append(self, row: dict) -> None:
        if self.rows and not row["t"] > self.rows[-1]["t"]:
            raise ValueError("record times must increase strictly")
        self.rows.append({c: row.get(c, math.nan) for c in RECORD_COLUMNS})

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_COLUMNS)
            for r in self.rows:
                w.writerow([int(r["k"]) if c in ("k", "picard_iters") else repr(float(r[c]))
                            for c in RECORD_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "RunRecord":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and tuple(rows[0].keys()) != RECORD_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {tuple(rows[0].keys())}")
        rec = cls()
        for r in rows:
            rec.rows.append({c: (int(r[c]) if c in ("k", "picard_iters") else float(r[c]))
                             for c in RECORD_COLUMNS})
        rec.status = "loaded"
        return rec


class Recorder:
    """Observer that fills a RunRecord from successive (n, S) pairs.

    ``rel_entropy`` is measured against the homogeneous state of the
    current mass, n*_k = sum m(K) n_K^k / m(Omega), without the mass-defect
    term (see ``relative_entropy``). The scheme conserves mass, so this is
    E[n^k | n*] in exact arithmetic; in floating point it keeps the slow
    round-off drift of the mass from putting a floor under decay curves.

    The dissipation columns are the three nonnegative terms of the entropy
    stability estimate; ``ent_stab_lhs`` adds them to E^k - E^{k-1}.
    """

    def __init__(self, params, dt: float, steady: SteadyState, record: RunRecord | None = None):
        self.params = params
        self.dt = dt
        self.steady = steady
        self.record = RunRecord() if record is None else record
        self._last_entropy = None

    def __call__(self, k: int, t: float, n: Field, S: Field, iterations: int = 0) -> None:
        E = entropy(n)
        row = dict(k=k, t=t, mass=mass(n), entropy=E, linf_n=norm_0p(n, np.inf),
                   s_h1_err=norm_1p(S.with_values(S.values - self.steady.S_star), 2),
                   picard_iters=iterations)
        n_star_k = row["mass"] / n.mesh.domain_measure
        if self.steady.n_star > 0 and n_star_k > 0:
            row["rel_entropy"] = relative_entropy(n, n_star_k, include_mass_defect=False)
        else:
            row["rel_entropy"] = 0.0
        if k > 0:
            mesh = n.mesh
            tau = mesh.transmissibilities[mesh.interior]
            d_sqrt = edge_jumps(n.with_values(np.sqrt(n.values)))
            row["dissip_sqrt_n"] = 0.5 * self.dt * float(np.dot(tau, d_sqrt**2))
            if self.params.delta > 0:
                c = self.dt / self.params.delta
                row["dissip_s_l2"] = c * float(np.dot(mesh.areas, S.values**2))
                row["dissip_s_grad"] = c * float(np.dot(tau, edge_jumps(S) ** 2))
                row["ent_stab_lhs"] = (E - self._last_entropy + row["dissip_sqrt_n"]
                                       + row["dissip_s_l2"] + row["dissip_s_grad"])
        self._last_entropy = E
        self.record.append(row)


# -- decay fits -----------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    slope: float  # d log E[n|n*] / dt
    intercept: float
    residual: float  # RMS misfit of log E
    n_points: int

    @property
    def rate(self) -> float:
        """Decay rate, -slope (positive for decaying entropy)."""
        return -self.slope


def fit_decay_rate(record: RunRecord, window: tuple[float, float] | None = None,
                   column: str = "rel_entropy") -> DecayFit:
    """Least-squares line through (t^k, log E[n^k | n*]) for t^k in ``window``."""
    t, E = record["t"], record[column]
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, E = t[sel], E[sel]
    if t.size < 3:
        raise ValueError(f"need at least 3 points in the fit window, got {t.size}")
    if np.any(E <= 0):
        raise ValueError("entropies must be positive in the fit window")
    y = np.log(E)
    A = np.column_stack([t, np.ones_like(t)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ [slope, intercept] - y) ** 2)))
    return DecayFit(float(slope), float(intercept), resid, int(t.size))


# -- plateaus ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Plateau:
    start: int
    stop: int  # inclusive index
    t0: float
    t1: float
    level: float  # mean value over the window
    variation: float  # (max - min) / min over the window


def find_plateaus(t, y, rel_var: float = 0.05, min_duration: float = 0.1) -> list[Plateau]:
    """Disjoint windows of duration >= ``min_duration`` where (max - min)/min < ``rel_var``.

    Scans left to right and takes, from each start, the longest admissible
    window (sliding max/min, linear time).
    """
    t, y = np.asarray(t, float), np.asarray(y, float)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("t and y must be 1-d arrays of equal length")
    if np.any(y <= 0):
        raise ValueError("plateau detection needs a positive series")
    n = y.size
    reach = np.empty(n, dtype=int)  # last index j with y[i..j] admissible
    hi, lo = deque(), deque()
    j = -1
    for i in range(n):
        while hi and hi[0] < i:
            hi.popleft()
        while lo and lo[0] < i:
            lo.popleft()
        while j + 1 < n:
            v = y[j + 1]
            top = max(v, y[hi[0]]) if hi else v
            bot = min(v, y[lo[0]]) if lo else v
            if (top - bot) / bot >= rel_var:
                break
            j += 1
            while hi and y[hi[-1]] <= v:
                hi.pop()
            hi.append(j)
            while lo and y[lo[-1]] >= v:
                lo.pop()
            lo.append(j)
        reach[i] = j
    out, i = [], 0
    while i < n:
        j = reach[i]
        if t[j] - t[i] >= min_duration:
            w = y[i:j + 1]
            out.append(Plateau(i, j, float(t[i]), float(t[j]), float(w.mean()), float((w.max() - w.min()) / w.min())))
            i = j + 1
        else:
            i += 1
    return out
