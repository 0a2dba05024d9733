"""Implicit finite volume scheme for Keller-Segel with cross-diffusion.

Unknowns per cell: density n_K and chemical concentration S_K. Each time
step solves the coupled implicit system

    m(K)(n_K^{k+1} - n_K^k)/dt - sum tau DN + sum tau ((DS)^+ n_K - (DS)^- n_L) = 0
    -sum tau DS - delta sum tau DN = m(K)(mu n_K - S_K)

by a Picard iteration alternating the two linear blocks. The S-block matrix
does not depend on the state and is factorized once per mesh; the n-block is
an M-matrix, so every iterate is nonnegative and has the mass of n^k.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp

from .diagnostics import Recorder, RunRecord, SteadyState
from .dspace import Field, mass, project_initial, signed_differences
from .mesh import Mesh
from .solver import Factorization, SparseSystem, check_column_dominance

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelParams:
    delta: float = 1e-3  # cross-diffusion coefficient, 0 gives classical Keller-Segel
    mu: float = 1.0  # secretion rate

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not self.mu > 0:
            raise ValueError(f"mu must be > 0, got {self.mu}")


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")

    @classmethod
    def from_final_time(cls, final_time: float, dt: float) -> "TimeGrid":
        return cls(dt, max(1, int(round(final_time / dt))))

    @property
    def final_time(self) -> float:
        return self.steps * self.dt


@dataclass(frozen=True)
class PicardConfig:
    tol: float = 1e-10  # relative L1 change between iterates
    max_iter: int = 200
    blowup_threshold: float = 1e6  # on max_K n_K
    # delta = 0 only: blow-up once a single cell holds this fraction of the mass
    blowup_mass_fraction: float = 0.5
    linear_tol: float = 1e-12
    # Anderson mixing over this many past sweeps; 0 is plain Picard
    anderson_depth: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.anderson_depth < 0:
            raise ValueError("anderson_depth must be >= 0")


@dataclass(frozen=True, eq=False)
class State:
    k: int
    n: Field
    S: Field
    t: float = 0.0
    iterations: int = 0


class PicardNonConvergence(RuntimeError):
    def __init__(self, message: str, last_iterate: np.ndarray, change: float):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.change = change
        # filled in by ``run`` before re-raising
        self.record: RunRecord | None = None
        self.state: State | None = None


class BlowUp(RuntimeError):
    """Density exceeded the blow-up threshold, or the fixed point was lost for delta = 0."""

    def __init__(self, message: str, time: float, last_state: State | None = None):
        super().__init__(message)
        self.time = time
        self.last_state = last_state


# -- assembly ---------------------------------------------------------------------

def _edge_arrays(mesh: Mesh):
    e = mesh.interior
    K, L = mesh.edge_cells[e].T
    return K, L, mesh.transmissibilities[e]


@functools.lru_cache(maxsize=16)
def laplacian(mesh: Mesh) -> sp.csr_matrix:
    """Two-point flux operator: (Lap u)_K = sum_{sigma in E_K} tau_sigma (u_K - u_L).

    Boundary edges carry no flux (DU = 0), so only interior edges enter.
    """
    K, L, tau = _edge_arrays(mesh)
    N = mesh.n_cells
    rows = np.concatenate([K, L, K, L])
    cols = np.concatenate([K, L, L, K])
    vals = np.concatenate([tau, tau, -tau, -tau])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def _peak_block_mass(mesh: Mesh, cell_mass: np.ndarray) -> float:
    """Largest mass in a 2x2 block of cells around a vertex (single cells off Cartesian grids)."""
    if not mesh.is_cartesian():
        return float(cell_mass.max())
    nx, ny = mesh.shape
    a = cell_mass.reshape(ny, nx)
    win = np.lib.stride_tricks.sliding_window_view(a, (min(2, ny), min(2, nx)))
    return float(win.sum(axis=(-2, -1)).max())


@functools.lru_cache(maxsize=16)
def _s_factorization(mesh: Mesh) -> Factorization:
    return Factorization(laplacian(mesh) + sp.diags(mesh.areas))


def assemble_S_system(n: Field, params: ModelParams, mesh: Mesh | None = None) -> SparseSystem:
    """A S = b with A = Lap + diag(m(K)), b_K = delta sum tau Dn + mu m(K) n_K."""
    mesh = n.mesh if mesh is None else mesh
    lap = laplacian(mesh)
    A = lap + sp.diags(mesh.areas)
    b = -params.delta * (lap @ n.values) + params.mu * mesh.areas * n.values
    return SparseSystem(A.tocsr(), b)


def _solve_S(n_values: np.ndarray, params: ModelParams, mesh: Mesh, tol: float) -> np.ndarray:
    # A^{-1} Lap = I - A^{-1} diag(m), hence S = (mu + delta) A^{-1}(m n) - delta n.
    # The only solve has a nonnegative right-hand side, which the M-matrix LU
    # resolves to componentwise relative accuracy; solving A S = b directly
    # loses about cond(A) * eps because b changes sign.
    fact = _s_factorization(mesh)
    w = fact.solve(mesh.areas * n_values, tol)
    S = (params.mu + params.delta) * w - params.delta * n_values
    system = SparseSystem(fact.matrix, -params.delta * (laplacian(mesh) @ n_values)
                          + params.mu * mesh.areas * n_values)
    if not system.accepts(S, tol):
        S = fact.solve(system.rhs, tol)
    return S


def compute_S0(n0: Field, params: ModelParams, mesh: Mesh | None = None, tol: float = 1e-12) -> Field:
    mesh = n0.mesh if mesh is None else mesh
    return Field(mesh, _solve_S(n0.values, params, mesh, tol), "S", n0.time)


def _upwind_matrix(S_values: np.ndarray, dt: float, mesh: Mesh) -> sp.csr_matrix:
    K, L, tau = _edge_arrays(mesh)
    ds = S_values[L] - S_values[K]  # DS_{K,sigma}
    dp, dm = np.maximum(ds, 0.0), np.maximum(-ds, 0.0)
    # (DS_{L,sigma})^+ = (DS_{K,sigma})^-, so row L uses the swapped parts
    N = mesh.n_cells
    diag = mesh.areas / dt
    diag = diag + np.bincount(K, tau * (1 + dp), N) + np.bincount(L, tau * (1 + dm), N)
    rows = np.concatenate([np.arange(N), K, L])
    cols = np.concatenate([np.arange(N), L, K])
    vals = np.concatenate([diag, -tau * (1 + dm), -tau * (1 + dp)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def assemble_n_system(n_prev: Field, S_new: Field, dt: float, mesh: Mesh | None = None) -> SparseSystem:
    """B n = c with upwinded drift: B_KK = m/dt + sum tau (1 + DS^+), B_KL = -tau (1 + DS^-)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    mesh = n_prev.mesh if mesh is None else mesh
    B = _upwind_matrix(S_new.values, dt, mesh)
    return SparseSystem(B, mesh.areas * n_prev.values / dt)


# -- residuals of the coupled scheme ---------------------------------------------------

def scheme_residuals(n_prev: Field, n_new: Field, S_new: Field, params: ModelParams, dt: float):
    """Scaled L1 residuals (r_n, r_S) of the coupled equations at (n_new, S_new).

    r_n = sum_K |dt * F_K| / ||n^k||_{0,1}, r_S = sum_K |G_K| / (mu ||n_new||_{0,1});
    both equal the relative mass of the equation defect.
    """
    mesh = n_new.mesh
    B = _upwind_matrix(S_new.values, dt, mesh)
    Fn = dt * (B @ n_new.values) - mesh.areas * n_prev.values
    lap = laplacian(mesh)
    G = (lap + sp.diags(mesh.areas)) @ S_new.values + params.delta * (lap @ n_new.values) \
        - params.mu * mesh.areas * n_new.values
    scale_n = max(mass(n_prev), np.finfo(float).tiny)
    scale_S = max(params.mu * mass(n_new), np.finfo(float).tiny)
    return float(np.abs(Fn).sum() / scale_n), float(np.abs(G).sum() / scale_S)


# -- time stepping ----------------------------------------------------------------------

def picard_advance(state: State, params: ModelParams, dt: float, cfg: PicardConfig = PicardConfig(),
                   mesh: Mesh | None = None) -> State:
    """One implicit step by Picard iteration on the two linear blocks.

    n^(0) = n^k; S^(g) solves the S-block with n^(g); n^(g+1) solves the
    n-block with S^(g). Stops when ||n^(g+1) - n^(g)||_{0,1} <= tol ||n^k||_{0,1}.
    Raises PicardNonConvergence after ``cfg.max_iter`` sweeps and BlowUp when
    an iterate exceeds ``cfg.blowup_threshold``. For delta = 0, a converged
    step that puts ``cfg.blowup_mass_fraction`` of the mass into the 2x2
    block of cells around one vertex is also reported as blow-up: on a fixed
    mesh the density is capped by M / m(K), so the L-infinity threshold alone
    may never be reached, and a collapse centred on a vertex is shared by the
    cells around it.

    With ``cfg.anderson_depth > 0`` the iterates are Anderson-mixed; the
    accepted iterate is always a plain sweep, so positivity is unaffected.
    """
    mesh = state.n.mesh if mesh is None else mesh
    n_k = state.n.values
    areas = mesh.areas
    ref = float(np.dot(areas, np.abs(n_k)))
    t_new = state.t + dt
    if ref == 0:
        zero = np.zeros(mesh.n_cells)
        return State(state.k + 1, Field(mesh, zero, "n", t_new), Field(mesh, zero, "S", t_new), t_new, 1)
    rhs = areas * n_k / dt
    w = np.sqrt(areas)
    n_it = n_k
    change = math.inf
    hist_x, hist_g = [], []
    for it in range(1, cfg.max_iter + 1):
        S_it = _solve_S(n_it, params, mesh, cfg.linear_tol)
        B = _upwind_matrix(S_it, dt, mesh)
        g = Factorization(B).solve(rhs, cfg.linear_tol)
        change = float(np.dot(areas, np.abs(g - n_it))) / ref
        peak = float(g.max())
        if not np.isfinite(peak) or peak > cfg.blowup_threshold:
            raise BlowUp(f"max n = {peak:.3e} exceeds {cfg.blowup_threshold:.3e}", t_new, state)
        if params.delta == 0 and change <= cfg.tol:
            frac = _peak_block_mass(mesh, areas * g) / ref
            if frac >= cfg.blowup_mass_fraction:
                raise BlowUp(f"a 2x2 block of cells holds {frac:.1%} of the mass", t_new, state)
        if change <= cfg.tol:
            # accept the plain sweep: an M-matrix solve, so exactly nonnegative
            n_it = g
            break
        n_it = _anderson(n_it, g, hist_x, hist_g, cfg.anderson_depth, w) if cfg.anderson_depth else g
    else:
        raise PicardNonConvergence(
            f"Picard iteration stalled at relative change {change:.3e} after {cfg.max_iter} sweeps",
            n_it, change)
    S_new = _solve_S(n_it, params, mesh, cfg.linear_tol)
    return State(state.k + 1, Field(mesh, n_it, "n", t_new), Field(mesh, S_new, "S", t_new), t_new, it)


def _anderson(x, g, hist_x, hist_g, depth, w):
    """Anderson-mixed next iterate from x and its Picard image g.

    Mixing coefficients sum to one, so the mass of the iterates is kept;
    a mixed iterate with negative entries is discarded for g itself.
    """
    hist_x.append(x)
    hist_g.append(g)
    if len(hist_x) > depth + 1:
        hist_x.pop(0)
        hist_g.pop(0)
    if len(hist_x) < 2:
        return g
    F = np.array([(gi - xi) * w for xi, gi in zip(hist_x, hist_g)])
    dF = np.diff(F, axis=0).T
    dG = np.diff(np.array(hist_g), axis=0).T
    gamma, *_ = np.linalg.lstsq(dF, F[-1], rcond=None)
    x_new = g - dG @ gamma
    if not np.all(x_new >= 0):
        hist_x.clear()
        hist_g.clear()
        return g
    return x_new


def _advance_with_halving(state: State, params, dt, cfg, mesh, halvings: int) -> State:
    try:
        return picard_advance(state, params, dt, cfg, mesh)
    except PicardNonConvergence:
        if halvings <= 0:
            raise
        log.info("t=%.6g: Picard failed with dt=%.3g, retrying with two half steps", state.t, dt)
    half = _advance_with_halving(state, params, dt / 2, cfg, mesh, halvings - 1)
    full = _advance_with_halving(half, params, dt / 2, cfg, mesh, halvings - 1)
    return replace(full, k=state.k + 1, iterations=half.iterations + full.iterations)


Observer = Callable[[State], None]


def initial_state(n0, params: ModelParams, mesh: Mesh, quadrature_order: int = 5) -> State:
    if isinstance(n0, Field):
        n_field = n0
    else:
        n_field = project_initial(n0, mesh, quadrature_order)
    n_field = Field(mesh, n_field.values, "n", 0.0)
    return State(0, n_field, compute_S0(n_field, params, mesh), 0.0, 0)


def run(n0, params: ModelParams, grid: TimeGrid, cfg: PicardConfig = PicardConfig(),
        mesh: Mesh | None = None, observers: Iterable[Observer] = (), max_halvings: int = 3,
        quadrature_order: int = 5) -> tuple[RunRecord, State]:
    """Advance ``grid.steps`` implicit steps from the initial datum ``n0``.

    ``n0`` is a Field or a function ``n0(x, y)`` (projected onto the cells).
    A step whose Picard iteration fails is retried as two half steps, up to
    ``max_halvings`` levels deep. The record status ends as ``completed``,
    ``blowup`` or ``nonconvergence``; a blow-up stops the run and keeps the
    last stable state. With delta > 0, nonconvergence is re-raised; with
    delta = 0 it is reported as numerical blow-up.
    """
    if mesh is None:
        if not isinstance(n0, Field):
            raise ValueError("a mesh is required when n0 is a function")
        mesh = n0.mesh
    state = initial_state(n0, params, mesh, quadrature_order)
    steady = SteadyState.from_initial(state.n, params.mu)
    recorder = Recorder(params, grid.dt, steady)
    observers = list(observers)

    def notify(s: State):
        recorder(s.k, s.t, s.n, s.S, s.iterations)
        for obs in observers:
            obs(s)

    notify(state)
    record = recorder.record
    for _ in range(grid.steps):
        try:
            new = _advance_with_halving(state, params, grid.dt, cfg, mesh, max_halvings)
        except BlowUp as exc:
            record.status, record.blowup_time = "blowup", exc.time
            log.info("blow-up signal at t=%.6g: %s", exc.time, exc)
            return record, state
        except PicardNonConvergence as exc:
            if params.delta == 0:
                record.status, record.blowup_time = "blowup", state.t + grid.dt
                log.info("delta=0: fixed point lost at t=%.6g, treated as blow-up", state.t + grid.dt)
                return record, state
            record.status = "nonconvergence"
            exc.record, exc.state = record, state
            raise
        # keep the time grid exact after halved substeps
        state = replace(new, t=(state.k + 1) * grid.dt,
                        n=new.n.with_values(new.n.values, time=(state.k + 1) * grid.dt),
                        S=new.S.with_values(new.S.values, time=(state.k + 1) * grid.dt))
        notify(state)
    record.status = "completed"
    return record, state


class InvariantMonitor:
    """Observer recording the worst violation of the structural invariants.

    Tracks min n, relative mass drift, the mean identity
    sum m(K) S_K = mu sum m(K) n_K, and how far the column-dominance margin
    of the n-block matrix is from m(L)/dt (relative to the diagonal entry).
    The margin is checked on the listed ``dominance_steps``, or, with
    ``sample`` > 0, on that many steps drawn uniformly (reservoir sampling)
    from the steps the run actually takes.
    """

    def __init__(self, params: ModelParams, dt: float, dominance_steps=(), sample: int = 0, seed=None):
        self.params = params
        self.dt = dt
        self.dominance_steps = set(dominance_steps)
        self.sample = sample
        self._rng = np.random.default_rng(seed)
        self.min_n = math.inf
        self.mass_drift = 0.0
        self.mean_identity = 0.0
        self.defects: dict[int, float] = {}
        self._seen = 0
        self._mass0 = None
        self._prev = None

    @property
    def dominance_defect(self) -> float:
        return max(self.defects.values(), default=0.0)

    @property
    def dominance_checked(self) -> int:
        return len(self.defects)

    def _defect(self, state: State) -> float:
        mesh = state.n.mesh
        B = assemble_n_system(self._prev.n, state.S, self.dt).matrix
        margins = check_column_dominance(B).margins
        return float((np.abs(margins - mesh.areas / self.dt) / np.abs(B.diagonal())).max())

    def _dominance(self, state: State) -> None:
        if self.sample <= 0:
            if state.k in self.dominance_steps:
                self.defects[state.k] = self._defect(state)
            return
        self._seen += 1
        if len(self.defects) < self.sample:
            self.defects[state.k] = self._defect(state)
        elif self._rng.random() < self.sample / self._seen:
            del self.defects[list(self.defects)[self._rng.integers(self.sample)]]
            self.defects[state.k] = self._defect(state)

    def __call__(self, state: State) -> None:
        mesh = state.n.mesh
        n, S = state.n.values, state.S.values
        m = float(np.dot(mesh.areas, n))
        if self._mass0 is None:
            self._mass0 = m
        scale = max(abs(self._mass0), np.finfo(float).tiny)
        self.min_n = min(self.min_n, float(n.min()))
        self.mass_drift = max(self.mass_drift, abs(m - self._mass0) / scale)
        self.mean_identity = max(self.mean_identity,
                                 abs(float(np.dot(mesh.areas, S)) - self.params.mu * m) / (self.params.mu * scale))
        if self._prev is not None and state.k > self._prev.k:
            self._dominance(state)
        self._prev = state
