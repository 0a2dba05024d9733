"""Acceptance suite: one test group per criterion, one PASS/FAIL line each.

Runs of the bundled configs are cached for the session, so the invariant
sweep (criterion 1) reuses the runs made for criteria 3 to 8 and only adds
the remaining configs. Run with ``pytest tests/test_acceptance.py`` or
``python tests/test_acceptance.py``; expect roughly 11 minutes on one core.
"""
import math
import sys
import time
import zlib
from dataclasses import dataclass

import numpy as np
import pytest

from ksfv import cli
from ksfv import diagnostics as dg
from ksfv.cli import ExperimentConfig
from ksfv.dspace import Field
from ksfv.mesh import build_cartesian
from ksfv.scheme import (InvariantMonitor, ModelParams, PicardConfig, State, TimeGrid, compute_S0, picard_advance,
                         run)
from oracles import newton_2x2


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def bundled(name) -> ExperimentConfig:
    return ExperimentConfig.load(cli.bundled_config(name))


def jobs_of(cfg: ExperimentConfig):
    """(cfg, mesh size) pairs a CLI invocation of ``cfg`` would simulate."""
    if cfg.command == "run":
        return [(cfg, cfg.mesh_sizes[0])]
    if cfg.command == "convergence":
        return [(cfg, s) for s in cfg.mesh_sizes + [cfg.reference]]
    if cfg.command == "decay":
        return [(c, s) for _, c, s in cli.decay_jobs(cfg)]
    return []


@dataclass
class Result:
    record: dg.RunRecord
    state: State
    monitor: InvariantMonitor
    seconds: float


_cache: dict[tuple, Result] = {}


def simulate(cfg: ExperimentConfig, size) -> Result:
    key = (cfg.name, tuple(size), cfg.delta, cfg.mu)
    if key not in _cache:
        mon = InvariantMonitor(cfg.params, cfg.dt, sample=3, seed=zlib.crc32(repr(key).encode()))
        t0 = time.perf_counter()
        record, state = cli.simulate(cfg, size, observers=[mon])
        _cache[key] = Result(record, state, mon, time.perf_counter() - t0)
    return _cache[key]


def detail(record_property, text):
    record_property("detail", text)


# -- 2: fixed point against dense Newton ------------------------------------------------------

@criterion(2, "one Picard step on a 2x2 mesh matches dense Newton to 1e-8 in under 1 s")
@pytest.mark.parametrize("n_prev,dt,delta,mu", [
    ([3.0, 1.0, 0.5, 2.0], 0.05, 1e-3, 1.0),
    ([6.0, 0.0, 0.0, 0.2], 0.01, 1e-3, 1.0),
    ([1.0, 1.3, 0.8, 1.1], 0.5, 0.2, 2.0),
])
def test_newton_oracle(n_prev, dt, delta, mu, record_property):
    mesh = build_cartesian(2, 2)
    p = ModelParams(delta, mu)
    n_k = Field(mesh, n_prev)
    t0 = time.perf_counter()
    new = picard_advance(State(0, n_k, compute_S0(n_k, p)), p, dt, PicardConfig(tol=1e-14))
    elapsed = time.perf_counter() - t0
    n_ref, S_ref = newton_2x2(n_prev, dt, delta, mu)
    err = max(np.abs(new.n.values - n_ref).max(), np.abs(new.S.values - S_ref).max())
    detail(record_property, f"n0={n_prev}: max error {err:.2e}, {elapsed * 1e3:.1f} ms")
    assert err <= 1e-8
    assert elapsed < 1.0


# -- 8: constant data --------------------------------------------------------------------------

# Each case keeps n*(mu - delta lam) < lam + 1 for every Neumann eigenvalue lam,
# so the constant state is linearly stable and round-off does not grow.
@criterion(8, "constant data reproduce (n*, mu n*) to 1e-12 at every step for 100 steps")
@pytest.mark.parametrize("shape,rect,value,delta,mu,dt", [
    ((16, 16), (-0.5, 0.5, -0.5, 0.5), 2.0, 1e-3, 1.0, 1e-2),
    ((64, 32), (-1, 1, -0.5, 0.5), 0.37, 0.0, 2.5, 1e-3),
    ((5, 11), (0, 3, -2, 7), 1.5, 0.1, 0.3, 0.5),
])
def test_constant_exact(shape, rect, value, delta, mu, dt, record_property):
    mesh = build_cartesian(*shape, rect)
    worst = [0.0]

    def check(s):
        worst[0] = max(worst[0], np.abs(s.n.values / value - 1).max(), np.abs(s.S.values / (mu * value) - 1).max())

    rec, _ = run(Field(mesh, np.full(mesh.n_cells, value)), ModelParams(delta, mu), TimeGrid(dt, 100),
                 mesh=mesh, observers=[check])
    detail(record_property, f"{shape[0]}x{shape[1]}: max relative deviation {worst[0]:.1e} over 100 steps")
    assert rec.status == "completed" and len(rec) == 101
    assert worst[0] <= 1e-12


# -- 7: inequalities ---------------------------------------------------------------------------

@criterion(7, "Csiszar-Kullback on 1000 random fields per mesh, log-Sobolev table, under 1 min")
def test_inequalities(record_property):
    cfg = bundled("inequalities")
    assert cfg.trials == 1000 and cfg.mesh_sizes == [(8, 8), (16, 16)]
    t0 = time.perf_counter()
    rows = cli.inequality_table(cfg)
    elapsed = time.perf_counter() - t0
    for r in rows:
        detail(record_property, f"{r['nx']}x{r['ny']}: CK violations {r['ck_violations']}, max ratio "
                                f"{r['ck_max_ratio']:.3f}; LS max ratio {r['ls_max_ratio']:.3f} (C_L {r['ls_constant']:g}),"
                                f" constant-field LS lhs {r['const_ls_lhs']}")
    detail(record_property, f"runtime {elapsed:.1f} s")
    assert [r["trials"] for r in rows] == [1000, 1000]
    assert all(r["ck_violations"] == 0 for r in rows)
    assert all(r["const_ls_lhs"] == 0 for r in rows)
    assert all(np.isfinite(r["ls_max_ratio"]) for r in rows)
    assert elapsed <= 60


# -- 3: convergence order ---------------------------------------------------------------------

@pytest.mark.slow
@criterion(3, "fitted L1, L2, Linf orders within [0.75, 1.35] vs the 128x128 reference, under 10 min")
def test_convergence_order(record_property):
    cfg = bundled("convergence")
    assert cfg.mesh_sizes == [(8, 8), (16, 16), (32, 32), (64, 64)] and cfg.reference == (128, 128)
    assert (cfg.dt, cfg.T, cfg.delta, cfg.mu, cfg.initial.kind) == (1e-6, 1e-4, 1e-3, 1.0, "gaussian1")
    ref = simulate(cfg, cfg.reference)
    runs = [simulate(cfg, s) for s in cfg.mesh_sizes]
    assert all(r.record.status == "completed" for r in runs + [ref])
    h = [r.state.n.mesh.h for r in runs]
    errs = np.array([cli.error_norms(r.state.n, ref.state.n) for r in runs])
    orders = [cli.fit_order(h, errs[:, j]) for j in range(3)]
    seconds = sum(r.seconds for r in runs) + ref.seconds
    detail(record_property, "orders L1 %.3f, L2 %.3f, Linf %.3f; runtime %.0f s" % (*orders, seconds))
    assert all(0.75 <= q <= 1.35 for q in orders)
    assert seconds <= 600


# -- 4: entropy decay -------------------------------------------------------------------------

@pytest.mark.slow
@criterion(4, "relative entropy strictly decreasing; rate grows with delta; grids agree within 15%, under 10 min")
def test_entropy_decay(record_property):
    cfg = bundled("decay_delta")
    assert cfg.mesh_sizes == [(16, 16), (32, 32)] and cfg.sweep == {"delta": [1e-3, 1e-2]}
    assert (cfg.dt, cfg.T, cfg.mu) == (2e-4, 1.0, 1.0)
    assert cfg.initial.kind == "gaussian_sym" and cfg.initial.mass == pytest.approx(5 * math.pi)
    rates, seconds, ok = {}, 0.0, True
    for c, size in jobs_of(cfg):
        r = simulate(c, size)
        seconds += r.seconds
        E = r.record["rel_entropy"]
        steps_up = int(np.sum(np.diff(E) >= 0))
        rates[size[0], c.delta] = dg.fit_decay_rate(r.record, cfg.decay_window).rate
        detail(record_property, f"{size[0]}x{size[1]} delta={c.delta:g}: {r.record.status}, non-decreasing steps "
                                f"{steps_up}, rate {rates[size[0], c.delta]:.3f}, final E {E[-1]:.2e}")
        ok &= r.record.status == "completed" and steps_up == 0
    spread = {d: abs(rates[16, d] - rates[32, d]) / rates[32, d] for d in (1e-3, 1e-2)}
    detail(record_property, "grid spread %s; runtime %.0f s"
           % (", ".join(f"delta={d:g}: {s:.1%}" for d, s in spread.items()), seconds))
    assert ok
    assert all(rates[n, 1e-2] > rates[n, 1e-3] for n in (16, 32))
    assert all(s <= 0.15 for s in spread.values())
    assert seconds <= 600


# -- 5: blow-up against global existence -------------------------------------------------------

def corner_cells(mesh):
    nx, ny = mesh.shape
    return {0, nx - 1, nx * (ny - 1), nx * ny - 1}


@pytest.mark.slow
@criterion(5, "delta=0 blows up before t=1; delta=1e-3 reaches T=5 bounded with its maximum in a corner")
def test_blowup_versus_existence(record_property):
    blow_cfg, glob_cfg = bundled("blowup_corner"), bundled("corner_crossdiff")
    for c in (blow_cfg, glob_cfg):
        assert c.mesh_sizes == [(32, 32)] and c.initial.kind == "gaussian1" and c.mu == 1.0
    assert blow_cfg.delta == 0 and glob_cfg.delta == 1e-3 and glob_cfg.T == 5.0
    blow = simulate(blow_cfg, blow_cfg.mesh_sizes[0])
    glob = simulate(glob_cfg, glob_cfg.mesh_sizes[0])
    mesh = glob.state.n.mesh
    k = int(np.argmax(glob.state.n.values))
    linf = glob.record["linf_n"]
    detail(record_property, f"delta=0: {blow.record.status} at t={blow.record.blowup_time}")
    detail(record_property, f"delta=1e-3: {glob.record.status} at t={glob.state.t:g}, max Linf {linf.max():.4g}, "
                            f"argmax cell {k} at {tuple(float(c) for c in mesh.centers[k])}; runtime {blow.seconds + glob.seconds:.0f} s")
    assert blow.record.status == "blowup" and blow.record.blowup_time < 1
    assert glob.record.status == "completed" and glob.state.t == pytest.approx(5.0)
    assert np.all(np.isfinite(linf)) and linf.max() < glob_cfg.picard.blowup_threshold
    assert k in corner_cells(mesh)
    assert blow.seconds + glob.seconds <= 900


# -- 6: intermediate states ---------------------------------------------------------------------

@pytest.mark.slow
@criterion(6, "symmetric M=20pi run: two Linf plateaus (<5% variation) separated by a >50% rise")
def test_two_plateaus(record_property):
    cfg = bundled("symmetric")
    assert cfg.mesh_sizes == [(32, 32)] and cfg.delta == 1e-3
    assert cfg.initial.kind == "gaussian_sym" and cfg.initial.mass == pytest.approx(20 * math.pi)
    r = simulate(cfg, cfg.mesh_sizes[0])
    t, linf = r.record["t"], r.record["linf_n"]
    found = dg.find_plateaus(t, linf, rel_var=0.05, min_duration=0.1)
    for p in found:
        detail(record_property, f"plateau t in [{p.t0:.3f}, {p.t1:.3f}]: level {p.level:.4g}, variation {p.variation:.1%}")
    rises = [b.level / a.level for i, a in enumerate(found) for b in found[i + 1:]]
    detail(record_property, f"largest rise between plateaus x{max(rises, default=math.nan):.2f}; runtime {r.seconds:.0f} s")
    assert r.record.status == "completed"
    assert len(found) >= 2 and max(rises) > 1.5
    assert r.seconds <= 900


# -- 1: structural invariants over every bundled config ---------------------------------------

# every bundled config that time-steps (the inequality config does not)
ALL_CONFIGS = [n for n in sorted(p.stem for p in cli.CONFIG_DIR.glob("*.json")) if jobs_of(bundled(n))]


@pytest.mark.slow
@criterion(1, "positivity, mass drift <= 1e-10, mean identity <= 1e-10, B-margin = m/dt to 1e-12 on 3 random steps")
@pytest.mark.parametrize("name", ALL_CONFIGS)
def test_invariants(name, record_property):
    cfg = bundled(name)
    jobs = jobs_of(cfg)
    worst = dict(min_n=math.inf, drift=0.0, mean=0.0, margin=0.0)
    for c, size in jobs:
        r = simulate(c, size)
        m = r.monitor
        worst["min_n"] = min(worst["min_n"], m.min_n)
        worst["drift"] = max(worst["drift"], m.mass_drift)
        worst["mean"] = max(worst["mean"], m.mean_identity)
        worst["margin"] = max(worst["margin"], m.dominance_defect)
        assert m.dominance_checked == min(3, r.state.k), f"{c.name} {size}: only {m.dominance_checked} steps checked"
    detail(record_property, f"{name} ({len(jobs)} runs): min n {worst['min_n']:.3g}, drift {worst['drift']:.1e}, "
                            f"mean identity {worst['mean']:.1e}, margin defect {worst['margin']:.1e}")
    assert worst["min_n"] >= 0
    assert worst["drift"] <= 1e-10
    assert worst["mean"] <= 1e-10
    assert worst["margin"] <= 1e-12


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", *sys.argv[1:]]))
