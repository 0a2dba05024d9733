"""Piecewise-constant functions on a mesh: norms, projections, gradients.

Sign convention: ``signed_differences`` returns DU_{K,sigma} = u_L - u_K per
edge, oriented from the edge's first cell, and zero on boundary edges.
``edge_jumps`` returns the unsigned D_sigma u = |u_K - u_L| used by the
discrete Sobolev seminorms.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .mesh import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Field:
    """One value per cell of ``mesh``."""

    mesh: Mesh
    values: np.ndarray
    name: str = ""
    time: float | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.mesh.n_cells,):
            raise ValueError(f"expected {self.mesh.n_cells} cell values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def with_values(self, values, **kw) -> "Field":
        return Field(self.mesh, values, kw.get("name", self.name), kw.get("time", self.time))

    def __mul__(self, c: float) -> "Field":
        return self.with_values(c * self.values)

    __rmul__ = __mul__

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class GradientField:
    """Diamond-cell gradient, one 2-vector per (cell, edge) incidence.

    ``vectors[e, 0]`` belongs to T_{K,sigma} and ``vectors[e, 1]`` to
    T_{L,sigma} (zero for boundary edges).
    """

    mesh: Mesh
    vectors: np.ndarray  # (E, 2, 2)

    def l2_norm(self) -> float:
        sq = np.einsum("eij,eij->ei", self.vectors, self.vectors)
        return float(np.sqrt(np.sum(self.mesh.diamond_measures * sq)))


def constant(mesh: Mesh, c: float, name: str = "") -> Field:
    return Field(mesh, np.full(mesh.n_cells, float(c)), name)


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


def signed_differences(u: Field) -> np.ndarray:
    """DU_{K,sigma} = u_L - u_K on interior edges, 0 on boundary edges."""
    mesh = u.mesh
    out = np.zeros(mesh.n_edges)
    K, L = mesh.edge_cells[mesh.interior].T
    out[mesh.interior] = u.values[L] - u.values[K]
    return out


def edge_jumps(u: Field) -> np.ndarray:
    """D_sigma u = |u_K - u_L| on interior edges, in ``mesh.interior`` order."""
    K, L = u.mesh.edge_cells[u.mesh.interior].T
    return np.abs(u.values[K] - u.values[L])


def _check_p(p: float, allow_inf: bool) -> None:
    if np.isnan(p) or p < 1 or (p == np.inf and not allow_inf):
        raise ValueError(f"invalid exponent p={p}")


def norm_0p(u: Field, p: float = 2) -> float:
    """Discrete L^p norm; ``p=inf`` gives the largest absolute cell value."""
    _check_p(p, allow_inf=True)
    a = np.abs(u.values)
    if p == np.inf:
        return float(a.max(initial=0.0))
    return float(np.sum(u.mesh.areas * a**p) ** (1.0 / p))


def seminorm_1p(u: Field, p: float = 2) -> float:
    """Discrete W^{1,p} seminorm (sum over interior edges of m/d^{p-1} |D u|^p)^{1/p}."""
    _check_p(p, allow_inf=False)
    mesh = u.mesh
    e = mesh.interior
    w = mesh.edge_lengths[e] / mesh.edge_distances[e] ** (p - 1)
    return float(np.sum(w * edge_jumps(u) ** p) ** (1.0 / p))


def norm_1p(u: Field, p: float = 2) -> float:
    return norm_0p(u, p) + seminorm_1p(u, p)


def mean_value(u: Field) -> float:
    return float(np.dot(u.mesh.areas, u.values) / u.mesh.domain_measure)


def mass(u: Field) -> float:
    return float(np.dot(u.mesh.areas, u.values))


def reconstruct_gradient(u: Field) -> GradientField:
    """Piecewise-constant gradient on the dual diamonds.

    On an interior edge the diamond is the quadrilateral x_K, x_L and the two
    edge end points, of measure m(T_{K,sigma}) + m(T_{L,sigma}); both halves
    carry the same vector (m(sigma)/m(diamond)) DU_{K,sigma} nu_{K,sigma}.
    Boundary triangles carry zero because DU vanishes there.
    """
    mesh = u.mesh
    du = signed_differences(u)
    diamond = mesh.diamond_measures.sum(axis=1)
    coef = np.zeros(mesh.n_edges)
    e = mesh.interior
    coef[e] = mesh.edge_lengths[e] / diamond[e] * du[e]
    vec = np.zeros((mesh.n_edges, 2, 2))
    vec[e, 0] = coef[e, None] * mesh.normals[e]
    # seen from L: DU_{L,sigma} nu_{L,sigma} = (-DU)(-nu), the same vector
    vec[e, 1] = vec[e, 0]
    return GradientField(mesh, vec)


def project_initial(n0: Callable, mesh: Mesh, quadrature_order: int = 5, name: str = "n") -> Field:
    """Cell averages of ``n0`` by tensor Gauss-Legendre quadrature.

    ``quadrature_order`` is the number of points per direction, exact for
    polynomials of degree ``2 * order - 1`` in each variable. ``n0(x, y)``
    must accept numpy arrays. Small negative averages are clamped to zero.
    """
    if int(quadrature_order) != quadrature_order or quadrature_order < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {quadrature_order}")
    if mesh.cell_bounds is None:
        raise ValueError("project_initial needs rectangular cells (mesh.cell_bounds)")
    g, w = np.polynomial.legendre.leggauss(int(quadrature_order))
    b = mesh.cell_bounds
    cx, hx = 0.5 * (b[:, 0] + b[:, 1]), 0.5 * (b[:, 1] - b[:, 0])
    cy, hy = 0.5 * (b[:, 2] + b[:, 3]), 0.5 * (b[:, 3] - b[:, 2])
    X = cx[:, None, None] + hx[:, None, None] * g[None, :, None]
    Y = cy[:, None, None] + hy[:, None, None] * g[None, None, :]
    X, Y = np.broadcast_arrays(X, Y)
    vals = np.asarray(n0(X, Y), dtype=float)
    vals = np.broadcast_to(vals, X.shape)
    # averaging over [-1, 1]^2 carries a factor 1/4 with weights summing to 2 per axis
    avg = 0.25 * np.einsum("kij,i,j->k", vals, w, w)
    neg = avg < 0
    if neg.any():
        log.warning("project_initial: clamped %d negative cell averages (min %.3e)", neg.sum(), avg.min())
        avg = np.where(neg, 0.0, avg)
    return Field(mesh, avg, name, 0.0)


# -- snapshot CSV ---------------------------------------------------------------

FIELD_COLUMNS = ("cell_id", "x", "y", "area", "value")


def write_field_csv(u: Field, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_COLUMNS)
        for k in range(u.mesh.n_cells):
            x, y = u.mesh.centers[k]
            w.writerow([k, repr(float(x)), repr(float(y)), repr(float(u.mesh.areas[k])), repr(float(u.values[k]))])


def read_field_csv(path, mesh: Mesh | None = None):
    """Read a snapshot; returns ``(table, values)`` or a ``Field`` if ``mesh`` is given."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != FIELD_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    table = np.array([[float(v) for v in r] for r in rows[1:]])
    if mesh is not None:
        return Field(mesh, table[:, 4])
    return table[:, :4], table[:, 4]


def write_field_vtk(u: Field, path, name: str = "n") -> None:
    """Legacy-VTK structured points file with cell data (Cartesian meshes only)."""
    mesh = u.mesh
    if not mesh.is_cartesian():
        raise ValueError("VTK output requires a Cartesian mesh")
    nx, ny = mesh.shape
    x0, x1, y0, y1 = mesh.rect
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# vtk DataFile Version 3.0",
        f"{name} t={u.time}",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} 1",
        f"ORIGIN {x0!r} {y0!r} 0",
        f"SPACING {(x1 - x0) / nx!r} {(y1 - y0) / ny!r} 1",
        f"CELL_DATA {nx * ny}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    lines += [repr(float(v)) for v in u.values]
    path.write_text("\n".join(lines) + "\n")
