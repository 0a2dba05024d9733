"""Admissible finite volume meshes of polygonal 2D domains.

A mesh stores cell and edge geometry as flat numpy arrays. Every edge record
is oriented from its first cell ``K`` (``edge_cells[e, 0]``); the second cell
``L`` is ``-1`` for boundary edges. Per-incidence data (distance from a cell
center to the edge, half-diamond measure) is stored in ``(n_edges, 2)`` arrays
whose columns follow the same ``K, L`` order.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

INTERIOR = "interior"
EXTERIOR = "exterior"


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class Cell(NamedTuple):
    id: int
    center: np.ndarray
    measure: float


class Edge(NamedTuple):
    id: int
    kind: str
    cells: tuple[int, ...]
    measure: float
    distance: float
    transmissibility: float
    normal: np.ndarray
    diamond_measures: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Cell/edge geometry of an admissible mesh.

    Instances are immutable and hash by identity, so derived operators can be
    cached per mesh.
    """

    centers: np.ndarray  # (N, 2) cell centers x_K
    areas: np.ndarray  # (N,) m(K)
    edge_cells: np.ndarray  # (E, 2) int, L = -1 on the boundary
    edge_vertices: np.ndarray  # (E, 2, 2) segment end points
    edge_lengths: np.ndarray  # (E,) m(sigma)
    edge_distances: np.ndarray  # (E,) d_sigma
    normals: np.ndarray  # (E, 2) unit normal, outward from K
    center_edge_distances: np.ndarray  # (E, 2) d(x_K, sigma), d(x_L, sigma) (nan if none)
    shape: tuple[int, int] | None = None  # (nx, ny) for Cartesian grids
    rect: tuple[float, float, float, float] | None = None  # (x0, x1, y0, y1)
    cell_bounds: np.ndarray | None = None  # (N, 4) x0, x1, y0, y1 of rectangular cells
    xi: float = field(init=False)
    domain_measure: float = field(init=False)

    def __post_init__(self):
        for name in ("centers", "areas", "edge_cells", "edge_vertices", "edge_lengths",
                     "edge_distances", "normals", "center_edge_distances", "cell_bounds"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        interior = self.edge_cells[:, 1] >= 0
        d_int = self.edge_distances[interior]
        ratios = self.center_edge_distances[interior] / d_int[:, None]
        # no interior edge: fall back to the uniform-grid value
        xi = float(ratios.min()) if ratios.size else 0.5
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "domain_measure", float(self.areas.sum()))

    # -- sizes -----------------------------------------------------------
    @property
    def n_cells(self) -> int:
        return self.areas.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_cells.shape[0]

    @functools.cached_property
    def interior(self) -> np.ndarray:
        """Indices of interior edges."""
        return np.flatnonzero(self.edge_cells[:, 1] >= 0)

    @functools.cached_property
    def exterior(self) -> np.ndarray:
        return np.flatnonzero(self.edge_cells[:, 1] < 0)

    @functools.cached_property
    def transmissibilities(self) -> np.ndarray:
        """tau_sigma = m(sigma) / d_sigma for every edge."""
        return self.edge_lengths / self.edge_distances

    @functools.cached_property
    def diamond_measures(self) -> np.ndarray:
        """Measures m(T_{K,sigma}) of the half-diamond triangles, shape (E, 2).

        The triangle attached to (K, sigma) has apex x_K and base sigma. The
        second column is zero on boundary edges.
        """
        out = 0.5 * self.edge_lengths[:, None] * np.nan_to_num(self.center_edge_distances)
        out[self.edge_cells[:, 1] < 0, 1] = 0.0
        return out

    @functools.cached_property
    def cell_edges(self) -> list[np.ndarray]:
        """Adjacency K -> ids of the edges of K."""
        owners = np.concatenate([self.edge_cells[:, 0], self.edge_cells[self.interior, 1]])
        ids = np.concatenate([np.arange(self.n_edges), self.interior])
        order = np.argsort(owners, kind="stable")
        counts = np.bincount(owners, minlength=self.n_cells)
        return np.split(ids[order], np.cumsum(counts)[:-1])

    @property
    def h(self) -> float:
        """Mesh size: largest cell diameter."""
        if self.cell_bounds is not None:
            b = self.cell_bounds
            return float(np.hypot(b[:, 1] - b[:, 0], b[:, 3] - b[:, 2]).max())
        # diameter bound from the half-diamond apex distances
        reach = np.zeros(self.n_cells)
        for col in (0, 1):
            cells = self.edge_cells[:, col]
            ok = cells >= 0
            ends = self.edge_vertices[ok] - self.centers[cells[ok]][:, None, :]
            np.maximum.at(reach, cells[ok], np.linalg.norm(ends, axis=2).max(axis=1))
        return float(2 * reach.max())

    # -- record views ----------------------------------------------------
    def cell(self, k: int) -> Cell:
        return Cell(k, self.centers[k], float(self.areas[k]))

    def edge(self, e: int) -> Edge:
        K, L = (int(c) for c in self.edge_cells[e])
        kind = INTERIOR if L >= 0 else EXTERIOR
        cells = (K, L) if L >= 0 else (K,)
        dm = tuple(float(v) for v in self.diamond_measures[e, : len(cells)])
        return Edge(e, kind, cells, float(self.edge_lengths[e]), float(self.edge_distances[e]),
                    float(self.transmissibilities[e]), self.normals[e], dm)

    @property
    def cells(self) -> list[Cell]:
        return [self.cell(k) for k in range(self.n_cells)]

    @property
    def edges(self) -> list[Edge]:
        return [self.edge(e) for e in range(self.n_edges)]

    def is_cartesian(self) -> bool:
        return self.shape is not None and self.rect is not None


def build_cartesian(nx: int, ny: int, rect=(-0.5, 0.5, -0.5, 0.5)) -> Mesh:
    """Uniform ``nx x ny`` grid of the rectangle ``rect = (x0, x1, y0, y1)``.

    Cells are numbered row by row (``k = j * nx + i``); interior vertical edges
    come first, then interior horizontal edges, then the boundary edges.
    """
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive integers, got ({nx}, {ny})")
    x0, x1, y0, y1 = (float(v) for v in rect)
    if not (x1 > x0 and y1 > y0) or not np.all(np.isfinite(rect)):
        raise ValueError(f"degenerate rectangle {rect}")
    nx, ny = int(nx), int(ny)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny
    xs = x0 + hx * np.arange(nx + 1)
    ys = y0 + hy * np.arange(ny + 1)
    xs[-1], ys[-1] = x1, y1
    xc = 0.5 * (xs[:-1] + xs[1:])
    yc = 0.5 * (ys[:-1] + ys[1:])
    I, J = np.meshgrid(np.arange(nx), np.arange(ny))  # (ny, nx)
    I, J = I.ravel(), J.ravel()
    centers = np.column_stack([xc[I], yc[J]])
    bounds = np.column_stack([xs[I], xs[I + 1], ys[J], ys[J + 1]])
    areas = (bounds[:, 1] - bounds[:, 0]) * (bounds[:, 3] - bounds[:, 2])

    def cid(i, j):
        return j * nx + i

    cells, verts, normals, dists = [], [], [], []
    # interior vertical edges between (i, j) and (i + 1, j)
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    cells.append(np.column_stack([cid(i, j), cid(i + 1, j)]))
    verts.append(np.stack([np.column_stack([xs[i + 1], ys[j]]), np.column_stack([xs[i + 1], ys[j + 1]])], axis=1))
    normals.append(np.tile([1.0, 0.0], (i.size, 1)))
    dists.append(np.column_stack([xs[i + 1] - xc[i], xc[i + 1] - xs[i + 1]]))
    # interior horizontal edges between (i, j) and (i, j + 1)
    i, j = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
    i, j = i.ravel(), j.ravel()
    cells.append(np.column_stack([cid(i, j), cid(i, j + 1)]))
    verts.append(np.stack([np.column_stack([xs[i], ys[j + 1]]), np.column_stack([xs[i + 1], ys[j + 1]])], axis=1))
    normals.append(np.tile([0.0, 1.0], (i.size, 1)))
    dists.append(np.column_stack([ys[j + 1] - yc[j], yc[j + 1] - ys[j + 1]]))
    # boundary edges: left, right, bottom, top
    j = np.arange(ny)
    i = np.arange(nx)
    for k_cells, p0, p1, nrm, d in (
        (cid(0, j), np.column_stack([xs[0] + 0 * j, ys[j]]), np.column_stack([xs[0] + 0 * j, ys[j + 1]]),
         [-1.0, 0.0], xc[0] - xs[0] + 0 * j),
        (cid(nx - 1, j), np.column_stack([xs[nx] + 0 * j, ys[j]]), np.column_stack([xs[nx] + 0 * j, ys[j + 1]]),
         [1.0, 0.0], xs[nx] - xc[nx - 1] + 0 * j),
        (cid(i, 0), np.column_stack([xs[i], ys[0] + 0 * i]), np.column_stack([xs[i + 1], ys[0] + 0 * i]),
         [0.0, -1.0], yc[0] - ys[0] + 0 * i),
        (cid(i, ny - 1), np.column_stack([xs[i], ys[ny] + 0 * i]), np.column_stack([xs[i + 1], ys[ny] + 0 * i]),
         [0.0, 1.0], ys[ny] - yc[ny - 1] + 0 * i),
    ):
        cells.append(np.column_stack([k_cells, np.full(k_cells.size, -1)]))
        verts.append(np.stack([p0, p1], axis=1))
        normals.append(np.tile(nrm, (k_cells.size, 1)))
        dists.append(np.column_stack([d, np.full(k_cells.size, np.nan)]))

    edge_cells = np.concatenate(cells).astype(np.int64)
    edge_vertices = np.concatenate(verts)
    center_dists = np.concatenate(dists)
    lengths = np.linalg.norm(edge_vertices[:, 1] - edge_vertices[:, 0], axis=1)
    interior = edge_cells[:, 1] >= 0
    d_sigma = np.where(interior, np.nansum(center_dists, axis=1), center_dists[:, 0])
    return Mesh(
        centers=centers,
        areas=areas,
        edge_cells=edge_cells,
        edge_vertices=edge_vertices,
        edge_lengths=lengths,
        edge_distances=d_sigma,
        normals=np.concatenate(normals),
        center_edge_distances=center_dists,
        shape=(nx, ny),
        rect=(x0, x1, y0, y1),
        cell_bounds=bounds,
    )


@dataclass
class AdmissibilityReport:
    passed: bool
    orthogonality_defect: float
    identity_defect: float
    partition_defect: float
    xi: float
    violating_edges: list[int]
    violating_cells: list[int]

    @property
    def worst(self) -> float:
        return max(self.orthogonality_defect, self.identity_defect, self.partition_defect)


def check_admissibility(mesh: Mesh, tol: float = 1e-10) -> AdmissibilityReport:
    """Recompute admissibility from raw geometry (centers and edge end points).

    Checks that x_K - x_L is parallel to the edge normal, that
    sum_sigma m(sigma) d(x_K, sigma) = 2 m(K) for each cell, that the
    half-diamonds partition the domain and that xi > 0. Defects are relative.
    """
    ec = mesh.edge_cells
    interior = mesh.interior
    p0 = mesh.edge_vertices[:, 0]
    tangent = mesh.edge_vertices[:, 1] - p0
    tangent = tangent / np.linalg.norm(tangent, axis=1)[:, None]

    K, L = ec[interior, 0], ec[interior, 1]
    seg = mesh.centers[L] - mesh.centers[K]
    seg_len = np.linalg.norm(seg, axis=1)
    ortho = np.abs(np.einsum("ij,ij->i", seg, tangent[interior])) / seg_len
    bad_edges = interior[ortho > tol].tolist()

    # signed distances from the centers to the edge lines
    dist = np.zeros((mesh.n_edges, 2))
    dist[:, 0] = np.abs(_cross(tangent, mesh.centers[ec[:, 0]] - p0))
    dist[interior, 1] = np.abs(_cross(tangent[interior], mesh.centers[L] - p0[interior]))
    contrib = mesh.edge_lengths[:, None] * dist
    lhs = np.bincount(ec[:, 0], weights=contrib[:, 0], minlength=mesh.n_cells)
    lhs += np.bincount(L, weights=contrib[interior, 1], minlength=mesh.n_cells)
    ident = np.abs(lhs - 2 * mesh.areas) / (2 * mesh.areas)
    bad_cells = np.flatnonzero(ident > tol).tolist()

    partition = abs(0.5 * contrib.sum() - mesh.domain_measure) / mesh.domain_measure
    ratios = dist[interior] / seg_len[:, None]
    xi = float(ratios.min()) if ratios.size else 0.5
    ortho_max = float(ortho.max()) if ortho.size else 0.0
    ident_max = float(ident.max())
    passed = not bad_edges and not bad_cells and partition <= tol and xi > 0
    return AdmissibilityReport(passed, ortho_max, ident_max, float(partition), xi, bad_edges, bad_cells)


def with_centers(mesh: Mesh, centers: np.ndarray) -> Mesh:
    """Copy of ``mesh`` with moved cell centers and otherwise unchanged edge data."""
    return Mesh(
        centers=np.asarray(centers, dtype=float),
        areas=mesh.areas,
        edge_cells=mesh.edge_cells,
        edge_vertices=mesh.edge_vertices,
        edge_lengths=mesh.edge_lengths,
        edge_distances=mesh.edge_distances,
        normals=mesh.normals,
        center_edge_distances=mesh.center_edge_distances,
        shape=mesh.shape,
        rect=mesh.rect,
        cell_bounds=mesh.cell_bounds,
    )


# -- plain-text mesh files ----------------------------------------------------
#
#   # any comment
#   cells N
#   <id> <x> <y> <area>                                        (N lines)
#   edges E
#   <id> <interior|exterior> <K> <L|-1> <length> <distance> <nx> <ny> <ax> <ay> <bx> <by>
#
# Ids must be dense and listed in order. (ax, ay)-(bx, by) are the edge end points;
# the normal points out of K.

def write_mesh(mesh: Mesh, path) -> None:
    lines = ["# ksfv mesh", f"cells {mesh.n_cells}"]
    for k in range(mesh.n_cells):
        x, y = mesh.centers[k]
        lines.append(f"{k} {x:.17g} {y:.17g} {mesh.areas[k]:.17g}")
    lines.append(f"edges {mesh.n_edges}")
    for e in range(mesh.n_edges):
        K, L = mesh.edge_cells[e]
        kind = INTERIOR if L >= 0 else EXTERIOR
        nrm = mesh.normals[e]
        (ax, ay), (bx, by) = mesh.edge_vertices[e]
        vals = [mesh.edge_lengths[e], mesh.edge_distances[e], nrm[0], nrm[1], ax, ay, bx, by]
        lines.append(f"{e} {kind} {K} {L} " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    rows = [ln.split() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    it = iter(rows)
    head = next(it)
    if head[0] != "cells":
        raise ValueError(f"{path}: expected 'cells N' header")
    cell_rows = [next(it) for _ in range(int(head[1]))]
    head = next(it)
    if head[0] != "edges":
        raise ValueError(f"{path}: expected 'edges E' header")
    edge_rows = [next(it) for _ in range(int(head[1]))]

    cell_arr = np.array([[float(v) for v in r[1:4]] for r in cell_rows])
    if [int(r[0]) for r in cell_rows] != list(range(len(cell_rows))):
        raise ValueError(f"{path}: cell ids must be 0..N-1 in order")
    if [int(r[0]) for r in edge_rows] != list(range(len(edge_rows))):
        raise ValueError(f"{path}: edge ids must be 0..E-1 in order")
    centers, areas = cell_arr[:, :2], cell_arr[:, 2]
    edge_cells = np.array([[int(r[2]), int(r[3])] for r in edge_rows], dtype=np.int64)
    for r, (_, L) in zip(edge_rows, edge_cells):
        if (r[1] == INTERIOR) != (L >= 0):
            raise ValueError(f"{path}: edge {r[0]} kind '{r[1]}' inconsistent with cells")
    num = np.array([[float(v) for v in r[4:12]] for r in edge_rows])
    lengths, d_sigma, normals = num[:, 0], num[:, 1], num[:, 2:4]
    vertices = num[:, 4:8].reshape(-1, 2, 2)

    tangent = vertices[:, 1] - vertices[:, 0]
    tangent /= np.linalg.norm(tangent, axis=1)[:, None]
    cdist = np.full((len(edge_rows), 2), np.nan)
    cdist[:, 0] = np.abs(_cross(tangent, centers[edge_cells[:, 0]] - vertices[:, 0]))
    inner = edge_cells[:, 1] >= 0
    cdist[inner, 1] = np.abs(_cross(tangent[inner], centers[edge_cells[inner, 1]] - vertices[inner, 0]))
    return Mesh(centers=centers, areas=areas, edge_cells=edge_cells, edge_vertices=vertices,
                edge_lengths=lengths, edge_distances=d_sigma, normals=normals,
                center_edge_distances=cdist)
