"""Finite-difference Dirichlet solver on unions of rectangular strips.

Each strip ``[-r, r] x [(h(v) - 1) ln q, h(v) ln q]`` carries a uniform
``(x, u)`` grid.  Grid rows on a bifurcation line are shared by the strip
below and the ``p`` strips above, so each line point is a single unknown.
Its row is the Kirchhoff condition discretized with 3-point one-sided
u-derivatives.

In ``(x, u)`` the generator is ``rho^-1 div(rho diag(e^{2u}, 1) grad)`` with
``rho = beta^h e^{(alpha-1) u}``, the density of the invariant measure in
``dx du``.  Boundary fluxes against ``rho`` give the discrete Poisson kernel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import DomainError, HtPoint, Params, tree_point
from .simulate import StripDomain

# node classes
INTERIOR = 0
INTERFACE = 1
DIRICHLET = 2


class ConvergenceError(RuntimeError):
    """The linear solver did not reach the requested residual."""


class StripGrid:
    """Uniform grids on the strips of a finite strip domain with ``r < inf``.

    Parameters
    ----------
    domain : StripDomain
        Full subtree and half-width ``r``.
    nx, nu : int
        Number of cells across ``[-r, r]`` and across one strip.
    q : float
        Scale of the tree (strip height is ``ln q``).
    """

    def __init__(self, domain: StripDomain, nx: int, nu: int, q: float):
        if not math.isfinite(domain.r):
            raise DomainError("the finite-difference grid needs a finite r")
        if nx < 2 or nu < 3:
            raise DomainError("need nx >= 2 and nu >= 3")
        self.domain = domain
        self.nx, self.nu = int(nx), int(nu)
        self.q = float(q)
        self.log_q = math.log(q)
        self.r = domain.r
        self.hx = 2.0 * self.r / self.nx
        self.hu = self.log_q / self.nu
        self.x = -self.r + self.hx * np.arange(self.nx + 1)
        m = len(domain.nodes)
        self.strips = [k for k in range(m) if domain.parent[k] >= 0]
        nl = self.nx + 1
        # unknowns: one row of nl per vertex line, then nu-1 rows per strip
        self.line_base = {k: k * nl for k in range(m)}
        base = m * nl
        self.strip_base = {}
        for s in self.strips:
            self.strip_base[s] = base
            base += (self.nu - 1) * nl
        self.size = base
        self._coords()

    def _coords(self):
        d = self.domain
        nl = self.nx + 1
        self.node_x = np.empty(self.size)
        self.node_u = np.empty(self.size)
        self.node_strip = np.empty(self.size, dtype=np.int64)  # strip whose density applies
        self.node_vertex = np.full(self.size, -1, dtype=np.int64)  # line vertex, or -1
        self.node_kind = np.empty(self.size, dtype=np.int8)
        for k in range(len(d.nodes)):
            b = self.line_base[k]
            sl = slice(b, b + nl)
            self.node_x[sl] = self.x
            self.node_u[sl] = d.height[k] * self.log_q
            self.node_strip[sl] = k
            self.node_vertex[sl] = k
            kind = np.full(nl, DIRICHLET if d.leaf[k] else INTERFACE, dtype=np.int8)
            kind[0] = kind[-1] = DIRICHLET
            self.node_kind[sl] = kind
        for s in self.strips:
            lo = (d.height[s] - 1) * self.log_q
            for j in range(1, self.nu):
                b = self.index(s, 0, j)
                sl = slice(b, b + nl)
                self.node_x[sl] = self.x
                self.node_u[sl] = lo + j * self.hu
                self.node_strip[sl] = s
                kind = np.full(nl, INTERIOR, dtype=np.int8)
                kind[0] = kind[-1] = DIRICHLET
                self.node_kind[sl] = kind

    def index(self, s: int, i, j: int):
        """Unknown number of grid point ``(i, j)`` of strip ``s`` (``j = 0`` and ``nu`` are lines)."""
        nl = self.nx + 1
        if j == 0:
            return self.line_base[int(self.domain.parent[s])] + i
        if j == self.nu:
            return self.line_base[s] + i
        return self.strip_base[s] + (j - 1) * nl + i

    def density(self, params: Params) -> np.ndarray:
        """Measure density ``rho`` at every node (strip-below value on lines)."""
        h = self.domain.height[self.node_strip]
        return np.exp(h * math.log(params.beta) + (params.alpha - 1.0) * self.node_u)

    def point(self, n: int) -> HtPoint:
        """The HT point of unknown ``n``."""
        v = self.domain.nodes[int(self.node_strip[n])]
        x, u = float(self.node_x[n]), float(self.node_u[n])
        if self.node_vertex[n] >= 0:
            return HtPoint(x, u, tree_point(v))
        return HtPoint.from_xu(x, u, v, self.q)

    def dirichlet_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_kind == DIRICHLET)

    def nearest(self, z: HtPoint) -> int:
        """Unknown closest to ``z`` within its strip (or on its line)."""
        d = self.domain
        v = z.w.edge_upper
        if not d.contains_vertex(v):
            raise DomainError(f"{z} is outside the grid's domain")
        k = d.index[id(v)]
        i = int(round((z.x + self.r) / self.hx))
        if not 0 <= i <= self.nx:
            raise DomainError(f"{z} is outside |x| <= r")
        if z.w.is_vertex:
            return self.line_base[k] + i
        lo = (d.height[k] - 1) * self.log_q
        j = int(round((z.u - lo) / self.hu))
        return self.index(k, i, j)

    def to_json(self) -> dict:
        return {"r": self.r, "nx": self.nx, "nu": self.nu,
                "tree": [v.address for v in self.domain.nodes],
                "corners": "dirichlet"}


@dataclass
class DiscreteSolution:
    grid: StripGrid
    values: np.ndarray
    residual: float
    iterations: int
    meta: dict = field(default_factory=dict)

    def at(self, z: HtPoint) -> float:
        return float(self.values[self.grid.nearest(z)])

    def write_csv(self, fh, header: Optional[dict] = None) -> None:
        """Rows ``strip, i, j, x, u, value``; line points are listed once, under the line vertex."""
        g = self.grid
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strip", "i", "j", "x", "u", "value"])
        nl = g.nx + 1
        for k, v in enumerate(g.domain.nodes):
            for i in range(nl):
                n = g.line_base[k] + i
                w.writerow([v.address, i, g.nu, repr(float(g.node_x[n])), repr(float(g.node_u[n])),
                            repr(float(self.values[n]))])
        for s in g.strips:
            addr = g.domain.nodes[s].address
            for j in range(1, g.nu):
                for i in range(nl):
                    n = g.index(s, i, j)
                    w.writerow([addr, i, j, repr(float(g.node_x[n])), repr(float(g.node_u[n])),
                                repr(float(self.values[n]))])


def assemble(grid: StripGrid, params: Params) -> sp.csr_matrix:
    """Sparse operator with generator rows, Kirchhoff rows and identity Dirichlet rows.

    Generator rows are scaled as the discrete generator itself; Kirchhoff rows
    are multiplied by ``hu`` (pure one-sided differences).
    """
    g = grid
    d = g.domain
    if d.p != params.p:
        raise DomainError("grid tree and params disagree on p")
    hx2, hu2 = g.hx ** 2, g.hu ** 2
    b1 = (params.alpha - 1.0) / (2.0 * g.hu)
    rows, cols, vals = [], [], []

    def put(r, c, v):
        c = np.asarray(c)
        rows.append(np.asarray(r))
        cols.append(c)
        vals.append(np.full(c.shape, v, dtype=float))

    inner = np.arange(1, g.nx)
    classified = np.zeros(g.size, dtype=bool)
    # generator rows
    for s in g.strips:
        for j in range(1, g.nu):
            n = g.index(s, inner, j)
            e2 = math.exp(2.0 * g.node_u[n[0]])
            put(n, n, -2.0 * e2 / hx2 - 2.0 / hu2)
            put(n, g.index(s, inner - 1, j), e2 / hx2)
            put(n, g.index(s, inner + 1, j), e2 / hx2)
            put(n, g.index(s, inner, j + 1), 1.0 / hu2 + b1)
            put(n, g.index(s, inner, j - 1), 1.0 / hu2 - b1)
            classified[n] = True
    # Kirchhoff rows: (3 f0 - 4 f_-1 + f_-2) / 2 = beta * sum_w (-3 f0 + 4 f_1 - f_2) / 2
    for k in range(len(d.nodes)):
        if d.leaf[k]:
            continue
        n = g.line_base[k] + inner
        kids = [int(c) for c in d.children[k] if c >= 0]
        put(n, n, 1.5 + 1.5 * params.beta * len(kids))
        put(n, g.index(k, inner, g.nu - 1), -2.0)
        put(n, g.index(k, inner, g.nu - 2), 0.5)
        for w in kids:
            put(n, g.index(w, inner, 1), -2.0 * params.beta)
            put(n, g.index(w, inner, 2), 0.5 * params.beta)
        classified[n] = True
    dn = g.dirichlet_nodes()
    put(dn, dn, 1.0)
    classified[dn] = True
    if not classified.all():
        raise DomainError(f"{int((~classified).sum())} grid nodes are unclassified")
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(g.size, g.size))
    return A.tocsr()


def _solve(A: sp.csr_matrix, rhs: np.ndarray, tol: float, max_iter: int):
    """Sparse LU followed by iterative refinement until ``|r| <= tol |b|``.

    Rows are equilibrated first (divided by their largest entry) so that the
    residual of generator rows, of size ``1/h^2``, and of identity rows are
    measured on the same scale.
    """
    scale_rows = 1.0 / abs(A).max(axis=1).toarray().ravel()
    A = sp.diags(scale_rows) @ A
    rhs = scale_rows * rhs
    lu = spla.splu(A.tocsc())
    x = lu.solve(rhs)
    scale = np.linalg.norm(rhs) or 1.0
    res = np.linalg.norm(rhs - A @ x) / scale
    it = 1
    while res > tol and it < max_iter:
        x += lu.solve(rhs - A @ x)
        new = np.linalg.norm(rhs - A @ x) / scale
        it += 1
        if new >= res:
            res = new
            break
        res = new
    if res > tol:
        raise ConvergenceError(f"relative residual {res:.3e} above tolerance {tol:.1e} after {it} iterations")
    return x, res, it


def solve_dirichlet(grid: StripGrid, f: Callable[[HtPoint], float], params: Params,
                    tol: float = 1e-10, max_iter: int = 100_000,
                    check_max_principle: bool = True) -> DiscreteSolution:
    """Discrete harmonic extension of boundary data ``f``.

    Raises
    ------
    ConvergenceError
        If the relative residual stays above ``tol``.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    A = assemble(grid, params)
    rhs = np.zeros(grid.size)
    dn = grid.dirichlet_nodes()
    rhs[dn] = [f(grid.point(int(n))) for n in dn]
    x, res, it = _solve(A, rhs, tol, max_iter)
    x[dn] = rhs[dn]
    sol = DiscreteSolution(grid, x, res, it, {"tol": tol})
    lo, hi = float(rhs[dn].min()), float(rhs[dn].max())
    slack = 1e-10 * max(1.0, abs(lo), abs(hi))
    sol.meta["max_principle"] = bool(x.min() >= lo - slack and x.max() <= hi + slack)
    if check_max_principle and not sol.meta["max_principle"]:
        raise ConvergenceError(f"discrete maximum principle violated: range [{x.min()}, {x.max()}] "
                               f"vs boundary [{lo}, {hi}]")
    return sol


@dataclass
class PoissonKernel:
    """Discrete Poisson kernel on the boundary of a strip grid.

    ``nodes`` are boundary unknowns, ``density`` the kernel against ``dx``
    (horizontal sides) or ``du`` (vertical sides) and ``weight`` the
    trapezoid mass carried by each node.
    """

    nodes: np.ndarray
    side: np.ndarray  # 0 horizontal, 1 vertical
    density: np.ndarray
    weight: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.weight.sum())


def discrete_green_column(grid: StripGrid, source: HtPoint, params: Params,
                          tol: float = 1e-10, max_iter: int = 100_000) -> tuple[DiscreteSolution, PoissonKernel]:
    """Green function with pole at ``source`` and its boundary flux.

    The source row carries ``-1 / (rho h_x h_u)``, a unit point mass for the
    invariant measure, and boundary values are zero.  Returns the solution and
    the discrete Poisson kernel.
    """
    g = grid
    n0 = g.nearest(source)
    if g.node_kind[n0] != INTERIOR:
        raise DomainError("the source must be a strip-interior grid node")
    A = assemble(g, params)
    rho = g.density(params)
    rhs = np.zeros(g.size)
    rhs[n0] = -1.0 / (rho[n0] * g.hx * g.hu)
    G, res, it = _solve(A, rhs, tol, max_iter)
    G[g.dirichlet_nodes()] = 0.0
    sol = DiscreteSolution(g, G, res, it, {"source": n0})
    return sol, _boundary_flux(g, G, params)


def _boundary_flux(g: StripGrid, G: np.ndarray, params: Params) -> PoissonKernel:
    d = g.domain

    def _rho_at(s, u):
        # density of the strip s, also on its bounding lines
        return np.exp(d.height[s] * math.log(params.beta) + (params.alpha - 1.0) * u)

    nodes, side, dens, wts = [], [], [], []
    nl = g.nx + 1
    tx = np.full(nl, g.hx)
    tx[0] = tx[-1] = 0.5 * g.hx
    ii = np.arange(nl)
    # horizontal sides: bounding lines, outward normal is -u on a strip's bottom, +u on its top
    for k in range(len(d.nodes)):
        if not d.leaf[k]:
            continue
        if d.parent[k] >= 0:  # top line of strip k
            s, j0, j1, j2 = k, g.nu, g.nu - 1, g.nu - 2
        else:  # bottom line of the single child strip in the domain
            s = int(next(c for c in d.children[k] if c >= 0))
            j0, j1, j2 = 0, 1, 2
        n = g.index(s, ii, j0)
        # outward dG/dn by a one-sided second-order difference
        dGdn = (3 * G[n] - 4 * G[g.index(s, ii, j1)] + G[g.index(s, ii, j2)]) / (2 * g.hu)
        u = g.node_u[n[0]]
        dens_k = _rho_at(s, u) * (-dGdn)
        nodes.append(n)
        side.append(np.zeros(nl, dtype=np.int8))
        dens.append(dens_k)
        wts.append(dens_k * tx)
    # vertical sides: every strip, x = -r and x = r
    tu = np.full(g.nu + 1, g.hu)
    tu[0] = tu[-1] = 0.5 * g.hu
    jj = np.arange(g.nu + 1)
    for s in g.strips:
        for i0, i1, i2 in ((0, 1, 2), (g.nx, g.nx - 1, g.nx - 2)):
            n = np.array([g.index(s, i0, j) for j in jj])
            n1 = np.array([g.index(s, i1, j) for j in jj])
            n2 = np.array([g.index(s, i2, j) for j in jj])
            dGdn = (3 * G[n] - 4 * G[n1] + G[n2]) / (2 * g.hx)
            u = g.node_u[n]
            dens_s = _rho_at(s, u) * np.exp(2 * u) * (-dGdn)
            nodes.append(n)
            side.append(np.ones(g.nu + 1, dtype=np.int8))
            dens.append(dens_s)
            wts.append(dens_s * tu)
    return PoissonKernel(np.concatenate(nodes), np.concatenate(side), np.concatenate(dens),
                         np.concatenate(wts))
