"""Closed-form harmonic objects on the tree, the plane and HT.

Everything here is deterministic and pure except :func:`mu_harmonic_residual`,
which samples exits through :mod:`treebolic.simulate`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .geometry import (DomainError, HtPoint, Params, Tree, TreeEnd, TreeNode,
                       TreePoint)

ALPHA_ONE_TOL = 1e-9


# --------------------------------------------------------------------------
# the induced random walk on the tree

@dataclass(frozen=True)
class TreeWalkLaw:
    """Nearest-neighbour law of the tree projection of the embedded chain."""

    params: Params

    @property
    def down_prob(self) -> float:
        return 1.0 / (1.0 + self.params.a)

    @property
    def up_prob_per_child(self) -> float:
        a = self.params.a
        return a / ((1.0 + a) * self.params.p)

    def __call__(self, v: TreeNode, w: TreeNode) -> float:
        return rw_transition(v, w, self.params)


def rw_transition(v: TreeNode, w: TreeNode, params: Params) -> float:
    """One-step probability from ``v`` to ``w``; zero unless adjacent."""
    a = params.a
    if w.height == v.height - 1 and v.parent is w:
        return 1.0 / (1.0 + a)
    if w.height == v.height + 1 and w.parent is v:
        return a / ((1.0 + a) * params.p)
    return 0.0


# --------------------------------------------------------------------------
# harmonic interpolation along edges

def _alpha_is_one(params: Params) -> bool:
    return abs(params.alpha - 1.0) < ALPHA_ONE_TOL


def lambda_interp(s: float, params: Params) -> float:
    """Weight of ``f(v-)`` at the point of edge ``[v-, v]`` lying ``s`` below ``v``.

    ``s`` is measured in horocycle units, so ``s = 0`` is ``v`` and ``s = 1``
    is ``v-``.
    """
    if not -1e-12 <= s <= 1.0 + 1e-12:
        raise DomainError(f"offset gap must lie in [0, 1], got {s!r}")
    s = min(max(s, 0.0), 1.0)
    if _alpha_is_one(params):
        return s
    k = (params.alpha - 1.0) * params.log_q
    return math.expm1(k * s) / math.expm1(k)


def lambda_slope(s: float, params: Params) -> float:
    """Derivative of :func:`lambda_interp` in ``s``."""
    if _alpha_is_one(params):
        return 1.0
    k = (params.alpha - 1.0) * params.log_q
    return k * math.exp(k * s) / math.expm1(k)


VertexFunction = Callable[[TreeNode], float]


def extend_tree_harmonic(f: VertexFunction, w: TreePoint, params: Params) -> float:
    """Value at ``w`` of the harmonic extension of vertex data ``f``."""
    v = w.edge_upper
    if w.is_vertex:
        return f(v)
    lam = lambda_interp(v.height - w.offset, params)
    return lam * f(v.parent) + (1.0 - lam) * f(v)


def edge_derivative(f: VertexFunction, v: TreeNode, params: Params, at: str = "upper") -> float:
    """Derivative in the horocycle variable of the extension along ``[v-, v]``.

    ``at`` selects the endpoint: ``"upper"`` (at ``v``) or ``"lower"`` (at ``v-``).
    """
    s = {"upper": 0.0, "lower": 1.0}[at]
    # f(t) = lam(h(v) - t) f(v-) + (1 - lam) f(v), so df/dt = lam'(s) (f(v) - f(v-))
    return lambda_slope(s, params) * (f(v) - f(v.parent))


def kirchhoff_residual(f: VertexFunction, v: TreeNode, params: Params) -> float:
    """``f'_v(v) - beta * sum_w f'_w(v)`` over the children ``w`` of ``v``."""
    down = edge_derivative(f, v, params, "upper")
    up = sum(edge_derivative(f, w, params, "lower") for w in v.children)
    return down - params.beta * up


# --------------------------------------------------------------------------
# boundary parameters

@dataclass(frozen=True)
class MartinConstants:
    b: float
    c: float

    @classmethod
    def of(cls, params: Params) -> "MartinConstants":
        a = params.a
        return cls(max(a, 1.0), min(a, 1.0 / a) / params.p)


KINDS = ("tree-end", "varpi", "real", "infinity", "one")


@dataclass(frozen=True, eq=False)
class BoundaryParam:
    """Boundary point labelling a harmonic function.

    ``kind`` is one of ``tree-end`` (with ``end``), ``varpi``, ``real``
    (with ``zeta``), ``infinity`` or ``one`` (the constant function).
    """

    kind: str
    end: Optional[TreeEnd] = None
    zeta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown boundary kind {self.kind!r}")
        if (self.kind == "tree-end") != (self.end is not None):
            raise DomainError("a tree-end parameter carries exactly one end")
        if (self.kind == "real") != (self.zeta is not None):
            raise DomainError("a real parameter carries exactly one zeta")
        if self.end is not None and self.end.kind != "upper":
            raise DomainError("use kind 'varpi' for the bottom end")

    @classmethod
    def tree_end(cls, end: TreeEnd) -> "BoundaryParam":
        if end.kind == "varpi":
            return cls("varpi")
        return cls("tree-end", end=end)

    @classmethod
    def real(cls, zeta: float) -> "BoundaryParam":
        if not math.isfinite(zeta):
            raise DomainError("zeta must be finite; use kind 'infinity'")
        return cls("real", zeta=float(zeta))

    def to_json(self) -> dict:
        if self.kind == "tree-end":
            d = {"kind": "tree-end", "word": ".".join(str(i) for i in self.end.word)}
            if self.end.anchor.address != "o":
                d["anchor"] = self.end.anchor.address
            return d
        if self.kind == "real":
            return {"kind": "real", "zeta": self.zeta}
        return {"kind": self.kind}

    @classmethod
    def from_json(cls, d: dict, tree: Optional[Tree] = None) -> "BoundaryParam":
        """Parse the JSON form; tree-end words are anchored at ``o`` and repeat periodically."""
        kind = d.get("kind")
        if kind == "tree-end":
            if tree is None:
                raise DomainError("a tree is needed to parse a tree end")
            try:
                word = [int(t) for t in str(d["word"]).split(".") if t != ""]
            except ValueError as exc:
                raise DomainError(f"malformed end word {d['word']!r}") from exc
            anchor = tree.node(d.get("anchor", "o"))
            return cls("tree-end", end=TreeEnd.periodic(anchor, word))
        if kind == "real":
            return cls.real(float(d["zeta"]))
        if kind in ("varpi", "infinity", "one"):
            return cls(kind)
        raise DomainError(f"unknown boundary kind {kind!r}")

    def __repr__(self) -> str:
        return f"BoundaryParam({self.to_json()!r})"


# --------------------------------------------------------------------------
# Martin kernels

def martin_kernel_tree(v: TreeNode, xi: Union[BoundaryParam, TreeEnd], params: Params) -> float:
    """Martin kernel ``k(v, xi)`` of the tree walk, normalized at ``o``.

    Raises
    ------
    InsufficientPrefix
        If the end word is too short to locate ``v`` meet ``xi``.
    """
    if isinstance(xi, BoundaryParam):
        if xi.kind == "varpi":
            xi = TreeEnd.varpi()
        elif xi.kind == "tree-end":
            xi = xi.end
        else:
            raise DomainError(f"{xi.kind!r} is not a tree boundary point")
    mc = MartinConstants.of(params)
    log_k = -v.height * math.log(mc.b)
    if xi.kind == "upper":
        root = v.tree.root
        log_k += (xi.confluent_height(root) - xi.confluent_height(v)) * math.log(mc.c)
    return math.exp(log_k)


def poisson_kernel_H(x: float, y: float, zeta: Union[BoundaryParam, float], alpha: float) -> float:
    """Extended Poisson kernel ``P_alpha(x + iy, zeta)``; ``zeta = inf`` selects infinity."""
    if not y > 0:
        raise DomainError(f"y must be positive, got {y!r}")
    if isinstance(zeta, BoundaryParam):
        if zeta.kind == "infinity":
            zeta = math.inf
        elif zeta.kind == "real":
            zeta = zeta.zeta
        else:
            raise DomainError(f"{zeta.kind!r} is not a point of the plane boundary")
    log_p = max(1.0 - alpha, 0.0) * math.log(y)
    if math.isfinite(zeta):
        ratio = (zeta * zeta + 1.0) / ((zeta - x) ** 2 + y * y)
        log_p += max(alpha / 2.0, 1.0 - alpha / 2.0) * math.log(ratio)
    return math.exp(log_p)


def _require_classified(params: Params) -> None:
    if abs(params.beta * params.p - 1.0) > 1e-12:
        raise DomainError(f"minimal harmonic functions are classified only for beta*p = 1, "
                          f"got {params.beta * params.p!r}")


def minimal_harmonic_ht(z: HtPoint, xi: BoundaryParam, params: Params) -> float:
    """Evaluate the harmonic function on HT labelled by ``xi`` (requires ``beta p = 1``).

    Tree parameters give lifts of tree Martin kernels, plane parameters lifts
    of Poisson kernels.  ``varpi`` and ``infinity`` are evaluable but not
    minimal (see :func:`is_minimal`); ``one`` requires ``alpha = 1``.
    """
    _require_classified(params)
    if xi.kind in ("tree-end", "varpi"):
        return extend_tree_harmonic(lambda v: martin_kernel_tree(v, xi, params), z.w, params)
    if xi.kind in ("real", "infinity"):
        return poisson_kernel_H(z.x, z.y, xi, params.alpha)
    if not _alpha_is_one(params):
        raise DomainError("the constant function is a minimal parameter only at alpha = 1")
    return 1.0


def is_minimal(xi: BoundaryParam, params: Params) -> bool:
    """Whether the function labelled by ``xi`` is minimal harmonic (``beta p = 1``, ``p >= 2``)."""
    _require_classified(params)
    if params.p < 2:
        raise DomainError("the classification assumes p >= 2")
    if xi.kind in ("tree-end", "real"):
        return True
    # varpi and infinity give 1 and y^(1-alpha); they coincide with 1 at alpha = 1
    return _alpha_is_one(params)


def decompose_sum(hH: Optional[Callable[[float, float], float]],
                  hT: Optional[VertexFunction], params: Params) -> Callable[[HtPoint], float]:
    """``(z, w) -> hH(z) + hT(w)``, with ``hT`` extended harmonically along edges."""
    def h(z: HtPoint) -> float:
        s = 0.0
        if hH is not None:
            s += hH(z.x, z.y)
        if hT is not None:
            s += extend_tree_harmonic(hT, z.w, params)
        return s
    return h


# --------------------------------------------------------------------------
# drift and the Liouville threshold

def drift_rate(params: Params, mean_duration: float) -> float:
    """``ln q / E(tau) * (a - 1) / (a + 1)`` for a given mean embedded duration."""
    a = params.a
    return params.log_q / mean_duration * (a - 1.0) / (a + 1.0)


def liouville_predicate(params: Params, tol: float = 1e-12) -> tuple[bool, int]:
    """Weak Liouville property and the sign of the drift.

    The property holds iff ``a = beta p q^(alpha - 1) = 1``, i.e. zero drift.
    """
    a = params.a
    if abs(a - 1.0) <= tol:
        return True, 0
    return False, 1 if a > 1.0 else -1


def mu_harmonic_residual(h: Callable[[HtPoint], float], z: HtPoint, n: int, cfg, params: Params,
                         domain=None):
    """Monte Carlo ``E h(X_tau) - h(z)`` for the exit from the star around ``z``'s line.

    Returns an :class:`~treebolic.simulate.MCEstimate` of the residual.
    """
    from .simulate import MCEstimate, StripDomain, mc_mean, sample_exit

    v = z.w.vertex
    if v is None:
        raise DomainError("the start point must lie on a bifurcation line")
    if domain is None:
        domain = StripDomain.star(v)
    b = sample_exit(z, domain, n, cfg, params)
    vals = b.evaluate(h) - h(z)
    if n > 1 and not vals.any():
        return MCEstimate(0.0, 0.0, n)
    return mc_mean(vals)


def plane_residual(F: Callable[[float, float], float], x: float, y: float, alpha: float,
                   h: float) -> float:
    """Central-difference value of ``y^2 (F_xx + F_yy) + alpha y F_y`` at ``(x, y)``."""
    f0 = F(x, y)
    fxp, fxm = F(x + h, y), F(x - h, y)
    fyp, fym = F(x, y + h), F(x, y - h)
    lap = (fxp - 2.0 * f0 + fxm + fyp - 2.0 * f0 + fym) / (h * h)
    return y * y * lap + alpha * y * (fyp - fym) / (2.0 * h)
