"""Geometry of treebolic space HT(q, p).

Points are stored in log-vertical coordinates ``(x, u)`` with ``u = ln y``;
bifurcation lines sit at ``u in ln(q) * Z``.  The homogeneous tree is
materialized lazily, downward children on first access and predecessors of
the root on demand, so confluents always exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

from scipy.optimize import minimize_scalar

SNAP_TOL = 1e-12


class DomainError(ValueError):
    """Raised when an argument lies outside the admissible domain."""


class InsufficientPrefix(LookupError):
    """An upper tree end has too short a word to answer a query."""


# --------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class Params:
    q: float
    p: int
    alpha: float
    beta: float

    @property
    def a(self) -> float:
        return self.beta * self.p * self.q ** (self.alpha - 1.0)

    @property
    def log_q(self) -> float:
        return math.log(self.q)

    @property
    def up_weight(self) -> float:
        """Kirchhoff weight of the vertical projection, ``beta * p``."""
        return self.beta * self.p


def make_params(q: float, p: int, alpha: float, beta: float) -> Params:
    """Validate and bundle ``(q, p, alpha, beta)``.

    Raises
    ------
    DomainError
        If ``q <= 1``, ``p < 1`` (or not an integer) or ``beta <= 0``.
    """
    if not (q > 1):
        raise DomainError(f"q must exceed 1, got {q!r}")
    if int(p) != p or p < 1:
        raise DomainError(f"p must be a positive integer, got {p!r}")
    if not (beta > 0):
        raise DomainError(f"beta must be positive, got {beta!r}")
    if not math.isfinite(alpha):
        raise DomainError(f"alpha must be finite, got {alpha!r}")
    return Params(float(q), int(p), float(alpha), float(beta))


# --------------------------------------------------------------------------
# the tree

class TreeNode:
    """Vertex of the lazily materialized tree T_p."""

    __slots__ = ("tree", "height", "index", "_parent", "_children", "__weakref__")

    def __init__(self, tree: "Tree", height: int, parent: Optional["TreeNode"], index: Optional[int]):
        self.tree = tree
        self.height = height
        self.index = index  # position among the parent's children
        self._parent = parent
        self._children: list[Optional[TreeNode]] = [None] * tree.p

    @property
    def parent(self) -> "TreeNode":
        if self._parent is None:
            # only the lowest spine node lacks a parent; grow the spine by one
            up = TreeNode(self.tree, self.height - 1, None, None)
            up._children[0] = self
            self._parent = up
            self.index = 0
        return self._parent

    def child(self, i: int) -> "TreeNode":
        if not 0 <= i < self.tree.p:
            raise IndexError(f"child index {i} outside 0..{self.tree.p - 1}")
        c = self._children[i]
        if c is None:
            c = TreeNode(self.tree, self.height + 1, self, i)
            self._children[i] = c
        return c

    @property
    def children(self) -> list["TreeNode"]:
        return [self.child(i) for i in range(self.tree.p)]

    def neighbours(self) -> list["TreeNode"]:
        return [self.parent] + self.children

    @property
    def address(self) -> str:
        return self.tree.address(self)

    def __repr__(self) -> str:
        return f"TreeNode({self.address!r}, h={self.height})"


class Tree:
    """Homogeneous tree with one predecessor and ``p`` successors per vertex.

    The root ``o`` sits on horocycle 0.  Predecessors of ``o`` are created on
    demand and ``o`` is child 0 of ``o-`` (likewise up the spine).
    """

    def __init__(self, p: int):
        if int(p) != p or p < 1:
            raise DomainError(f"p must be a positive integer, got {p!r}")
        self.p = int(p)
        self.root = TreeNode(self, 0, None, None)

    def ancestor_of_root(self, k: int) -> TreeNode:
        v = self.root
        for _ in range(k):
            v = v.parent
        return v

    def address(self, v: TreeNode) -> str:
        c = confluent(v, self.root)
        word = []
        w = v
        while w is not c:
            word.append(w.index)
            w = w.parent
        return "o" + "-" * (-c.height) + "".join(f".{i}" for i in reversed(word))

    def node(self, address: str) -> TreeNode:
        """Parse ``"o"``, ``"o--"``, ``"o-.1.0"`` style addresses."""
        head, *word = address.strip().split(".")
        if not head.startswith("o") or set(head[1:]) - {"-"}:
            raise DomainError(f"malformed tree address {address!r}")
        v = self.ancestor_of_root(len(head) - 1)
        for tok in word:
            try:
                v = v.child(int(tok))
            except (ValueError, IndexError) as exc:
                raise DomainError(f"malformed tree address {address!r}") from exc
        return v


def confluent(v: TreeNode, v2: TreeNode) -> TreeNode:
    """Lowest vertex on the geodesic between two vertices."""
    if v.tree is not v2.tree:
        raise DomainError("vertices belong to different trees")
    while v.height > v2.height:
        v = v.parent
    while v2.height > v.height:
        v2 = v2.parent
    while v is not v2:
        v = v.parent
        v2 = v2.parent
    return v


def tree_distance(v: TreeNode, v2: TreeNode) -> int:
    c = confluent(v, v2)
    return (v.height - c.height) + (v2.height - c.height)


def is_ancestor(anc: TreeNode, v: TreeNode) -> bool:
    """True when ``anc`` lies on the ray from ``v`` down to the bottom end."""
    if anc.height > v.height:
        return False
    while v.height > anc.height:
        v = v.parent
    return v is anc


# --------------------------------------------------------------------------
# points of the metric tree and of HT

@dataclass(frozen=True, eq=False)
class TreePoint:
    """Point ``w`` of the metric tree on the edge ``[v-, v]``.

    ``offset`` is the horocycle value of ``w``.  Vertices are always stored in
    vertex form ``TreePoint(v, h(v))``; use :func:`tree_point` to build
    canonical instances.
    """

    edge_upper: TreeNode
    offset: float

    @property
    def is_vertex(self) -> bool:
        return self.offset == self.edge_upper.height

    @property
    def vertex(self) -> Optional[TreeNode]:
        return self.edge_upper if self.is_vertex else None

    def __eq__(self, other):
        return (isinstance(other, TreePoint) and self.edge_upper is other.edge_upper
                and self.offset == other.offset)

    def __hash__(self):
        return hash((id(self.edge_upper), self.offset))

    def __repr__(self) -> str:
        return f"TreePoint({self.edge_upper.address!r}, t={self.offset!r})"


def tree_point(v: TreeNode, offset: Optional[float] = None) -> TreePoint:
    """Canonical tree point on the edge below ``v`` (vertex ``v`` if no offset)."""
    h = v.height
    if offset is None or abs(offset - h) <= SNAP_TOL:
        return TreePoint(v, float(h))
    if abs(offset - (h - 1)) <= SNAP_TOL:
        return TreePoint(v.parent, float(h - 1))
    if not h - 1 < offset < h:
        raise DomainError(f"offset {offset} outside edge [{h - 1}, {h}] of {v.address}")
    return TreePoint(v, float(offset))


@dataclass(frozen=True, eq=False)
class HtPoint:
    """Point ``(x + i e^u, w)`` of HT with ``u / ln q == offset(w)``."""

    x: float
    u: float
    w: TreePoint

    @classmethod
    def at(cls, x: float, w: TreePoint, q: float) -> "HtPoint":
        return cls(float(x), w.offset * math.log(q), w)

    @classmethod
    def from_xu(cls, x: float, u: float, v: TreeNode, q: float) -> "HtPoint":
        """Point at log-height ``u`` on the edge (or vertex) determined by ``v``."""
        return cls(float(x), float(u), tree_point(v, u / math.log(q)))

    @property
    def y(self) -> float:
        return math.exp(self.u)

    @property
    def z(self) -> complex:
        return complex(self.x, self.y)

    def check(self, q: float, tol: float = 1e-12) -> None:
        if abs(self.u / math.log(q) - self.w.offset) > tol * max(1.0, abs(self.w.offset)):
            raise DomainError(f"inconsistent point: u/ln q = {self.u / math.log(q)}, offset {self.w.offset}")

    def to_json(self) -> dict:
        return {"x": self.x, "u": self.u, "w": self.w.edge_upper.address, "t": self.w.offset}

    @classmethod
    def from_json(cls, d: dict, tree: Tree, q: float) -> "HtPoint":
        w = tree_point(tree.node(d["w"]), float(d["t"]))
        pt = cls(float(d["x"]), float(d["u"]), w)
        pt.check(q, tol=1e-9)
        return pt

    def __eq__(self, other):
        return isinstance(other, HtPoint) and (self.x, self.u, self.w) == (other.x, other.u, other.w)

    def __hash__(self):
        return hash((self.x, self.u, self.w))

    def __repr__(self) -> str:
        return f"HtPoint(x={self.x!r}, u={self.u!r}, w={self.w!r})"


def reference_point(tree: Tree) -> HtPoint:
    """The point ``(i, o)`` on the line L_o."""
    return HtPoint(0.0, 0.0, tree_point(tree.root))


def point_confluent(w1: TreePoint, w2: TreePoint):
    """Confluent of two tree points: ``w1``, ``w2`` or a vertex below both."""
    v1, v2 = w1.edge_upper, w2.edge_upper
    if v1 is v2:
        return w1 if w1.offset <= w2.offset else w2
    c = confluent(v1, v2)
    if c is v1:
        return w1
    if c is v2:
        return w2
    return c


# --------------------------------------------------------------------------
# metrics

def hyperbolic_distance(z1: tuple[float, float], z2: tuple[float, float]) -> float:
    """Distance in the upper half plane between ``(x1, y1)`` and ``(x2, y2)``."""
    (x1, y1), (x2, y2) = z1, z2
    if y1 <= 0 or y2 <= 0:
        raise DomainError("heights must be positive")
    d2 = (x1 - x2) ** 2 + (y1 - y2) ** 2
    # 2 asinh(.) is the cancellation-free form of arccosh(1 + d2 / (2 y1 y2))
    return 2.0 * math.asinh(math.sqrt(d2 / (4.0 * y1 * y2)))


def geodesic_apex(z1: tuple[float, float], z2: tuple[float, float]) -> float:
    """Largest imaginary part along the hyperbolic geodesic segment."""
    (x1, y1), (x2, y2) = z1, z2
    if x1 == x2:
        return max(y1, y2)
    c = ((x2 * x2 + y2 * y2) - (x1 * x1 + y1 * y1)) / (2.0 * (x2 - x1))
    if min(x1, x2) <= c <= max(x1, x2):
        return math.hypot(x1 - c, y1)
    return max(y1, y2)


def _line_minimum(z1, z2, y_line, n_scan=64, tol=1e-10):
    def f(s):
        return hyperbolic_distance(z1, (s, y_line)) + hyperbolic_distance((s, y_line), z2)

    lo = min(z1[0], z2[0]) - 1.0
    hi = max(z1[0], z2[0]) + 1.0
    # the objective can be bimodal for points far apart; scan, then refine
    step = (hi - lo) / n_scan
    grid = [lo + k * step for k in range(n_scan + 1)]
    vals = [f(s) for s in grid]
    k = min(range(len(vals)), key=vals.__getitem__)
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_scan)]
    if k in (0, n_scan):
        return vals[k]
    res = minimize_scalar(f, bracket=(a, grid[k], b), method="golden", tol=tol)
    return min(res.fun, vals[k])


def ht_distance(z1: HtPoint, z2: HtPoint, q: float) -> float:
    """Intrinsic distance on HT(q, p)."""
    c = point_confluent(z1.w, z2.w)
    p1, p2 = (z1.x, z1.y), (z2.x, z2.y)
    if c is z1.w or c is z2.w:
        return hyperbolic_distance(p1, p2)
    return _line_minimum(p1, p2, q ** c.height)


def tree_point_distance(w1: TreePoint, w2: TreePoint) -> float:
    """Metric-tree distance in horocycle units."""
    c = point_confluent(w1, w2)
    hc = c.offset if isinstance(c, TreePoint) else c.height
    return (w1.offset - hc) + (w2.offset - hc)


def phi_density(z: HtPoint, params: Params) -> float:
    """Density ``beta^h(v) y^alpha`` of the reference measure.

    On a bifurcation line L_v the value of the strip below (``h(v)``) is used.
    """
    v = z.w.edge_upper
    return math.exp(v.height * math.log(params.beta) + params.alpha * z.u)


def horizontal_translate(z: HtPoint, b: float) -> HtPoint:
    return HtPoint(z.x + b, z.u, z.w)


# --------------------------------------------------------------------------
# ends

class TreeEnd:
    """An end of T: the bottom end ``varpi`` or an upper end.

    An upper end is the ray from ``anchor`` following child indices ``word``;
    ``tail`` (index -> child index) extends the word lazily when given.
    """

    def __init__(self, kind: str, anchor: Optional[TreeNode] = None,
                 word: Sequence[int] = (), tail: Optional[Callable[[int], int]] = None):
        if kind not in ("varpi", "upper"):
            raise DomainError(f"unknown end kind {kind!r}")
        if kind == "upper" and anchor is None:
            raise DomainError("an upper end needs an anchor vertex")
        self.kind = kind
        self.anchor = anchor
        self.word = list(word)
        self.tail = tail
        if anchor is not None:
            for i in self.word:
                if not 0 <= i < anchor.tree.p:
                    raise DomainError(f"child index {i} outside 0..{anchor.tree.p - 1}")

    @classmethod
    def varpi(cls) -> "TreeEnd":
        return cls("varpi")

    @classmethod
    def upper(cls, anchor: TreeNode, word: Sequence[int], tail: Optional[Callable[[int], int]] = None):
        return cls("upper", anchor, word, tail)

    @classmethod
    def periodic(cls, anchor: TreeNode, word: Sequence[int]) -> "TreeEnd":
        """Upper end whose word repeats ``word`` forever."""
        word = list(word)
        if not word:
            raise DomainError("periodic end needs a non-empty word")
        return cls("upper", anchor, word, lambda k: word[k % len(word)])

    def letter(self, k: int) -> int:
        while len(self.word) <= k:
            if self.tail is None:
                raise InsufficientPrefix(f"end word has {len(self.word)} letters, needs {k + 1}")
            self.word.append(int(self.tail(len(self.word))))
        return self.word[k]

    def ray(self, n: int) -> Iterator[TreeNode]:
        """First ``n + 1`` vertices of the ray from the anchor."""
        v = self.anchor
        yield v
        for k in range(n):
            v = v.child(self.letter(k))
            yield v

    def confluent_height(self, v: TreeNode) -> int:
        """Horocycle index of ``v`` meet this end (upper ends only)."""
        if self.kind != "upper":
            raise DomainError("confluent with the bottom end is undefined")
        c = confluent(v, self.anchor)
        if c is not self.anchor:
            return c.height
        path = []
        w = v
        while w is not self.anchor:
            path.append(w.index)
            w = w.parent
        path.reverse()
        common = 0
        for k, i in enumerate(path):
            if self.letter(k) != i:
                break
            common += 1
        return self.anchor.height + common

    def __repr__(self) -> str:
        if self.kind == "varpi":
            return "TreeEnd(varpi)"
        return f"TreeEnd(anchor={self.anchor.address!r}, word={self.word!r})"
