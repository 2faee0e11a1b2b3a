"""Monte Carlo engine for Brownian motion on HT(q, p).

The diffusion is simulated in ``(x, u = ln y)`` coordinates with the exact
generator normalization (no factor 1/2), so durations and drift estimates are
in the time scale of ``Delta_{alpha,beta}`` itself.  At a bifurcation line the
next excursion goes up with probability ``beta p / (1 + beta p)``, into a
uniformly chosen child strip.

Randomness is counter based: a path's draws depend only on ``(seed, replica,
path, step)``, which makes replicas reproducible under any schedule.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import _engine
from .geometry import (DomainError, HtPoint, Params, TreeNode, reference_point, tree_point)


class StepBudgetExceeded(RuntimeError):
    """A path did not leave its domain within ``max_steps`` steps."""


@dataclass(frozen=True)
class SimConfig:
    """Discretization and RNG settings.

    ``dt=None`` selects ``(ln q)^2 / 100``, about ten steps per strip on the
    vertical diffusion scale.
    """

    dt: Optional[float] = None
    line_tol: float = 1e-9
    max_steps: int = 10_000_000
    seed: int = 0
    replica: int = 0

    def step(self, params: Params) -> float:
        dt = self.dt if self.dt is not None else params.log_q ** 2 / 100.0
        if not dt > 0:
            raise DomainError(f"dt must be positive, got {dt!r}")
        return dt

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# domains

class StripDomain:
    """Union of closed strips over a finite full subtree, optionally cut at ``|x| < r``.

    Every vertex of the subtree has either all of its ``p + 1`` neighbours in
    the subtree (interior line) or exactly one (bounding line).
    """

    def __init__(self, nodes: Iterable[TreeNode], r: float = math.inf):
        nodes = list(dict.fromkeys(nodes))
        if len(nodes) < 2:
            raise DomainError("a strip domain needs at least one edge")
        tree = nodes[0].tree
        ids = {id(v) for v in nodes}
        self.p = tree.p
        self.tree = tree
        self.r = float(r)
        if not self.r > 0:
            raise DomainError("r must be positive")
        nodes.sort(key=lambda v: (v.height, v.address))
        self.nodes = nodes
        self.index = {id(v): i for i, v in enumerate(nodes)}
        m = len(nodes)
        self.height = np.array([v.height for v in nodes], dtype=np.int64)
        self.parent = np.full(m, -1, dtype=np.int64)
        self.children = np.full((m, self.p), -1, dtype=np.int64)
        self.leaf = np.zeros(m, dtype=np.bool_)
        for i, v in enumerate(nodes):
            inside = 0
            if id(v.parent) in ids:
                self.parent[i] = self.index[id(v.parent)]
                inside += 1
            for c in range(self.p):
                w = v.child(c)
                if id(w) in ids:
                    self.children[i, c] = self.index[id(w)]
                    inside += 1
            if inside == 1:
                self.leaf[i] = True
            elif inside != self.p + 1:
                raise DomainError(f"subtree is not full at {v.address} ({inside} neighbours inside)")
        self._check_connected()

    def _check_connected(self):
        seen = {0}
        stack = [0]
        while stack:
            i = stack.pop()
            nbrs = [self.parent[i], *self.children[i]]
            for j in nbrs:
                if j >= 0 and j not in seen:
                    seen.add(int(j))
                    stack.append(int(j))
        if len(seen) != len(self.nodes):
            raise DomainError("subtree is not connected")

    @classmethod
    def star(cls, v: TreeNode, r: float = math.inf) -> "StripDomain":
        """The star of strips around the line L_v (cut at ``|x| < r``)."""
        return cls([v, v.parent, *v.children], r)

    @classmethod
    def ball(cls, v: TreeNode, radius: int, r: float = math.inf) -> "StripDomain":
        """Strips over the combinatorial ball of the given radius around ``v``."""
        layer = [v]
        seen = {id(v): v}
        for _ in range(radius):
            nxt = []
            for w in layer:
                for n in w.neighbours():
                    if id(n) not in seen:
                        seen[id(n)] = n
                        nxt.append(n)
            layer = nxt
        return cls(seen.values(), r)

    def contains_vertex(self, v: TreeNode) -> bool:
        return id(v) in self.index

    def interior_vertices(self) -> list[TreeNode]:
        return [v for i, v in enumerate(self.nodes) if not self.leaf[i]]

    def boundary_vertices(self) -> list[TreeNode]:
        return [v for i, v in enumerate(self.nodes) if self.leaf[i]]

    def locate(self, z: HtPoint) -> tuple[int, bool]:
        """Node-table index and on-line flag for a start point."""
        v = z.w.edge_upper
        if id(v) not in self.index:
            raise DomainError(f"start point {z} is not in the domain")
        i = self.index[id(v)]
        if abs(z.x) >= self.r:
            raise DomainError(f"start point {z} violates |x| < {self.r}")
        if z.w.is_vertex:
            return i, True
        if self.parent[i] < 0:
            raise DomainError(f"start point {z} lies on an edge outside the domain")
        return i, False

    def describe(self) -> dict:
        return {"tree": [v.address for v in self.nodes], "r": self.r}


# --------------------------------------------------------------------------
# samples

@dataclass(frozen=True)
class ExitSample:
    exit_point: HtPoint
    exit_time: float
    hit_line: Optional[TreeNode]
    side: str  # "hor" or "vert"

    def to_json(self) -> dict:
        d = self.exit_point.to_json()
        return {"x": d["x"], "u": d["u"], "w": d["w"], "t": d["t"],
                "t_exit": self.exit_time, "side": self.side}


class ExitBatch(Sequence[ExitSample]):
    """Exit data of many paths, stored column-wise."""

    def __init__(self, domain: StripDomain, q: float, x, u, node, t, side, steps):
        self.domain = domain
        self.q = q
        self.x = np.asarray(x)
        self.u = np.asarray(u)
        self.node = np.asarray(node)
        self.t = np.asarray(t)
        self.side = np.asarray(side)
        self.steps = np.asarray(steps)

    def __len__(self):
        return self.x.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        v = self.domain.nodes[int(self.node[i])]
        if self.side[i] == 0:
            w = tree_point(v)
            return ExitSample(HtPoint(float(self.x[i]), float(self.u[i]), w), float(self.t[i]), v, "hor")
        pt = HtPoint.from_xu(float(self.x[i]), float(self.u[i]), v, self.q)
        return ExitSample(pt, float(self.t[i]), None, "vert")

    @property
    def horizontal(self) -> np.ndarray:
        return self.side == 0

    @property
    def levels(self) -> np.ndarray:
        """Horocycle index of the exit line (NaN for side exits)."""
        h = self.domain.height[self.node].astype(float)
        h[~self.horizontal] = np.nan
        return h

    def points(self) -> list[HtPoint]:
        return [s.exit_point for s in self]

    def evaluate(self, f: Callable[[HtPoint], float]) -> np.ndarray:
        return np.array([f(s.exit_point) for s in self], dtype=float)

    @classmethod
    def concat(cls, batches: Sequence["ExitBatch"]) -> "ExitBatch":
        b0 = batches[0]
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])  # noqa: E731
        return cls(b0.domain, b0.q, cat("x"), cat("u"), cat("node"), cat("t"), cat("side"), cat("steps"))

    def write_jsonl(self, fh, meta: Optional[dict] = None) -> None:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        for s in self:
            fh.write(json.dumps(s.to_json()) + "\n")


class EmbeddedStep(NamedTuple):
    delta_level: int
    child_index: Optional[int]
    duration: float
    exit_x: float


@dataclass
class EmbeddedBatch:
    """Column-wise embedded steps; ``child_index`` is -1 for downward steps."""

    delta_level: np.ndarray
    child_index: np.ndarray
    duration: np.ndarray
    exit_x: np.ndarray

    def __len__(self):
        return self.delta_level.shape[0]

    def __getitem__(self, i) -> EmbeddedStep:
        c = int(self.child_index[i])
        return EmbeddedStep(int(self.delta_level[i]), c if c >= 0 else None,
                            float(self.duration[i]), float(self.exit_x[i]))

    @property
    def up_fraction(self) -> float:
        return float(np.mean(self.delta_level == 1))


# --------------------------------------------------------------------------
# single-path stepping

@dataclass(frozen=True)
class RngCounter:
    seed: int
    replica: int = 0
    path: int = 0
    step: int = 0

    def advance(self) -> "RngCounter":
        return replace(self, step=self.step + 1)


@dataclass(frozen=True)
class PathState:
    point: HtPoint
    time: float = 0.0
    rng: RngCounter = field(default_factory=lambda: RngCounter(0))

    @classmethod
    def start(cls, point: HtPoint, cfg: SimConfig, path: int = 0) -> "PathState":
        return cls(point, 0.0, RngCounter(cfg.seed, cfg.replica, path, 0))


def _consts(params: Params):
    return params.log_q, params.p, params.up_weight / (1.0 + params.up_weight), params.alpha - 1.0


def _finish_step(state, strip, x1, u1, cfg, params, dt, u_start, skip):
    log_q = params.log_q
    lo = (strip.height - 1) * log_q
    hi = strip.height * log_q
    c = state.rng
    xb, ub, el, kind = _engine.advance(state.point.x, u_start, x1, u1, dt, lo, hi, math.inf, skip,
                                       cfg.line_tol, np.uint64(c.seed), c.replica, c.path, c.step)
    if kind == _engine.INSIDE:
        return PathState(HtPoint.from_xu(xb, ub, strip, params.q), state.time + el, c.advance())
    v = strip if kind == _engine.UPPER else strip.parent
    return PathState(HtPoint(xb, ub, tree_point(v)), state.time + el, c.advance())


def step_interior(state: PathState, cfg: SimConfig, params: Params) -> PathState:
    """One Euler-Maruyama step from a point strictly inside a strip.

    A crossing of the strip's upper or lower line is localized by time
    bisection and the state is clamped onto that line (vertex form).  A
    crossing hidden inside the step (both endpoints in the strip) is detected
    with the Brownian-bridge hitting probability.
    """
    z = state.point
    log_q = params.log_q
    if z.w.is_vertex or abs(z.u / log_q - round(z.u / log_q)) * log_q <= cfg.line_tol:
        raise DomainError("step_interior needs a point strictly inside a strip")
    dt = cfg.step(params)
    _, p, theta, drift = _consts(params)
    c = state.rng
    x1, u1, _ = _engine.propose(z.x, z.u, False, p, theta, drift, dt,
                                np.uint64(c.seed), c.replica, c.path, c.step)
    return _finish_step(state, z.w.edge_upper, x1, u1, cfg, params, dt, z.u, _engine.NO_SKIP)


def resolve_line(state: PathState, cfg: SimConfig, params: Params) -> tuple[TreeNode, PathState]:
    """Pick the strip of the next excursion from a line L_v and take the departure step.

    Returns the upper endpoint of the chosen strip (``v`` itself for the strip
    below, a child ``w`` of ``v`` for a strip above) and the new state.
    """
    z = state.point
    v = z.w.vertex
    if v is None:
        raise DomainError("resolve_line needs a point on a bifurcation line")
    dt = cfg.step(params)
    log_q, p, theta, drift = _consts(params)
    c = state.rng
    x1, u1, d = _engine.propose(z.x, z.u, True, p, theta, drift, dt,
                                np.uint64(c.seed), c.replica, c.path, c.step)
    strip = v if d == -1 else v.child(d)
    u_line = v.height * log_q
    skip = _engine.SKIP_UPPER if d == -1 else _engine.SKIP_LOWER
    return strip, _finish_step(state, strip, x1, u1, cfg, params, dt, u_line, skip)


# --------------------------------------------------------------------------
# batch sampling

def sample_exit(start: HtPoint, domain: StripDomain, n: int, cfg: SimConfig, params: Params,
                path_offset: int = 0) -> ExitBatch:
    """Exit positions of ``n`` independent paths started at ``start``.

    Raises
    ------
    StepBudgetExceeded
        If any path is still inside after ``cfg.max_steps`` steps.
    """
    if domain.p != params.p:
        raise DomainError("domain tree and params disagree on p")
    start.check(params.q, tol=1e-9)
    i0, on0 = domain.locate(start)
    dt = cfg.step(params)
    log_q, p, theta, drift = _consts(params)
    ids = np.arange(path_offset, path_offset + n, dtype=np.int64)
    xs, us, nodes, ts, sides, steps, status = _engine.run_batch(
        np.full(n, start.x), np.full(n, start.u), np.full(n, i0, dtype=np.int64),
        np.full(n, on0, dtype=np.bool_), ids,
        domain.height, domain.parent, domain.children, domain.leaf,
        log_q, p, theta, drift, dt, cfg.line_tol, cfg.max_steps, domain.r,
        np.uint64(cfg.seed), cfg.replica)
    bad = int(np.sum(status == _engine.BUDGET))
    if bad:
        raise StepBudgetExceeded(f"{bad} of {n} paths exhausted max_steps={cfg.max_steps}")
    return ExitBatch(domain, params.q, xs, us, nodes, ts, sides, steps)


def sample_exit_replicas(start: HtPoint, domain: StripDomain, n: int, replicas: int,
                         cfg: SimConfig, params: Params, workers: int = 1) -> ExitBatch:
    """``replicas`` independent blocks of ``n`` paths, merged in replica order."""
    cfgs = [replace(cfg, replica=cfg.replica + k) for k in range(replicas)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(lambda c: sample_exit(start, domain, n, c, params), cfgs))
    return ExitBatch.concat(parts)


def sample_exit_rect(start: HtPoint, v: TreeNode, r: float, cfg: SimConfig, params: Params,
                     n: int = 1) -> ExitBatch:
    """Exits from the rectangular star ``Omega_{v,r}``."""
    return sample_exit(start, StripDomain.star(v, r), n, cfg, params)


def sample_exit_star_union(start: HtPoint, nodes: Iterable[TreeNode], cfg: SimConfig,
                           params: Params, n: int = 1) -> ExitBatch:
    """Exits from ``Omega_T`` for a finite full subtree ``T``."""
    return sample_exit(start, StripDomain(nodes), n, cfg, params)


def embedded_steps(n: int, cfg: SimConfig, params: Params, start: Optional[HtPoint] = None,
                   tree=None, replicas: int = 1, workers: int = 1) -> EmbeddedBatch:
    """``n`` independent steps of the chain observed at successive line visits.

    With ``replicas > 1`` the steps come from that many replica streams of
    ``n // replicas`` paths each (``n`` must be divisible).
    """
    if start is None:
        if tree is None:
            from .geometry import Tree
            tree = Tree(params.p)
        start = reference_point(tree)
    v = start.w.vertex
    if v is None:
        raise DomainError("embedded steps start on a bifurcation line")
    if replicas < 1 or n % replicas:
        raise DomainError(f"n={n} is not a multiple of replicas={replicas}")
    dom = StripDomain.star(v)
    if replicas == 1:
        b = sample_exit(start, dom, n, cfg, params)
    else:
        b = sample_exit_replicas(start, dom, n // replicas, replicas, cfg, params, workers)
    level = (dom.height[b.node] - v.height).astype(np.int64)
    exit_nodes = [dom.nodes[i] for i in b.node]
    child = np.array([w.index if lv == 1 else -1 for w, lv in zip(exit_nodes, level)], dtype=np.int64)
    return EmbeddedBatch(level, child, b.t.copy(), b.x.copy())


def embedded_step(start: HtPoint, cfg: SimConfig, params: Params, path: int = 0) -> EmbeddedStep:
    v = start.w.vertex
    if v is None:
        raise DomainError("embedded steps start on a bifurcation line")
    b = sample_exit(start, StripDomain.star(v), 1, cfg, params, path_offset=path)
    w = b.domain.nodes[int(b.node[0])]
    dl = w.height - v.height
    return EmbeddedStep(dl, w.index if dl == 1 else None, float(b.t[0]), float(b.x[0]))


class DriftEstimate(NamedTuple):
    ell_hat: float
    stderr: float
    mean_level: float
    mean_duration: float
    duration_sd: float
    n: int


def ratio_stderr(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Ratio of sample means and its delta-method standard error."""
    n = num.shape[0]
    mn, md = float(np.mean(num)), float(np.mean(den))
    cov = np.cov(np.vstack([num, den]), ddof=1)
    var = (cov[0, 0] / md ** 2 - 2 * mn * cov[0, 1] / md ** 3 + mn ** 2 * cov[1, 1] / md ** 4) / n
    return mn / md, math.sqrt(max(var, 0.0))


def estimate_drift(cfg: SimConfig, params: Params, n_steps: int, replicas: int = 1,
                   workers: int = 1) -> DriftEstimate:
    """Rate of escape ``ln q * E[level step] / E[duration]`` from embedded steps.

    Steps are i.i.d. copies of the first step from the reference point; the
    group of HT acts transitively on lines, so this is the stationary
    increment law of the embedded chain.  Durations follow the unhalved
    generator time scale.
    """
    if n_steps < 1000:
        raise DomainError("estimate_drift needs at least 1000 embedded steps")
    b = embedded_steps(n_steps, cfg, params, replicas=replicas, workers=workers)
    ratio, se = ratio_stderr(b.delta_level.astype(float), b.duration)
    lq = params.log_q
    return DriftEstimate(lq * ratio, lq * se, float(np.mean(b.delta_level)),
                         float(np.mean(b.duration)), float(np.std(b.duration, ddof=1)), n_steps)


class MCEstimate(NamedTuple):
    mean: float
    stderr: float
    n: int


def mc_mean(values: np.ndarray) -> MCEstimate:
    n = values.shape[0]
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return MCEstimate(float(np.mean(values)), se, n)


def dirichlet_mc(start: HtPoint, domain: StripDomain, f: Callable[[HtPoint], float], n: int,
                 cfg: SimConfig, params: Params) -> MCEstimate:
    """Monte Carlo solution ``E f(X_tau)`` of the Dirichlet problem at ``start``."""
    b = sample_exit(start, domain, n, cfg, params)
    return mc_mean(b.evaluate(f))
