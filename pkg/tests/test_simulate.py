import io
import json
import math

import numpy as np
import pytest
from scipy import stats

from treebolic.geometry import (DomainError, HtPoint, Tree, make_params, reference_point,
                                tree_point)
from treebolic.kernels import BoundaryParam, minimal_harmonic_ht
from treebolic.simulate import (PathState, SimConfig, StepBudgetExceeded, StripDomain,
                                dirichlet_mc, embedded_step, embedded_steps, estimate_drift,
                                resolve_line, sample_exit, sample_exit_rect,
                                sample_exit_replicas, sample_exit_star_union, step_interior)

LQ2 = math.log(2.0)


def within(est, target, se, k=3.0):
    return abs(est - target) <= k * se


# ---------------------------------------------------------------- single steps

@pytest.fixture(scope="module")
def interior_moves():
    prm = make_params(2, 2, 1, 1)
    t = Tree(2)
    cfg = SimConfig(seed=11)
    z = HtPoint.from_xu(0.0, 0.5 * LQ2, t.root.child(0), 2.0)
    n = 100_000
    du = np.empty(n)
    dx = np.empty(n)
    for i in range(n):
        s = step_interior(PathState.start(z, cfg, path=i), cfg, prm)
        du[i] = s.point.u - z.u
        dx[i] = s.point.x - z.x
        assert 0 < s.time <= cfg.step(prm)
    return du, dx, cfg.step(prm), z


def test_interior_step_u_moments(interior_moves):
    du, _, dt, _ = interior_moves
    n = du.size
    assert within(du.mean(), 0.0, du.std() / math.sqrt(n))
    assert within(du.var(), 2 * dt, 2 * dt * math.sqrt(2 / n))


def test_interior_step_x_moments(interior_moves):
    _, dx, dt, z = interior_moves
    n = dx.size
    v = 2 * math.exp(2 * z.u) * dt
    assert within(dx.mean(), 0.0, math.sqrt(v / n))
    assert within(dx.var(), v, v * math.sqrt(2 / n))


def test_interior_step_drift():
    prm = make_params(2, 2, 3, 1)
    cfg = SimConfig(seed=2)
    z = HtPoint.from_xu(0.0, 0.5 * LQ2, Tree(2).root.child(0), 2.0)
    du = np.array([step_interior(PathState.start(z, cfg, path=i), cfg, prm).point.u - z.u
                   for i in range(20_000)])
    assert within(du.mean(), 2.0 * cfg.step(prm), du.std() / math.sqrt(du.size))


def test_step_interior_rejects_line_points(origin, params_a2):
    with pytest.raises(DomainError):
        step_interior(PathState.start(origin, SimConfig()), SimConfig(), params_a2)


def test_step_clamps_onto_line():
    prm = make_params(2, 2, 1, 1)
    t = Tree(2)
    cfg = SimConfig(seed=3, dt=0.05)
    z = HtPoint.from_xu(0.0, LQ2 - 0.01, t.root.child(1), 2.0)
    hits = 0
    for i in range(200):
        s = step_interior(PathState.start(z, cfg, path=i), cfg, prm)
        s.point.check(2.0, tol=1e-12)
        if s.point.w.is_vertex:
            hits += 1
            v = s.point.w.vertex
            assert v in (t.root, t.root.child(1))
            assert s.point.u == pytest.approx(LQ2 * v.height, abs=1e-15)
            assert 0 < s.time <= cfg.dt
    assert hits > 100


@pytest.mark.parametrize("qpab, target", [((2, 1, 1, 1), 0.5), ((2, 2, 1, 0.5), 0.5), ((2, 2, 1, 1), 2 / 3)])
def test_resolve_line_sign_frequency(qpab, target):
    prm = make_params(*qpab)
    t = Tree(prm.p)
    z = reference_point(t)
    cfg = SimConfig(seed=5)
    n = 100_000
    up = 0
    for i in range(n):
        strip, s = resolve_line(PathState.start(z, cfg, path=i), cfg, prm)
        if strip is not t.root:
            assert strip.parent is t.root
            up += 1
        # the new state is in (or on a line of) the chosen strip
        w = s.point.w
        assert w.edge_upper in (strip, strip.parent) or w.vertex in (strip, strip.parent)
    assert within(up / n, target, math.sqrt(target * (1 - target) / n))


# ---------------------------------------------------------------- embedded chain

def test_embedded_step_record(origin, params_a2):
    st = embedded_step(origin, SimConfig(seed=1), params_a2)
    assert st.delta_level in (-1, 1)
    assert (st.child_index is not None) == (st.delta_level == 1)
    assert st.duration > 0


def test_embedded_batch_matches_single_steps(params_a2):
    cfg = SimConfig(seed=9)
    b = embedded_steps(20, cfg, params_a2)
    t = Tree(2)
    for i in range(20):
        s = embedded_step(reference_point(t), cfg, params_a2, path=i)
        assert s == b[i]


@pytest.mark.parametrize("qpab", [(2, 2, 1, 0.5), (2, 2, 1, 1)])
def test_embedded_up_probability(qpab):
    prm = make_params(*qpab)
    n = 100_000
    b = embedded_steps(n, SimConfig(seed=21), prm)
    target = prm.a / (1 + prm.a)
    assert within(b.up_fraction, target, math.sqrt(target * (1 - target) / n))


def test_embedded_children_uniform_p3():
    prm = make_params(2, 3, 1, 1)
    b = embedded_steps(100_000, SimConfig(seed=4), prm)
    counts = np.bincount(b.child_index[b.child_index >= 0], minlength=3)
    assert stats.chisquare(counts).pvalue > 1e-3
    assert np.all((b.child_index >= 0) == (b.delta_level == 1))


def test_embedded_from_other_line_same_law():
    prm = make_params(2, 2, 1, 1)
    t = Tree(2)
    start = HtPoint(3.0, 2 * LQ2, tree_point(t.root.child(1).child(0)))
    b = embedded_steps(50_000, SimConfig(seed=8), prm, start=start)
    assert within(b.up_fraction, 2 / 3, math.sqrt(2 / 9 / 50_000))


# ---------------------------------------------------------------- exits

def test_rect_exit_heights_and_sides(origin, tree2, params_a2):
    b = sample_exit_rect(origin, tree2.root, 2.0, SimConfig(seed=1), params_a2, n=5000)
    lv = b.levels[b.horizontal]
    assert set(np.unique(lv)) <= {-1.0, 1.0}
    for s in b[:200]:
        if s.side == "hor":
            assert s.exit_point.w.is_vertex and s.hit_line is s.exit_point.w.vertex
            assert abs(abs(s.exit_point.u) - LQ2) < 1e-12
        else:
            assert abs(s.exit_point.x) == 2.0
            s.exit_point.check(2.0, tol=1e-12)


def test_rect_wide_is_horizontal(origin, tree2, params_a2):
    b = sample_exit_rect(origin, tree2.root, 50.0, SimConfig(seed=2), params_a2, n=5000)
    assert b.horizontal.all()


def test_vertical_exit_mass_decreases():
    prm = make_params(3, 2, 1, 1)
    t = Tree(2)
    z = reference_point(t)
    masses = [np.mean(~sample_exit_rect(z, t.root, r, SimConfig(seed=3), prm, n=20_000).horizontal)
              for r in (2, 4, 6)]
    assert masses[0] > masses[1] > masses[2] > 0
    assert stats.linregress([2, 4, 6], np.log(masses)).slope < 0


def test_star_union_of_star_matches_rect(origin, tree2, params_a2):
    cfg = SimConfig(seed=6)
    o = tree2.root
    a = sample_exit_star_union(origin, [o, o.parent, *o.children], cfg, params_a2, n=2000)
    b = sample_exit_rect(origin, o, math.inf, cfg, params_a2, n=2000)
    assert a.horizontal.all()
    assert np.array_equal(a.x, b.x) and np.array_equal(a.t, b.t)


def test_exit_abscissa_tail_is_exponential(origin, tree2, params_a2):
    b = sample_exit_star_union(origin, StripDomain.ball(tree2.root, 1).nodes, SimConfig(seed=7),
                               params_a2, n=50_000)
    ax = np.abs(b.x)
    s = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
    tail = np.array([np.mean(ax > v) for v in s])
    assert np.all(tail > 0)
    assert stats.linregress(s, np.log(tail)).rvalue ** 2 > 0.9


def _ball2_exit_law(prm, tree):
    """Exact exit distribution from o of the tree walk killed at distance 2."""
    o = tree.root
    dom = StripDomain.ball(o, 2)
    idx = {id(v): i for i, v in enumerate(dom.nodes)}
    m = len(dom.nodes)
    P = np.zeros((m, m))
    down = 1 / (1 + prm.a)
    up = prm.a / ((1 + prm.a) * prm.p)
    for i, v in enumerate(dom.nodes):
        if dom.leaf[i]:
            P[i, i] = 1.0
            continue
        P[i, idx[id(v.parent)]] = down
        for c in v.children:
            P[i, idx[id(c)]] = up
    # absorbing probabilities from o
    dist = np.zeros(m)
    dist[idx[id(o)]] = 1.0
    for _ in range(2000):
        dist = dist @ P
    return dom, dist


def test_full_subtree_tree_marginal(tree2, origin):
    prm = make_params(2, 2, 1, 1)
    dom, law = _ball2_exit_law(prm, tree2)
    n = 20_000
    b = sample_exit(origin, dom, n, SimConfig(seed=12), prm)
    assert b.horizontal.all()
    counts = np.bincount(b.node, minlength=len(dom.nodes))
    leaves = np.flatnonzero(dom.leaf)
    assert counts[~dom.leaf].sum() == 0
    assert stats.chisquare(counts[leaves], law[leaves] * n).pvalue > 1e-3


def test_translation_invariance(tree2, params_a2):
    o = tree2.root
    dom = StripDomain.star(o)
    z = reference_point(tree2)
    zb = HtPoint(2.5, 0.0, z.w)
    a = sample_exit(z, dom, 10_000, SimConfig(seed=1), params_a2)
    b = sample_exit(zb, dom, 10_000, SimConfig(seed=2), params_a2)
    assert stats.ks_2samp(a.x + 2.5, b.x).pvalue > 1e-3


def test_domain_validation(tree2):
    o = tree2.root
    with pytest.raises(DomainError):
        StripDomain([o, o.parent, o.child(0)])  # o has only 2 of 3 neighbours
    with pytest.raises(DomainError):
        StripDomain([o])
    with pytest.raises(DomainError):
        StripDomain([o, o.parent, o.child(1).child(0), o.child(1).child(0).child(0)])
    single = StripDomain([o, o.parent])
    assert single.leaf.all()
    dom = StripDomain.star(o, 2.0)
    with pytest.raises(DomainError):
        dom.locate(HtPoint(3.0, 0.0, tree_point(o)))
    with pytest.raises(DomainError):
        dom.locate(HtPoint(0.0, 2 * LQ2, tree_point(o.child(0).child(0))))


def test_start_on_bounding_line_exits_immediately(tree2, params_a2):
    o = tree2.root
    z = HtPoint(0.0, LQ2, tree_point(o.child(0)))
    b = sample_exit(z, StripDomain.star(o), 3, SimConfig(), params_a2)
    assert np.all(b.t == 0) and np.all(b.steps == 0)


# ---------------------------------------------------------------- estimators

def test_dirichlet_constant(origin, tree2, params_a2):
    est = dirichlet_mc(origin, StripDomain.star(tree2.root, 2.0), lambda z: 1.0, 500, SimConfig(), params_a2)
    assert est.mean == 1.0 and est.stderr == 0.0


def test_dirichlet_minimal_harmonic():
    prm = make_params(2, 2, 2, 0.5)
    t = Tree(2)
    xi = BoundaryParam.real(0.5)
    h = lambda z: minimal_harmonic_ht(z, xi, prm)  # noqa: E731
    z = HtPoint.from_xu(0.3, -0.4 * LQ2, t.root, 2.0)
    est = dirichlet_mc(z, StripDomain.star(t.root, 2.0), h, 20_000, SimConfig(seed=4), prm)
    assert within(est.mean, h(z), est.stderr)


def test_dirichlet_upper_indicator(origin, tree2, params_a2):
    dom = StripDomain.star(tree2.root, 30.0)
    f = lambda z: 1.0 if (z.w.is_vertex and z.w.vertex.height == 1) else 0.0  # noqa: E731
    est = dirichlet_mc(origin, dom, f, 50_000, SimConfig(seed=5), params_a2)
    assert within(est.mean, 2 / 3, est.stderr)


def test_drift_zero_at_critical():
    e = estimate_drift(SimConfig(seed=1), make_params(2, 2, 1, 0.5), 50_000)
    assert abs(e.ell_hat) <= 3 * e.stderr


def test_drift_self_consistency():
    prm = make_params(2, 2, 1, 1)
    e = estimate_drift(SimConfig(seed=1), prm, 50_000)
    ind = estimate_drift(SimConfig(seed=2), prm, 50_000)
    formula = LQ2 * (1 / 3) / ind.mean_duration
    se_f = formula * ind.duration_sd / math.sqrt(ind.n) / ind.mean_duration
    assert within(e.ell_hat, formula, math.hypot(e.stderr, se_f))
    with pytest.raises(DomainError):
        estimate_drift(SimConfig(), prm, 10)


# ---------------------------------------------------------------- engineering

def test_determinism_bitwise(origin, tree2, params_a2):
    dom = StripDomain.star(tree2.root, 3.0)
    a = sample_exit(origin, dom, 2000, SimConfig(seed=99), params_a2)
    b = sample_exit(origin, dom, 2000, SimConfig(seed=99), params_a2)
    for name in ("x", "u", "node", "t", "side", "steps"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_replicas_independent_of_schedule(origin, tree2, params_a2):
    dom = StripDomain.star(tree2.root)
    a = sample_exit_replicas(origin, dom, 500, 4, SimConfig(seed=3), params_a2, workers=1)
    b = sample_exit_replicas(origin, dom, 500, 4, SimConfig(seed=3), params_a2, workers=4)
    assert a.x.tobytes() == b.x.tobytes()
    assert not np.array_equal(a.x[:500], a.x[500:1000])


def test_path_streams_do_not_depend_on_batch(origin, tree2, params_a2):
    dom = StripDomain.star(tree2.root)
    a = sample_exit(origin, dom, 100, SimConfig(seed=3), params_a2)
    b = sample_exit(origin, dom, 50, SimConfig(seed=3), params_a2, path_offset=50)
    assert np.array_equal(a.x[50:], b.x)


def test_step_budget(origin, tree2, params_a2):
    with pytest.raises(StepBudgetExceeded):
        sample_exit(origin, StripDomain.star(tree2.root), 10, SimConfig(max_steps=2), params_a2)


def test_jsonl_export(origin, tree2, params_a2):
    b = sample_exit(origin, StripDomain.star(tree2.root, 2.0), 20, SimConfig(seed=1), params_a2)
    buf = io.StringIO()
    b.write_jsonl(buf, {"seed": 1})
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("# ")
    rec = [json.loads(s) for s in lines[1:]]
    assert len(rec) == 20
    assert set(rec[0]) == {"x", "u", "w", "t", "t_exit", "side"}
    assert {r["side"] for r in rec} <= {"hor", "vert"}
    z = HtPoint.from_json(rec[0], tree2, 2.0)
    z.check(2.0)


def test_default_dt():
    prm = make_params(3, 2, 0, 1)
    assert SimConfig().step(prm) == pytest.approx(math.log(3) ** 2 / 100)
    with pytest.raises(DomainError):
        SimConfig(dt=-1.0).step(prm)
