"""The primary acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import json
import math
import random
import time

import numpy as np
import pytest
from scipy import stats

from treebolic.cli import main
from treebolic.experiments import (CRITERION_ONE_GRID, ExperimentConfig, run_dirichlet_compare,
                                   run_drift, run_exit_tails, run_harmonicity)
from treebolic.fdsolver import StripGrid, discrete_green_column
from treebolic.geometry import HtPoint, Tree, TreeEnd, make_params, tree_point
from treebolic.kernels import (TreeWalkLaw, extend_tree_harmonic, kirchhoff_residual,
                               lambda_interp, martin_kernel_tree, plane_residual,
                               poisson_kernel_H)
from treebolic.simulate import SimConfig, StripDomain, embedded_steps, sample_exit

pytestmark = pytest.mark.slow

SIX_SETS = [((2, 2, 1, 1), 2 / 3), ((2, 2, 1, 0.5), 1 / 2), ((3, 2, 0, 1), 0.4),
            ((2, 3, 1, 1), 3 / 4), ((2, 2, 2, 0.25), 1 / 2), ((2, 1, 1, 1), 1 / 2)]


def _random_vertex(tree, rng):
    v = tree.ancestor_of_root(rng.randint(0, 3))
    for _ in range(rng.randint(0, 6)):
        v = v.child(rng.randrange(tree.p))
    return v


def _random_end(tree, rng):
    if rng.random() < 0.2:
        return TreeEnd.varpi()
    anchor = _random_vertex(tree, rng)
    word = [rng.randrange(tree.p) for _ in range(rng.randint(1, 3))]
    return TreeEnd.periodic(anchor, word)


def test_c01_embedded_up_probability(criterion):
    t0 = time.time()
    zs = []
    for qpab, target in SIX_SETS:
        prm = make_params(*qpab)
        assert prm.a / (1 + prm.a) == pytest.approx(target)
        n = 100_000
        b = embedded_steps(n, SimConfig(seed=101), prm)
        zs.append((b.up_fraction - target) / math.sqrt(target * (1 - target) / n))
    elapsed = time.time() - t0
    ok = all(abs(z) <= 3 for z in zs) and elapsed <= 600
    detail = "z = " + ", ".join(f"{z:+.2f}" for z in zs) + f"; {elapsed:.0f} s"
    assert criterion(1, "embedded up-probability, six sets, N=1e5", ok, detail), detail


def test_c02_tree_projection_law(criterion):
    parts, ok = [], True
    for qpab in [(2, 3, 1, 1), (3, 2, 0, 1)]:
        prm = make_params(*qpab)
        n = 100_000
        b = embedded_steps(n, SimConfig(seed=202), prm)
        law = TreeWalkLaw(prm)
        down = float(np.mean(b.delta_level == -1))
        z = (down - law.down_prob) / math.sqrt(law.down_prob * (1 - law.down_prob) / n)
        counts = np.bincount(b.child_index[b.child_index >= 0], minlength=prm.p)
        pval = stats.chisquare(counts).pvalue
        ok = ok and abs(z) <= 3 and pval > 1e-3
        parts.append(f"{qpab}: z={z:+.2f} chi2 p={pval:.3f}")
    detail = "; ".join(parts)
    assert criterion(2, "tree-projection law, N=1e5", ok, detail), detail


def test_c03_martin_harmonicity(criterion):
    rng = random.Random(303)
    worst = {}
    for a in (0.5, 1.0, 2.0):
        prm = make_params(2, 2, 1, a / 2)
        tree = Tree(2)
        law = TreeWalkLaw(prm)
        w = 0.0
        for _ in range(100):
            v = _random_vertex(tree, rng)
            xi = _random_end(tree, rng)
            k = martin_kernel_tree(v, xi, prm)
            s = sum(law(v, u) * martin_kernel_tree(u, xi, prm) for u in v.neighbours())
            w = max(w, abs(k - s))
        worst[a] = w
    ok = all(w < 1e-12 for w in worst.values())
    detail = ", ".join(f"a={a}: {w:.1e}" for a, w in worst.items())
    assert criterion(3, "tree Martin kernel harmonicity, 100 pairs per a", ok, detail), detail


def test_c04_poisson_annihilation(criterion):
    rng = np.random.default_rng(404)
    ratios = []
    for _ in range(50):
        x, y = rng.uniform(-2, 2), rng.uniform(0.5, 2)
        zeta, alpha = rng.uniform(-2, 2), rng.uniform(-1, 3)
        F = lambda a, b: poisson_kernel_H(a, b, zeta, alpha)  # noqa: E731
        h = 0.005 * y
        ratios.append(plane_residual(F, x, y, alpha, h) / plane_residual(F, x, y, alpha, h / 2))
    ratios = np.array(ratios)
    ok = bool(np.all(np.abs(ratios - 4) <= 0.5))
    detail = f"ratio range [{ratios.min():.3f}, {ratios.max():.3f}] over 50 samples, h = 0.005 y"
    assert criterion(4, "Poisson-kernel residual ratio 4 +- 0.5", ok, detail), detail


def test_c05_interpolation_kirchhoff(criterion):
    rng = random.Random(505)
    worst, ends_ok = 0.0, True
    for alpha in (0.0, 1.0, 2.5):
        for beta in (0.3, 0.5, 1.0):
            prm = make_params(2, 2, alpha, beta)
            ends_ok = ends_ok and lambda_interp(0.0, prm) == 0.0 and lambda_interp(1.0, prm) == 1.0
            tree = Tree(2)
            # random positive combination of Martin kernels: walk-harmonic vertex data
            xis = [_random_end(tree, rng) for _ in range(3)]
            cs = [rng.uniform(0.1, 2.0) for _ in xis]
            f = lambda v: sum(c * martin_kernel_tree(v, xi, prm) for c, xi in zip(cs, xis))  # noqa: E731
            for _ in range(20):
                v = _random_vertex(tree, rng)
                ends_ok = ends_ok and extend_tree_harmonic(f, tree_point(v), prm) == f(v)
                worst = max(worst, abs(kirchhoff_residual(f, v, prm)))
    ok = ends_ok and worst < 1e-10
    detail = f"endpoints exact: {ends_ok}; max Kirchhoff residual {worst:.1e}"
    assert criterion(5, "harmonic interpolation, alpha in {0, 1, 2.5}", ok, detail), detail


@pytest.fixture(scope="module")
def dirichlet_report():
    cfg = ExperimentConfig.from_json({"params": [[2, 2, 2, 0.5]], "sim": {"n": 10_000, "seed": 606},
                                      "domain": {"r": 3.0}, "grid": {"nu": 8, "levels": 4, "aspect": 8}})
    t0 = time.time()
    rep = run_dirichlet_compare(cfg)
    return rep, time.time() - t0


def test_c06_dirichlet_cross_validation(criterion, dirichlet_report):
    rep, elapsed = dirichlet_report
    rows_ok = all(r["pass"] for r in rep.rows)
    orders = sorted({r["orders"] for r in rep.rows})
    worst_z = max(abs(r["mc"] - r["fd"]) / r["tolerance"] for r in rep.rows)
    ok = rows_ok and elapsed <= 900
    detail = (f"{len(rep.rows)} probe rows, orders {orders}, worst |MC-FD|/tol {worst_z:.2f}; "
              f"{elapsed:.0f} s")
    assert criterion(6, "Dirichlet FD vs analytic and MC on the r=3 star", ok, detail), detail


def test_c07_poisson_mass(criterion):
    prm = make_params(2, 2, 2, 0.5)
    tree = Tree(2)
    dom = StripDomain.star(tree.root, 3.0)
    src = HtPoint.from_xu(0.0, -0.5 * prm.log_q, tree.root, prm.q)
    gaps = []
    for nu in (8, 16):
        g = StripGrid(dom, 8 * nu, nu, prm.q)
        _, K = discrete_green_column(g, src, prm)
        gaps.append((g.hu, abs(1.0 - K.mass)))
    ok = gaps[1][1] < gaps[0][1] and all(gap <= hu for hu, gap in gaps)
    detail = ", ".join(f"h_u={hu:.4f}: |1-mass|={gap:.2e}" for hu, gap in gaps)
    assert criterion(7, "discrete Poisson mass at two levels", ok, detail), detail


def test_c08_exit_tails(criterion):
    cfg = ExperimentConfig.from_json({"params": [[3, 2, 1, 1]], "sim": {"n": 100_000, "seed": 808}})
    rep = run_exit_tails(cfg)
    s = rep.summary["[3.0,2,1.0,1.0]"]
    masses = [r["vertical_mass"] for r in rep.rows]
    detail = ("q=3 masses " + " ".join(f"{m:.2e}" for m in masses)
              + f"; R^2={s['r2']:.4f}, rho_hat={s['rho_hat']:.3f}")
    assert criterion(8, "exit tails over r = 2..6", rep.passed, detail), detail


def test_c09_liouville_boundary(criterion):
    cfg = ExperimentConfig.from_json({"params": [list(t) for t in CRITERION_ONE_GRID],
                                      "sim": {"n": 100_000, "seed": 909}})
    rep = run_drift(cfg)
    detail = "; ".join(f"a={r['a']:.3g}: ell={r['ell_hat']:+.4f}+-{r['stderr']:.4f} "
                       f"sign {r['ell_sign_hat']:+d}/{r['ell_sign_expected']:+d}" for r in rep.rows)
    assert criterion(9, "drift sign and zero drift at a = 1", rep.passed, detail), detail


def test_c10_mu_harmonicity(criterion):
    cfg = ExperimentConfig.from_json({"params": [[2, 2, 2, 0.5], [2, 2, 1, 0.5]],
                                      "sim": {"n": 10_000, "seed": 1010}})
    rep = run_harmonicity(cfg)
    worst = max(abs(r["mu_residual"]) / r["mu_stderr"] if r["mu_stderr"] else 0.0 for r in rep.rows)
    detail = f"{len(rep.rows)} kernels, worst |residual|/stderr {worst:.2f}"
    assert criterion(10, "mu-harmonicity of minimal harmonic functions, N=1e4", rep.passed, detail), detail


def test_c11_determinism_and_step_size(criterion, tmp_path, capsys):
    # byte-identical repeated runs
    doc = {"params": [[2, 2, 1, 1]], "sim": {"n": 20_000, "seed": 1111}}
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(doc))
    for d in ("a", "b"):
        main(["embedded-chain", "--config", str(cfgp), "--out", str(tmp_path / d)])
    capsys.readouterr()
    same_json = (tmp_path / "a/embedded-chain.json").read_bytes() == (tmp_path / "b/embedded-chain.json").read_bytes()
    ca = (tmp_path / "a/embedded-chain.csv").read_text().splitlines()[1:]
    cb = (tmp_path / "b/embedded-chain.csv").read_text().splitlines()[1:]
    prm = make_params(2, 2, 1, 1)
    z0 = HtPoint(0.0, 0.0, tree_point(Tree(2).root))
    dom = StripDomain.star(z0.w.vertex, 3.0)
    e1 = sample_exit(z0, dom, 2000, SimConfig(seed=5), prm)
    e2 = sample_exit(z0, dom, 2000, SimConfig(seed=5), prm)
    same_batch = all(getattr(e1, c).tobytes() == getattr(e2, c).tobytes() for c in ("x", "u", "node", "t"))
    # dt against dt/4
    zs = []
    for qpab in [(3, 2, 0, 1), (2, 2, 2, 0.25), (2, 2, 1, 1)]:
        p = make_params(*qpab)
        dt = SimConfig().step(p)
        n = 100_000
        a = embedded_steps(n, SimConfig(seed=1112, dt=dt), p)
        b = embedded_steps(n, SimConfig(seed=1113, dt=dt / 4), p)
        se = math.sqrt(a.up_fraction * (1 - a.up_fraction) / n + b.up_fraction * (1 - b.up_fraction) / n)
        zs.append((a.up_fraction - b.up_fraction) / se)
    ok = same_json and ca == cb and same_batch and all(abs(z) <= 3 for z in zs)
    detail = (f"byte-identical: json {same_json}, csv rows {ca == cb}, exits {same_batch}; "
              "dt vs dt/4 z = " + ", ".join(f"{z:+.2f}" for z in zs))
    assert criterion(11, "determinism and step-size stability", ok, detail), detail
