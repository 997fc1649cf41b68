import csv

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from metric_amg.amg import HierarchyOptions, build_hierarchy, preconditioned_spectrum, two_level_additive
from metric_amg.assembly import ProblemSpec, build_system
from metric_amg.krylov import IndefiniteError, estimate_condition, lanczos_extremes, pcg, write_histories


def test_identity_one_iteration(rng):
    x, rep = pcg(sp.identity(7, format="csr"), rng.standard_normal(7))
    assert rep.iterations == 1 and rep.converged


def test_perfect_preconditioner():
    A = np.diag([1.0, 10.0])
    x, rep = pcg(A, np.array([1.0, 1.0]), np.linalg.inv(A))
    assert rep.iterations == 1
    assert rep.cond_estimate == pytest.approx(1.0)
    assert np.allclose(x, [1.0, 0.1])


def test_condition_of_known_spectrum():
    A = sp.diags(np.arange(1.0, 101.0)).tocsr()
    _, rep = pcg(A, np.ones(100), tol=1e-10)
    assert rep.converged
    assert rep.cond_estimate == pytest.approx(100.0, rel=0.05)


def test_estimate_condition_examples():
    A = np.diag([2.0, 3.0, 7.0])
    lo, hi = estimate_condition(A, np.linalg.inv(A))
    assert lo == pytest.approx(1.0) and hi == pytest.approx(1.0)
    lo, hi = estimate_condition(sp.diags(np.arange(1.0, 101.0)).tocsr(), None, n_iters=30)
    assert hi == pytest.approx(100.0, rel=0.05)
    with pytest.raises(ValueError):
        estimate_condition(lambda v: v, None)


def test_lanczos_estimate_is_bracketed_by_dense_oracle():
    s = build_system(ProblemSpec(model="bidomain", n=9, gamma=1e4))
    H = build_hierarchy(s, HierarchyOptions(prolongation="paired", c_agg=4, max_levels=2, coarse_size_cap=1))
    B = two_level_additive(s.A, H.levels[0].P, H.meta["patches"])
    lam = preconditioned_spectrum(s.A, B)
    _, rep = pcg(s.A, s.rhs(), B, tol=1e-10)
    assert lam[0] * (1 - 1e-8) <= rep.lambda_min and rep.lambda_max <= lam[-1] * (1 + 1e-8)
    assert rep.cond_estimate <= lam[-1] / lam[0] * (1 + 1e-8)


def test_indefinite_operator_reported():
    with pytest.raises(IndefiniteError) as err:
        pcg(np.diag([1.0, -1.0]), np.array([1.0, 1.0]))
    assert err.value.iteration == 0


def test_indefinite_preconditioner_reported():
    with pytest.raises(IndefiniteError, match="preconditioner") as err:
        pcg(np.eye(2), np.array([1.0, 2.0]), np.diag([1.0, -1.0]))
    assert err.value.iteration == 0


def test_unknown_criterion():
    with pytest.raises(ValueError):
        pcg(np.eye(2), np.ones(2), criterion="energy")


def test_zero_rhs():
    x, rep = pcg(np.eye(3), np.zeros(3))
    assert rep.converged and rep.iterations == 0 and not x.any()


def test_history_and_criteria(rng):
    A = sp.diags(np.linspace(1, 50, 60)).tocsr()
    b = rng.standard_normal(60)
    B = sp.diags(1.0 / np.linspace(1, 50, 60) * (1 + 0.3 * np.sin(np.arange(60)))).tocsr()
    for crit in ("rel_l2_residual", "rel_precond_residual"):
        x, rep = pcg(A, b, B, tol=1e-8, criterion=crit)
        assert len(rep.residual_history) == rep.iterations + 1
        assert rep.residual_history[-1] <= 1e-8 and rep.residual_history[0] == 1.0
    assert np.linalg.norm(A @ x - b) <= 1e-6 * np.linalg.norm(b)


@st.composite
def spd_pairs(draw):
    n = draw(st.integers(2, 25))
    seed = draw(st.integers(0, 2 ** 31 - 1))
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    Y = rng.standard_normal((n, n))
    return X @ X.T + 0.1 * np.eye(n), Y @ Y.T + 0.1 * np.eye(n), rng.standard_normal(n)


@given(spd_pairs())
def test_energy_error_decreases(case):
    A, B, b = case
    xs = np.linalg.solve(A, b)
    errs = []
    for k in range(1, len(b) + 1):
        x, _ = pcg(A, b, B, tol=0.0, max_iter=k)
        e = x - xs
        errs.append(e @ A @ e)
    scale = xs @ A @ xs
    assert all(e2 <= e1 + 1e-10 * scale for e1, e2 in zip(errs, errs[1:]))


def test_bitwise_reproducible():
    s = build_system(ProblemSpec(model="emi", n=32, gamma=1e6))
    runs = []
    for _ in range(2):
        H = build_hierarchy(s, HierarchyOptions(c_agg=4))
        x, rep = pcg(s.A, s.rhs(), H, tol=1e-10, criterion="rel_precond_residual")
        runs.append((x, rep.residual_history))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_csv_exports(tmp_path):
    _, r1 = pcg(np.diag([1.0, 2.0, 3.0]), np.ones(3))
    _, r2 = pcg(np.eye(3), np.ones(3))
    r1.to_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["iteration", "residual"] and len(rows) == r1.iterations + 2
    write_histories(tmp_path / "all.csv", [r1, r2], ["diag", "eye"])
    rows = list(csv.reader(open(tmp_path / "all.csv")))
    assert rows[0] == ["iteration", "diag", "eye"]
    assert rows[-1][2] == ""


def test_lanczos_of_empty_and_single():
    assert all(np.isnan(lanczos_extremes([], [])))
    assert lanczos_extremes([0.5], []) == (2.0, 2.0)
