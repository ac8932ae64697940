import numpy as np
import pytest

from manoc import expr as ex
from manoc.errors import EvaluationWarning, SchemaError


SYM = ex.SymbolTable(n=2, m=2)


def ev(src, x=(0.0, 0.0), u=(0.0, 0.0), t=0.0):
    return ex.eval_expr(ex.parse_expression(src, SYM), x, u, t)


def test_warga_dynamics_expressions():
    tree = ex.parse_expression("x2*(u1+u2)", SYM)
    assert ex.eval_expr(tree, (0.5, 2.0), (0.25, 0.75), 0.0) == pytest.approx(2.0)
    assert ev("u2 - x1", x=(0.0, 0.0), u=(0.0, -1.0)) == pytest.approx(-1.0)


def test_constant_and_precedence():
    assert ev("0") == 0.0
    assert ev("2+3*4") == 14.0
    assert ev("(2+3)*4") == 20.0
    assert ev("2^3^2") == 512.0  # right associative
    assert ev("-2^2") == -4.0
    assert ev("2^-2") == 0.25


def test_whitespace_insensitive():
    a = ev("x2*(u1+u2)", x=(0.0, 2.0), u=(0.5, 1.5))
    b = ev("  x2 * ( u1 + u2 )  ", x=(0.0, 2.0), u=(0.5, 1.5))
    assert a == b == 4.0


def test_unknown_identifier_reports_name_and_offset():
    with pytest.raises(SchemaError) as err:
        ex.parse_expression("x3 + 1", SYM)
    assert err.value.code == "expr_unknown_identifier"
    assert "x3" in str(err.value)
    with pytest.raises(SchemaError) as err:
        ex.parse_expression("x1 + @", SYM)
    assert "offset" in str(err.value)


def test_functions_and_time():
    assert ev("sin(t)", t=0.0) == 0.0
    assert ev("max(x1, u1)", x=(2.0, 0.0), u=(3.0, 0.0)) == 3.0
    assert ev("sqrt(abs(-4))") == 2.0


def test_nan_flagged():
    with pytest.warns(EvaluationWarning):
        out = ev("x1/x1", x=(0.0, 1.0))
    assert np.isnan(out)


def test_grad_state_hand_oracle():
    tree = ex.parse_expression("x2*(u1+u2)", SYM)
    g = ex.grad_state(tree, (0.0, 0.0), (1.0, 1.0), 0.0)
    assert np.allclose(g, [0.0, 2.0], atol=1e-9)
    const = ex.parse_expression("3.5", SYM)
    assert np.allclose(ex.grad_state(const, (1.0, 2.0), (0.0, 0.0), 0.0), 0.0)
    lin = ex.parse_expression("3*x1", SYM)
    assert np.allclose(ex.grad_state(lin, (0.7, -0.1), (0, 0), 0.0), [3.0, 0.0], atol=1e-9)


def test_grad_quadratic_polynomials():
    rng = np.random.default_rng(5)
    tree = ex.parse_expression("x1^2 + 3*x1*x2 - 0.5*x2^2 + u1*x1", SYM)
    for _ in range(25):
        x = rng.normal(size=2)
        u = rng.normal(size=2)
        g = ex.grad_state(tree, x, u, 0.0)
        exact = np.array([2 * x[0] + 3 * x[1] + u[0], 3 * x[0] - x[1]])
        assert np.allclose(g, exact, atol=1e-7)


def _random_tree(rng, depth=0):
    roll = rng.random()
    if depth >= 4 or roll < 0.25:
        if rng.random() < 0.5:
            return ex.Node("const", value=float(np.round(rng.normal(), 3)))
        name = rng.choice(["x1", "x2", "u1", "u2", "t"])
        return ex.Node("var", name=name, var=SYM.lookup(name))
    if roll < 0.35:
        return ex.Node("neg", children=(_random_tree(rng, depth + 1),))
    if roll < 0.5:
        fn = rng.choice(["sin", "cos", "exp"])
        return ex.Node("call", name=fn, children=(_random_tree(rng, depth + 1),))
    op = rng.choice(["+", "-", "*"])
    return ex.Node("bin", name=op,
                   children=(_random_tree(rng, depth + 1), _random_tree(rng, depth + 1)))


def test_parse_print_parse_fixpoint():
    rng = np.random.default_rng(11)
    total_points = 0
    for _ in range(60):
        tree = _random_tree(rng)
        again = ex.parse_expression(ex.unparse(tree), SYM)
        for _ in range(20):
            x = rng.normal(size=2)
            u = rng.normal(size=2)
            t = rng.normal()
            a = ex.eval_expr(tree, x, u, t)
            b = ex.eval_expr(again, x, u, t)
            assert abs(a - b) < 1e-12 or (np.isnan(a) and np.isnan(b))
            total_points += 1
    assert total_points >= 1000


def test_compiled_matches_tree_walk():
    rng = np.random.default_rng(3)
    srcs = ["x2*(u1+u2)", "sin(x1)*exp(-x2) + t", "(x1 - u2)^3 / (1 + x2^2)"]
    trees = [ex.parse_expression(s, SYM) for s in srcs]
    rhs = ex.compile_exprs(trees)
    for _ in range(50):
        x = rng.normal(size=2)
        u = rng.normal(size=2)
        t = rng.normal()
        fast = rhs(t, x, u)
        slow = [ex.eval_expr(tr, x, u, t) for tr in trees]
        assert np.allclose(fast, slow, atol=1e-14)


def test_eval_many_matches_scalar():
    tree = ex.parse_expression("x1*u2 - cos(t)", SYM)
    rng = np.random.default_rng(9)
    xs = rng.normal(size=(40, 2))
    us = rng.normal(size=(40, 2))
    ts = rng.normal(size=40)
    batch = ex.eval_many(tree, xs, us, ts)
    single = [ex.eval_expr(tree, xs[i], us[i], ts[i]) for i in range(40)]
    assert np.allclose(batch, single, atol=1e-14)
