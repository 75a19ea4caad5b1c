import math
import random

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from billiard_capacity.expr import DomainError, ParseError, eval_jet, parse, to_source


def test_parse_well_formed():
    e = parse("x^2 + y^2 - 1", 2)
    assert e.dimension == 2
    assert e.variables == {0, 1}
    parse("x^4 + y^4 - 1", 2)


def test_parse_error_reports_token():
    with pytest.raises(ParseError) as exc:
        parse("x + * y", 2)
    assert exc.value.position == 4
    assert "'*'" in str(exc.value)


@pytest.mark.parametrize(
    "text",
    ["", "   ", "foo(x)", "x3 + y", "x^-1", "x^1.5", "(x + y", "sin(x, y)", "x y"],
)
def test_parse_rejects(text):
    with pytest.raises((ParseError, ValueError)):
        parse(text, 2)


def test_dimension_precondition():
    with pytest.raises(ValueError):
        parse("x", 1)


@pytest.mark.parametrize(
    "text, point, value, grad",
    [
        ("x^2 + y^2 - 1", (1, 0), 0.0, (2, 0)),
        ("x^4 + y^4 - 1", (1, 1), 1.0, (4, 4)),
        ("x^2 + y^2 - 1", (0, 0), -1.0, (0, 0)),
    ],
)
def test_eval_jet_examples(text, point, value, grad):
    v, g, H = eval_jet(parse(text, 2), point)
    assert v == value
    assert np.array_equal(g, np.array(grad, float))
    assert H.shape == (2, 2)


def test_hessian_exact():
    _, _, H = eval_jet(parse("x^4 + y^4 - 1", 2), (1, 1))
    assert np.array_equal(H, np.diag([12.0, 12.0]))
    _, _, H = eval_jet(parse("x*y + sin(x)*cos(y)", 2), (0.3, -0.2))
    ref = [[-math.sin(0.3) * math.cos(-0.2), 1 - math.cos(0.3) * math.sin(-0.2)],
           [1 - math.cos(0.3) * math.sin(-0.2), -math.sin(0.3) * math.cos(-0.2)]]
    assert np.allclose(H, ref, atol=1e-15)


def test_domain_errors_name_subexpression():
    with pytest.raises(DomainError) as exc:
        eval_jet(parse("sqrt(x - 2) + y", 2), (0, 0))
    assert "sqrt" in exc.value.subexpression
    with pytest.raises(DomainError):
        eval_jet(parse("1/(x - y)", 2), (1, 1))


def test_point_dimension_checked():
    with pytest.raises(ValueError):
        eval_jet(parse("x + y", 2), (1, 2, 3))


def test_vectorized_matches_scalar():
    e = parse("exp(x/3) * cos(y) + sabs(x - y, 0.1) - smin(x, y, 0.2)", 2)
    X = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    v, g, H = e.jets(X)
    for i in range(len(X)):
        vs, gs, Hs = eval_jet(e, X[i])
        assert abs(v[i] - vs) <= 1e-15 * (1 + abs(vs))
        assert np.allclose(g[i], gs, rtol=1e-14, atol=1e-15)
        assert np.allclose(H[i], Hs, rtol=1e-14, atol=1e-15)


def test_smoothed_helpers_against_sympy():
    x, y = sympy.symbols("x y")
    text = "smax(x^2, y, 0.3) + sabs(x*y - 0.1, 0.05)"
    ref = (
        (x**2 + y + sympy.sqrt((x**2 - y) ** 2 + sympy.Rational(9, 100))) / 2
        + sympy.sqrt((x * y - sympy.Rational(1, 10)) ** 2 + sympy.Rational(1, 400))
    )
    e = parse(text, 2)
    pt = {x: 0.4, y: -0.7}
    v, g, H = eval_jet(e, (0.4, -0.7))
    assert abs(v - float(ref.subs(pt))) < 1e-14
    assert np.allclose(g, [float(sympy.diff(ref, s).subs(pt)) for s in (x, y)], atol=1e-13)
    Hr = [[float(sympy.diff(ref, a, b).subs(pt)) for b in (x, y)] for a in (x, y)]
    assert np.allclose(H, Hr, atol=1e-12)


# random expression generator for the gradient and round-trip properties

LEAVES = ["x1", "x2", "x3", "0.5", "2", "1.25"]


def random_expr(rng: random.Random, depth: int) -> str:
    if depth == 0 or rng.random() < 0.2:
        return rng.choice(LEAVES)
    kind = rng.randrange(7)
    a = random_expr(rng, depth - 1)
    b = random_expr(rng, depth - 1)
    if kind == 0:
        return f"({a} + {b})"
    if kind == 1:
        return f"({a} - {b})"
    if kind == 2:
        return f"({a} * {b})"
    if kind == 3:
        return f"({a})^{rng.randrange(0, 4)}"
    if kind == 4:
        return f"{rng.choice(['sin', 'cos'])}({a})"
    if kind == 5:
        return f"exp(0.3*{a})"
    return f"({a}) / (1.5 + sabs({b}, 0.5))"


def test_gradient_matches_finite_differences_on_random_expressions():
    rng = random.Random(1234)
    nprng = np.random.default_rng(1234)
    h = 1e-5
    checked = 0
    while checked < 1000:
        e = parse(random_expr(rng, 4), 3)
        x = nprng.uniform(-1, 1, 3)
        v, g, _ = eval_jet(e, x)
        fd = np.array([(e(x + h * d) - e(x - h * d)) / (2 * h) for d in np.eye(3)])
        scale = max(1.0, float(np.max(np.abs(g))), abs(v))
        assert np.max(np.abs(fd - g)) <= 1e-6 * scale, (str(e), x)
        checked += 1


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**6))
def test_parse_print_parse_idempotent(seed):
    text = random_expr(random.Random(seed), 5)
    e1 = parse(text, 3)
    s1 = to_source(e1.root)
    e2 = parse(s1, 3)
    assert e2.root == e1.root
    assert to_source(e2.root) == s1
