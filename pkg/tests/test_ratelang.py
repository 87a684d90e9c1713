import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agestruct.ratelang import (
    ArityError, BinOp, Call, DomainFault, Neg, NonDifferentiableError, Num, Pow,
    RateSyntaxError, UnknownIdentifierError, Var, diff_z, eval_expr, parse, to_text,
)


def test_sum_parses_to_add():
    e = parse("1+z")
    assert e.ast == BinOp("+", Num(1.0), Var("z"))


@pytest.mark.parametrize("text, expected", [
    ("1+2*3", 7.0),
    ("(1+2)*3", 9.0),
    ("2^3^1", 8.0),
    ("-2^2", -4.0),
    ("8/4/2", 1.0),
    ("10-4-3", 3.0),
    ("2*-3", -6.0),
    (" 1 +\t2 ", 3.0),
    ("1.5e1", 15.0),
    (".5", 0.5),
    ("2^-1", 0.5),
    ("min(3, 2) + max(1, 4)", 6.0),
    ("abs(-2)", 2.0),
    ("sqrt(4) + exp(0) + log(1) + sin(0) + cos(0)", 4.0),
])
def test_precedence_and_literals(text, expected):
    assert eval_expr(parse(text)) == pytest.approx(expected, rel=1e-15)


def test_spec_eval_examples():
    assert eval_expr(parse("z^2+a"), z=3, a=1, x=0) == 10
    assert eval_expr(parse("exp(0)")) == 1
    assert eval_expr(parse("1/(1+z)"), z=1) == 0.5


def test_unknown_identifier_names_symbol():
    with pytest.raises(UnknownIdentifierError) as info:
        parse("b0*exp(-0.5*a)/(1+z)")
    assert info.value.name == "b0"


def test_dangling_operator_offset():
    with pytest.raises(RateSyntaxError) as info:
        parse("2*a+")
    assert info.value.offset == 4


@pytest.mark.parametrize("text", ["(1+z", "1+*2", "z^1.5", "z^a", "", "1 2", "exp 1", "3$"])
def test_syntax_errors(text):
    with pytest.raises(RateSyntaxError):
        parse(text)


@pytest.mark.parametrize("text", ["exp(1, 2)", "min(1)", "sqrt()"])
def test_arity(text):
    with pytest.raises(ArityError):
        parse(text)


def test_restricted_variables():
    with pytest.raises(UnknownIdentifierError):
        parse("z + a", variables=("a", "x"))
    assert parse("a*x", variables=("a", "x")).variables == {"a", "x"}


@pytest.mark.parametrize("text, z", [
    ("log(z)", 0.0), ("log(z)", -1.0), ("1/z", 0.0), ("sqrt(z)", -1.0), ("z^-1", 0.0),
    ("exp(z)", 1000.0),
])
def test_domain_faults_raise(text, z):
    with pytest.raises(DomainFault):
        eval_expr(parse(text), z=z)


def test_domain_fault_names_subexpression():
    with pytest.raises(DomainFault) as info:
        parse("a + log(z - 1)")(z=1.0)
    assert "log" in str(info.value)


def test_vectorised_evaluation_broadcasts():
    e = parse("z*a + x")
    out = e(np.array([1.0, 2.0])[:, None], np.array([1.0, 2.0, 3.0])[None, :], 0.5)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out, [[1.5, 2.5, 3.5], [2.5, 4.5, 6.5]])


def test_square_derivative_prints_as_2z():
    assert str(diff_z(parse("z^2"))) == "2*z"


def test_reciprocal_derivative_value():
    d = diff_z(parse("1/(1+z)"))
    assert d(z=0.0) == pytest.approx(-1.0, abs=1e-15)


def test_abs_of_z_is_not_differentiable():
    with pytest.raises(NonDifferentiableError):
        diff_z(parse("abs(z)"))
    with pytest.raises(NonDifferentiableError):
        diff_z(parse("max(z, 1) + a"))


def test_z_free_abs_differentiates_to_zero():
    assert diff_z(parse("abs(a - 1)*3")).ast == Num(0.0)
    assert str(diff_z(parse("z*max(a, 1)"))) == "max(a, 1)"


def test_simplification_rules():
    assert str(diff_z(parse("a*x"))) == "0"
    assert str(diff_z(parse("z + a"))) == "1"
    assert str(diff_z(parse("3*z"))) == "3"


def test_expressions_are_immutable_and_hashable():
    e = parse("z+1")
    with pytest.raises(AttributeError):
        e.source = "x"
    assert parse("z + 1") == e and hash(parse("z+1")) == hash(e)


def test_evaluation_is_reentrant():
    e = parse("exp(-a)*z/(1+z^2)")
    expected = e(z=0.7, a=1.3)
    out = []

    def work():
        out.extend(e(z=0.7, a=1.3) for _ in range(200))

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert out == [expected] * 800


# --------------------------------------------------------------------------
# property tests

_numbers = st.one_of(
    st.integers(0, 20).map(float),
    st.floats(0.0, 100.0, allow_nan=False, allow_infinity=False),
)


def _ast(depth):
    leaves = st.one_of(_numbers.map(Num), st.sampled_from("zax").map(Var))
    if depth == 0:
        return leaves
    sub = _ast(depth - 1)
    return st.one_of(
        leaves,
        sub.map(Neg),
        st.tuples(st.sampled_from("+-*/"), sub, sub).map(lambda t: BinOp(*t)),
        st.tuples(sub, st.integers(-3, 4)).map(lambda t: Pow(*t)),
        st.tuples(st.sampled_from(["exp", "log", "sin", "cos", "sqrt", "abs"]), sub)
        .map(lambda t: Call(t[0], (t[1],))),
        st.tuples(st.sampled_from(["min", "max"]), sub, sub)
        .map(lambda t: Call(t[0], (t[1], t[2]))),
    )


@settings(max_examples=300, deadline=None)
@given(_ast(6))
def test_print_parse_round_trip(ast):
    assert parse(to_text(ast)).ast == ast


# smooth building blocks with safe domains around the sample points
_SMOOTH = [
    "z^2*a", "exp(-z*a)", "1/(1+z^2)", "sin(z)*cos(a)", "log(1+z^2)",
    "sqrt(1+z^2+x)", "z^3 - 2*z", "(z+a)/(2+x)", "exp(sin(z))", "z*exp(-a)/(1+z)",
    "cos(z*x)^2", "(1+z)^-2", "a*x", "3", "z",
]


@st.composite
def _smooth_expr(draw):
    k = draw(st.integers(1, 3))
    parts = draw(st.lists(st.sampled_from(_SMOOTH), min_size=k, max_size=k))
    ops = draw(st.lists(st.sampled_from(["+", "-", "*"]), min_size=k - 1, max_size=k - 1))
    text = parts[0]
    for op, p in zip(ops, parts[1:]):
        text = f"({text}){op}({p})"
    return text


@settings(max_examples=100, deadline=None)
@given(_smooth_expr(), st.floats(-2, 2), st.floats(0, 3), st.floats(0, 1))
def test_diff_z_matches_central_difference(text, z, a, x):
    e = parse(text)
    h = 1e-6
    fd = (e(z + h, a, x) - e(z - h, a, x)) / (2 * h)
    exact = diff_z(e)(z, a, x)
    # central differences carry ~eps*|f|/h of rounding on top of O(h^2)
    floor = 1e-9 + 1e-9 * max(1.0, abs(e(z, a, x)))
    assert abs(exact - fd) <= max(1e-6 * abs(exact), floor) or math.isclose(exact, fd, rel_tol=1e-6)
