import pytest

from btweave.expr import (And, Cmp, Flag, Implies, Not, Or, ParseError, atoms, evaluate, parse_expr, to_text,
                          tokenize)


def test_precedence():
    e = parse_expr("a == 1 || b == 0 && c == m_search")
    assert e == Or((Cmp("a", "==", 1), And((Cmp("b", "==", 0), Cmp("c", "==", "m_search")))))
    assert parse_expr("a==1 -> b==0 -> c==1") == Implies(
        Cmp("a", "==", 1), Implies(Cmp("b", "==", 0), Cmp("c", "==", 1)))


def test_flags_and_booleans():
    assert parse_expr("stationKeepingTask.active") == Flag("stationKeepingTask")
    assert parse_expr("x == TRUE") == Cmp("x", "==", 1)
    assert atoms(parse_expr("!(x == 0) && T.active")) == {"x", "T.active"}


@pytest.mark.parametrize("text", [
    "a == 1",
    "!a == 1",
    "!(a == 1 && b == 0)",
    "a == 1 -> (b != x || c == 2)",
    "(a == 1 -> b == 0) -> c == 1",
    "T.active && !U.active",
])
def test_text_roundtrip(text):
    e = parse_expr(text)
    assert parse_expr(to_text(e)) == e


def test_evaluate():
    env = {"a": 1, "b": 0, "T.active": 1}
    assert evaluate(parse_expr("a == 1 && !(b == 1)"), env)
    assert evaluate(parse_expr("b == 1 -> a == 0"), env)
    assert not evaluate(parse_expr("T.active -> b == 1"), env)
    assert evaluate(Not(Flag("T")), {"T.active": 0})


@pytest.mark.parametrize("text", ["a ==", "(a == 1", "a == 1 )", "== 1", "a $ 1"])
def test_syntax_errors_have_positions(text):
    with pytest.raises(ParseError) as info:
        parse_expr(text)
    assert info.value.line == 1
    assert 1 <= info.value.col <= len(text) + 1


def test_tokenize_positions():
    toks = tokenize("a\n  == 1")
    assert [(t.text, t.line, t.col) for t in toks[:3]] == [("a", 1, 1), ("==", 2, 3), ("1", 2, 6)]
