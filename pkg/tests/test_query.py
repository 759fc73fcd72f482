"""Query parsing, DNF conversion and clause matching.

The equivalence oracle evaluates the AST truth-table style with its own tiny
recursive evaluator (independent of the production DNF path) over every
assignment of the query's tags.
"""

import itertools
import random

import pytest

from thyme import query as q


def eval_ast(node, present):
    """Independent reference evaluator used as the truth-table oracle."""
    if isinstance(node, q.Lit):
        return node.tag in present
    if isinstance(node, q.Not):
        return not eval_ast(node.child, present)
    if isinstance(node, q.And):
        return all(eval_ast(c, present) for c in node.children)
    if isinstance(node, q.Or):
        return any(eval_ast(c, present) for c in node.children)
    raise TypeError(node)


def dnf_equivalent(text, seed=7):
    parsed = q.parse(text)
    dnf = q.to_dnf(parsed, random.Random(seed))
    tags = sorted(parsed.literals())
    for bits in itertools.product([False, True], repeat=len(tags)):
        present = frozenset(t for t, b in zip(tags, bits) if b)
        if eval_ast(parsed.root, present) != dnf.matches(present):
            return False, present
    return True, None


class TestParse:
    def test_paper_example_shape(self):
        parsed = q.parse("A & (B | C)")
        assert isinstance(parsed.root, q.And)
        left, right = parsed.root.children
        assert left == q.Lit("A")
        assert isinstance(right, q.Or)
        assert right.children == (q.Lit("B"), q.Lit("C"))

    def test_single_literal(self):
        assert q.parse("A").root == q.Lit("A")

    def test_malformed_reports_position(self):
        with pytest.raises(q.QuerySyntaxError) as err:
            q.parse("A & & B")
        assert err.value.position == 4

    @pytest.mark.parametrize("bad", ["", "   ", "A &", "(A", "A | | B", "&A",
                                     "A B", "!(", "A)"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(q.QuerySyntaxError):
            q.parse(bad)

    def test_precedence_and_binds_tighter(self):
        parsed = q.parse("A | B & C")
        assert isinstance(parsed.root, q.Or)
        assert parsed.root.children[0] == q.Lit("A")
        assert isinstance(parsed.root.children[1], q.And)

    def test_tag_charset(self):
        parsed = q.parse("#eur_2016 & @fan.zone-1")
        assert parsed.literals() == frozenset(["#eur_2016", "@fan.zone-1"])


class TestToDnf:
    def test_paper_example_clauses(self):
        dnf = q.to_dnf(q.parse("A & (B | C)"), random.Random(1))
        clause_sets = {(c.positives, c.negatives) for c in dnf.clauses}
        assert clause_sets == {(frozenset("AB"), frozenset()),
                               (frozenset("AC"), frozenset())}
        ok, counterexample = dnf_equivalent("A & (B | C)")
        assert ok, counterexample

    def test_single_literal_key(self):
        dnf = q.to_dnf(q.parse("A"), random.Random(1))
        assert len(dnf.clauses) == 1
        assert dnf.clauses[0].key == "A"

    def test_pure_negation_unkeyable(self):
        with pytest.raises(q.UnkeyableClauseError):
            q.to_dnf(q.parse("!A"), random.Random(1))

    def test_negated_clause_inside_or_unkeyable(self):
        with pytest.raises(q.UnkeyableClauseError):
            q.to_dnf(q.parse("A | !B"), random.Random(1))

    def test_contradictions_removed(self):
        dnf = q.to_dnf(q.parse("(A & !A) | B"), random.Random(1))
        assert len(dnf.clauses) == 1
        assert dnf.clauses[0].positives == frozenset("B")

    def test_unsatisfiable_rejected(self):
        with pytest.raises(q.UnkeyableClauseError):
            q.to_dnf(q.parse("A & !A"), random.Random(1))

    def test_duplicates_removed(self):
        dnf = q.to_dnf(q.parse("(A | A) & B"), random.Random(1))
        assert len(dnf.clauses) == 1

    def test_expansion_overflow(self):
        text = " & ".join(f"(a{i} | b{i})" for i in range(8))  # 256 clauses
        with pytest.raises(q.DnfOverflowError):
            q.to_dnf(q.parse(text), random.Random(1), max_clauses=64)

    def test_keys_are_non_negated_members(self):
        rng = random.Random(99)
        dnf = q.to_dnf(q.parse("(A & !B) | (C & D) | E"), rng)
        for clause in dnf.clauses:
            assert clause.key in clause.positives

    def test_determinism_same_seed(self):
        text = "(A | B) & (C | !D) & E"
        one = q.to_dnf(q.parse(text), random.Random(42))
        two = q.to_dnf(q.parse(text), random.Random(42))
        assert one == two


class TestMatches:
    def test_positive_clause(self):
        clause = q.Conjunction(frozenset("AB"), frozenset(), "A")
        assert clause.matches(frozenset("ABZ"))

    def test_negated_literal_blocks(self):
        clause = q.Conjunction(frozenset("A"), frozenset("B"), "A")
        assert not clause.matches(frozenset("AB"))

    def test_empty_tag_set(self):
        clause = q.Conjunction(frozenset("A"), frozenset(), "A")
        assert not clause.matches(frozenset())


def random_query(rng, depth=0):
    roll = rng.random()
    if depth >= 5 or roll < 0.4:
        return "t%d" % rng.randrange(6)
    if roll < 0.55:
        return "!(%s)" % random_query(rng, depth + 1)
    op = " & " if roll < 0.8 else " | "
    return "(%s%s%s)" % (random_query(rng, depth + 1), op,
                         random_query(rng, depth + 1))


def test_equivalence_against_truth_table_oracle():
    """Random (query, assignment) equivalence sweep; 10^4 pairs minimum."""
    rng = random.Random(20160710)
    checked = 0
    produced = 0
    while checked < 10_000:
        text = random_query(rng)
        parsed = q.parse(text)
        try:
            dnf = q.to_dnf(parsed, random.Random(rng.randrange(2 ** 30)))
        except (q.UnkeyableClauseError, q.DnfOverflowError):
            continue
        produced += 1
        tags = sorted(parsed.literals())
        for bits in itertools.product([False, True], repeat=len(tags)):
            present = frozenset(t for t, b in zip(tags, bits) if b)
            assert eval_ast(parsed.root, present) == dnf.matches(present), \
                (text, present)
            checked += 1
    assert produced > 100
