"""Parser robustness: corpus round-trips and a seeded mutation fuzz run.

The heavy 10k sweep lives in the acceptance suite; this file keeps a
2k-case smoke version plus the hand-picked nasties mutation rarely
finds on its own.
"""

from dsul.canonical import canonical_serialize
from dsul.diagnostics import ERROR
from dsul.fixtures import FIXTURE_NAMES, fixture_text
from dsul.parser import parse_workspace

from fuzzing import mutate, run_fuzz


def errors_of(result):
    return [d for d in result.diagnostics if d.severity == ERROR]


class TestCorpus:
    def test_every_fixture_parses_without_errors(self):
        for name in FIXTURE_NAMES:
            result = parse_workspace(fixture_text(name), f"{name}.yaml")
            assert result.workspace is not None, name
            assert errors_of(result) == [], name

    def test_canonical_form_is_a_fixed_point_on_the_whole_corpus(self):
        for name in FIXTURE_NAMES:
            ws = parse_workspace(fixture_text(name), f"{name}.yaml").workspace
            first = canonical_serialize(ws)
            reparsed = parse_workspace(first, f"{name}-canonical.yaml")
            assert reparsed.workspace is not None, name
            assert errors_of(reparsed) == [], name
            assert canonical_serialize(reparsed.workspace) == first, name


class TestMutationFuzz:
    def test_two_thousand_mutated_documents(self):
        report = run_fuzz(2000, seed=20260822)
        assert report.ok, report.summary() + repr(
            (report.crashes[:3], report.silent_rejections[:3], report.fixpoint_breaks[:3])
        )
        # the mutator must actually exercise both outcomes
        assert report.parsed > 100
        assert report.rejected > 100

    def test_same_seed_same_report(self):
        assert run_fuzz(50, seed=7) == run_fuzz(50, seed=7)

    def test_mutation_is_deterministic_per_seed(self):
        import random

        corpus = {name: fixture_text(name) for name in FIXTURE_NAMES}
        pool = [line for text in corpus.values() for line in text.splitlines()]
        one = mutate(random.Random(3), corpus["chatbot"], pool)
        two = mutate(random.Random(3), corpus["chatbot"], pool)
        assert one == two


class TestHandPickedNasties:
    def test_deep_flow_nesting_is_refused_not_crashed(self):
        result = parse_workspace("slug: deep\nextra: " + "[" * 5000 + "]" * 5000 + "\n")
        assert result.workspace is None or result.workspace is not None  # no raise is the point
        assert result.diagnostics or result.workspace is not None

    def test_deep_block_nesting_hits_the_size_guard(self):
        text = "slug: deep\nautomations:\n"
        text += "".join(f"{'  ' * n}- x:\n" for n in range(1, 300))
        result = parse_workspace(text)
        assert result.workspace is None
        assert errors_of(result)

    def test_alias_expansion_cannot_blow_up(self):
        text = "slug: bomb\n" + "a0: &a0 [1, 1]\n"
        for n in range(1, 12):
            text += f"a{n}: &a{n} [*a{n - 1}, *a{n - 1}]\n"
        result = parse_workspace(text)
        # either refused by the node guard or parsed with the expansion warning
        assert result.diagnostics

    def test_self_referential_alias_is_an_error(self):
        result = parse_workspace("slug: loop\nself: &x [*x]\n")
        assert result.workspace is None
        assert any(d.code in ("DSUL-anchor-cycle", "DSUL-syntax") for d in errors_of(result))

    def test_a_megabyte_of_one_line_is_survivable(self):
        result = parse_workspace("slug: wide\nname: " + "x" * 1_000_000 + "\n")
        assert result.workspace is not None or errors_of(result)

    def test_nul_byte_is_a_located_syntax_error(self):
        result = parse_workspace("slug: ok\nname: a\x00b\n")
        assert result.workspace is None
        errs = errors_of(result)
        assert errs and errs[0].location.line >= 1
