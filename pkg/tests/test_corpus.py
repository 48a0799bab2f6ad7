"""Synthetic corpus generation, the vocabulary, and TSV round-trips."""

import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narem.corpus import (
    CorpusError,
    ParallelCorpus,
    ParseError,
    Vocabulary,
    expand_exp1,
    gen_exp1,
    gen_exp2,
    load_corpus,
    save_corpus,
    source_values,
)

V = Vocabulary.synthetic()


class TestVocabulary:
    def test_special_ids(self):
        assert (V.PAD, V.BOS, V.EOS, V.CONCAT) == (0, 1, 2, 3)
        assert len(V) == 10

    def test_data_symbols_follow_specials(self):
        assert [V.id_of(str(d)) for d in range(6)] == [4, 5, 6, 7, 8, 9]

    def test_encode_decode_round_trip(self):
        text = "2 1 4 3"
        assert V.decode(V.encode(text)) == text

    def test_encode_unknown_symbol(self):
        with pytest.raises(CorpusError):
            V.encode("2 7")

    def test_validate_rejects_out_of_range(self):
        with pytest.raises(CorpusError):
            V.validate_sentence((0, 99))

    def test_save_load_round_trip(self, tmp_path):
        path = tmp_path / "vocab.txt"
        V.save(path)
        assert Vocabulary.load(path) == V


class TestExpansionRule:
    def test_worked_example(self):
        # "2 1 4 3" maps to each value repeated as many times as itself.
        assert expand_exp1((2, 1, 4, 3)) == (2, 2, 1, 4, 4, 4, 4, 3, 3, 3)

    def test_single_token(self):
        assert expand_exp1((5,)) == (5, 5, 5, 5, 5)

    def test_rejects_out_of_range_value(self):
        with pytest.raises(CorpusError):
            expand_exp1((6,))

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=12))
    def test_expanded_length_is_sum_of_values(self, values):
        assert len(expand_exp1(tuple(values))) == sum(values)

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=12))
    def test_runs_match_values(self, values):
        out = expand_exp1(tuple(values))
        runs = [(k, sum(1 for _ in g)) for k, g in _groupby(out)]
        # Adjacent equal source values merge into one run of combined length.
        expect = []
        for v in values:
            if expect and expect[-1][0] == v:
                expect[-1] = (v, expect[-1][1] + v)
            else:
                expect.append((v, v))
        assert runs == [tuple(e) for e in expect]


def _groupby(seq):
    import itertools

    return itertools.groupby(seq)


class TestGenExp1:
    def test_shapes_and_expansion(self):
        c = gen_exp1(50, 6, seed=0)
        assert len(c) == 50
        for src, tgt in c.pairs:
            assert len(src) == 6
            vals = source_values(V, src)
            assert all(1 <= v <= 5 for v in vals)
            assert source_values(V, tgt) == expand_exp1(vals)

    def test_deterministic(self):
        assert gen_exp1(20, 5, seed=7).pairs == gen_exp1(20, 5, seed=7).pairs
        assert gen_exp1(20, 5, seed=7).pairs != gen_exp1(20, 5, seed=8).pairs

    def test_value_distribution_roughly_uniform(self):
        # [DERIVED] chi-square over 5 categories: crit(0.999, df=4) ~ 18.47.
        c = gen_exp1(2000, 10, seed=1)
        counts = collections.Counter(v for s, _ in c.pairs for v in source_values(V, s))
        n = 2000 * 10
        chi2 = sum((counts[v] - n / 5) ** 2 / (n / 5) for v in range(1, 6))
        assert chi2 < 18.47


class TestGenExp2:
    def test_structure(self):
        c = gen_exp2(100, 6, seed=0)
        zero = V.id_of("0")
        for src, tgt in c.pairs:
            assert len(src) == 6
            vals = source_values(V, src)
            assert all(1 <= v <= 5 for v in vals)
            # Exactly four boundary zeros, k on the left and 4-k on the right.
            lead = 0
            while lead < len(tgt) and tgt[lead] == zero:
                lead += 1
            trail = 0
            while trail < len(tgt) and tgt[-1 - trail] == zero:
                trail += 1
            core = tgt[lead : len(tgt) - trail] if trail else tgt[lead:]
            assert lead + trail == 4
            assert zero not in core
            assert source_values(V, core) == expand_exp1(vals)

    def test_sources_pairwise_distinct(self):
        c = gen_exp2(500, 5, seed=3)
        assert len(set(c.sources)) == 500

    def test_left_zero_count_spans_all_values(self):
        c = gen_exp2(2000, 5, seed=0)
        zero = V.id_of("0")
        ks = collections.Counter()
        for _, tgt in c.pairs:
            lead = 0
            while tgt[lead] == zero:
                lead += 1
            ks[lead] += 1
        assert set(ks) == {0, 1, 2, 3, 4}
        # [DERIVED] chi-square over 5 categories at 2000 samples, crit ~ 18.47.
        chi2 = sum((ks[k] - 400) ** 2 / 400 for k in range(5))
        assert chi2 < 18.47

    def test_deterministic(self):
        assert gen_exp2(20, 5, seed=7).pairs == gen_exp2(20, 5, seed=7).pairs


class TestCorpusContainer:
    def test_mean_target_length(self):
        c = gen_exp1(10, 4, seed=0)
        assert c.mean_target_length() == pytest.approx(
            np.mean([len(t) for t in c.targets])
        )

    def test_with_targets_replaces(self):
        c = gen_exp1(5, 4, seed=0)
        new = [s for s in c.sources]
        c2 = c.with_targets(new)
        assert c2.targets == new
        assert c2.sources == c.sources

    def test_with_targets_length_mismatch(self):
        c = gen_exp1(5, 4, seed=0)
        with pytest.raises((CorpusError, ValueError)):
            c.with_targets([c.targets[0]])

    def test_subset(self):
        c = gen_exp1(10, 4, seed=0)
        sub = c.subset([1, 3])
        assert sub.pairs == [c.pairs[1], c.pairs[3]]


class TestTsvRoundTrip:
    def test_round_trip(self, tmp_path):
        c = gen_exp2(30, 5, seed=0)
        path = tmp_path / "c.tsv"
        save_corpus(c, path)
        back = load_corpus(path, V)
        assert back.pairs == c.pairs

    def test_byte_identical_rewrites(self, tmp_path):
        c = gen_exp1(30, 5, seed=0)
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        save_corpus(c, a)
        save_corpus(c, b)
        assert a.read_bytes() == b.read_bytes()

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text("# header\n\n2 1\t2 2 1\n")
        c = load_corpus(path, V)
        assert len(c) == 1
        assert V.decode(c.pairs[0][1]) == "2 2 1"

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("2 1\t2 2 1\nno-tab-here\n")
        with pytest.raises(ParseError) as err:
            load_corpus(path, V)
        assert "2" in str(err.value)

    def test_unknown_token_is_parse_error(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("2 9\t2 2\n")
        with pytest.raises(ParseError):
            load_corpus(path, V)
