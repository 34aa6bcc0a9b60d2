import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecrf.data import Corpus, Sequence
from sparsecrf.features import (
    BIAS_VALUE,
    Template,
    TemplateError,
    build_block_index,
    cutoff_filter,
    extract_key,
    join_ngram,
    parse_template,
    split_ngram,
)


def seq(tokens, labels=None):
    return Sequence(columns=[list(tokens)], labels=labels)


class TestTemplateGrammar:
    @pytest.mark.parametrize(
        "text",
        ["bias:u", "bias:b", "u:col=0:off=+0", "b:col=1:off=-2", "ngram-u:col=0:w=3",
         "ngram-b:col=2:w=5"],
    )
    def test_round_trip(self, text):
        tpl = parse_template(text)
        assert parse_template(tpl.descriptor).descriptor == tpl.descriptor

    @pytest.mark.parametrize(
        "text",
        ["bias", "u:col=0", "q:col=0:off=1", "ngram-u:col=0:w=2", "u:col=x:off=1",
         "ngram-u:col=0:w=-3", ""],
    )
    def test_rejects_bad_descriptors(self, text):
        with pytest.raises(TemplateError):
            parse_template(text)

    def test_signatures_pair_siblings(self):
        u = parse_template("u:col=0:off=+1")
        b = parse_template("b:col=0:off=+1")
        other = parse_template("b:col=0:off=-1")
        assert u.signature == b.signature
        assert u.signature != other.signature


class TestExtraction:
    def test_bias_fires_everywhere(self):
        tpl = parse_template("bias:u")
        s = seq(["p", "q"])
        assert extract_key(tpl, s.columns, 0) == BIAS_VALUE
        assert extract_key(tpl, s.columns, 1) == BIAS_VALUE

    def test_offset_out_of_range_is_none(self):
        tpl = parse_template("u:col=0:off=+1")
        s = seq(["p", "q"])
        assert extract_key(tpl, s.columns, 1) is None
        assert extract_key(tpl, s.columns, 0) == "q"

    def test_negative_offset(self):
        tpl = parse_template("u:col=0:off=-1")
        s = seq(["p", "q"])
        assert extract_key(tpl, s.columns, 0) is None
        assert extract_key(tpl, s.columns, 1) == "p"

    def test_ngram_window(self):
        tpl = parse_template("ngram-u:col=0:w=3")
        s = seq(["c", "a", "t"])
        assert extract_key(tpl, s.columns, 1) == "c|a|t"
        assert extract_key(tpl, s.columns, 0) is None
        assert extract_key(tpl, s.columns, 2) is None

    def test_ngram_separator_escaping(self):
        tpl = parse_template("ngram-u:col=0:w=3")
        s = seq(["a|b", "c", "d"])
        value = extract_key(tpl, s.columns, 1)
        assert split_ngram(value) == ["a|b", "c", "d"]

    @given(st.lists(st.text(min_size=0, max_size=5), min_size=1, max_size=6))
    @settings(max_examples=200, deadline=None)
    def test_ngram_join_split_round_trip(self, tokens):
        assert split_ngram(join_ngram(tokens)) == tokens


class TestBlockIndex:
    def test_positions_first_last(self):
        corpus = Corpus([seq(["a", "b", "a"])])
        index = build_block_index(corpus, [parse_template("u:col=0:off=+0")])
        occ_a = index.occurrences((0, "a"))
        assert len(occ_a) == 1
        assert occ_a[0].positions == [0, 2]
        assert (occ_a[0].first, occ_a[0].last) == (0, 2)
        occ_b = index.occurrences((0, "b"))
        assert occ_b[0].positions == [1]

    def test_empty_template_set(self):
        corpus = Corpus([seq(["a"])])
        assert len(build_block_index(corpus, [])) == 0

    def test_rescan_oracle(self, rng):
        symbols = ["a", "b", "c", "d"]
        corpus = Corpus(
            [
                seq([str(rng.choice(symbols)) for _ in range(int(rng.integers(1, 7)))])
                for _ in range(20)
            ]
        )
        templates = [parse_template("u:col=0:off=+0"), parse_template("u:col=0:off=+1")]
        index = build_block_index(corpus, templates)
        # independent linear re-scan of the corpus
        expected = {}
        for i, s in enumerate(corpus):
            for tpl_idx, tpl in enumerate(templates):
                for t in range(len(s)):
                    v = extract_key(tpl, s.columns, t)
                    if v is not None:
                        expected.setdefault((tpl_idx, v), []).append((i, t))
        assert set(index.keys()) == set(expected)
        for key, pairs in expected.items():
            indexed = [
                (occ.sequence, t)
                for occ in index.occurrences(key)
                for t in occ.positions
            ]
            assert indexed == pairs
            assert index.total_count(key) == len(pairs)

    def test_bias_block_covers_all_sequences(self):
        corpus = Corpus([seq(["a", "b"]), seq(["c"])])
        index = build_block_index(corpus, [parse_template("bias:u")])
        occs = index.occurrences((0, BIAS_VALUE))
        assert [o.sequence for o in occs] == [0, 1]
        assert occs[0].positions == [0, 1]


class TestCutoffFilter:
    def test_min_count_one_admits_everything(self):
        corpus = Corpus([seq(["a", "b", "a"])])
        templates = [parse_template("u:col=0:off=+0")]
        admitted = cutoff_filter(corpus, templates, 1)
        assert admitted == {(0, "a"), (0, "b")}

    def test_min_count_two(self):
        corpus = Corpus([seq(["a", "b", "a"])])
        templates = [parse_template("u:col=0:off=+0")]
        assert cutoff_filter(corpus, templates, 2) == {(0, "a")}

    def test_admitted_set_shrinks_with_cutoff(self, rng):
        corpus = Corpus(
            [seq([str(rng.choice(["a", "b", "c"])) for _ in range(5)]) for _ in range(10)]
        )
        templates = [parse_template("u:col=0:off=+0"), parse_template("b:col=0:off=+0")]
        sizes = [len(cutoff_filter(corpus, templates, k)) for k in range(1, 11)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            cutoff_filter(Corpus([seq(["a"])]), [], 0)
