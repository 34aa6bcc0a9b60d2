import io

import numpy as np
import pytest

from sparsecrf.data import (
    Corpus,
    CorpusFormatError,
    HmmSpec,
    Sequence,
    bayes_error,
    default_hmm_spec,
    generate_hmm_corpus,
    read_corpus,
    token_error,
    write_corpus,
)

from conftest import make_model, random_model


class TestSequence:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Sequence(columns=[[]])

    def test_rejects_ragged_columns(self):
        with pytest.raises(ValueError):
            Sequence(columns=[["a", "b"], ["x"]])

    def test_rejects_label_length_mismatch(self):
        with pytest.raises(ValueError):
            Sequence(columns=[["a", "b"]], labels=["y0"])


class TestReadCorpus:
    def test_two_line_sequence(self):
        corpus = read_corpus(io.StringIO("a\tX\nb\tY\n\n"), has_labels=True)
        assert len(corpus) == 1
        assert len(corpus[0]) == 2
        assert corpus[0].columns == [["a", "b"]]
        assert corpus[0].labels == ["X", "Y"]

    def test_trailing_blank_lines(self):
        corpus = read_corpus(io.StringIO("a\tX\n\n\n\n"), has_labels=True)
        assert len(corpus) == 1

    def test_comment_lines_skipped(self):
        corpus = read_corpus(io.StringIO("# header\na\tX\n\n"), has_labels=True)
        assert len(corpus) == 1

    def test_ragged_reports_line_number(self):
        text = "a\tb\tX\na\tY\n\n"
        with pytest.raises(CorpusFormatError) as err:
            read_corpus(io.StringIO(text), has_labels=True)
        assert err.value.line == 2

    def test_empty_file_rejected(self):
        with pytest.raises(CorpusFormatError):
            read_corpus(io.StringIO(""), has_labels=True)

    def test_unlabelled(self):
        corpus = read_corpus(io.StringIO("a\nb\n\nc\n\n"), has_labels=False)
        assert len(corpus) == 2
        assert corpus[1].columns == [["c"]]
        assert corpus[0].labels is None

    def test_round_trip_identity(self, rng):
        seqs = []
        for _ in range(10):
            length = int(rng.integers(1, 6))
            cols = [
                [f"t{rng.integers(0, 9)}" for _ in range(length)],
                [f"p{rng.integers(0, 4)}" for _ in range(length)],
            ]
            labels = [f"L{rng.integers(0, 3)}" for _ in range(length)]
            seqs.append(Sequence(columns=cols, labels=labels))
        corpus = Corpus(seqs)
        buf = io.StringIO()
        write_corpus(corpus, buf)
        again = read_corpus(io.StringIO(buf.getvalue()), has_labels=True)
        assert len(again) == len(corpus)
        for a, b in zip(again, corpus):
            assert a.columns == b.columns
            assert a.labels == b.labels


class TestHmmSpec:
    def test_default_spec_is_stochastic(self):
        spec = default_hmm_spec()
        assert spec.n_labels == 6
        assert spec.n_observations == 5
        assert spec.length == 5
        assert np.abs(spec.transitions.sum(axis=1) - 1).max() < 1e-12
        assert np.abs(spec.emissions.sum(axis=1) - 1).max() < 1e-12

    def test_rejects_non_stochastic(self):
        spec = default_hmm_spec()
        bad = spec.transitions.copy()
        bad[0, 0] += 0.5
        with pytest.raises(ValueError):
            HmmSpec(transitions=bad, emissions=spec.emissions, initial=spec.initial)


class TestGenerator:
    def test_zero_sequences(self):
        assert len(generate_hmm_corpus(default_hmm_spec(), 0)) == 0

    def test_deterministic_given_seed(self):
        a = generate_hmm_corpus(default_hmm_spec(seed=7), 25)
        b = generate_hmm_corpus(default_hmm_spec(seed=7), 25)
        for s1, s2 in zip(a, b):
            assert s1.columns == s2.columns and s1.labels == s2.labels

    def test_prefix_stability(self):
        # per-sequence generators: the first sequences do not depend on n
        a = generate_hmm_corpus(default_hmm_spec(seed=3), 5)
        b = generate_hmm_corpus(default_hmm_spec(seed=3), 10)
        for s1, s2 in zip(a, b):
            assert s1.columns == s2.columns and s1.labels == s2.labels

    @pytest.mark.slow
    def test_transition_frequencies_match_spec(self):
        spec = default_hmm_spec(seed=11)
        corpus = generate_hmm_corpus(spec, 100000)
        index = {s: i for i, s in enumerate(spec.labels)}
        counts = np.zeros((6, 6))
        for seq in corpus:
            ids = [index[l] for l in seq.labels]
            for a, b in zip(ids, ids[1:]):
                counts[a, b] += 1
        totals = counts.sum(axis=1, keepdims=True)
        freq = counts / totals
        # 3-sigma multinomial bounds per row entry
        sigma = np.sqrt(spec.transitions * (1 - spec.transitions) / totals)
        assert (np.abs(freq - spec.transitions) <= 3 * sigma + 1e-9).all()


class TestBayesError:
    def test_deterministic_emissions_are_perfectly_decodable(self):
        eye = np.zeros((5, 5))
        np.fill_diagonal(eye, 1.0)
        spec = HmmSpec(
            transitions=np.full((5, 5), 0.2),
            emissions=eye,
            initial=np.full(5, 0.2),
            length=3,
        )
        assert bayes_error(spec) == pytest.approx(0.0, abs=1e-12)

    def test_uninformative_observations(self):
        spec = HmmSpec(
            transitions=np.full((6, 6), 1 / 6),
            emissions=np.full((6, 5), 0.2),
            initial=np.full(6, 1 / 6),
            length=3,
        )
        assert bayes_error(spec) == pytest.approx(5 / 6, rel=1e-12)

    def test_default_spec_in_open_interval(self):
        value = bayes_error(default_hmm_spec())
        assert 0.0 < value < 5 / 6

    def test_stable_across_runs(self):
        a = bayes_error(default_hmm_spec())
        b = bayes_error(default_hmm_spec())
        assert a == b

    def test_budget_guard(self):
        spec = default_hmm_spec()
        with pytest.raises(ValueError):
            bayes_error(spec, max_sequences=10)


class TestTokenError:
    def test_perfect_predictions(self):
        model = make_model(n_labels=2)
        model.store.set_unigram((0, "a"), 0, 5.0)
        model.store.set_unigram((0, "b"), 1, 5.0)
        corpus = Corpus([Sequence(columns=[["a", "b"]], labels=["y0", "y1"])])
        assert token_error(model, corpus, decoder="viterbi") == 0.0

    def test_all_wrong(self):
        model = make_model(n_labels=2)
        model.store.set_unigram((0, "a"), 0, 5.0)
        corpus = Corpus([Sequence(columns=[["a", "a"]], labels=["y1", "y1"])])
        assert token_error(model, corpus, decoder="viterbi") == 1.0

    def test_matches_recount(self, rng):
        model = random_model(rng)
        seqs = []
        for _ in range(8):
            length = int(rng.integers(1, 6))
            toks = [str(rng.choice(["a", "b", "c"])) for _ in range(length)]
            labels = [f"y{rng.integers(0, 3)}" for _ in range(length)]
            seqs.append(Sequence(columns=[toks], labels=labels))
        corpus = Corpus(seqs)
        for decoder in ("viterbi", "marginal"):
            reported = token_error(model, corpus, decoder=decoder)
            from sparsecrf.inference import marginal_decode, viterbi

            wrong = total = 0
            for seq in corpus:
                if decoder == "viterbi":
                    predicted, _ = viterbi(model, seq)
                else:
                    predicted = marginal_decode(model, seq)
                wrong += sum(1 for p, g in zip(predicted, seq.labels) if p != g)
                total += len(seq)
            assert reported == pytest.approx(wrong / total, rel=1e-15)

    def test_threads_do_not_change_result(self, rng):
        model = random_model(rng)
        seqs = []
        for _ in range(12):
            toks = [str(rng.choice(["a", "b", "c"])) for _ in range(4)]
            labels = [f"y{rng.integers(0, 3)}" for _ in range(4)]
            seqs.append(Sequence(columns=[toks], labels=labels))
        corpus = Corpus(seqs)
        serial = token_error(model, corpus, decoder="marginal", threads=1)
        threaded = token_error(model, corpus, decoder="marginal", threads=4)
        assert serial == threaded
