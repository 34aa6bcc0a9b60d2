import numpy as np
import pytest

from sparsecrf.data import Sequence
from sparsecrf.inference import (
    InferenceError,
    Scorer,
    compile_sequence,
    forward_backward_dense,
    forward_backward_sparse,
    label_sequence_potential,
    marginal_decode,
    truncated_forward_backward,
    viterbi,
)
from sparsecrf.oracles import enumerate_logz_and_marginals, enumerate_viterbi

from conftest import make_model, random_model, random_sequence


def seq(tokens):
    return Sequence(columns=[list(tokens)])


class TestDenseForwardBackward:
    def test_zero_weights_single_position(self):
        model = make_model(n_labels=3)
        lattice = forward_backward_dense(model, seq(["a"]))
        assert lattice.log_z == pytest.approx(np.log(3.0), rel=1e-12)
        marg = lattice.unigram_marginals()
        assert np.allclose(marg, 1.0 / 3.0, atol=1e-12)

    def test_zero_weights_uniform_pairwise(self):
        model = make_model(n_labels=3)
        lattice = forward_backward_dense(model, seq(["a", "b", "a", "c"]))
        for t in range(1, 4):
            core = lattice.pairwise[t][:3, :]
            assert np.allclose(core, 1.0 / 9.0, atol=1e-12)
            assert np.allclose(lattice.pairwise[t][3, :], 0.0)

    def test_matches_enumeration(self, rng):
        for _ in range(25):
            n_labels = int(rng.integers(2, 4))
            model = random_model(rng, n_labels=n_labels)
            s = random_sequence(rng, int(rng.integers(1, 5)))
            lattice = forward_backward_dense(model, s)
            log_z, pairwise = enumerate_logz_and_marginals(model, s)
            assert lattice.log_z == pytest.approx(log_z, rel=1e-10)
            assert np.abs(lattice.pairwise - pairwise).max() < 1e-12

    def test_forward_rows_normalized(self, rng):
        model = random_model(rng)
        lattice = forward_backward_dense(model, seq(["a", "b", "c", "a"]))
        assert np.allclose(lattice.forward.sum(axis=1), 1.0, atol=1e-12)

    def test_pairwise_slices_normalized(self, rng):
        model = random_model(rng)
        lattice = forward_backward_dense(model, seq(["c", "c", "b"]))
        sums = lattice.pairwise.reshape(3, -1).sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-12)

    def test_marginal_consistency(self, rng):
        # position marginal equals pairwise summed over sources
        model = random_model(rng)
        s = seq(["a", "b", "a", "c", "b"])
        lattice = forward_backward_dense(model, s)
        _, pairwise = enumerate_logz_and_marginals(model, s)
        marg = lattice.unigram_marginals()
        assert np.abs(marg - pairwise.sum(axis=1)).max() < 1e-12

    def test_overflow_raises(self):
        model = make_model()
        model.store.set_unigram((0, "a"), 0, 800.0)
        with pytest.raises(InferenceError):
            forward_backward_dense(model, seq(["a"]))


class TestSparseForwardBackward:
    def test_no_bigrams_means_no_multiplies(self, rng):
        model = make_model()
        model.store.set_unigram_vector((0, "a"), rng.uniform(-1, 1, 3))
        lattice = forward_backward_sparse(model, seq(["a", "a", "b"]))
        assert lattice.bigram_multiplies == 0
        dense = forward_backward_dense(model, seq(["a", "a", "b"]))
        assert lattice.log_z == pytest.approx(dense.log_z, rel=1e-12)

    def test_matches_dense(self, rng):
        worst = 0.0
        for _ in range(50):
            n_labels = int(rng.integers(2, 5))
            model = random_model(rng, n_labels=n_labels, bigram_density=0.3)
            s = random_sequence(rng, int(rng.integers(1, 7)))
            sparse = forward_backward_sparse(model, s)
            dense = forward_backward_dense(model, s)
            worst = max(worst, abs(sparse.log_z - dense.log_z) / max(1.0, abs(dense.log_z)))
            worst = max(worst, np.abs(sparse.pairwise - dense.pairwise).max())
        assert worst < 1e-12

    def test_multiply_counter_definition(self):
        # 7 stored pairs for the only symbol; length-2 sequence uses the
        # transition product once forward and once backward: 7 + 7
        model = make_model(n_labels=4)
        mat = np.zeros((5, 4))
        entries = [(0, 0), (0, 1), (1, 2), (2, 3), (3, 0), (3, 3), (2, 1)]
        for r, c in entries:
            mat[r, c] = 0.5
        model.store.set_bigram_matrix((1, "a"), mat)
        lattice = forward_backward_sparse(model, seq(["a", "a"]))
        assert lattice.bigram_multiplies == 14

    def test_multiply_counter_zero_for_unigram_only_position(self):
        model = make_model(n_labels=2)
        model.store.set_bigram((1, "a"), 0, 1, 1.0)
        # "b" has no bigram weights: only the a->a boundary products count
        lattice = forward_backward_sparse(model, seq(["b", "a", "b"]))
        assert lattice.bigram_multiplies == 2

    def test_counter_matches_recount(self, rng):
        # independent recount: each core pair is multiplied once in the
        # forward product at its position and once in the backward
        for _ in range(20):
            model = random_model(rng, n_labels=3, bigram_density=0.4)
            s = random_sequence(rng, int(rng.integers(1, 7)))
            keys = compile_sequence(model.templates, s)
            scorer = Scorer(model)
            expected = 0
            for t in range(1, len(s)):
                expected += 2 * scorer.delta(keys.bigram[t]).r_core
            lattice = forward_backward_sparse(model, s)
            assert lattice.bigram_multiplies == expected


class TestTruncated:
    def test_full_span_matches_full_lattice(self, rng):
        model = random_model(rng)
        s = seq(["a", "b", "c", "a"])
        full = forward_backward_sparse(model, s)
        part = truncated_forward_backward(model, s, 0, 3)
        for t in range(4):
            assert np.abs(part.pairwise[t] - full.pairwise[t]).max() < 1e-12

    def test_interior_span(self, rng):
        for _ in range(20):
            model = random_model(rng)
            s = random_sequence(rng, 6)
            full = forward_backward_dense(model, s)
            part = truncated_forward_backward(model, s, 1, 2)
            for t in (1, 2):
                assert np.abs(part.pairwise[t] - full.pairwise[t]).max() < 1e-12

    def test_width_one_at_start(self, rng):
        model = random_model(rng)
        s = random_sequence(rng, 5)
        full = forward_backward_dense(model, s)
        part = truncated_forward_backward(model, s, 0, 0)
        assert np.abs(part.pairwise[0] - full.pairwise[0]).max() < 1e-12

    def test_dense_mode(self, rng):
        model = random_model(rng)
        s = random_sequence(rng, 5)
        full = forward_backward_dense(model, s)
        part = truncated_forward_backward(model, s, 2, 4, mode="dense")
        for t in (2, 3, 4):
            assert np.abs(part.pairwise[t] - full.pairwise[t]).max() < 1e-12

    def test_invalid_span(self, rng):
        model = random_model(rng)
        with pytest.raises(ValueError):
            truncated_forward_backward(model, seq(["a", "b"]), 1, 0)
        with pytest.raises(ValueError):
            truncated_forward_backward(model, seq(["a", "b"]), 0, 2)


class TestViterbi:
    def test_zero_weights_ties_break_to_first_label(self):
        model = make_model(n_labels=3)
        labels, score = viterbi(model, seq(["a", "b", "a"]))
        assert labels == ["y0", "y0", "y0"]
        assert score == 0.0

    def test_matches_enumeration(self, rng):
        for _ in range(30):
            n_labels = int(rng.integers(2, 4))
            model = random_model(rng, n_labels=n_labels)
            s = random_sequence(rng, int(rng.integers(1, 5)))
            for mode in ("dense", "sparse"):
                labels, score = viterbi(model, s, mode=mode)
                exp_labels, exp_score = enumerate_viterbi(model, s)
                assert labels == exp_labels
                assert score == pytest.approx(exp_score, rel=1e-10)

    def test_score_is_potential_of_labeling(self, rng):
        model = random_model(rng)
        s = random_sequence(rng, 4)
        labels, score = viterbi(model, s)
        indices = [model.labels.index(l) for l in labels]
        assert score == pytest.approx(
            label_sequence_potential(model, s, indices), rel=1e-12
        )

    def test_strong_transition_is_followed(self, rng):
        # many labelings tie at the optimum here, and the dynamic
        # program breaks ties from the sequence end while the oracle
        # scans labelings lexicographically, so only scores and the
        # boosted transition are comparable
        model = make_model(n_labels=3)
        model.store.set_bigram((1, "a"), 1, 2, 10.0)
        s = seq(["a", "a", "a"])
        labels, score = viterbi(model, s)
        _, exp_score = enumerate_viterbi(model, s)
        assert score == pytest.approx(exp_score, rel=1e-12)
        assert ("y1", "y2") in set(zip(labels, labels[1:]))
        assert viterbi(model, s, mode="sparse")[0] == labels

    def test_sparse_dense_identical_with_ties(self, rng):
        # discrete weights force many exact ties; both modes must agree
        for _ in range(40):
            n_labels = int(rng.integers(2, 5))
            model = make_model(n_labels=n_labels)
            for x in ("a", "b", "c"):
                vec = rng.choice([-1.0, 0.0, 1.0], size=n_labels)
                model.store.set_unigram_vector((0, x), vec)
                mat = rng.choice([-1.0, 0.0, 0.0, 1.0], size=(n_labels + 1, n_labels))
                model.store.set_bigram_matrix((1, x), mat)
            s = random_sequence(rng, int(rng.integers(1, 7)))
            dense = viterbi(model, s, mode="dense")
            sparse = viterbi(model, s, mode="sparse")
            assert dense[0] == sparse[0]
            assert dense[1] == sparse[1]


class TestMarginalDecode:
    def test_prefers_high_marginal_label(self, rng):
        model = make_model(n_labels=2)
        model.store.set_unigram((0, "a"), 1, 3.0)
        assert marginal_decode(model, seq(["a", "a"])) == ["y1", "y1"]

    def test_tie_breaks_to_smallest_index(self):
        model = make_model(n_labels=3)
        assert marginal_decode(model, seq(["a", "b"])) == ["y0", "y0"]


class TestScorerCaching:
    def test_cached_tables_are_reused(self, rng):
        model = random_model(rng)
        scorer = Scorer(model)
        s = seq(["a", "a", "a"])
        keys = compile_sequence(model.templates, s)
        first = scorer.psi_dense(keys.unigram[0], keys.bigram[0])
        second = scorer.psi_dense(keys.unigram[1], keys.bigram[1])
        assert first is second

    def test_normalization_randomized_suite(self, rng):
        # position marginals sum to one across a randomized suite
        for _ in range(200):
            model = random_model(rng, n_labels=int(rng.integers(2, 5)))
            s = random_sequence(rng, int(rng.integers(1, 7)))
            lattice = forward_backward_sparse(model, s)
            marg = lattice.unigram_marginals()
            assert np.abs(marg.sum(axis=1) - 1.0).max() < 1e-12
