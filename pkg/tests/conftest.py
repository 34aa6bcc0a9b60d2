import numpy as np
import pytest

from sparsecrf.data import Corpus, Sequence
from sparsecrf.features import parse_template
from sparsecrf.model import LabelAlphabet, Model, ObservationAlphabet


DEFAULT_SYMBOLS = ("a", "b", "c")


def make_model(n_labels=3, symbols=DEFAULT_SYMBOLS, templates=None):
    """Empty model over n_labels labels and one observation column."""
    if templates is None:
        templates = [parse_template("u:col=0:off=+0"), parse_template("b:col=0:off=+0")]
    return Model(
        labels=LabelAlphabet([f"y{i}" for i in range(n_labels)]),
        observations=ObservationAlphabet([list(symbols)]),
        templates=templates,
    )


def randomize_model(model, rng, scale=2.0, bigram_density=0.5, symbols=DEFAULT_SYMBOLS):
    """Dense random unigram groups, sparse random bigram groups."""
    n = model.n_labels
    for x in symbols:
        model.store.set_unigram_vector((0, x), rng.uniform(-scale, scale, n))
        mask = rng.random((n + 1, n)) < bigram_density
        model.store.set_bigram_matrix((1, x), rng.uniform(-scale, scale, (n + 1, n)) * mask)
    return model


def random_model(rng, n_labels=3, length=None, symbols=DEFAULT_SYMBOLS, bigram_density=0.5):
    model = make_model(n_labels=n_labels, symbols=symbols)
    return randomize_model(model, rng, bigram_density=bigram_density, symbols=symbols)


def random_sequence(rng, length, symbols=DEFAULT_SYMBOLS, n_labels=None):
    tokens = [str(rng.choice(symbols)) for _ in range(length)]
    labels = None
    if n_labels is not None:
        labels = [f"y{rng.integers(0, n_labels)}" for _ in range(length)]
    return Sequence(columns=[tokens], labels=labels)


def random_corpus(rng, n_sequences, max_length=5, symbols=DEFAULT_SYMBOLS, n_labels=3):
    seqs = [
        random_sequence(rng, int(rng.integers(1, max_length + 1)), symbols, n_labels)
        for _ in range(n_sequences)
    ]
    return Corpus(seqs)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)
