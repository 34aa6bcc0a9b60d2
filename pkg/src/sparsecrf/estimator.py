"""Scikit-learn style estimator wrapping the sparse CRF trainer.

The estimator follows the usual conventions (parameters stored
unmodified in __init__, validation deferred to fit, fitted attributes
with trailing underscores, get_params/set_params via BaseEstimator), so
it composes with model selection utilities that treat X as an indexable
collection of samples. Here a sample is one sequence: a list of string
tokens for single-column input, or a list of equal-length tuples/lists
of strings for multi-column input. y is a list of label-string lists
aligned with X.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import Corpus, Sequence
from .features import Template, parse_template
from .inference import Scorer, compile_sequence, forward_backward_sparse, viterbi
from .objective import PenaltyConfig
from .optimizer import TrainConfig, train


def default_templates() -> list[Template]:
    """Unigram and bigram tests on the current token of column 0."""
    return [parse_template("u:col=0:off=+0"), parse_template("b:col=0:off=+0")]


def check_sequences(X) -> list[Sequence]:
    """Validate raw input sequences and convert to Sequence objects."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise ValueError("X must be an iterable of sequences")
    sequences = []
    width = None
    for i, sample in enumerate(X):
        if isinstance(sample, Sequence):
            seq_width = sample.n_columns
            if width is None:
                width = seq_width
            if seq_width != width:
                raise ValueError(f"sequence {i}: expected {width} columns")
            sequences.append(sample)
            continue
        sample = list(sample)
        if not sample:
            raise ValueError(f"sequence {i} is empty")
        if isinstance(sample[0], str):
            rows = [(token,) for token in sample]
        else:
            rows = [tuple(pos) for pos in sample]
        seq_width = len(rows[0])
        if width is None:
            width = seq_width
        if seq_width != width or any(len(r) != seq_width for r in rows):
            raise ValueError(f"sequence {i}: ragged or inconsistent columns")
        if not all(isinstance(tok, str) for r in rows for tok in r):
            raise ValueError(f"sequence {i}: tokens must be strings")
        columns = [[r[c] for r in rows] for c in range(seq_width)]
        sequences.append(Sequence(columns=columns))
    if not sequences:
        raise ValueError("X must contain at least one sequence")
    return sequences


def check_labels(sequences, y) -> None:
    y = list(y)
    if len(y) != len(sequences):
        raise ValueError(f"X has {len(sequences)} sequences but y has {len(y)}")
    for i, (seq, labels) in enumerate(zip(sequences, y)):
        labels = list(labels)
        if len(labels) != len(seq):
            raise ValueError(
                f"sequence {i}: {len(seq)} positions but {len(labels)} labels"
            )
        if not all(isinstance(label, str) for label in labels):
            raise ValueError(f"sequence {i}: labels must be strings")
        seq.labels = labels


class SparseElasticNetCRF(BaseEstimator):
    """Linear-chain CRF with elastic-net penalized coordinate descent.

    The l1 weight drives feature selection (most weights end up exactly
    zero); the l2 weight keeps the surviving weights bounded. Decoding
    exploits the sparsity of the fitted weights.

    Parameters
    ----------
    l1 : float, default=1.0
        Weight of the l1 penalty term.
    l2 : float, default=0.001
        Weight of the squared-l2 penalty term (halved in the objective).
    templates : iterable of str or Template, optional
        Feature templates; descriptor strings are parsed. Defaults to
        unigram plus bigram tests on the current token.
    mode : {"blockwise", "coordinate"}, default="blockwise"
        Blockwise updates share lattice passes across the parameters
        testing one observed value; coordinate mode refreshes every
        single coordinate separately (slower, same fixed points).
    max_epochs : int, default=30
    tol : float, default=1e-4
        Relative objective change below which training stops.
    alpha_initial, alpha_main, switch_epoch :
        Step-damping schedule; see TrainConfig.
    cutoff : int, default=1
        Admit only feature keys observed at least this many times.
    decoder : {"viterbi", "marginal"}, default="viterbi"
        Decoding rule used by predict.

    Attributes
    ----------
    model_ : Model
        The fitted sparse model.
    history_ : TrainHistory
        Per-epoch objective, loss, active counts and timings.
    classes_ : list of str
        Label alphabet in index order.
    """

    def __init__(self, l1=1.0, l2=0.001, templates=None, mode="blockwise",
                 max_epochs=30, tol=1e-4, alpha_initial=100.0, alpha_main=None,
                 switch_epoch=3, cutoff=1, decoder="viterbi"):
        self.l1 = l1
        self.l2 = l2
        self.templates = templates
        self.mode = mode
        self.max_epochs = max_epochs
        self.tol = tol
        self.alpha_initial = alpha_initial
        self.alpha_main = alpha_main
        self.switch_epoch = switch_epoch
        self.cutoff = cutoff
        self.decoder = decoder

    def _resolved_templates(self):
        if self.templates is None:
            return default_templates()
        resolved = []
        for tpl in self.templates:
            resolved.append(tpl if isinstance(tpl, Template) else parse_template(tpl))
        return resolved

    def fit(self, X, y):
        """Fit on sequences X with aligned label lists y."""
        sequences = check_sequences(X)
        check_labels(sequences, y)
        corpus = Corpus(sequences)
        config = TrainConfig(
            penalty=PenaltyConfig(l1=self.l1, l2=self.l2),
            mode=self.mode,
            max_epochs=self.max_epochs,
            tol_objective=self.tol,
            alpha_initial=self.alpha_initial,
            alpha_main=self.alpha_main,
            switch_epoch=self.switch_epoch,
            cutoff=self.cutoff,
        )
        self.model_, self.history_ = train(corpus, self._resolved_templates(), config)
        self.classes_ = list(self.model_.labels)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")

    def predict(self, X):
        """Predicted label list per sequence."""
        self._check_fitted()
        if self.decoder not in ("viterbi", "marginal"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        sequences = check_sequences(X)
        scorer = Scorer(self.model_)
        out = []
        for seq in sequences:
            keys = compile_sequence(self.model_.templates, seq)
            if self.decoder == "viterbi":
                labels, _ = viterbi(self.model_, seq, mode="sparse", scorer=scorer, keys=keys)
            else:
                lattice = forward_backward_sparse(self.model_, seq, scorer=scorer, keys=keys)
                marg = lattice.unigram_marginals()
                labels = [
                    self.model_.labels.symbol(int(k)) for k in np.argmax(marg, axis=1)
                ]
            out.append(labels)
        return out

    def predict_marginals(self, X):
        """Per-position posterior marginals, one (T, n_labels) array each."""
        self._check_fitted()
        sequences = check_sequences(X)
        scorer = Scorer(self.model_)
        out = []
        for seq in sequences:
            keys = compile_sequence(self.model_.templates, seq)
            lattice = forward_backward_sparse(self.model_, seq, scorer=scorer, keys=keys)
            out.append(lattice.unigram_marginals())
        return out

    def score(self, X, y):
        """Token accuracy (1 - token error) of predict against y."""
        predictions = self.predict(X)
        correct = 0
        total = 0
        for pred, gold in zip(predictions, y):
            gold = list(gold)
            if len(gold) != len(pred):
                raise ValueError("gold label list length mismatch")
            correct += sum(1 for p, g in zip(pred, gold) if p == g)
            total += len(pred)
        return correct / total if total else 0.0

    @property
    def n_active_features_(self) -> int:
        self._check_fitted()
        mu, lam = self.model_.active_counts()
        return mu + lam
