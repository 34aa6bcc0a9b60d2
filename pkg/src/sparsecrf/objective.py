"""Logarithmic loss, elastic-net penalty, gradient, and curvature.

The loss of a labelled corpus is the negated conditional log-likelihood,
sum over sequences of log Z minus the gold labeling's potential. Its
partial derivative for one feature coordinate is the expected feature
count under the model minus the observed count; both are read off the
pairwise lattice marginals (unigram expectations are the pairwise
tables summed over the source axis, so one lattice serves both kinds of
statistics).

The per-coordinate second derivative is approximated by summing the
per-position variance of the feature indicator, ignoring cross-position
covariances. The approximation is exact for features active at most
once per sequence and always nonnegative; fixed points of the
coordinate updates are unaffected by the approximation error.

Statistics accumulation is a commutative reduction over sequences; the
sequence order is fixed, so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import BlockIndex, build_block_index
from .inference import (
    Scorer,
    compile_sequence,
    forward_backward_sparse,
    label_sequence_potential,
    truncated_forward_backward,
)


@dataclass
class PenaltyConfig:
    """Elastic-net weights: l1 * |theta|_1 + (l2 / 2) * |theta|_2^2."""

    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.l1) and np.isfinite(self.l2)):
            raise ValueError("penalty weights must be finite")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass
class KeyStats:
    """Observed/expected sufficient statistics for one feature key.

    For unigram keys the arrays are per-label vectors; for bigram keys
    they are (n_labels + 1, n_labels) with the extra source row holding
    begin-transition events. expected_sq accumulates the squared
    per-position expectations needed by the curvature approximation.
    """

    observed: np.ndarray
    expected: np.ndarray
    expected_sq: np.ndarray

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))

    def gradient(self) -> np.ndarray:
        return self.expected - self.observed

    def curvature(self) -> np.ndarray:
        # per-position variances summed; rounding can leave tiny
        # negatives, clamp so the result is usable as a curvature
        return np.maximum(self.expected - self.expected_sq, 0.0)


def gold_indices(model, seq) -> list[int]:
    if seq.labels is None:
        raise ValueError("sequence has no gold labels")
    return [model.labels.index(label) for label in seq.labels]


def log_loss(model, corpus, *, scorer=None, keys_cache=None) -> float:
    """Negated conditional log-likelihood of the corpus; nonnegative."""
    scorer = scorer if scorer is not None else Scorer(model)
    total = 0.0
    for i, seq in enumerate(corpus):
        keys = keys_cache[i] if keys_cache is not None else None
        if keys is None:
            keys = compile_sequence(model.templates, seq)
        lattice = forward_backward_sparse(
            model, seq, compute_pairwise=False, scorer=scorer, keys=keys
        )
        gold = gold_indices(model, seq)
        total += lattice.log_z - label_sequence_potential(model, seq, gold, keys=keys)
    return total


def penalized_objective(model, corpus, penalty: PenaltyConfig, **kwargs) -> float:
    """log_loss plus the elastic-net penalty over the stored weights."""
    penalty_term = penalty.l1 * model.store.l1_norm() + 0.5 * penalty.l2 * model.store.l2_norm_sq()
    return log_loss(model, corpus, **kwargs) + penalty_term


def _accumulate_position(stats, ukeys, bkeys, table, gold_prev, gold_y, n_labels):
    """Fold one position's pairwise table into the per-key statistics."""
    marginal = table.sum(axis=0)
    for key in ukeys:
        ks = stats.get(key)
        if ks is None:
            ks = KeyStats.empty(n_labels)
            stats[key] = ks
        ks.expected += marginal
        ks.expected_sq += marginal * marginal
        ks.observed[gold_y] += 1.0
    for key in bkeys:
        ks = stats.get(key)
        if ks is None:
            ks = KeyStats.empty((n_labels + 1, n_labels))
            stats[key] = ks
        ks.expected += table
        ks.expected_sq += table * table
        ks.observed[gold_prev, gold_y] += 1.0


def sufficient_stats(model, corpus, *, scorer=None, keys_cache=None) -> dict:
    """Statistics for every key firing in the corpus (one full pass)."""
    scorer = scorer if scorer is not None else Scorer(model)
    n_labels = model.n_labels
    begin = model.begin_index
    stats: dict = {}
    for i, seq in enumerate(corpus):
        keys = keys_cache[i] if keys_cache is not None else None
        if keys is None:
            keys = compile_sequence(model.templates, seq)
        lattice = forward_backward_sparse(model, seq, scorer=scorer, keys=keys)
        gold = gold_indices(model, seq)
        prev = begin
        for t in range(len(keys)):
            _accumulate_position(
                stats,
                keys.unigram[t],
                keys.bigram[t],
                lattice.pairwise[t],
                prev,
                gold[t],
                n_labels,
            )
            prev = gold[t]
    return stats


def restricted_stats(model, corpus, restrict, block_index: BlockIndex, *, scorer=None, keys_cache=None) -> dict:
    """Statistics for selected keys only, via truncated lattices.

    For each key, the forward recursion runs to its last occurrence and
    the backward recursion to its first, per sequence that contains it.
    """
    scorer = scorer if scorer is not None else Scorer(model)
    n_labels = model.n_labels
    begin = model.begin_index
    stats: dict = {}
    for key in restrict:
        tpl = model.templates[key[0]]
        shape = (n_labels + 1, n_labels) if tpl.bigram else n_labels
        ks = KeyStats.empty(shape)
        stats[key] = ks
        for occ in block_index.occurrences(key):
            seq = corpus[occ.sequence]
            keys = keys_cache[occ.sequence] if keys_cache is not None else None
            if keys is None:
                keys = compile_sequence(model.templates, seq)
            partial = truncated_forward_backward(
                model, seq, occ.first, occ.last, scorer=scorer, keys=keys
            )
            gold = gold_indices(model, seq)
            for t in occ.positions:
                table = partial.pairwise[t]
                prev = begin if t == 0 else gold[t - 1]
                if tpl.bigram:
                    ks.expected += table
                    ks.expected_sq += table * table
                    ks.observed[prev, gold[t]] += 1.0
                else:
                    marginal = table.sum(axis=0)
                    ks.expected += marginal
                    ks.expected_sq += marginal * marginal
                    ks.observed[gold[t]] += 1.0
    return stats


def gradient(model, corpus, restrict=None, block_index: BlockIndex | None = None, **kwargs) -> dict:
    """Per-key gradient arrays (expected minus observed counts).

    With restrict given, only those keys are computed, using truncated
    recursions over the sequences where each key occurs.
    """
    if restrict is not None:
        if block_index is None:
            block_index = build_block_index(corpus, model.templates)
        stats = restricted_stats(model, corpus, restrict, block_index, **kwargs)
    else:
        stats = sufficient_stats(model, corpus, **kwargs)
    return {key: ks.gradient() for key, ks in stats.items()}


def hessian_diag_approx(model, corpus, restrict=None, block_index: BlockIndex | None = None, **kwargs) -> dict:
    """Per-key curvature arrays from summed per-position variances.

    Always nonnegative; exact whenever a feature fires at most once per
    sequence.
    """
    if restrict is not None:
        if block_index is None:
            block_index = build_block_index(corpus, model.templates)
        stats = restricted_stats(model, corpus, restrict, block_index, **kwargs)
    else:
        stats = sufficient_stats(model, corpus, **kwargs)
    return {key: ks.curvature() for key, ks in stats.items()}
