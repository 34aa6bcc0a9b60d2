"""Brute-force reference implementations for validation.

Everything here enumerates exponentially many labelings, so instances
must stay tiny (the budget guard enforces this). Production code paths
never call into this module; it exists for test suites and for users
who want an independent cross-check of the fast routines. Clarity over
speed throughout.
"""

from __future__ import annotations

import itertools

import numpy as np

from .inference import compile_sequence, label_sequence_potential

DEFAULT_STATE_BUDGET = 10**6


class BudgetExceededError(RuntimeError):
    """Raised when an enumeration would visit too many labelings."""


def _check_budget(n_labels, length, budget):
    if n_labels**length > budget:
        raise BudgetExceededError(
            f"{n_labels}**{length} labelings exceed the enumeration budget {budget}"
        )


def enumerate_logz_and_marginals(model, seq, budget: int = DEFAULT_STATE_BUDGET):
    """Exact log partition function and pairwise marginals by enumeration.

    Sums the exponentiated potential of every labeling literally.
    Returns (log_z, pairwise) with pairwise shaped (T, Y + 1, Y) in the
    lattice convention: slice 0 holds the first-position marginal in
    the begin-marker row.
    """
    n_labels = model.n_labels
    length = len(seq)
    _check_budget(n_labels, length, budget)
    keys = compile_sequence(model.templates, seq)
    begin = model.begin_index
    z = 0.0
    joint = np.zeros((length, n_labels + 1, n_labels))
    for labeling in itertools.product(range(n_labels), repeat=length):
        weight = np.exp(label_sequence_potential(model, seq, labeling, keys=keys))
        z += weight
        prev = begin
        for t, y in enumerate(labeling):
            joint[t, prev, y] += weight
            prev = y
    return float(np.log(z)), joint / z


def enumerate_viterbi(model, seq, budget: int = DEFAULT_STATE_BUDGET):
    """Exact best labeling by enumeration (first maximum in
    lexicographic order wins). Returns (label strings, score)."""
    n_labels = model.n_labels
    length = len(seq)
    _check_budget(n_labels, length, budget)
    keys = compile_sequence(model.templates, seq)
    best = None
    best_score = -np.inf
    for labeling in itertools.product(range(n_labels), repeat=length):
        score = label_sequence_potential(model, seq, labeling, keys=keys)
        if score > best_score:
            best_score = score
            best = labeling
    return [model.labels.symbol(y) for y in best], float(best_score)


def enumerate_feature_count_moments(model, seq, tpl_idx, value, coord,
                                    budget: int = DEFAULT_STATE_BUDGET):
    """Exact (E count, E count^2) of one feature's total count.

    coord is a label index for unigram templates or a (source, target)
    index pair for bigram templates, source == n_labels meaning the
    begin marker.
    """
    n_labels = model.n_labels
    length = len(seq)
    _check_budget(n_labels, length, budget)
    keys = compile_sequence(model.templates, seq)
    tpl = model.templates[tpl_idx]
    begin = model.begin_index
    key = (tpl_idx, value)
    z = 0.0
    first = 0.0
    second = 0.0
    for labeling in itertools.product(range(n_labels), repeat=length):
        weight = np.exp(label_sequence_potential(model, seq, labeling, keys=keys))
        count = 0
        prev = begin
        for t, y in enumerate(labeling):
            if tpl.bigram:
                if key in keys.bigram[t] and (prev, y) == coord:
                    count += 1
            else:
                if key in keys.unigram[t] and y == coord:
                    count += 1
            prev = y
        z += weight
        first += weight * count
        second += weight * count * count
    return first / z, second / z


def exact_hessian_diag(model, corpus, tpl_idx, value, coord,
                       budget: int = DEFAULT_STATE_BUDGET) -> float:
    """Exact second derivative of the loss for one coordinate.

    Sequences are independent, so this is the sum over sequences of the
    exact variance of the feature's total count.
    """
    total = 0.0
    for seq in corpus:
        first, second = enumerate_feature_count_moments(
            model, seq, tpl_idx, value, coord, budget
        )
        total += second - first * first
    return total


def finite_diff(fn, point, coordinate, h):
    """Central difference (fn(x + h e_i) - fn(x - h e_i)) / 2h."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=np.float64)
    plus = point.copy()
    plus[coordinate] += h
    minus = point.copy()
    minus[coordinate] -= h
    return (fn(plus) - fn(minus)) / (2.0 * h)
