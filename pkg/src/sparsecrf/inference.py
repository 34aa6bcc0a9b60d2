"""Forward-backward and Viterbi over linear-chain lattices.

Dense routines cost one |Y| x |Y| transition product per position. The
sparse routines route the transition through the deviation matrix

    M(y', y) = exp(sum of bigram weights for the pair) - 1

so each product costs one multiplication per stored pair instead of
|Y|^2; with normalized forward vectors the dense product splits into a
constant plus the sparse correction. Both paths agree to ~1e-12
relative.

Numerical safety uses scaling rather than log-domain arithmetic: the
forward and backward vectors are renormalized to sum to one at every
position and log Z is recovered from the accumulated forward scale
factors. The per-position pairwise tables are normalized individually,
which also makes truncated runs (forward stopped early, backward
started late) exact at the positions they cover.

All operations are pure given an immutable model and may run
concurrently across sequences. Instrumentation (the bigram multiply
counter) is returned with each lattice, never shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .features import Template, extract_key


class InferenceError(RuntimeError):
    """Raised when a potential overflows or a lattice degenerates."""


@dataclass
class SequenceKeys:
    """Per-position feature keys of one sequence, computed once.

    unigram[t] and bigram[t] are tuples of (template index, value)
    pairs; extraction does not depend on the weights, so these can be
    cached for the lifetime of a corpus.
    """

    unigram: list[tuple]
    bigram: list[tuple]

    def __len__(self) -> int:
        return len(self.unigram)


def compile_sequence(templates, seq) -> SequenceKeys:
    cols = seq.columns
    length = len(seq)
    uni = []
    big = []
    for t in range(length):
        u = []
        b = []
        for tpl_idx, tpl in enumerate(templates):
            value = extract_key(tpl, cols, t)
            if value is None:
                continue
            (b if tpl.bigram else u).append((tpl_idx, value))
        uni.append(tuple(u))
        big.append(tuple(b))
    return SequenceKeys(uni, big)


_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_F = np.empty(0, dtype=np.float64)


@dataclass
class TransitionDelta:
    """Sparse deviation matrix for one set of bigram keys.

    Core pairs have a real label as source; begin pairs sit in the
    extra source row and only matter at the first position. vals hold
    the raw summed bigram weights, mvals their expm1 transform. r is
    the number of stored pairs (any pair with a nonzero contributing
    weight is kept, even if contributions cancel).
    """

    rows: np.ndarray = _EMPTY_I
    cols: np.ndarray = _EMPTY_I
    vals: np.ndarray = _EMPTY_F
    mvals: np.ndarray = _EMPTY_F
    begin_cols: np.ndarray = _EMPTY_I
    begin_vals: np.ndarray = _EMPTY_F
    begin_mvals: np.ndarray = _EMPTY_F
    _by_target: list | None = field(default=None, repr=False)

    @property
    def r(self) -> int:
        return len(self.rows) + len(self.begin_cols)

    @property
    def r_core(self) -> int:
        return len(self.rows)

    def by_target(self, n_labels: int) -> list:
        """Active (sources, raw values) per target label, for Viterbi."""
        if self._by_target is None:
            groups = [(_EMPTY_I, _EMPTY_F)] * n_labels
            if len(self.cols):
                order = np.argsort(self.cols, kind="stable")
                cols = self.cols[order]
                rows = self.rows[order]
                vals = self.vals[order]
                bounds = np.searchsorted(cols, np.arange(n_labels + 1))
                groups = [
                    (rows[bounds[y] : bounds[y + 1]], vals[bounds[y] : bounds[y + 1]])
                    for y in range(n_labels)
                ]
            self._by_target = groups
        return self._by_target


class Scorer:
    """Weight-dependent position scores with caches keyed on key sets.

    Repeated symbols dominate real corpora, so the exp tables for a
    given set of feature keys are built once and reused for every
    position that shares the set. A scorer snapshot is only valid while
    the model's weights do not change; training rebuilds one after each
    block update.
    """

    def __init__(self, model):
        self.model = model
        self.n_labels = model.n_labels
        self._u_cache: dict[tuple, tuple] = {}
        self._delta_cache: dict[tuple, TransitionDelta] = {}
        self._bigram_total_cache: dict[tuple, np.ndarray] = {}
        self._psi_cache: dict[tuple, np.ndarray] = {}
        self._psi_sparse_cache: dict[tuple, np.ndarray] = {}

    def unigram_row(self, ukeys: tuple):
        """(summed weights, their exp) over the position's unigram keys."""
        cached = self._u_cache.get(ukeys)
        if cached is None:
            u = np.zeros(self.n_labels)
            store = self.model.store
            for key in ukeys:
                vec = store.unigram_vector(key)
                if vec is not None:
                    u += vec
            with np.errstate(over="ignore"):
                expu = np.exp(u)
            if not np.isfinite(expu).all():
                raise InferenceError(
                    f"unigram potential overflow for keys {ukeys!r}"
                )
            cached = (u, expu)
            self._u_cache[ukeys] = cached
        return cached

    def delta(self, bkeys: tuple) -> TransitionDelta:
        cached = self._delta_cache.get(bkeys)
        if cached is None:
            cached = self._build_delta(bkeys)
            self._delta_cache[bkeys] = cached
        return cached

    def _build_delta(self, bkeys: tuple) -> TransitionDelta:
        store = self.model.store
        views = []
        for key in bkeys:
            view = store.bigram_nonzeros(key)
            if view is not None and len(view[0]):
                views.append(view)
        if not views:
            return TransitionDelta()
        if len(views) == 1:
            rows, cols, vals = views[0]
        else:
            # sum contributions per pair; the stable sort keeps template
            # order inside each pair so the additions match the dense path
            rows = np.concatenate([v[0] for v in views])
            cols = np.concatenate([v[1] for v in views])
            raw = np.concatenate([v[2] for v in views])
            pair_ids = rows * self.n_labels + cols
            order = np.argsort(pair_ids, kind="stable")
            pair_ids = pair_ids[order]
            raw = raw[order]
            uniq, starts = np.unique(pair_ids, return_index=True)
            vals = np.add.reduceat(raw, starts)
            rows = uniq // self.n_labels
            cols = uniq % self.n_labels
        begin = self.n_labels
        is_begin = rows == begin
        with np.errstate(over="ignore"):
            mvals = np.expm1(vals)
        if not np.isfinite(mvals).all():
            raise InferenceError(f"bigram potential overflow for keys {bkeys!r}")
        return TransitionDelta(
            rows=np.ascontiguousarray(rows[~is_begin], dtype=np.int64),
            cols=np.ascontiguousarray(cols[~is_begin], dtype=np.int64),
            vals=np.ascontiguousarray(vals[~is_begin]),
            mvals=np.ascontiguousarray(mvals[~is_begin]),
            begin_cols=np.ascontiguousarray(cols[is_begin], dtype=np.int64),
            begin_vals=np.ascontiguousarray(vals[is_begin]),
            begin_mvals=np.ascontiguousarray(mvals[is_begin]),
        )

    def bigram_total(self, bkeys: tuple) -> np.ndarray:
        """Dense (n_labels + 1, n_labels) sum of the bigram weight groups."""
        cached = self._bigram_total_cache.get(bkeys)
        if cached is None:
            total = np.zeros((self.n_labels + 1, self.n_labels))
            store = self.model.store
            for key in bkeys:
                mat = store.bigram_matrix(key)
                if mat is not None:
                    total = total + mat
            cached = total
            self._bigram_total_cache[bkeys] = cached
        return cached

    def psi_dense(self, ukeys: tuple, bkeys: tuple) -> np.ndarray:
        """Dense potential table exp(unigram + bigram), (Y + 1, Y)."""
        sig = (ukeys, bkeys)
        cached = self._psi_cache.get(sig)
        if cached is None:
            u, _ = self.unigram_row(ukeys)
            with np.errstate(over="ignore"):
                psi = np.exp(u[None, :] + self.bigram_total(bkeys))
            if not np.isfinite(psi).all():
                raise InferenceError(f"potential overflow for keys {sig!r}")
            self._psi_cache[sig] = psi
            cached = psi
        return cached

    def psi_from_sparse(self, ukeys: tuple, bkeys: tuple) -> np.ndarray:
        """Same table assembled from the sparse parts: exp(u) * (1 + M)."""
        sig = (ukeys, bkeys)
        cached = self._psi_sparse_cache.get(sig)
        if cached is None:
            _, expu = self.unigram_row(ukeys)
            delta = self.delta(bkeys)
            one_plus_m = np.ones((self.n_labels + 1, self.n_labels))
            if len(delta.rows):
                one_plus_m[delta.rows, delta.cols] += delta.mvals
            if len(delta.begin_cols):
                one_plus_m[self.n_labels, delta.begin_cols] += delta.begin_mvals
            cached = expu[None, :] * one_plus_m
            self._psi_sparse_cache[sig] = cached
        return cached


@dataclass
class Lattice:
    """Scaled forward-backward quantities for one sequence.

    forward rows are normalized to sum to one by construction; backward
    rows are renormalized the same way (their absolute scale cancels in
    every marginal). pairwise[t] is the posterior over (source, target)
    at position t: entry [y', y] is P(y_{t-1} = y', y_t = y | x) with
    the extra source row holding the begin marker, so pairwise[0] has
    its mass in that row only. Each pairwise slice sums to one.

    bigram_multiplies counts the scalar multiplications spent in sparse
    transition products (zero for dense runs).
    """

    forward: np.ndarray
    backward: np.ndarray
    scale: np.ndarray
    log_z: float
    pairwise: np.ndarray | None
    bigram_multiplies: int = 0
    mode: str = "dense"

    def unigram_marginals(self) -> np.ndarray:
        """(T, Y) position marginals, from the pairwise tables."""
        return self.pairwise.sum(axis=1)


@dataclass
class PartialLattice:
    """Pairwise marginals restricted to a span, from a truncated run."""

    first: int
    last: int
    pairwise: dict[int, np.ndarray]
    bigram_multiplies: int = 0


@njit(cache=True)
def _sparse_fb_kernel(expu, ptr, rows, cols, mvals, b0_cols, b0_mvals, fwd_last, bwd_first):
    T, Y = expu.shape
    alpha = np.zeros((T, Y))
    beta = np.zeros((T, Y))
    scale = np.zeros(T)
    nmul = 0
    a = expu[0].copy()
    for j in range(b0_cols.shape[0]):
        c0 = b0_cols[j]
        a[c0] += expu[0, c0] * b0_mvals[j]
    c = 0.0
    for y in range(Y):
        c += a[y]
    scale[0] = c
    for y in range(Y):
        alpha[0, y] = a[y] / c
    for t in range(1, fwd_last + 1):
        contrib = np.zeros(Y)
        for j in range(ptr[t], ptr[t + 1]):
            contrib[cols[j]] += mvals[j] * alpha[t - 1, rows[j]]
            nmul += 1
        c = 0.0
        for y in range(Y):
            v = expu[t, y] * (1.0 + contrib[y])
            alpha[t, y] = v
            c += v
        scale[t] = c
        for y in range(Y):
            alpha[t, y] /= c
    for y in range(Y):
        beta[T - 1, y] = 1.0 / Y
    for t in range(T - 2, bwd_first - 1, -1):
        sv = 0.0
        v = np.empty(Y)
        for y in range(Y):
            v[y] = beta[t + 1, y] * expu[t + 1, y]
            sv += v[y]
        contrib = np.zeros(Y)
        for j in range(ptr[t + 1], ptr[t + 2]):
            contrib[rows[j]] += mvals[j] * v[cols[j]]
            nmul += 1
        c = 0.0
        for y in range(Y):
            b = sv + contrib[y]
            beta[t, y] = b
            c += b
        for y in range(Y):
            beta[t, y] /= c
    return alpha, beta, scale, nmul


def _sparse_arrays(scorer, keys):
    """Assemble per-position COO arrays for the kernel."""
    T = len(keys)
    expu_rows = [scorer.unigram_row(uk)[1] for uk in keys.unigram]
    expu = np.stack(expu_rows)
    deltas = [scorer.delta(bk) for bk in keys.bigram]
    ptr = np.zeros(T + 1, dtype=np.int64)
    for t in range(1, T):
        ptr[t + 1] = ptr[t] + deltas[t].r_core
    total = int(ptr[T])
    if total:
        rows = np.concatenate([deltas[t].rows for t in range(1, T)])
        cols = np.concatenate([deltas[t].cols for t in range(1, T)])
        mvals = np.concatenate([deltas[t].mvals for t in range(1, T)])
    else:
        rows, cols, mvals = _EMPTY_I, _EMPTY_I, _EMPTY_F
    d0 = deltas[0]
    return expu, ptr, rows, cols, mvals, d0.begin_cols, d0.begin_mvals


def _check_scale(scale, fwd_last):
    used = scale[: fwd_last + 1]
    if not np.isfinite(used).all() or (used <= 0).any():
        raise InferenceError("forward recursion degenerated (over/underflow)")


def _pairwise_begin(alpha0, beta0, n_labels):
    table = np.zeros((n_labels + 1, n_labels))
    raw = alpha0 * beta0
    table[n_labels] = raw / raw.sum()
    return table


def _pairwise_at(alpha_prev, psi, beta_t, n_labels):
    table = np.zeros((n_labels + 1, n_labels))
    raw = alpha_prev[:, None] * psi[:n_labels, :] * beta_t[None, :]
    table[:n_labels] = raw / raw.sum()
    return table


def forward_backward_sparse(model, seq, *, compute_pairwise=True, scorer=None, keys=None):
    """Scaled forward-backward through the sparse transition products.

    Matches forward_backward_dense to ~1e-12 relative while spending
    one multiplication per stored transition pair per product; the
    count is reported as Lattice.bigram_multiplies.
    """
    scorer = scorer if scorer is not None else Scorer(model)
    keys = keys if keys is not None else compile_sequence(model.templates, seq)
    T = len(keys)
    Y = model.n_labels
    expu, ptr, rows, cols, mvals, b0c, b0m = _sparse_arrays(scorer, keys)
    alpha, beta, scale, nmul = _sparse_fb_kernel(
        expu, ptr, rows, cols, mvals, b0c, b0m, T - 1, 0
    )
    _check_scale(scale, T - 1)
    log_z = float(np.log(scale).sum())
    pairwise = None
    if compute_pairwise:
        pairwise = np.zeros((T, Y + 1, Y))
        pairwise[0] = _pairwise_begin(alpha[0], beta[0], Y)
        for t in range(1, T):
            psi = scorer.psi_from_sparse(keys.unigram[t], keys.bigram[t])
            pairwise[t] = _pairwise_at(alpha[t - 1], psi, beta[t], Y)
    return Lattice(
        forward=alpha,
        backward=beta,
        scale=scale,
        log_z=log_z,
        pairwise=pairwise,
        bigram_multiplies=int(nmul),
        mode="sparse",
    )


def forward_backward_dense(model, seq, *, compute_pairwise=True, scorer=None, keys=None):
    """Scaled forward-backward with full per-position potential tables."""
    scorer = scorer if scorer is not None else Scorer(model)
    keys = keys if keys is not None else compile_sequence(model.templates, seq)
    T = len(keys)
    Y = model.n_labels
    psis = [scorer.psi_dense(keys.unigram[t], keys.bigram[t]) for t in range(T)]
    alpha = np.zeros((T, Y))
    beta = np.zeros((T, Y))
    scale = np.zeros(T)
    a = psis[0][Y, :]
    c = a.sum()
    if not np.isfinite(c) or c <= 0:
        raise InferenceError("forward recursion degenerated at position 0")
    scale[0] = c
    alpha[0] = a / c
    for t in range(1, T):
        a = alpha[t - 1] @ psis[t][:Y, :]
        c = a.sum()
        if not np.isfinite(c) or c <= 0:
            raise InferenceError(f"forward recursion degenerated at position {t}")
        scale[t] = c
        alpha[t] = a / c
    beta[T - 1] = 1.0 / Y
    for t in range(T - 2, -1, -1):
        b = psis[t + 1][:Y, :] @ beta[t + 1]
        beta[t] = b / b.sum()
    log_z = float(np.log(scale).sum())
    pairwise = None
    if compute_pairwise:
        pairwise = np.zeros((T, Y + 1, Y))
        pairwise[0] = _pairwise_begin(alpha[0], beta[0], Y)
        for t in range(1, T):
            pairwise[t] = _pairwise_at(alpha[t - 1], psis[t], beta[t], Y)
    return Lattice(
        forward=alpha,
        backward=beta,
        scale=scale,
        log_z=log_z,
        pairwise=pairwise,
        bigram_multiplies=0,
        mode="dense",
    )


def truncated_forward_backward(model, seq, first, last, *, mode="sparse", scorer=None, keys=None):
    """Pairwise marginals at positions first..last (0-based, inclusive).

    The forward recursion stops at `last` and the backward recursion at
    `first`; per-position normalization makes the covered marginals
    equal to the full-lattice values.
    """
    scorer = scorer if scorer is not None else Scorer(model)
    keys = keys if keys is not None else compile_sequence(model.templates, seq)
    T = len(keys)
    if not 0 <= first <= last < T:
        raise ValueError(f"invalid span [{first}, {last}] for length {T}")
    Y = model.n_labels
    if mode == "sparse":
        expu, ptr, rows, cols, mvals, b0c, b0m = _sparse_arrays(scorer, keys)
        alpha, beta, scale, nmul = _sparse_fb_kernel(
            expu, ptr, rows, cols, mvals, b0c, b0m, last, first
        )
        _check_scale(scale, last)
        psi_of = lambda t: scorer.psi_from_sparse(keys.unigram[t], keys.bigram[t])
    elif mode == "dense":
        nmul = 0
        alpha = np.zeros((T, Y))
        beta = np.zeros((T, Y))
        psi_of = lambda t: scorer.psi_dense(keys.unigram[t], keys.bigram[t])
        a = psi_of(0)[Y, :]
        c = a.sum()
        if not np.isfinite(c) or c <= 0:
            raise InferenceError("forward recursion degenerated at position 0")
        alpha[0] = a / c
        for t in range(1, last + 1):
            a = alpha[t - 1] @ psi_of(t)[:Y, :]
            c = a.sum()
            if not np.isfinite(c) or c <= 0:
                raise InferenceError(f"forward recursion degenerated at position {t}")
            alpha[t] = a / c
        beta[T - 1] = 1.0 / Y
        for t in range(T - 2, first - 1, -1):
            b = psi_of(t + 1)[:Y, :] @ beta[t + 1]
            beta[t] = b / b.sum()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    pairwise = {}
    for t in range(first, last + 1):
        if t == 0:
            pairwise[0] = _pairwise_begin(alpha[0], beta[0], Y)
        else:
            pairwise[t] = _pairwise_at(alpha[t - 1], psi_of(t), beta[t], Y)
    return PartialLattice(first=first, last=last, pairwise=pairwise, bigram_multiplies=int(nmul))


def _viterbi_dense(model, keys, scorer):
    T = len(keys)
    Y = model.n_labels
    us = [scorer.unigram_row(uk)[0] for uk in keys.unigram]
    eps = us[0] + scorer.bigram_total(keys.bigram[0])[Y]
    backptr = np.zeros((T, Y), dtype=np.int64)
    targets = np.arange(Y)
    for t in range(1, T):
        scores = eps[:, None] + scorer.bigram_total(keys.bigram[t])[:Y, :]
        bp = np.argmax(scores, axis=0)
        backptr[t] = bp
        eps = scores[bp, targets] + us[t]
    return _backtrack(eps, backptr, T)


def _viterbi_sparse(model, keys, scorer):
    T = len(keys)
    Y = model.n_labels
    us = [scorer.unigram_row(uk)[0] for uk in keys.unigram]
    d0 = scorer.delta(keys.bigram[0])
    eps = us[0].copy()
    if len(d0.begin_cols):
        eps[d0.begin_cols] += d0.begin_vals
    backptr = np.zeros((T, Y), dtype=np.int64)
    for t in range(1, T):
        delta = scorer.delta(keys.bigram[t])
        groups = delta.by_target(Y)
        # predecessors sorted by score descending, ties by smaller index
        order = np.argsort(-eps, kind="stable")
        new_eps = np.empty(Y)
        for y in range(Y):
            srcs, vals = groups[y]
            if len(srcs) == 0:
                best_val = eps[order[0]]
                best_src = order[0]
            else:
                blocked = np.zeros(Y, dtype=bool)
                blocked[srcs] = True
                best_val = -np.inf
                best_src = -1
                for idx in order:
                    if not blocked[idx]:
                        best_val = eps[idx]
                        best_src = idx
                        break
                cand = eps[srcs] + vals
                m = cand.max()
                if m > best_val:
                    best_val = m
                    best_src = int(srcs[cand == m].min())
                elif m == best_val and best_src >= 0:
                    best_src = min(best_src, int(srcs[cand == m].min()))
                elif best_src < 0:
                    best_val = m
                    best_src = int(srcs[cand == m].min())
            new_eps[y] = best_val + us[t][y]
            backptr[t, y] = best_src
        eps = new_eps
    return _backtrack(eps, backptr, T)


def _backtrack(eps, backptr, T):
    y = int(np.argmax(eps))
    score = float(eps[y])
    path = [0] * T
    path[T - 1] = y
    for t in range(T - 1, 0, -1):
        y = int(backptr[t, y])
        path[t - 1] = y
    return path, score


def viterbi(model, seq, mode="dense", *, scorer=None, keys=None):
    """Best labeling and its unnormalized log-potential.

    Ties break to the smallest label index, then the smallest
    predecessor index, so the dense and sparse modes return identical
    labelings. Returns (label strings, score).
    """
    scorer = scorer if scorer is not None else Scorer(model)
    keys = keys if keys is not None else compile_sequence(model.templates, seq)
    if mode == "dense":
        path, score = _viterbi_dense(model, keys, scorer)
    elif mode == "sparse":
        path, score = _viterbi_sparse(model, keys, scorer)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.isfinite(score):
        raise InferenceError("non-finite Viterbi score")
    return [model.labels.symbol(y) for y in path], score


def marginal_decode(model, seq, *, scorer=None, keys=None):
    """Position-wise argmax of the posterior marginals (ties: smallest index)."""
    lattice = forward_backward_sparse(model, seq, scorer=scorer, keys=keys)
    marg = lattice.unigram_marginals()
    return [model.labels.symbol(int(y)) for y in np.argmax(marg, axis=1)]


def label_sequence_potential(model, seq, label_indices, *, keys=None) -> float:
    """Unnormalized log-potential of a labeling (begin marker at t=0)."""
    keys = keys if keys is not None else compile_sequence(model.templates, seq)
    store = model.store
    begin = model.begin_index
    total = 0.0
    prev = begin
    for t in range(len(keys)):
        y = label_indices[t]
        for key in keys.unigram[t]:
            total += store.get_unigram(key, y)
        for key in keys.bigram[t]:
            total += store.get_bigram(key, prev, y)
        prev = y
    return total
