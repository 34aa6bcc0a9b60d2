"""Coordinate descent and blockwise coordinate descent training.

Every update minimizes a local quadratic model of the penalized loss in
one coordinate, which has the closed form

    theta_new = s(a * hess * theta - grad, l1) / (a * hess + l2)

with s the soft-thresholding map and ``a >= 1`` a step damping factor
applied to the curvature term only (so fixed points are optima of the
true objective regardless of curvature errors). Plain coordinate mode
refreshes the statistics of every single coordinate with its own
truncated lattice passes; blockwise mode shares one set of lattice
passes among all coordinates that test the same observed value, which
is roughly a block-size speedup per epoch at comparable convergence.

Blocks are processed sequentially in a fixed order (descending
occurrence count); within one block the per-sequence lattice passes are
an order-independent reduction. The per-epoch objective is recomputed
once per epoch for the history, and the stationarity check is left to
the caller at termination.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import token_error
from .features import BlockOccurrences, build_block_index
from .inference import Scorer, compile_sequence, truncated_forward_backward
from .model import LabelAlphabet, Model, ObservationAlphabet
from .objective import PenaltyConfig, gold_indices, log_loss

HESS_FLOOR = 1e-8


def soft_threshold(z, rho):
    """Shrink z toward zero by rho; exactly zero inside [-rho, rho]."""
    return np.sign(z) * np.maximum(np.abs(z) - rho, 0.0)


def coordinate_update(theta, grad, hess, penalty: PenaltyConfig, alpha: float = 1.0,
                      hess_floor: float = HESS_FLOOR, step_cap: float = np.inf):
    """Closed-form minimizer of the damped local quadratic model.

    Accepts scalars or arrays. Curvatures below hess_floor are clamped
    (vanishing curvature would otherwise divide the step to infinity);
    callers count clamps for diagnostics.

    step_cap bounds |new - theta|. When the curvature is near zero but
    the gradient is not (a confidently wrong model state early in
    training), the quadratic model wildly overshoots and can push
    potentials past the range of exp; capping the move keeps training
    finite without changing the fixed points, since a fixed point has
    zero step regardless of the cap.
    """
    if alpha < 1.0:
        raise ValueError("alpha must be >= 1")
    hess = np.maximum(hess, hess_floor)
    # damping scales the curvature term only: alpha = 1 is the raw
    # quadratic-model minimizer, larger alpha shrinks the step toward
    # the current value without moving the fixed points
    scaled = hess * alpha
    new = soft_threshold(scaled * theta - grad, penalty.l1) / (scaled + penalty.l2)
    if not np.isinf(step_cap):
        new = np.clip(new, theta - step_cap, theta + step_cap)
    return new


@dataclass
class TrainConfig:
    """Training hyperparameters.

    The damping factor starts at alpha_initial for the first epochs
    (blindly started models need heavy damping) and drops to alpha_main
    from epoch switch_epoch on; alpha_main defaults to 1 in coordinate
    mode and 3 in blockwise mode, where the simultaneous within-block
    updates need some damping. On an epoch-level objective increase
    after the switch the damping is doubled for all subsequent blocks.

    Blocks are always visited in descending occurrence count (ties by
    key), fixed across epochs. cutoff admits only feature keys observed
    at least that many times.
    """

    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    mode: str = "blockwise"
    max_epochs: int = 30
    tol_objective: float = 1e-4
    alpha_initial: float = 100.0
    alpha_main: float | None = None
    switch_epoch: int = 3
    cutoff: int = 1
    hess_floor: float = HESS_FLOOR
    step_cap: float = 2.0

    def __post_init__(self):
        if self.mode not in ("blockwise", "coordinate"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.alpha_initial < 1 or (self.alpha_main is not None and self.alpha_main < 1):
            raise ValueError("damping factors must be >= 1")
        if not self.tol_objective > 0:
            raise ValueError("tol_objective must be positive")

    def resolved_alpha_main(self) -> float:
        if self.alpha_main is not None:
            return self.alpha_main
        return 1.0 if self.mode == "coordinate" else 3.0

    def alpha_for_epoch(self, epoch: int) -> float:
        if epoch < self.switch_epoch:
            return self.alpha_initial
        return self.resolved_alpha_main()


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    loss: float
    active_mu: int
    active_lambda: int
    heldout_error: float | None
    seconds: float
    alpha: float
    hess_clamps: int = 0
    lattices: int = 0


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    alpha_violations: int = 0
    aborted: bool = False

    def final_objective(self) -> float:
        return self.records[-1].objective

    def write(self, dest):
        """Line-delimited record file, one epoch per line."""
        if hasattr(dest, "write"):
            self._write(dest)
        else:
            with open(dest, "w", encoding="utf-8") as fh:
                self._write(fh)

    def _write(self, fh):
        fh.write("#epoch\tobjective\tloss\tactive_mu\tactive_lambda\theldout_error\tseconds\n")
        for r in self.records:
            heldout = "-" if r.heldout_error is None else repr(r.heldout_error)
            fh.write(
                f"{r.epoch}\t{r.objective!r}\t{r.loss!r}\t{r.active_mu}\t"
                f"{r.active_lambda}\t{heldout}\t{r.seconds:.6f}\n"
            )


@dataclass
class Block:
    """All parameters that test one observed value of one extraction.

    Sibling unigram/bigram templates reading the same value fire at
    exactly the same positions, so one set of truncated lattice passes
    serves the whole block's statistics.
    """

    signature: tuple
    value: str
    unigram_key: tuple | None
    bigram_key: tuple | None
    occurrences: list[BlockOccurrences]
    total: int
    observed: tuple | None = None


def build_blocks(block_index, templates, admitted=None) -> list[Block]:
    """Group index keys into update blocks, largest first."""
    by_signature: dict[tuple, dict[str, int]] = {}
    for tpl_idx, tpl in enumerate(templates):
        slot = by_signature.setdefault(tpl.signature, {})
        side = "b" if tpl.bigram else "u"
        if side in slot:
            raise ValueError(f"duplicate template descriptor {tpl.descriptor!r}")
        slot[side] = tpl_idx
    blocks = []
    for signature, slot in by_signature.items():
        u_idx = slot.get("u")
        b_idx = slot.get("b")
        primary = u_idx if u_idx is not None else b_idx
        values = {key[1] for key in block_index.keys() if key[0] == primary}
        for value in values:
            primary_key = (primary, value)
            if admitted is not None and primary_key not in admitted:
                continue
            blocks.append(
                Block(
                    signature=signature,
                    value=value,
                    unigram_key=(u_idx, value) if u_idx is not None else None,
                    bigram_key=(b_idx, value) if b_idx is not None else None,
                    occurrences=block_index.occurrences(primary_key),
                    total=block_index.total_count(primary_key),
                )
            )
    blocks.sort(key=lambda b: (-b.total, b.signature, b.value))
    return blocks


def _ensure_observed(block, golds, n_labels, begin):
    """Gold-label counts for the block, cached (the corpus is fixed)."""
    if block.observed is not None:
        return block.observed
    obs_u = np.zeros(n_labels)
    obs_b = np.zeros((n_labels + 1, n_labels))
    for occ in block.occurrences:
        gold = golds[occ.sequence]
        for t in occ.positions:
            prev = begin if t == 0 else gold[t - 1]
            obs_u[gold[t]] += 1.0
            obs_b[prev, gold[t]] += 1.0
    block.observed = (obs_u, obs_b)
    return block.observed


def _block_expectations(model, corpus, block, scorer, keys_cache):
    """Expected counts and squared-sum terms from truncated lattices."""
    n_labels = model.n_labels
    exp_u = np.zeros(n_labels)
    sq_u = np.zeros(n_labels)
    exp_b = np.zeros((n_labels + 1, n_labels))
    sq_b = np.zeros((n_labels + 1, n_labels))
    lattices = 0
    for occ in block.occurrences:
        seq = corpus[occ.sequence]
        partial = truncated_forward_backward(
            model, seq, occ.first, occ.last,
            scorer=scorer, keys=keys_cache[occ.sequence],
        )
        lattices += 1
        for t in occ.positions:
            table = partial.pairwise[t]
            exp_b += table
            sq_b += table * table
            marginal = table.sum(axis=0)
            exp_u += marginal
            sq_u += marginal * marginal
    return exp_u, sq_u, exp_b, sq_b, lattices


class _EpochState:
    """Mutable diagnostics threaded through one epoch."""

    def __init__(self):
        self.hess_clamps = 0
        self.lattices = 0


def rebalance_split(m, values, penalty: PenaltyConfig) -> float:
    """Optimal shift c for the loss-null direction of a sibling pair.

    A bigram column fires exactly once whenever its unigram sibling
    fires (some source label always exists), so moving mass c from the
    whole column onto the unigram weight leaves every sequence
    potential unchanged. The penalty along that direction,

        l1 |m + c| + (l2/2)(m + c)^2
        + sum_j [ l1 |v_j - c| + (l2/2)(v_j - c)^2 ],

    is convex piecewise quadratic; this returns its exact minimizer.
    Without the move, coordinate descent crawls along this valley.
    """
    l1, l2 = penalty.l1, penalty.l2
    if l1 == 0.0 and l2 == 0.0:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    breaks = np.unique(np.concatenate((values, [-m])))

    def objective(c):
        return (
            l1 * abs(m + c)
            + 0.5 * l2 * (m + c) ** 2
            + l1 * np.abs(values - c).sum()
            + 0.5 * l2 * np.square(values - c).sum()
        )

    candidates = list(breaks)
    if l2 > 0:
        # interior stationary point of each smooth segment
        edges = np.concatenate(([-np.inf], breaks, [np.inf]))
        n = len(values)
        for lo, hi in zip(edges[:-1], edges[1:]):
            if lo == hi:
                continue
            if not np.isfinite(lo):
                probe = hi - 1.0
            elif not np.isfinite(hi):
                probe = lo + 1.0
            else:
                probe = (lo + hi) / 2.0
            s0 = 1.0 if m + probe > 0 else -1.0
            sj = np.where(values - probe > 0, 1.0, -1.0)
            c = (l1 * (sj.sum() - s0) / l2 - m + values.sum()) / (1 + n)
            if lo < c < hi:
                candidates.append(float(c))
    best = min(candidates, key=lambda c: (objective(c), abs(c)))
    return float(best)


def uniform_shift(values, penalty: PenaltyConfig) -> float:
    """Optimal c for shifting a whole group by a constant.

    Some label (pair) always fires at a position, so adding a constant
    to every weight of a group that tests one observed value shifts all
    path scores equally and cancels in the normalizer; only the penalty
    changes. Reuses the piecewise-quadratic solve via pen(v - c) =
    pen(-(v) + ... ), i.e. by negating all but the first weight.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    return rebalance_split(values[0], -values[1:], penalty)


def _rebalance_block(store, block, penalty, n_labels):
    """Descend the penalty along the block's loss-null directions.

    Per target label, mass moves between the unigram weight and its
    bigram column (the column fires exactly once whenever the unigram
    does); then the whole block shifts by a constant. Both moves leave
    every sequence potential unchanged, so only the penalty decreases;
    without them coordinate descent crawls along these flat valleys.
    """
    mu = lam = None
    changed = False
    if block.unigram_key is not None:
        mu = store.unigram_vector(block.unigram_key)
        mu = mu.copy() if mu is not None else np.zeros(n_labels)
    if block.bigram_key is not None:
        lam = store.bigram_matrix(block.bigram_key)
        lam = lam.copy() if lam is not None else np.zeros((n_labels + 1, n_labels))
    for _ in range(16):
        moved = 0.0
        if mu is not None and lam is not None:
            for y in range(n_labels):
                c = rebalance_split(mu[y], lam[:, y], penalty)
                if c != 0.0:
                    mu[y] += c
                    lam[:, y] -= c
                    moved = max(moved, abs(c))
        if mu is not None:
            c = uniform_shift(mu, penalty)
            if c != 0.0:
                mu += c
                moved = max(moved, abs(c))
        elif lam is not None:
            c = uniform_shift(lam, penalty)
            if c != 0.0:
                lam += c
                moved = max(moved, abs(c))
        if moved > 0.0:
            changed = True
        if moved < 1e-12:
            break
    if changed:
        if mu is not None:
            store.set_unigram_vector(block.unigram_key, mu)
        if lam is not None:
            store.set_bigram_matrix(block.bigram_key, lam)


def _apply_group(store, kind, key, theta, grad, hess, penalty, alpha, floor, cap, state):
    state.hess_clamps += int((hess < floor).sum())
    new = coordinate_update(theta, grad, hess, penalty, alpha, floor, cap)
    if not np.array_equal(new, theta):
        if kind == "u":
            store.set_unigram_vector(key, new)
        else:
            store.set_bigram_matrix(key, new)
        return True
    return False


def blockwise_epoch(model, corpus, blocks, config: TrainConfig, alpha: float,
                    keys_cache=None, golds=None) -> _EpochState:
    """One sweep updating every block's parameters together.

    Per block: truncated lattice passes over the sequences containing
    the value, then all unigram coordinates are updated, then all
    bigram coordinates, all from the same statistics.
    """
    keys_cache, golds = _ensure_caches(model, corpus, keys_cache, golds)
    state = _EpochState()
    penalty = config.penalty
    begin = model.begin_index
    store = model.store
    for block in blocks:
        scorer = Scorer(model)
        exp_u, sq_u, exp_b, sq_b, lattices = _block_expectations(
            model, corpus, block, scorer, keys_cache
        )
        state.lattices += lattices
        obs_u, obs_b = _ensure_observed(block, golds, model.n_labels, begin)
        if block.unigram_key is not None:
            key = block.unigram_key
            theta = store.unigram_vector(key)
            theta = theta if theta is not None else np.zeros(model.n_labels)
            _apply_group(
                store, "u", key, theta, exp_u - obs_u,
                np.maximum(exp_u - sq_u, 0.0),
                penalty, alpha, config.hess_floor, config.step_cap, state,
            )
        if block.bigram_key is not None:
            key = block.bigram_key
            theta = store.bigram_matrix(key)
            theta = theta if theta is not None else np.zeros((model.n_labels + 1, model.n_labels))
            _apply_group(
                store, "b", key, theta, exp_b - obs_b,
                np.maximum(exp_b - sq_b, 0.0),
                penalty, alpha, config.hess_floor, config.step_cap, state,
            )
        _rebalance_block(store, block, penalty, model.n_labels)
    return state


def cd_epoch(model, corpus, blocks, config: TrainConfig, alpha: float,
             keys_cache=None, golds=None) -> _EpochState:
    """One sweep updating every coordinate with fresh statistics.

    Each coordinate gets its own truncated lattice passes over the
    sequences where its feature fires, so later coordinates see all
    earlier updates.
    """
    keys_cache, golds = _ensure_caches(model, corpus, keys_cache, golds)
    state = _EpochState()
    penalty = config.penalty
    n_labels = model.n_labels
    begin = model.begin_index
    store = model.store
    for block in blocks:
        obs_u, obs_b = _ensure_observed(block, golds, n_labels, begin)
        scorer = Scorer(model)
        if block.unigram_key is not None:
            key = block.unigram_key
            for y in range(n_labels):
                exp_u, sq_u, _, _, lattices = _block_expectations(
                    model, corpus, block, scorer, keys_cache
                )
                state.lattices += lattices
                theta = store.get_unigram(key, y)
                hess = max(exp_u[y] - sq_u[y], 0.0)
                if hess < config.hess_floor:
                    state.hess_clamps += 1
                new = float(
                    coordinate_update(theta, exp_u[y] - obs_u[y], hess,
                                      penalty, alpha, config.hess_floor,
                                      config.step_cap)
                )
                if new != theta:
                    store.set_unigram(key, y, new)
                    scorer = Scorer(model)
        if block.bigram_key is not None:
            key = block.bigram_key
            for y_prev in range(n_labels + 1):
                for y in range(n_labels):
                    _, _, exp_b, sq_b, lattices = _block_expectations(
                        model, corpus, block, scorer, keys_cache
                    )
                    state.lattices += lattices
                    theta = store.get_bigram(key, y_prev, y)
                    hess = max(exp_b[y_prev, y] - sq_b[y_prev, y], 0.0)
                    if hess < config.hess_floor:
                        state.hess_clamps += 1
                    new = float(
                        coordinate_update(theta, exp_b[y_prev, y] - obs_b[y_prev, y],
                                          hess, penalty, alpha, config.hess_floor,
                                          config.step_cap)
                    )
                    if new != theta:
                        store.set_bigram(key, y_prev, y, new)
                        scorer = Scorer(model)
        _rebalance_block(store, block, penalty, n_labels)
    return state


def _ensure_caches(model, corpus, keys_cache, golds):
    if keys_cache is None:
        keys_cache = [compile_sequence(model.templates, seq) for seq in corpus]
    if golds is None:
        golds = [gold_indices(model, seq) for seq in corpus]
    return keys_cache, golds


def train(corpus, templates, config: TrainConfig, heldout=None):
    """Fit a fresh model on a labelled corpus.

    Stops when the relative change of the penalized objective falls
    below tol_objective or max_epochs is reached. A non-finite
    objective aborts with the last finite-objective model. Returns
    (model, history).
    """
    templates = list(templates)
    labels = LabelAlphabet(corpus.label_set())
    observations = ObservationAlphabet.from_corpus(corpus)
    model = Model(labels=labels, observations=observations, templates=templates)

    block_index = build_block_index(corpus, templates)
    admitted = None
    if config.cutoff > 1:
        admitted = {
            key for key in block_index.keys()
            if block_index.total_count(key) >= config.cutoff
        }
    blocks = build_blocks(block_index, templates, admitted)
    keys_cache = [compile_sequence(templates, seq) for seq in corpus]
    golds = [gold_indices(model, seq) for seq in corpus]

    epoch_fn = blockwise_epoch if config.mode == "blockwise" else cd_epoch
    history = TrainHistory()
    penalty = config.penalty

    def objective_pair():
        loss = log_loss(model, corpus, keys_cache=keys_cache)
        pen = penalty.l1 * model.store.l1_norm() + 0.5 * penalty.l2 * model.store.l2_norm_sq()
        return loss + pen, loss

    prev_objective, _ = objective_pair()
    boost = 1.0
    snapshot = model.store.copy()
    for epoch in range(1, config.max_epochs + 1):
        alpha = config.alpha_for_epoch(epoch) * boost
        started = time.perf_counter()
        state = epoch_fn(model, corpus, blocks, config, alpha, keys_cache, golds)
        seconds = time.perf_counter() - started
        objective, loss = objective_pair()
        if not math.isfinite(objective):
            model.store = snapshot
            history.aborted = True
            break
        active_mu, active_lambda = model.store.active_counts()
        heldout_error = None
        if heldout is not None:
            heldout_error = token_error(model, heldout, decoder="viterbi")
        history.records.append(
            EpochRecord(
                epoch=epoch,
                objective=objective,
                loss=loss,
                active_mu=active_mu,
                active_lambda=active_lambda,
                heldout_error=heldout_error,
                seconds=seconds,
                alpha=alpha,
                hess_clamps=state.hess_clamps,
                lattices=state.lattices,
            )
        )
        if epoch >= config.switch_epoch and objective > prev_objective:
            boost *= 2.0
            history.alpha_violations += 1
        rel_change = abs(objective - prev_objective) / max(1.0, abs(prev_objective))
        prev_objective = objective
        snapshot = model.store.copy()
        if rel_change < config.tol_objective:
            break
    model.store.compact()
    return model, history


def kkt_residuals(model, corpus, penalty: PenaltyConfig):
    """First-order optimality residuals of the elastic-net objective.

    Returns (max |grad| over zero coordinates minus l1 clamped at 0,
    max |grad + l2 theta + l1 sign(theta)| over nonzero coordinates,
    max |grad| overall). At a minimizer the first two vanish.
    """
    from .objective import gradient as full_gradient

    grads = full_gradient(model, corpus)
    store = model.store
    # stored keys that never fire in this corpus have zero gradient
    for key in list(store.unigram_keys()) + list(store.bigram_keys()):
        if key not in grads:
            tpl = model.templates[key[0]]
            shape = (
                (model.n_labels + 1, model.n_labels) if tpl.bigram else model.n_labels
            )
            grads[key] = np.zeros(shape)
    zero_excess = 0.0
    nonzero_residual = 0.0
    grad_inf = 0.0
    for key, grad in grads.items():
        tpl = model.templates[key[0]]
        if tpl.bigram:
            theta = store.bigram_matrix(key)
            theta = theta if theta is not None else np.zeros_like(grad)
        else:
            theta = store.unigram_vector(key)
            theta = theta if theta is not None else np.zeros_like(grad)
        grad_inf = max(grad_inf, float(np.abs(grad).max()))
        zero_mask = theta == 0
        if zero_mask.any():
            zero_excess = max(
                zero_excess, float((np.abs(grad[zero_mask]) - penalty.l1).max())
            )
        if (~zero_mask).any():
            resid = grad + penalty.l2 * theta + penalty.l1 * np.sign(theta)
            nonzero_residual = max(
                nonzero_residual, float(np.abs(resid[~zero_mask]).max())
            )
    return max(zero_excess, 0.0), nonzero_residual, grad_inf
