"""Corpus reading/writing, the synthetic HMM benchmark, and metrics.

Corpus files are UTF-8 text, one position per line with TAB-separated
columns (the final column is the gold label when present), a blank line
ending each sequence, and "#" in column 0 starting a comment line.
CoNLL-style column data ingests directly.

The synthetic benchmark draws fixed-length sequences from a first-order
hidden Markov model whose exact per-token Bayes error is computed by
enumerating every observation sequence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .inference import Scorer, compile_sequence, forward_backward_sparse, viterbi


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass
class Sequence:
    """Aligned observation columns plus an optional gold label column."""

    columns: list[list[str]]
    labels: list[str] | None = None

    def __post_init__(self):
        if not self.columns or not self.columns[0]:
            raise ValueError("sequence must have at least one position")
        length = len(self.columns[0])
        if any(len(c) != length for c in self.columns):
            raise ValueError("observation columns must have equal length")
        if self.labels is not None and len(self.labels) != length:
            raise ValueError("label column must match sequence length")

    def __len__(self) -> int:
        return len(self.columns[0])

    @property
    def n_columns(self) -> int:
        return len(self.columns)


class Corpus:
    """A list of sequences with a uniform column count."""

    def __init__(self, sequences):
        self.sequences = list(sequences)
        if self.sequences:
            d = self.sequences[0].n_columns
            for i, seq in enumerate(self.sequences):
                if seq.n_columns != d:
                    raise ValueError(
                        f"sequence {i} has {seq.n_columns} columns, expected {d}"
                    )

    @property
    def n_columns(self) -> int:
        return self.sequences[0].n_columns if self.sequences else 0

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __getitem__(self, i):
        return self.sequences[i]

    def label_set(self) -> list[str]:
        seen = {}
        for seq in self.sequences:
            if seq.labels:
                for label in seq.labels:
                    seen.setdefault(label, None)
        return sorted(seen)

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def read_corpus(source, has_labels: bool) -> Corpus:
    """Parse a corpus file; raises CorpusFormatError with a line number."""
    if hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        with open(source, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    return _parse_corpus(lines, has_labels)


def _parse_corpus(lines, has_labels: bool) -> Corpus:
    sequences = []
    rows: list[list[str]] = []
    width = None

    def flush():
        nonlocal rows
        if not rows:
            return
        n_cols = len(rows[0])
        cols = [[r[c] for r in rows] for c in range(n_cols)]
        if has_labels:
            sequences.append(Sequence(columns=cols[:-1], labels=cols[-1]))
        else:
            sequences.append(Sequence(columns=cols))
        rows = []

    for lineno, line in enumerate(lines, start=1):
        if line.startswith("#"):
            continue
        if not line.strip():
            flush()
            continue
        fields = line.split("\t")
        if has_labels and len(fields) < 2:
            raise CorpusFormatError(
                "labelled corpus needs at least two columns", line=lineno
            )
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise CorpusFormatError(
                f"expected {width} columns, found {len(fields)}", line=lineno
            )
        rows.append(fields)
    flush()
    if not sequences:
        raise CorpusFormatError("corpus is empty")
    return Corpus(sequences)


def write_corpus(corpus, dest):
    """Inverse of read_corpus (labels written when present)."""
    if hasattr(dest, "write"):
        _write_corpus(corpus, dest)
    else:
        with open(dest, "w", encoding="utf-8") as fh:
            _write_corpus(corpus, fh)


def _write_corpus(corpus, fh):
    for seq in corpus:
        for t in range(len(seq)):
            fields = [col[t] for col in seq.columns]
            if seq.labels is not None:
                fields.append(seq.labels[t])
            fh.write("\t".join(fields) + "\n")
        fh.write("\n")


# ---------------------------------------------------------------------
# Synthetic first-order HMM benchmark
# ---------------------------------------------------------------------


@dataclass
class HmmSpec:
    """A fully specified first-order HMM for fixed-length sequences."""

    transitions: np.ndarray
    emissions: np.ndarray
    initial: np.ndarray
    length: int = 5
    labels: tuple = ()
    observations: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.emissions = np.asarray(self.emissions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        n_labels, n_obs = self.emissions.shape
        if self.transitions.shape != (n_labels, n_labels):
            raise ValueError("transition matrix shape mismatch")
        if self.initial.shape != (n_labels,):
            raise ValueError("initial distribution shape mismatch")
        for name, mat in (("transition", self.transitions), ("emission", self.emissions)):
            if (mat < 0).any():
                raise ValueError(f"{name} matrix has negative entries")
            if np.abs(mat.sum(axis=1) - 1.0).max() > 1e-12:
                raise ValueError(f"{name} matrix rows must sum to 1")
        if (self.initial < 0).any() or abs(self.initial.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must be a probability vector")
        if not self.labels:
            self.labels = tuple(f"L{i}" for i in range(n_labels))
        if not self.observations:
            self.observations = tuple(f"o{i}" for i in range(n_obs))

    @property
    def n_labels(self) -> int:
        return self.emissions.shape[0]

    @property
    def n_observations(self) -> int:
        return self.emissions.shape[1]


def default_hmm_spec(seed: int = 0) -> HmmSpec:
    """Six labels over five observations, length-5 sequences.

    Transitions are uniform except two boosted pairs, L0 -> L4 and
    L4 -> L5, set to probability 0.5 with the rest of the row scaled
    down equally. Four labels each have a dominant observation at
    probability 0.8; the last two labels are nearly uniform over the
    observations (0.24 on the shared last observation, 0.19 elsewhere),
    so they are ambiguous from the observations alone and mostly
    disambiguated by their transition context.
    """
    n_labels, n_obs = 6, 5
    transitions = np.full((n_labels, n_labels), 1.0 / n_labels)
    for src, dst in ((0, 4), (4, 5)):
        row = np.full(n_labels, 0.5 / (n_labels - 1))
        row[dst] = 0.5
        transitions[src] = row
    emissions = np.full((n_labels, n_obs), 0.05)
    for i in range(4):
        emissions[i, i] = 0.8
    for i in (4, 5):
        emissions[i] = np.full(n_obs, 0.19)
        emissions[i, n_obs - 1] = 0.24
    initial = np.full(n_labels, 1.0 / n_labels)
    return HmmSpec(
        transitions=transitions, emissions=emissions, initial=initial, seed=seed
    )


def generate_hmm_corpus(spec: HmmSpec, n: int) -> Corpus:
    """Sample n labelled sequences from the HMM.

    Each sequence gets its own generator derived from (seed, index), so
    parallel and serial generation produce identical corpora.
    """
    sequences = []
    for i in range(n):
        rng = np.random.default_rng((spec.seed, i))
        states = np.empty(spec.length, dtype=np.int64)
        obs = np.empty(spec.length, dtype=np.int64)
        states[0] = rng.choice(spec.n_labels, p=spec.initial)
        for t in range(1, spec.length):
            states[t] = rng.choice(spec.n_labels, p=spec.transitions[states[t - 1]])
        for t in range(spec.length):
            obs[t] = rng.choice(spec.n_observations, p=spec.emissions[states[t]])
        sequences.append(
            Sequence(
                columns=[[spec.observations[o] for o in obs]],
                labels=[spec.labels[s] for s in states],
            )
        )
    return Corpus(sequences)


def _hmm_posteriors(spec: HmmSpec, obs_batch: np.ndarray):
    """Exact posterior marginals for a batch of observation sequences.

    Returns (sequence probabilities, posteriors of shape (N, T, Y)).
    """
    n, length = obs_batch.shape
    n_labels = spec.n_labels
    alpha = np.zeros((n, length, n_labels))
    scale = np.zeros((n, length))
    a = spec.initial[None, :] * spec.emissions[:, obs_batch[:, 0]].T
    scale[:, 0] = a.sum(axis=1)
    alpha[:, 0] = a / scale[:, 0, None]
    for t in range(1, length):
        a = (alpha[:, t - 1] @ spec.transitions) * spec.emissions[:, obs_batch[:, t]].T
        scale[:, t] = a.sum(axis=1)
        alpha[:, t] = a / scale[:, t, None]
    beta = np.zeros((n, length, n_labels))
    beta[:, length - 1] = 1.0
    for t in range(length - 2, -1, -1):
        v = beta[:, t + 1] * spec.emissions[:, obs_batch[:, t + 1]].T
        beta[:, t] = (v @ spec.transitions.T) / scale[:, t + 1, None]
    posterior = alpha * beta
    posterior /= posterior.sum(axis=2, keepdims=True)
    seq_prob = np.exp(np.log(scale).sum(axis=1))
    return seq_prob, posterior


def bayes_error(spec: HmmSpec, max_sequences: int = 10**6) -> float:
    """Exact expected per-token error of the posterior-marginal decoder.

    Enumerates every observation sequence, computes the exact HMM
    posteriors, and weights the per-token error of the argmax decoder
    by the sequence probability. Only feasible while
    n_observations ** length stays within max_sequences.
    """
    total = spec.n_observations**spec.length
    if total > max_sequences:
        raise ValueError(
            f"{total} observation sequences exceed the enumeration budget"
        )
    grids = np.meshgrid(
        *[np.arange(spec.n_observations)] * spec.length, indexing="ij"
    )
    obs_batch = np.stack([g.ravel() for g in grids], axis=1)
    seq_prob, posterior = _hmm_posteriors(spec, obs_batch)
    per_token_correct = posterior.max(axis=2).mean(axis=1)
    return float(np.sum(seq_prob * (1.0 - per_token_correct)))


# ---------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------


def _parallel_map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def token_error(model, corpus, decoder: str, threads: int = 1) -> float:
    """Fraction of positions where the prediction differs from gold.

    decoder is "viterbi" (best-sequence decoding) or "marginal"
    (position-wise argmax of the posterior marginals). Sequences are
    decoded independently; the reduction order is fixed, so the result
    does not depend on threads.
    """
    if decoder not in ("viterbi", "marginal"):
        raise ValueError(f"unknown decoder {decoder!r}")
    scorer = Scorer(model)

    def decode(seq):
        keys = compile_sequence(model.templates, seq)
        if decoder == "viterbi":
            predicted, _ = viterbi(model, seq, mode="sparse", scorer=scorer, keys=keys)
        else:
            lattice = forward_backward_sparse(model, seq, scorer=scorer, keys=keys)
            marg = lattice.unigram_marginals()
            predicted = [model.labels.symbol(int(y)) for y in np.argmax(marg, axis=1)]
        wrong = sum(1 for p, g in zip(predicted, seq.labels) if p != g)
        return wrong, len(seq)

    results = _parallel_map(decode, list(corpus), threads)
    wrong = sum(r[0] for r in results)
    total = sum(r[1] for r in results)
    return wrong / total if total else 0.0
