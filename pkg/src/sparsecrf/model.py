"""Alphabets, the sparse parameter store, and the text model format.

A model owns a label alphabet (plus a reserved begin marker used as the
transition source at the first position), per-column observation
vocabularies, a template list, and sparsely stored weights. Weights are
grouped per feature key: unigram groups are per-label vectors, bigram
groups are (n_labels + 1, n_labels) matrices whose extra source row
holds the begin-transition weights.

The model is immutable during inference; training holds the single
writer. Snapshots for mid-training evaluation are taken with
ParameterStore.copy().
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .features import Template, parse_template

FORMAT_HEADER = "sparsecrf-model v1"
DEFAULT_BEGIN_MARKER = "<s>"


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelAlphabet:
    """Dense string-to-index mapping for labels plus the begin marker.

    The begin marker gets the extra index len(symbols); it is a valid
    transition source at the first position but never a predicted label.
    """

    def __init__(self, symbols, begin_marker: str = DEFAULT_BEGIN_MARKER):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("label symbols must be unique")
        if begin_marker in self.symbols:
            raise ValueError("begin marker must not be a regular label")
        self.begin_marker = begin_marker
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __iter__(self):
        return iter(self.symbols)

    def __contains__(self, symbol) -> bool:
        return symbol in self._index

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabelAlphabet)
            and self.symbols == other.symbols
            and self.begin_marker == other.begin_marker
        )

    @property
    def begin_index(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise KeyError(f"label {symbol!r} not in alphabet") from None

    def symbol(self, index: int) -> str:
        if index == self.begin_index:
            return self.begin_marker
        return self.symbols[index]


class ObservationAlphabet:
    """Per-column observation vocabularies with a reserved unknown index.

    Symbols unseen at training time map to the unknown index; no weight
    is ever attached to an unknown value, so it scores zero everywhere.
    """

    def __init__(self, columns):
        self.columns = [list(c) for c in columns]
        self._index = []
        for c, symbols in enumerate(self.columns):
            if len(set(symbols)) != len(symbols):
                raise ValueError(f"column {c}: observation symbols must be unique")
            self._index.append({s: i for i, s in enumerate(symbols)})

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def unk_index(self, column: int) -> int:
        return len(self.columns[column])

    def index(self, column: int, symbol: str) -> int:
        return self._index[column].get(symbol, self.unk_index(column))

    def known(self, column: int, symbol: str) -> bool:
        return symbol in self._index[column]

    def __eq__(self, other) -> bool:
        return isinstance(other, ObservationAlphabet) and self.columns == other.columns

    @classmethod
    def from_corpus(cls, corpus) -> "ObservationAlphabet":
        n_cols = corpus.n_columns
        seen = [dict() for _ in range(n_cols)]
        for seq in corpus:
            for c in range(n_cols):
                for token in seq.columns[c]:
                    seen[c].setdefault(token, None)
        return cls([sorted(s) for s in seen])


class ParameterStore:
    """Sparse unigram/bigram weight storage with O(1) active counts.

    A scalar weight is "stored" iff it is nonzero; compact() drops
    all-zero groups so absence and zero coincide. Nonzero counts are
    maintained incrementally on every group write. Reads hand out the
    internal arrays for speed; mutate only through the set_* methods so
    the counts stay exact.
    """

    def __init__(self, n_labels: int):
        self.n_labels = n_labels
        self._mu: dict[tuple[int, str], np.ndarray] = {}
        self._lam: dict[tuple[int, str], np.ndarray] = {}
        self._nnz_mu = 0
        self._nnz_lam = 0
        self._lam_nonzeros: dict[tuple[int, str], tuple] = {}

    # -- reads ---------------------------------------------------------

    def unigram_vector(self, key):
        return self._mu.get(key)

    def bigram_matrix(self, key):
        return self._lam.get(key)

    def bigram_nonzeros(self, key):
        """COO view (rows, cols, values) of a bigram group, cached.

        Rows index transition sources (n_labels == begin marker), cols
        the target labels. The cache is invalidated on write, so sparse
        inference amortizes the nonzero scan across positions that share
        a key.
        """
        if key not in self._lam:
            return None
        cached = self._lam_nonzeros.get(key)
        if cached is None:
            mat = self._lam[key]
            rows, cols = np.nonzero(mat)
            cached = (rows, cols, mat[rows, cols])
            self._lam_nonzeros[key] = cached
        return cached

    def get_unigram(self, key, y: int) -> float:
        vec = self._mu.get(key)
        return float(vec[y]) if vec is not None else 0.0

    def get_bigram(self, key, y_prev: int, y: int) -> float:
        mat = self._lam.get(key)
        return float(mat[y_prev, y]) if mat is not None else 0.0

    def unigram_keys(self):
        return self._mu.keys()

    def bigram_keys(self):
        return self._lam.keys()

    def iter_unigram(self):
        """Yield (key, label_index, weight) for every nonzero unigram entry."""
        for key, vec in self._mu.items():
            for y in np.nonzero(vec)[0]:
                yield key, int(y), float(vec[y])

    def iter_bigram(self):
        """Yield (key, source_index, label_index, weight) for nonzero entries."""
        for key, mat in self._lam.items():
            rows, cols = np.nonzero(mat)
            for r, c in zip(rows, cols):
                yield key, int(r), int(c), float(mat[r, c])

    # -- writes --------------------------------------------------------

    def set_unigram_vector(self, key, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_labels,):
            raise ValueError("unigram group must have one weight per label")
        if not np.isfinite(vec).all():
            raise ValueError(f"non-finite unigram weights for key {key}")
        old = self._mu.get(key)
        self._nnz_mu += int(np.count_nonzero(vec))
        if old is not None:
            self._nnz_mu -= int(np.count_nonzero(old))
        self._mu[key] = vec.copy()

    def set_bigram_matrix(self, key, mat):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (self.n_labels + 1, self.n_labels):
            raise ValueError("bigram group must be (n_labels + 1, n_labels)")
        if not np.isfinite(mat).all():
            raise ValueError(f"non-finite bigram weights for key {key}")
        old = self._lam.get(key)
        self._nnz_lam += int(np.count_nonzero(mat))
        if old is not None:
            self._nnz_lam -= int(np.count_nonzero(old))
        self._lam[key] = mat.copy()
        self._lam_nonzeros.pop(key, None)

    def set_unigram(self, key, y: int, weight: float):
        vec = self._mu.get(key)
        if vec is None:
            vec = np.zeros(self.n_labels)
        else:
            vec = vec.copy()
        vec[y] = weight
        self.set_unigram_vector(key, vec)

    def set_bigram(self, key, y_prev: int, y: int, weight: float):
        mat = self._lam.get(key)
        if mat is None:
            mat = np.zeros((self.n_labels + 1, self.n_labels))
        else:
            mat = mat.copy()
        mat[y_prev, y] = weight
        self.set_bigram_matrix(key, mat)

    # -- bookkeeping ---------------------------------------------------

    def active_counts(self) -> tuple[int, int]:
        """Exact (unigram, bigram) nonzero weight counts, O(1)."""
        return self._nnz_mu, self._nnz_lam

    def compact(self):
        """Drop groups that have become entirely zero."""
        for key in [k for k, v in self._mu.items() if not v.any()]:
            del self._mu[key]
        for key in [k for k, v in self._lam.items() if not v.any()]:
            del self._lam[key]
            self._lam_nonzeros.pop(key, None)

    def l1_norm(self) -> float:
        total = 0.0
        for vec in self._mu.values():
            total += float(np.abs(vec).sum())
        for mat in self._lam.values():
            total += float(np.abs(mat).sum())
        return total

    def l2_norm_sq(self) -> float:
        total = 0.0
        for vec in self._mu.values():
            total += float(np.square(vec).sum())
        for mat in self._lam.values():
            total += float(np.square(mat).sum())
        return total

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.n_labels)
        for key, vec in self._mu.items():
            other._mu[key] = vec.copy()
        for key, mat in self._lam.items():
            other._lam[key] = mat.copy()
        other._nnz_mu = self._nnz_mu
        other._nnz_lam = self._nnz_lam
        return other


@dataclass
class Model:
    """A trained (or trainable) sparse CRF."""

    labels: LabelAlphabet
    observations: ObservationAlphabet
    templates: list[Template]
    store: ParameterStore = None
    version: str = "v1"

    def __post_init__(self):
        if self.store is None:
            self.store = ParameterStore(len(self.labels))
        if self.store.n_labels != len(self.labels):
            raise ValueError("store size does not match label alphabet")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def begin_index(self) -> int:
        return self.labels.begin_index

    def active_counts(self) -> tuple[int, int]:
        return self.store.active_counts()

    def validate(self):
        """Check that every stored key references a declared template."""
        n_templates = len(self.templates)
        for key in list(self.store.unigram_keys()) + list(self.store.bigram_keys()):
            tpl_idx, _ = key
            if not 0 <= tpl_idx < n_templates:
                raise ValueError(f"store key {key} references unknown template")


def active_counts(model: Model) -> tuple[int, int]:
    """Exact numbers of nonzero unigram and bigram weights."""
    return model.store.active_counts()


def _format_weight(w: float) -> str:
    # repr() is the shortest decimal that round-trips the binary value
    return repr(float(w))


def _check_token(token: str, what: str):
    if "\t" in token or "\n" in token or "\r" in token:
        raise ValueError(f"{what} {token!r} contains a tab or newline")


def save_model(model: Model, destination):
    """Write the versioned text format; inverse of load_model.

    Only nonzero weights are emitted, rendered with enough precision to
    round-trip the underlying binary value exactly. destination is a
    path or a writable text file.
    """
    if hasattr(destination, "write"):
        _write_model(model, destination)
    else:
        with open(destination, "w", encoding="utf-8") as fh:
            _write_model(model, fh)


def _write_model(model: Model, fh):
    write = fh.write
    write(FORMAT_HEADER + "\n")
    write("#labels\n")
    for label in model.labels:
        _check_token(label, "label")
        write(label + "\n")
    _check_token(model.labels.begin_marker, "begin marker")
    write(f"#begin {model.labels.begin_marker}\n")
    write(f"#columns {model.observations.n_columns}\n")
    write("#templates\n")
    for tpl in model.templates:
        write(tpl.descriptor + "\n")
    write("#weights\n")
    begin = model.begin_index
    for key in sorted(model.store.unigram_keys()):
        tpl_idx, value = key
        _check_token(value, "observed value")
        vec = model.store.unigram_vector(key)
        for y in np.nonzero(vec)[0]:
            write(
                "U\t%d\t%s\t%s\t%s\n"
                % (tpl_idx, value, model.labels.symbol(int(y)), _format_weight(vec[y]))
            )
    for key in sorted(model.store.bigram_keys()):
        tpl_idx, value = key
        _check_token(value, "observed value")
        mat = model.store.bigram_matrix(key)
        rows, cols = np.nonzero(mat)
        for r, c in zip(rows, cols):
            src = model.labels.begin_marker if r == begin else model.labels.symbol(int(r))
            write(
                "B\t%d\t%s\t%s\t%s\t%s\n"
                % (
                    tpl_idx,
                    value,
                    src,
                    model.labels.symbol(int(c)),
                    _format_weight(mat[r, c]),
                )
            )


def load_model(source) -> Model:
    """Parse the text format written by save_model.

    The observation vocabulary is rebuilt from the stored weight keys
    (the format does not carry a separate observation section), which
    leaves decoding behaviour unchanged: values without weights score
    zero either way.
    """
    if hasattr(source, "read"):
        return _read_model(source)
    with open(source, "r", encoding="utf-8") as fh:
        return _read_model(fh)


def _read_model(fh) -> Model:
    lines = fh.read().splitlines()
    if not lines or lines[0] != FORMAT_HEADER:
        found = lines[0] if lines else "<empty file>"
        raise ModelFormatError(
            f"expected header {FORMAT_HEADER!r}, found {found!r}", line=1
        )
    labels: list[str] = []
    templates: list[Template] = []
    begin_marker = DEFAULT_BEGIN_MARKER
    n_columns = 1
    section = None
    weight_lines: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line == "#labels":
            section = "labels"
        elif line.startswith("#begin "):
            begin_marker = line[len("#begin ") :]
            section = None
        elif line.startswith("#columns "):
            try:
                n_columns = int(line[len("#columns ") :])
            except ValueError:
                raise ModelFormatError("bad #columns value", line=lineno) from None
            section = None
        elif line == "#templates":
            section = "templates"
        elif line == "#weights":
            section = "weights"
        elif section == "labels":
            labels.append(line)
        elif section == "templates":
            try:
                templates.append(parse_template(line))
            except Exception as exc:
                raise ModelFormatError(str(exc), line=lineno) from None
        elif section == "weights":
            weight_lines.append((lineno, line))
        else:
            raise ModelFormatError(f"unexpected line {line!r}", line=lineno)

    alphabet = LabelAlphabet(labels, begin_marker=begin_marker)
    store = ParameterStore(len(labels))
    seen_values: list[dict] = [dict() for _ in range(n_columns)]
    for lineno, line in weight_lines:
        fields = line.split("\t")
        kind = fields[0]
        if kind == "U":
            if len(fields) != 5:
                raise ModelFormatError("unigram line needs 5 fields", line=lineno)
            _, tpl_s, value, y_s, w_s = fields
        elif kind == "B":
            if len(fields) != 6:
                raise ModelFormatError("bigram line needs 6 fields", line=lineno)
            _, tpl_s, value, yp_s, y_s, w_s = fields
        else:
            raise ModelFormatError(f"unknown weight kind {kind!r}", line=lineno)
        try:
            tpl_idx = int(tpl_s)
        except ValueError:
            raise ModelFormatError("bad template id", line=lineno) from None
        if not 0 <= tpl_idx < len(templates):
            raise ModelFormatError(f"template id {tpl_idx} out of range", line=lineno)
        try:
            weight = float(w_s)
        except ValueError:
            raise ModelFormatError(f"bad weight {w_s!r}", line=lineno) from None
        try:
            y = alphabet.index(y_s)
        except KeyError:
            raise ModelFormatError(f"unknown label {y_s!r}", line=lineno) from None
        key = (tpl_idx, value)
        if kind == "U":
            store.set_unigram(key, y, weight)
        else:
            if yp_s == begin_marker:
                y_prev = alphabet.begin_index
            else:
                try:
                    y_prev = alphabet.index(yp_s)
                except KeyError:
                    raise ModelFormatError(
                        f"unknown source label {yp_s!r}", line=lineno
                    ) from None
            store.set_bigram(key, y_prev, y, weight)
        tpl = templates[tpl_idx]
        if tpl.kind == "offset" and tpl.column < n_columns:
            seen_values[tpl.column].setdefault(value, None)

    observations = ObservationAlphabet([sorted(s) for s in seen_values])
    return Model(
        labels=alphabet, observations=observations, templates=templates, store=store
    )


def dumps_model(model: Model) -> str:
    buf = io.StringIO()
    _write_model(model, buf)
    return buf.getvalue()


def loads_model(text: str) -> Model:
    return _read_model(io.StringIO(text))
