"""Feature templates, key extraction, and the per-key occurrence index.

A template describes how an observed value is read off a sequence at a
position: the constant bias, a single column at a fixed offset, or a
window of adjacent tokens joined into one n-gram string. Each template
comes in a unigram flavour (scored against the current label) and a
bigram flavour (scored against the label pair). A feature key is the
pair (template index, extracted value); the weights attached to a key
live in the model's parameter store.

Positions are 0-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

BIAS_VALUE = "bias"

_NGRAM_SEP = "|"
_NGRAM_ESCAPED = "\\|"


class TemplateError(ValueError):
    """Raised for an unparseable or unsupported template descriptor."""


@dataclass(frozen=True)
class Template:
    """One feature template.

    kind is "bias", "offset" or "ngram"; bigram selects whether the
    template tests the label pair (previous, current) instead of the
    current label alone. column/offset apply to "offset" templates,
    column/width to "ngram" templates (width must be odd).
    """

    kind: str
    bigram: bool
    column: int = 0
    offset: int = 0
    width: int = 1

    def __post_init__(self):
        if self.kind not in ("bias", "offset", "ngram"):
            raise TemplateError(f"unknown template kind: {self.kind!r}")
        if self.column < 0:
            raise TemplateError("column must be >= 0")
        if self.kind == "ngram" and (self.width < 1 or self.width % 2 == 0):
            raise TemplateError("ngram width must be odd and >= 1")

    @property
    def descriptor(self) -> str:
        """Canonical text form, the inverse of parse_template."""
        tag = "b" if self.bigram else "u"
        if self.kind == "bias":
            return f"bias:{tag}"
        if self.kind == "offset":
            return f"{tag}:col={self.column}:off={self.offset:+d}"
        return f"ngram-{tag}:col={self.column}:w={self.width}"

    @property
    def signature(self) -> tuple:
        """Label-independent identity of the extraction.

        Unigram and bigram templates that read the same value share a
        signature; the optimizer groups such siblings into one block.
        """
        if self.kind == "bias":
            return ("bias",)
        if self.kind == "offset":
            return ("offset", self.column, self.offset)
        return ("ngram", self.column, self.width)


def parse_template(text: str) -> Template:
    """Parse a template descriptor.

    Grammar: ``bias:u``, ``bias:b``, ``u:col=<c>:off=<i>``,
    ``b:col=<c>:off=<i>``, ``ngram-u:col=<c>:w=<w>``,
    ``ngram-b:col=<c>:w=<w>``.
    """
    text = text.strip()
    parts = text.split(":")
    try:
        if parts[0] == "bias" and len(parts) == 2 and parts[1] in ("u", "b"):
            return Template("bias", bigram=parts[1] == "b")
        if parts[0] in ("u", "b") and len(parts) == 3:
            col = _parse_field(parts[1], "col")
            off = _parse_field(parts[2], "off")
            return Template("offset", bigram=parts[0] == "b", column=col, offset=off)
        if parts[0] in ("ngram-u", "ngram-b") and len(parts) == 3:
            col = _parse_field(parts[1], "col")
            width = _parse_field(parts[2], "w")
            return Template(
                "ngram", bigram=parts[0] == "ngram-b", column=col, width=width
            )
    except TemplateError:
        raise
    except ValueError as exc:
        raise TemplateError(f"bad template descriptor {text!r}: {exc}") from None
    raise TemplateError(f"bad template descriptor {text!r}")


def _parse_field(part: str, name: str) -> int:
    key, _, value = part.partition("=")
    if key != name or not value:
        raise ValueError(f"expected {name}=<int>, got {part!r}")
    return int(value)


def escape_ngram_token(token: str) -> str:
    return token.replace("\\", "\\\\").replace(_NGRAM_SEP, _NGRAM_ESCAPED)


def join_ngram(tokens) -> str:
    """Join window tokens into one key value, escaping the separator."""
    return _NGRAM_SEP.join(escape_ngram_token(t) for t in tokens)


def split_ngram(value: str) -> list[str]:
    """Inverse of join_ngram."""
    tokens = []
    current = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            current.append(value[i + 1])
            i += 2
        elif ch == _NGRAM_SEP:
            tokens.append("".join(current))
            current = []
            i += 1
        else:
            current.append(ch)
            i += 1
    tokens.append("".join(current))
    return tokens


def extract_key(template: Template, columns, t: int) -> str | None:
    """Value of the template's indicator at position t, or None.

    columns is a list of per-column token lists of equal length. Returns
    None when the offset or window falls outside the sequence; there is
    no padding.
    """
    if template.kind == "bias":
        return BIAS_VALUE
    col = columns[template.column]
    if template.kind == "offset":
        p = t + template.offset
        if p < 0 or p >= len(col):
            return None
        return col[p]
    half = (template.width - 1) // 2
    lo, hi = t - half, t + half
    if lo < 0 or hi >= len(col):
        return None
    return join_ngram(col[lo : hi + 1])


@dataclass
class BlockOccurrences:
    """Where one feature key fires inside one sequence."""

    sequence: int
    positions: list[int] = field(default_factory=list)

    @property
    def first(self) -> int:
        return self.positions[0]

    @property
    def last(self) -> int:
        return self.positions[-1]


class BlockIndex:
    """Maps (template index, value) to the sequences/positions it fires at.

    Built once per corpus and then read-only; safe to share across
    concurrent workers. Every occurrence of every key is indexed exactly
    once, with positions sorted ascending.
    """

    def __init__(self):
        self._entries: dict[tuple[int, str], list[BlockOccurrences]] = {}
        self._counts: dict[tuple[int, str], int] = {}

    def add(self, key, sequence: int, position: int):
        occs = self._entries.setdefault(key, [])
        if not occs or occs[-1].sequence != sequence:
            occs.append(BlockOccurrences(sequence))
        occs[-1].positions.append(position)
        self._counts[key] = self._counts.get(key, 0) + 1

    def keys(self):
        return self._entries.keys()

    def occurrences(self, key) -> list[BlockOccurrences]:
        return self._entries.get(key, [])

    def total_count(self, key) -> int:
        return self._counts.get(key, 0)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)


def build_block_index(corpus, templates) -> BlockIndex:
    """Index every (template, value) occurrence in the corpus.

    Sequences are scanned in order, so the per-key occurrence lists come
    out sorted by (sequence, position).
    """
    index = BlockIndex()
    for i, seq in enumerate(corpus):
        cols = seq.columns
        length = len(seq)
        for tpl_idx, tpl in enumerate(templates):
            for t in range(length):
                value = extract_key(tpl, cols, t)
                if value is not None:
                    index.add((tpl_idx, value), i, t)
    return index


def cutoff_filter(corpus, templates, min_count: int) -> set:
    """Keys whose corpus occurrence count reaches min_count.

    With min_count=1 every observed key is admitted; raising the cut-off
    shrinks the admitted set monotonically.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    index = build_block_index(corpus, templates)
    return {key for key in index.keys() if index.total_count(key) >= min_count}
