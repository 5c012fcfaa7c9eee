"""Annotated sentences, BIO span coding, CoNLL-style I/O and a synthetic corpus.

File format (tab separated, 0-based token indices, half-open spans)::

    0   Alice   NNP B-person
    1   lives   VBZ O
    2   in      IN  O
    3   Paris   NNP B-location
    R   0   1   3   4   live_in

Sentences are separated by blank lines.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "AnnotatedSentence",
    "CorpusFormatError",
    "NO_RELATION",
    "PAD",
    "RelationTriple",
    "SyntheticConfig",
    "UNK",
    "Vocab",
    "decode_bio",
    "dumps_conll",
    "encode_bio",
    "generate_synthetic",
    "load_conll",
    "loads_conll",
    "split_corpus",
    "write_conll",
]

PAD = "<pad>"
UNK = "<unk>"
NO_RELATION = "NO_RELATION"

Span = tuple[int, int]


class CorpusFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class RelationTriple:
    head_span: Span
    tail_span: Span
    relation: str


@dataclass
class AnnotatedSentence:
    tokens: list[str]
    pos_tags: list[str]
    entity_labels: list[str]
    relations: list[RelationTriple] = field(default_factory=list)
    id: str = ""

    def __post_init__(self):
        m = len(self.tokens)
        if m < 1:
            raise ValueError("a sentence needs at least one token")
        if len(self.pos_tags) != m or len(self.entity_labels) != m:
            raise ValueError(
                f"sentence {self.id!r}: token/pos/label lengths differ "
                f"({m}, {len(self.pos_tags)}, {len(self.entity_labels)})"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def entities(self) -> list[tuple[Span, str]]:
        return decode_bio(self.entity_labels)


# ---------------------------------------------------------------------------
# BIO
# ---------------------------------------------------------------------------


def _split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    prefix, sep, etype = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not etype:
        raise ValueError(f"malformed BIO tag {tag!r}")
    return prefix, etype


def decode_bio(labels: Sequence[str]) -> list[tuple[Span, str]]:
    """Maximal typed spans from BIO tags, left to right.

    An ``I-x`` that does not continue an open ``x`` span starts a new span,
    as if it were ``B-x``.
    """
    spans: list[tuple[Span, str]] = []
    start, current = None, None
    for i, tag in enumerate(labels):
        prefix, etype = _split_tag(tag)
        if prefix == "I" and current == etype:
            continue
        if current is not None:
            spans.append(((start, i), current))
            start, current = None, None
        if prefix != "O":
            start, current = i, etype
    if current is not None:
        spans.append(((start, len(labels)), current))
    return spans


def is_strict_bio(labels: Sequence[str]) -> bool:
    """True when no ``I-x`` follows anything other than ``B-x``/``I-x``."""
    prev = None
    for tag in labels:
        prefix, etype = _split_tag(tag)
        if prefix == "I" and prev != etype:
            return False
        prev = etype
    return True


def encode_bio(spans: Iterable[tuple[Span, str]], length: int) -> list[str]:
    tags = ["O"] * length
    for (start, end), etype in sorted(spans):
        if not (0 <= start < end <= length):
            raise ValueError(f"span ({start}, {end}) outside sentence of length {length}")
        if any(t != "O" for t in tags[start:end]):
            raise ValueError(f"span ({start}, {end}) overlaps another span")
        tags[start] = f"B-{etype}"
        for i in range(start + 1, end):
            tags[i] = f"I-{etype}"
    return tags


# ---------------------------------------------------------------------------
# CoNLL I/O
# ---------------------------------------------------------------------------


def _parse_block(lines: list[tuple[int, str]], sid: str) -> AnnotatedSentence:
    tokens, pos, tags = [], [], []
    rel_lines: list[tuple[int, list[str]]] = []
    for lineno, line in lines:
        cols = line.split("\t")
        if cols[0] == "R":
            if len(cols) != 6:
                raise CorpusFormatError(f"relation line needs 6 columns, got {len(cols)}", lineno)
            rel_lines.append((lineno, cols))
            continue
        if rel_lines:
            raise CorpusFormatError("token line after relation lines", lineno)
        if len(cols) != 4:
            raise CorpusFormatError(f"token line needs 4 columns, got {len(cols)}", lineno)
        try:
            index = int(cols[0])
        except ValueError:
            raise CorpusFormatError(f"bad token index {cols[0]!r}", lineno) from None
        if index != len(tokens):
            raise CorpusFormatError(f"expected token index {len(tokens)}, got {index}", lineno)
        try:
            _split_tag(cols[3])
        except ValueError as exc:
            raise CorpusFormatError(str(exc), lineno) from None
        if cols[3].startswith("I-") and (not tags or _split_tag(tags[-1])[1] != cols[3][2:]):
            raise CorpusFormatError(f"{cols[3]} does not continue an entity", lineno)
        tokens.append(cols[1])
        pos.append(cols[2])
        tags.append(cols[3])
    if not tokens:
        raise CorpusFormatError("sentence without tokens", lines[0][0])
    spans = {span for span, _ in decode_bio(tags)}
    relations = []
    for lineno, cols in rel_lines:
        try:
            hs, he, ts, te = (int(c) for c in cols[1:5])
        except ValueError:
            raise CorpusFormatError("relation offsets must be integers", lineno) from None
        head, tail = (hs, he), (ts, te)
        for span in (head, tail):
            if span not in spans:
                raise CorpusFormatError(f"dangling relation span {span}: not an entity", lineno)
        relations.append(RelationTriple(head, tail, cols[5]))
    return AnnotatedSentence(tokens, pos, tags, relations, sid)


def loads_conll(text: str, prefix: str = "s") -> list[AnnotatedSentence]:
    sentences: list[AnnotatedSentence] = []
    block: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if line.strip():
            block.append((lineno, line.rstrip()))
        elif block:
            sentences.append(_parse_block(block, f"{prefix}{len(sentences)}"))
            block = []
    if block:
        sentences.append(_parse_block(block, f"{prefix}{len(sentences)}"))
    return sentences


def load_conll(path: str | Path) -> list[AnnotatedSentence]:
    """Read a CoNLL-style corpus; errors carry the 1-based line number."""
    path = Path(path)
    return loads_conll(path.read_text(encoding="utf-8"), prefix=f"{path.stem}-")


def dumps_conll(sentences: Iterable[AnnotatedSentence]) -> str:
    blocks = []
    for s in sentences:
        lines = [f"{i}\t{t}\t{p}\t{y}" for i, (t, p, y) in enumerate(zip(s.tokens, s.pos_tags, s.entity_labels))]
        lines += [
            f"R\t{r.head_span[0]}\t{r.head_span[1]}\t{r.tail_span[0]}\t{r.tail_span[1]}\t{r.relation}"
            for r in s.relations
        ]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def write_conll(sentences: Iterable[AnnotatedSentence], path: str | Path) -> None:
    Path(path).write_text(dumps_conll(sentences), encoding="utf-8")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def entity_tagset(entity_types: Sequence[str]) -> list[str]:
    """``O`` then ``B-t``/``I-t`` for each type, in the given order."""
    tags = ["O"]
    for t in entity_types:
        tags += [f"B-{t}", f"I-{t}"]
    return tags


@dataclass
class Vocab:
    words: dict[str, int]
    pos: dict[str, int]
    tags: dict[str, int]
    relations: dict[str, int]

    @classmethod
    def build(
        cls,
        sentences: Sequence[AnnotatedSentence],
        entity_types: Sequence[str] | None = None,
        relations: Sequence[str] | None = None,
    ) -> "Vocab":
        words = {PAD: 0, UNK: 1}
        pos = {PAD: 0, UNK: 1}
        seen_types: dict[str, None] = {}
        seen_rels: dict[str, None] = {}
        for s in sentences:
            for w in s.tokens:
                words.setdefault(w, len(words))
            for p in s.pos_tags:
                pos.setdefault(p, len(pos))
            for _, etype in decode_bio(s.entity_labels):
                seen_types.setdefault(etype)
            for r in s.relations:
                seen_rels.setdefault(r.relation)
        etypes = list(entity_types) if entity_types is not None else sorted(seen_types)
        rels = list(relations) if relations is not None else sorted(seen_rels)
        tags = {t: i for i, t in enumerate(entity_tagset(etypes))}
        rel_index = {NO_RELATION: 0}
        for r in rels:
            rel_index.setdefault(r, len(rel_index))
        return cls(words, pos, tags, rel_index)

    @property
    def entity_types(self) -> list[str]:
        return [t[2:] for t in self.tags if t.startswith("B-")]

    @property
    def relation_names(self) -> list[str]:
        return [r for r in self.relations if r != NO_RELATION]

    @property
    def tag_list(self) -> list[str]:
        return list(self.tags)

    @property
    def relation_list(self) -> list[str]:
        return list(self.relations)

    def word_ids(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.words[UNK]
        return np.array([self.words.get(w, unk) for w in tokens], dtype=np.intp)

    def pos_ids(self, tags: Sequence[str]) -> np.ndarray:
        unk = self.pos[UNK]
        return np.array([self.pos.get(p, unk) for p in tags], dtype=np.intp)

    def tag_ids(self, labels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.tags[y] for y in labels], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"entity label {exc.args[0]!r} not in vocabulary") from None

    def relation_id(self, name: str) -> int:
        try:
            return self.relations[name]
        except KeyError:
            raise ValueError(f"relation {name!r} not in vocabulary") from None

    def to_dict(self) -> dict:
        return {"words": list(self.words), "pos": list(self.pos), "tags": list(self.tags), "relations": list(self.relations)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocab":
        def index(items):
            return {x: i for i, x in enumerate(items)}

        return cls(index(d["words"]), index(d["pos"]), index(d["tags"]), index(d["relations"]))


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_NAMES = {
    "person": {
        "first": ["john", "mary", "ahmed", "li", "sofia", "peter", "anna", "carlos", "yuki", "omar",
                  "elena", "david", "fatima", "lucas", "grace", "ivan", "nina", "paul", "rosa", "samuel"],
        "last": ["smith", "garcia", "chen", "novak", "okafor", "muller", "rossi", "tanaka", "kowalski",
                 "silva", "brown", "haddad", "jensen", "moreau", "lopez"],
    },
    "location": {
        "first": ["paris", "lagos", "lima", "oslo", "cairo", "quito", "dublin", "hanoi", "austin",
                  "kyoto", "perth", "tunis", "bergen", "malaga", "denver", "porto", "riga", "nairobi"],
        "last": ["city", "valley", "heights", "province"],
    },
    "organization": {
        "first": ["acme", "globex", "initech", "umbrella", "stark", "wayne", "tyrell", "cyberdyne",
                  "soylent", "hooli", "vandelay", "wonka", "oscorp", "aperture", "massive"],
        "last": ["corp", "inc", "group", "labs", "bank", "motors"],
    },
}

# surface words shared across entity types: context decides the type
_AMBIGUOUS = ["jordan", "morgan", "phoenix", "lincoln", "victoria", "florence", "austin", "sydney"]

_TRIGGERS = {
    # relation name -> phrases between head and tail (head first)
    "live_in": [["lives", "in"], ["resides", "in"], ["moved", "to"], [",", "a", "resident", "of"], ["grew", "up", "in"]],
    "work_for": [["works", "for"], ["joined"], [",", "an", "employee", "of"], ["was", "hired", "by"], ["manages", "projects", "at"]],
    "located_in": [["is", "based", "in"], [",", "headquartered", "in"], ["opened", "offices", "in"], ["operates", "from"]],
}
# phrases any relation may use: the label then follows from the argument types
_SHARED_TRIGGERS = [["is", "tied", "to"], ["is", "linked", "with"], [",", "associated", "with"]]
_SYLLABLES = ["ba", "ko", "li", "mu", "ra", "te", "no", "si", "da", "fe", "gu", "pa", "ze", "vo", "hi", "ju"]
_GENERIC_TRIGGERS = [["visited"], ["met", "with"], ["talked", "about"], ["wrote", "to"], ["is", "near"]]
_FILLER_PRE = [[], [], ["yesterday", ","], ["reportedly", ","], ["in", "2019", ","], ["according", "to", "sources", ","]]
_FILLER_POST = [["."], ["."], ["last", "year", "."], ["recently", "."], ["again", "."]]
_POS = {
    ",": ",", ".": ".", "in": "IN", "to": "TO", "of": "IN", "for": "IN", "by": "IN", "at": "IN",
    "from": "IN", "with": "IN", "about": "IN", "near": "IN", "a": "DT", "an": "DT", "and": "CC",
    "according": "VBG", "2019": "CD", "is": "VBZ", "was": "VBD", "up": "RP",
}


def _pos_for(word: str) -> str:
    if word in _POS:
        return _POS[word]
    if word.endswith("s") and word not in ("sources", "projects", "offices"):
        return "VBZ"
    if word.endswith("ed") or word in ("grew", "met", "wrote", "joined"):
        return "VBD"
    return "NN" if word in ("resident", "employee", "sources", "projects", "offices", "year") else "RB"


@dataclass
class SyntheticConfig:
    n_sentences: int
    relation_schema: dict[str, tuple[str, str]]
    seed: int
    entity_types: list[str] | None = None
    # probability that a clause carries no relation (generic trigger)
    p_unrelated: float = 0.2
    # probability of a second clause in the sentence
    p_second_clause: float = 0.35
    # probability an entity uses a surface word shared between types
    p_ambiguous: float = 0.15
    # probability an entity gets a freshly invented (usually unseen) name
    p_novel: float = 0.0
    # probability a related clause uses a trigger shared by all relations
    p_shared_trigger: float = 0.0

    def __post_init__(self):
        if not self.relation_schema:
            raise ValueError("relation_schema must name at least one relation")
        if self.entity_types is None:
            types: dict[str, None] = {}
            for h, t in self.relation_schema.values():
                types.setdefault(h)
                types.setdefault(t)
            self.entity_types = list(types)
        for rel, (h, t) in self.relation_schema.items():
            for etype in (h, t):
                if etype not in self.entity_types:
                    raise ValueError(f"relation {rel!r} uses undeclared entity type {etype!r}")

    @classmethod
    def from_file(cls, path: str | Path) -> "SyntheticConfig":
        """Key-value file: ``n_sentences``, ``seed`` (mandatory), ``relations``.

        ``relations = live_in:person:location, work_for:person:organization``
        """
        parser = configparser.ConfigParser()
        parser.read_string("[synthetic]\n" + Path(path).read_text(encoding="utf-8"))
        return cls.from_mapping(dict(parser["synthetic"]))

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str]) -> "SyntheticConfig":
        if "seed" not in kv:
            raise ValueError("synthetic config needs a seed")
        schema = parse_relation_schema(kv.get("relations", ""))
        etypes = [t.strip() for t in kv["entity_types"].split(",")] if kv.get("entity_types") else None
        extra = {k: float(kv[k]) for k in ("p_unrelated", "p_second_clause", "p_ambiguous", "p_novel", "p_shared_trigger") if k in kv}
        return cls(int(kv.get("n_sentences", 100)), schema, int(kv["seed"]), etypes, **extra)


def parse_relation_schema(text: str) -> dict[str, tuple[str, str]]:
    schema: dict[str, tuple[str, str]] = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = [p.strip() for p in item.split(":")]
        if len(parts) != 3 or not all(parts):
            raise ValueError(f"bad relation schema entry {item!r}; expected name:head_type:tail_type")
        if parts[0] in schema:
            raise ValueError(f"relation {parts[0]!r} declared twice")
        schema[parts[0]] = (parts[1], parts[2])
    return schema


def _novel_word(rng: np.random.Generator) -> str:
    return "".join(_SYLLABLES[i] for i in rng.integers(len(_SYLLABLES), size=int(rng.integers(2, 4))))


def _entity_words(etype: str, rng: np.random.Generator, p_ambiguous: float, p_novel: float = 0.0) -> list[str]:
    pools = _NAMES.get(etype)
    if pools is None:
        # unknown type: invent a small closed pool from the type name
        pools = {"first": [f"{etype}{i}" for i in range(12)], "last": [f"{etype}x", f"{etype}y"]}
    u = rng.random()
    if u < p_novel:
        first = _novel_word(rng)
    elif u < p_novel + p_ambiguous:
        first = _AMBIGUOUS[rng.integers(len(_AMBIGUOUS))]
    else:
        first = pools["first"][rng.integers(len(pools["first"]))]
    words = [first]
    if rng.random() < 0.4:
        words.append(pools["last"][rng.integers(len(pools["last"]))])
    return words


def _choice(rng: np.random.Generator, items: Sequence):
    return items[rng.integers(len(items))]


def generate_synthetic(config: SyntheticConfig) -> list[AnnotatedSentence]:
    """Template sentences whose relations all respect ``relation_schema``."""
    rng = np.random.default_rng(config.seed)
    relations = list(config.relation_schema)
    sentences = []
    for n in range(config.n_sentences):
        tokens: list[str] = []
        pos: list[str] = []
        spans: list[tuple[Span, str]] = []
        triples: list[RelationTriple] = []

        def emit(words, tag=None):
            for w in words:
                tokens.append(w)
                pos.append(tag or _pos_for(w))

        def emit_entity(etype):
            start = len(tokens)
            emit(_entity_words(etype, rng, config.p_ambiguous, config.p_novel), "NNP")
            span = (start, len(tokens))
            spans.append((span, etype))
            return span

        emit(_choice(rng, _FILLER_PRE))
        n_clauses = 2 if rng.random() < config.p_second_clause else 1
        for c in range(n_clauses):
            if c:
                emit(["and"])
            if rng.random() < config.p_unrelated:
                emit_entity(_choice(rng, config.entity_types))
                emit(_choice(rng, _GENERIC_TRIGGERS))
                emit_entity(_choice(rng, config.entity_types))
                continue
            rel = _choice(rng, relations)
            head_type, tail_type = config.relation_schema[rel]
            head = emit_entity(head_type)
            if rng.random() < config.p_shared_trigger:
                emit(_choice(rng, _SHARED_TRIGGERS))
            else:
                emit(_choice(rng, _TRIGGERS.get(rel, [["rel", rel.replace("_", "")]])))
            tail = emit_entity(tail_type)
            triples.append(RelationTriple(head, tail, rel))
        emit(_choice(rng, _FILLER_POST))
        labels = encode_bio(spans, len(tokens))
        sentences.append(AnnotatedSentence(tokens, pos, labels, triples, f"syn{config.seed}-{n}"))
    return sentences


def split_corpus(
    sentences: Sequence[AnnotatedSentence], fractions: Sequence[float] = (0.8, 0.1, 0.1)
) -> list[list[AnnotatedSentence]]:
    """Contiguous split; the last part takes the rounding remainder."""
    n = len(sentences)
    sizes = [int(round(f * n)) for f in fractions[:-1]]
    out, start = [], 0
    for size in sizes:
        out.append(list(sentences[start:start + size]))
        start += size
    out.append(list(sentences[start:]))
    return out
