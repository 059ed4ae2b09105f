"""Dataset ingestion and a synthetic triple-to-text grammar.

Three sources: the native line format (one JSON object per line), a reader for
the public WebNLG 3.0 XML layout, and a seeded synthetic generator whose
grammar admits exact inverse parsing. The synthetic domain is small enough
that the seq2seq models can be trained to near-perfect parsing on a laptop,
which is what makes the end-to-end pipeline claims checkable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from xml.etree import ElementTree

from .triples import DEFAULT_MAX_TRIPLES, Triple, TripleError, TripleSet

MAX_WEBNLG_REFERENCES = 5


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    triples: TripleSet
    references: tuple[str, ...]

    def __post_init__(self):
        if not self.triples:
            raise CorpusError("example has no triples")
        if not self.references or any(not r.strip() for r in self.references):
            raise CorpusError("example needs at least one non-empty reference text")


@dataclass(frozen=True)
class Dataset:
    split: str
    examples: tuple[Example, ...]
    provenance: str

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


# ---------------------------------------------------------------------------
# native line format


def _example_from_record(record: dict, where: str) -> Example:
    if not isinstance(record, dict):
        raise CorpusError(f"{where}: record is not an object")
    for key in ("triples", "refs"):
        if key not in record:
            raise CorpusError(f"{where}: missing key {key!r}")
    raw_triples = record["triples"]
    refs = record["refs"]
    if not isinstance(raw_triples, list) or not raw_triples:
        raise CorpusError(f"{where}: 'triples' must be a non-empty list")
    if not isinstance(refs, list) or not refs or not all(isinstance(r, str) for r in refs):
        raise CorpusError(f"{where}: 'refs' must be a non-empty list of strings")
    triples = []
    for item in raw_triples:
        if not isinstance(item, list) or len(item) != 3 or not all(isinstance(f, str) for f in item):
            raise CorpusError(f"{where}: each triple must be a list of three strings")
        try:
            triples.append(Triple(*item))
        except TripleError as exc:
            raise CorpusError(f"{where}: {exc}") from None
    return Example(TripleSet(triples, max_size=None), tuple(refs))


def load_native(path: str | Path, split: str = "train") -> Dataset:
    """Read the one-record-per-line format; malformed lines fail with their number."""
    examples = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            examples.append(_example_from_record(record, f"line {lineno}"))
    return Dataset(split=split, examples=tuple(examples), provenance="native")


def save_native(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for ex in dataset.examples:
            record = {
                "triples": [list(t.fields()) for t in ex.triples],
                "refs": list(ex.references),
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# WebNLG 3.0 XML subset


@dataclass(frozen=True)
class WebNLGLoad:
    dataset: Dataset
    skipped: int
    oversize: int


def _byte_offset(raw: bytes, line: int, column: int) -> int:
    lines = raw.split(b"\n")
    return sum(len(l) + 1 for l in lines[: line - 1]) + column


def load_webnlg_xml(path: str | Path, split: str = "train") -> WebNLGLoad:
    """Read benchmark/entries/entry elements: modifiedtripleset/mtriple plus lex.

    Entries with zero well-formed triples or zero lexicalisations are skipped
    and counted; entries above the usual triple-count cap are kept but flagged.
    """
    raw = Path(path).read_bytes()
    try:
        root = ElementTree.fromstring(raw)
    except ElementTree.ParseError as exc:
        line, column = exc.position
        offset = _byte_offset(raw, line, column)
        raise CorpusError(
            f"XML syntax error at byte {offset} (line {line}, column {column})") from None
    examples = []
    skipped = 0
    oversize = 0
    for entry in root.iter("entry"):
        triples = []
        for mtriple in entry.iter("mtriple"):
            parts = [p.strip() for p in (mtriple.text or "").split("|")]
            if len(parts) != 3 or not all(parts):
                continue
            triples.append(Triple(*parts))
        refs = [lex.text.strip() for lex in entry.iter("lex") if lex.text and lex.text.strip()]
        if not triples or not refs:
            skipped += 1
            continue
        tset = TripleSet(triples, max_size=None)
        if len(tset) > DEFAULT_MAX_TRIPLES:
            oversize += 1
        examples.append(Example(tset, tuple(refs[:MAX_WEBNLG_REFERENCES])))
    dataset = Dataset(split=split, examples=tuple(examples), provenance="webnlg-xml")
    return WebNLGLoad(dataset=dataset, skipped=skipped, oversize=oversize)


# ---------------------------------------------------------------------------
# synthetic grammar

DEFAULT_ENTITIES = (
    "aldora", "brint", "cavora", "dunmore", "elys", "farrow",
    "gilden", "harwick", "ilsa", "jorvik", "kestrel", "morvan",
)

DEFAULT_PREDICATES: dict[str, tuple[str, ...]] = {
    "birthplace": ("{s} was born in {o}", "{s} comes from {o}"),
    "location": ("{s} is located in {o}", "{s} lies in {o}", "{s} can be found in {o}"),
    "leader": ("the leader of {s} is {o}", "{s} is led by {o}"),
    "employer": ("{s} works for {o}", "{s} is employed by {o}"),
    "founder": ("{s} was founded by {o}", "{o} founded {s}"),
    "border": ("{s} shares a border with {o}", "{s} borders {o}"),
}

DEFAULT_CONNECTIVES = (".", "and")


@dataclass
class SyntheticGrammar:
    """Entity and predicate inventories plus surface templates.

    Every rendered clause is recoverable by :meth:`parse_text`: entities are
    single tokens, template words never collide with connectives, and each
    clause matches exactly one (predicate, template) pattern.
    """

    entities: tuple[str, ...] = DEFAULT_ENTITIES
    predicates: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_PREDICATES))
    max_triples: int = 3
    connectives: tuple[str, ...] = DEFAULT_CONNECTIVES

    def __post_init__(self):
        conn = set(self.connectives)
        for entity in self.entities:
            if " " in entity or entity in conn:
                raise CorpusError(f"entity {entity!r} must be a single non-connective token")
        for pred, templates in self.predicates.items():
            if not templates:
                raise CorpusError(f"predicate {pred!r} has no templates")
            for tpl in templates:
                tokens = tpl.split()
                if tokens.count("{s}") != 1 or tokens.count("{o}") != 1:
                    raise CorpusError(f"template {tpl!r} must use {{s}} and {{o}} exactly once")
                if any(tok in conn for tok in tokens):
                    raise CorpusError(f"template {tpl!r} contains a connective token")

    def render_clause(self, triple: Triple, template: str) -> str:
        return template.replace("{s}", triple.subject).replace("{o}", triple.object)

    def _patterns(self):
        for pred, templates in self.predicates.items():
            for tpl in templates:
                yield pred, tpl.split()

    def parse_text(self, text: str) -> TripleSet:
        """Inverse rules: split on connective tokens, match clauses to templates."""
        tokens = text.split()
        clauses: list[list[str]] = [[]]
        for tok in tokens:
            if tok in self.connectives:
                clauses.append([])
            else:
                clauses[-1].append(tok)
        found = []
        entity_set = set(self.entities)
        for clause in clauses:
            if not clause:
                continue
            for pred, pattern in self._patterns():
                if len(pattern) != len(clause):
                    continue
                subject = obj = None
                ok = True
                for pat_tok, tok in zip(pattern, clause):
                    if pat_tok == "{s}":
                        subject = tok
                    elif pat_tok == "{o}":
                        obj = tok
                    elif pat_tok != tok:
                        ok = False
                        break
                if ok and subject in entity_set and obj in entity_set:
                    found.append(Triple(subject, pred, obj))
                    break
        return TripleSet(found, max_size=None)


def generate_synthetic(grammar: SyntheticGrammar, n: int, seed: int) -> Dataset:
    """Generate n examples, one rendered reference each, deterministic under seed."""
    if n < 1:
        raise CorpusError("need n >= 1 synthetic examples")
    rng = random.Random(seed)
    pred_names = sorted(grammar.predicates)
    examples = []
    for _ in range(n):
        count = rng.randint(1, grammar.max_triples)
        used: set[tuple[str, str]] = set()
        triples = []
        clauses = []
        for _ in range(count):
            subject = rng.choice(grammar.entities)
            free = [p for p in pred_names if (subject, p) not in used]
            if not free:
                continue
            pred = rng.choice(free)
            used.add((subject, pred))
            obj = rng.choice([e for e in grammar.entities if e != subject])
            triple = Triple(subject, pred, obj)
            triples.append(triple)
            clauses.append(grammar.render_clause(triple, rng.choice(grammar.predicates[pred])))
        text = clauses[0]
        for clause in clauses[1:]:
            text += f" {rng.choice(grammar.connectives)} {clause}"
        examples.append(Example(TripleSet(triples, max_size=None), (text,)))
    return Dataset(split="all", examples=tuple(examples), provenance=f"synthetic:{seed}")


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, ...]:
    """Seeded shuffle then contiguous cut into train/dev/test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError(f"split fractions sum to {sum(fractions)}, expected 1")
    names = ("train", "dev", "test")
    if len(fractions) != len(names):
        raise CorpusError("expected exactly three fractions (train, dev, test)")
    order = list(range(len(dataset.examples)))
    random.Random(seed).shuffle(order)
    shuffled = [dataset.examples[i] for i in order]
    n = len(shuffled)
    cuts = [int(n * f + 1e-9) for f in (fractions[0], fractions[0] + fractions[1])]
    pieces = (shuffled[: cuts[0]], shuffled[cuts[0]: cuts[1]], shuffled[cuts[1]:])
    out = []
    for name, piece in zip(names, pieces):
        if not piece:
            raise CorpusError(f"split {name!r} is empty")
        out.append(Dataset(split=name, examples=tuple(piece),
                           provenance=dataset.provenance))
    return tuple(out)
