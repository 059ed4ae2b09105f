"""Entity-relation triples: normalization, linearization, exact-match scoring.

A triple set is the semantic message passed to the generator and recovered by
the parser. Scoring is exact string match after normalization; the
normalization convention (lowercasing, underscores to spaces, quote stripping,
whitespace collapsing) is this library's own and shifts absolute F1, so it is
documented in the README.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

FIELD_SEP = " | "
TRIPLE_SEP = " && "
DEFAULT_MAX_TRIPLES = 7


class TripleError(ValueError):
    pass


def _norm_field(value: str) -> str:
    s = value.strip()
    s = s.strip("\"'")
    s = s.replace("_", " ").lower()
    return " ".join(s.split())


@dataclass(frozen=True)
class Triple:
    subject: str
    predicate: str
    object: str

    def __post_init__(self):
        for name in ("subject", "predicate", "object"):
            if not getattr(self, name).strip():
                raise TripleError(f"triple field {name!r} is empty")

    def fields(self) -> tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)


def normalize(t: Triple) -> Triple:
    """Canonical form used for matching: lowercase, no underscores or quotes."""
    parts = []
    for name, raw in zip(("subject", "predicate", "object"), t.fields()):
        norm = _norm_field(raw)
        if not norm:
            raise TripleError(f"triple field {name!r} is empty after normalization: {raw!r}")
        parts.append(norm)
    return Triple(*parts)


class TripleSet:
    """Ordered triple collection, deduplicated by normalized form.

    Source order is preserved for reproducible linearization; scoring and
    equality ignore order and compare normalized triples.
    """

    __slots__ = ("triples", "_normalized")

    def __init__(self, triples: Iterable[Triple] = (), max_size: int | None = None):
        kept: list[Triple] = []
        seen: set[tuple[str, str, str]] = set()
        for t in triples:
            key = normalize(t).fields()
            if key not in seen:
                seen.add(key)
                kept.append(t)
        if max_size is not None and len(kept) > max_size:
            raise TripleError(f"triple set has {len(kept)} triples, maximum is {max_size}")
        self.triples = tuple(kept)
        self._normalized = frozenset(seen)

    def normalized(self) -> frozenset[tuple[str, str, str]]:
        return self._normalized

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self) -> Iterator[Triple]:
        return iter(self.triples)

    def __bool__(self) -> bool:
        return bool(self.triples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripleSet):
            return NotImplemented
        return [normalize(t) for t in self.triples] == [normalize(t) for t in other.triples]

    def __hash__(self):
        return hash(self._normalized)

    def __repr__(self) -> str:
        return f"TripleSet({list(self.triples)!r})"


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "PRF":
        if precision + recall == 0:
            return cls(precision, recall, 0.0)
        return cls(precision, recall, 2 * precision * recall / (precision + recall))


def linearize(s: TripleSet) -> str:
    """Render as ``subject | predicate | object`` joined by ``&&``, in set order."""
    return TRIPLE_SEP.join(FIELD_SEP.join(t.fields()) for t in s)


def parse_linearized(text: str) -> tuple[TripleSet, int]:
    """Tolerant inverse of linearize: returns (set, count of skipped segments).

    Segments without exactly three fields are dropped; fields are trimmed and
    the result is deduplicated after normalization.
    """
    triples: list[Triple] = []
    skipped = 0
    if not text.strip():
        return TripleSet(), 0
    for segment in text.split("&&"):
        fields = [f.strip() for f in segment.split("|")]
        if len(fields) != 3 or not all(fields):
            skipped += 1
            continue
        try:
            triples.append(normalize(Triple(*fields)))
        except TripleError:
            skipped += 1
    return TripleSet(triples, max_size=None), skipped


def triple_prf(hyp: TripleSet, ref: TripleSet) -> PRF:
    """Exact-match precision/recall/F1 of hyp against ref.

    Conventions: both empty scores 1.0 across the board (vacuous truth),
    exactly one empty scores 0.0.
    """
    h, r = hyp.normalized(), ref.normalized()
    if not h and not r:
        return PRF(1.0, 1.0, 1.0)
    if not h or not r:
        return PRF(0.0, 0.0, 0.0)
    common = len(h & r)
    return PRF.from_pr(common / len(h), common / len(r))
