"""In-memory knowledge graph: interned vocabularies, triplets, neighborhood indices, file I/O.

Datasets are UTF-8 text, one triplet per line, tab-separated
``head<TAB>relation<TAB>tail`` with an optional fourth column ``1``/``-1``
for labeled (validation/test) files. Entity and relation names are interned
into dense 0-based ids so that the rest of the pipeline works on integers.
"""

from __future__ import annotations

from typing import Iterable, Iterator, NamedTuple


class TripletParseError(ValueError):
    """A triplet file line that cannot be parsed (carries path and line number)."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class Vocabulary:
    """Order-preserving string interner with contiguous 0-based ids."""

    def __init__(self, names: Iterable[str] = ()):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        """Return the id of ``name``, interning it on first sight."""
        ident = self.index.get(name)
        if ident is None:
            ident = len(self.names)
            self.index[name] = ident
            self.names.append(name)
        return ident

    def id_of(self, name: str) -> int:
        return self.index[name]

    def name_of(self, ident: int) -> str:
        return self.names[ident]

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def save(self, path) -> None:
        """Persist as a newline-delimited name list; the line number is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for name in self.names:
                fh.write(name + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(line.rstrip("\n") for line in fh)


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


class LabeledTriplet(NamedTuple):
    triplet: Triplet
    label: bool  # True = positive


class KnowledgeGraph:
    """Immutable triplet set with head- and tail-neighborhood indices.

    ``head_index[e]`` holds the triplets ``(h, r, e)`` in which ``e`` is the
    tail (the neighbors are heads); ``tail_index[e]`` holds the triplets
    ``(e, r, t)`` in which ``e`` is the head. Duplicate input triplets
    collapse silently; the collapsed count is kept for load summaries.
    """

    def __init__(self, triplets: Iterable[Triplet]):
        seen: set[Triplet] = set()
        unique: list[Triplet] = []
        dup = 0
        for t in triplets:
            if not isinstance(t, Triplet):
                t = Triplet(*t)
            if t in seen:
                dup += 1
            else:
                seen.add(t)
                unique.append(t)
        self.triplets: tuple[Triplet, ...] = tuple(unique)
        self.triplet_set: frozenset[Triplet] = frozenset(seen)
        self.duplicates_collapsed: int = dup
        self.head_index: dict[int, list[Triplet]] = {}
        self.tail_index: dict[int, list[Triplet]] = {}
        for t in unique:
            self.head_index.setdefault(t.tail, []).append(t)
            self.tail_index.setdefault(t.head, []).append(t)

    def __len__(self) -> int:
        return len(self.triplets)

    def __contains__(self, t: Triplet) -> bool:
        return t in self.triplet_set

    def head_neighborhood(self, e: int) -> list[Triplet]:
        """Triplets (h, r, e) having ``e`` as tail."""
        return self.head_index.get(e, [])

    def tail_neighborhood(self, e: int) -> list[Triplet]:
        """Triplets (e, r, t) having ``e`` as head."""
        return self.tail_index.get(e, [])

    def degree(self, e: int) -> int:
        return len(self.head_neighborhood(e)) + len(self.tail_neighborhood(e))


def build_graph(triplets: Iterable[Triplet]) -> KnowledgeGraph:
    return KnowledgeGraph(triplets)


def _triplets_of(source) -> Iterable[Triplet]:
    return source.triplets if isinstance(source, KnowledgeGraph) else source


def entities_of(source) -> set[int]:
    """All entity ids occurring as head or tail."""
    out: set[int] = set()
    for h, _, t in _triplets_of(source):
        out.add(h)
        out.add(t)
    return out


def relations_of(source) -> set[int]:
    """All relation ids occurring in the triplets."""
    return {r for _, r, _ in _triplets_of(source)}


def load_triplet_file(
    path,
    entity_vocab: Vocabulary,
    relation_vocab: Vocabulary,
    labeled: bool = False,
) -> list[LabeledTriplet]:
    """Read a triplet file, interning names into the given vocabularies.

    Unlabeled files yield positive labels. Labeled files must carry a fourth
    tab-separated column holding ``1`` or ``-1``. Blank lines are rejected:
    the distributed benchmark files contain none, so one is a corruption sign.
    """
    expected = 4 if labeled else 3
    out: list[LabeledTriplet] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                raise TripletParseError(path, line_no, "blank line")
            fields = line.split("\t")
            if len(fields) != expected:
                raise TripletParseError(
                    path,
                    line_no,
                    f"expected {expected} tab-separated fields, got {len(fields)}",
                )
            h = entity_vocab.add(fields[0])
            r = relation_vocab.add(fields[1])
            t = entity_vocab.add(fields[2])
            if labeled:
                if fields[3] == "1":
                    label = True
                elif fields[3] == "-1":
                    label = False
                else:
                    raise TripletParseError(
                        path, line_no, f"bad label {fields[3]!r} (expected 1 or -1)"
                    )
            else:
                label = True
            out.append(LabeledTriplet(Triplet(h, r, t), label))
    return out


def save_triplet_file(
    path,
    triplets: Iterable,
    entity_vocab: Vocabulary,
    relation_vocab: Vocabulary,
    labeled: bool = False,
) -> None:
    """Write triplets in the tab-separated dataset format (inverse of load)."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in triplets:
            if isinstance(item, LabeledTriplet):
                t, label = item.triplet, item.label
            else:
                t, label = item, True
            fields = [
                entity_vocab.name_of(t.head),
                relation_vocab.name_of(t.relation),
                entity_vocab.name_of(t.tail),
            ]
            if labeled:
                fields.append("1" if label else "-1")
            fh.write("\t".join(fields) + "\n")


def positives(labeled: Iterable[LabeledTriplet]) -> list[Triplet]:
    """The triplets carrying a positive label."""
    return [lt.triplet for lt in labeled if lt.label]
