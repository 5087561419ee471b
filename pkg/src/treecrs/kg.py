"""Knowledge graph store: dense ids, adjacency with inverse edges, item registry.

Entities and relations get dense integer ids in order of first appearance in
the triples file.  Every forward relation ``r`` gets a paired inverse relation
named ``inv:<name>`` with id ``n_forward + r``, so traversal can walk edges in
both directions without losing the direction information.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

INVERSE_PREFIX = "inv:"

DUMP_MANIFEST = "graph_manifest.tsv"
DUMP_TRIPLES = "triples.tsv"


class TripleParseError(ValueError):
    """Raised when a triples file line cannot be parsed."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable triple store with a precomputed adjacency index.

    ``adjacency[v]`` lists ``(relation_id, neighbor_id)`` pairs sorted by
    relation id then neighbor id; it contains one entry per forward edge out
    of ``v`` and, when ``use_inverse_edges`` is set, one inverse entry per
    forward edge into ``v``.
    """

    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    n_forward_relations: int
    triples: tuple[Triple, ...]
    adjacency: tuple[tuple[tuple[int, int], ...], ...]
    use_inverse_edges: bool = True
    items: tuple[int, ...] = field(default_factory=tuple)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        """Total relation count, inverse relations included."""
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except AttributeError:
            index = {n: i for i, n in enumerate(self.entity_names)}
            object.__setattr__(self, "_entity_index", index)
            return self._entity_index[name]

    def item_column(self, entity_id: int) -> int:
        """Position of an item entity in the fixed catalog ordering."""
        try:
            return self._item_index[entity_id]
        except AttributeError:
            object.__setattr__(self, "_item_index", {e: i for i, e in enumerate(self.items)})
            return self._item_index[entity_id]


def _build_adjacency(
    n_entities: int,
    n_forward: int,
    triples: list[Triple],
    use_inverse_edges: bool,
) -> tuple[tuple[tuple[int, int], ...], ...]:
    adjacency: list[list[tuple[int, int]]] = [[] for _ in range(n_entities)]
    for t in triples:
        adjacency[t.head].append((t.relation, t.tail))
        if use_inverse_edges:
            adjacency[t.tail].append((n_forward + t.relation, t.head))
    return tuple(tuple(sorted(pairs)) for pairs in adjacency)


def load_triples(path: str | Path, use_inverse_edges: bool = True) -> KnowledgeGraph:
    """Parse a TSV triples file into a :class:`KnowledgeGraph`.

    Each non-blank line must be ``head TAB relation TAB tail``.  Duplicate
    triples collapse to one edge; self-loops are kept.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_triples(text, use_inverse_edges=use_inverse_edges, source=str(path))


def parse_triples(text: str, use_inverse_edges: bool = True, source: str = "<string>") -> KnowledgeGraph:
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    entity_names: list[str] = []
    forward_names: list[str] = []
    triples: list[Triple] = []
    seen: set[tuple[int, int, int]] = set()

    def entity(name: str) -> int:
        if name not in entity_ids:
            entity_ids[name] = len(entity_names)
            entity_names.append(name)
        return entity_ids[name]

    def relation(name: str) -> int:
        if name not in relation_ids:
            relation_ids[name] = len(forward_names)
            forward_names.append(name)
        return relation_ids[name]

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise TripleParseError(
                f"{source}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
            )
        head, rel, tail = (f.strip() for f in fields)
        if not head or not rel or not tail:
            raise TripleParseError(f"{source}:{lineno}: empty field in triple")
        key = (entity(head), relation(rel), entity(tail))
        if key in seen:
            continue
        seen.add(key)
        triples.append(Triple(*key))

    if not triples:
        raise TripleParseError(f"{source}: no triples found")

    n_forward = len(forward_names)
    relation_names = tuple(forward_names)
    if use_inverse_edges:
        relation_names += tuple(INVERSE_PREFIX + n for n in forward_names)
    return KnowledgeGraph(
        entity_names=tuple(entity_names),
        relation_names=relation_names,
        n_forward_relations=n_forward,
        triples=tuple(triples),
        adjacency=_build_adjacency(len(entity_names), n_forward, triples, use_inverse_edges),
        use_inverse_edges=use_inverse_edges,
    )


def register_items(graph: KnowledgeGraph, item_names: list[str]) -> KnowledgeGraph:
    """Mark a subset of entities as the recommendable catalog.

    The catalog keeps a fixed ordering (ascending entity id) so downstream
    score vectors and label vectors share a stable column layout.
    """
    ids = []
    for name in item_names:
        try:
            ids.append(graph.entity_id(name))
        except KeyError:
            raise KeyError(f"item {name!r} is not an entity in the graph") from None
    return replace(graph, items=tuple(sorted(set(ids))))


def neighbors(graph: KnowledgeGraph, entity_id: int) -> tuple[tuple[int, int], ...]:
    """All ``(relation_id, neighbor_id)`` edges leaving ``entity_id``."""
    if not 0 <= entity_id < graph.n_entities:
        raise IndexError(f"entity id {entity_id} out of range [0, {graph.n_entities})")
    return graph.adjacency[entity_id]


def _canonical_dump(graph: KnowledgeGraph) -> tuple[str, str]:
    manifest = io.StringIO()
    manifest.write(f"n_entities\t{graph.n_entities}\n")
    manifest.write(f"n_forward_relations\t{graph.n_forward_relations}\n")
    manifest.write(f"use_inverse_edges\t{int(graph.use_inverse_edges)}\n")
    for i, name in enumerate(graph.entity_names):
        manifest.write(f"entity\t{i}\t{name}\n")
    for i in range(graph.n_forward_relations):
        manifest.write(f"relation\t{i}\t{graph.relation_names[i]}\n")
    for e in graph.items:
        manifest.write(f"item\t{e}\n")
    triples = io.StringIO()
    for t in graph.triples:
        triples.write(
            f"{graph.entity_names[t.head]}\t{graph.relation_names[t.relation]}\t{graph.entity_names[t.tail]}\n"
        )
    return manifest.getvalue(), triples.getvalue()


def dump_graph(graph: KnowledgeGraph, out_dir: str | Path) -> None:
    """Write the graph to ``out_dir`` so :func:`load_dump` restores it bit-exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, triples = _canonical_dump(graph)
    (out / DUMP_MANIFEST).write_text(manifest, encoding="utf-8")
    (out / DUMP_TRIPLES).write_text(triples, encoding="utf-8")


def load_dump(in_dir: str | Path) -> KnowledgeGraph:
    """Inverse of :func:`dump_graph`: ids, ordering, and items are preserved."""
    in_path = Path(in_dir)
    manifest_lines = (in_path / DUMP_MANIFEST).read_text(encoding="utf-8").splitlines()
    header: dict[str, int] = {}
    entity_rows: list[tuple[int, str]] = []
    relation_rows: list[tuple[int, str]] = []
    item_rows: list[int] = []
    for line in manifest_lines:
        fields = line.split("\t")
        if fields[0] in ("n_entities", "n_forward_relations", "use_inverse_edges"):
            header[fields[0]] = int(fields[1])
        elif fields[0] == "entity":
            entity_rows.append((int(fields[1]), fields[2]))
        elif fields[0] == "relation":
            relation_rows.append((int(fields[1]), fields[2]))
        elif fields[0] == "item":
            item_rows.append(int(fields[1]))
        else:
            raise TripleParseError(f"{DUMP_MANIFEST}: unknown row kind {fields[0]!r}")

    entity_names = tuple(name for _, name in sorted(entity_rows))
    forward_names = tuple(name for _, name in sorted(relation_rows))
    if len(entity_names) != header["n_entities"] or len(forward_names) != header["n_forward_relations"]:
        raise TripleParseError(f"{DUMP_MANIFEST}: row counts disagree with header")
    entity_ids = {n: i for i, n in enumerate(entity_names)}
    relation_ids = {n: i for i, n in enumerate(forward_names)}
    use_inverse = bool(header["use_inverse_edges"])

    triples = []
    for lineno, line in enumerate((in_path / DUMP_TRIPLES).read_text(encoding="utf-8").splitlines(), 1):
        h, r, t = line.split("\t")
        triples.append(Triple(entity_ids[h], relation_ids[r], entity_ids[t]))

    relation_names = forward_names
    if use_inverse:
        relation_names += tuple(INVERSE_PREFIX + n for n in forward_names)
    return KnowledgeGraph(
        entity_names=entity_names,
        relation_names=relation_names,
        n_forward_relations=len(forward_names),
        triples=tuple(triples),
        adjacency=_build_adjacency(len(entity_names), len(forward_names), triples, use_inverse),
        use_inverse_edges=use_inverse,
        items=tuple(item_rows),
    )


def graph_hash(graph: KnowledgeGraph) -> str:
    """Stable sha256 over the canonical dump, id assignments included."""
    manifest, triples = _canonical_dump(graph)
    digest = hashlib.sha256()
    digest.update(manifest.encode("utf-8"))
    digest.update(triples.encode("utf-8"))
    return digest.hexdigest()
