"""Knowledge trees: similarity-guided expansion, serialization, tree encoding.

For each entity mentioned in a dialogue we grow a small tree rooted at that
entity.  Expansion is breadth-first and layer-wise: a node keeps its top-N
neighbors ranked by cosine similarity between the dialogue context vector and
each candidate's graph embedding.  Trees are flattened to marker-annotated
strings (``#`` for entities, ``$`` for relations, markers repeated per level)
that a text encoder can consume, and that parse back losslessly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from treecrs.encoders import TextEncoder, Tokenizer, encode_text
from treecrs.kg import KnowledgeGraph, neighbors
from treecrs.user_pref import AttentionSum

ENTITY_MARKER = "#"
RELATION_MARKER = "$"


class TreeParseError(ValueError):
    """Raised when a serialized tree does not follow the marker grammar."""


@dataclass
class TreeNode:
    """One tree position: ``depth`` is zero-based, root has ``relation=None``."""

    entity: int
    depth: int
    relation: int | None = None
    children: list["TreeNode"] = field(default_factory=list)


@dataclass
class KnowledgeTree:
    root: TreeNode
    depth_limit: int
    degree_limit: int

    def layers(self) -> list[list[TreeNode]]:
        out: list[list[TreeNode]] = []
        frontier = [self.root]
        while frontier:
            out.append(frontier)
            frontier = [c for node in frontier for c in node.children]
        return out


def context_similarity(context: torch.Tensor, embedding: torch.Tensor) -> float:
    """Cosine similarity; either argument being all-zero gives 0."""
    if context.shape != embedding.shape or context.ndim != 1:
        raise ValueError("context and embedding must be matching 1-d vectors")
    denom = torch.linalg.norm(context) * torch.linalg.norm(embedding)
    if denom.item() == 0.0:
        return 0.0
    return float(context @ embedding / denom)


def build_tree(
    graph: KnowledgeGraph,
    embeddings: torch.Tensor,
    context: torch.Tensor,
    root_entity: int,
    depth_limit: int,
    degree_limit: int,
) -> KnowledgeTree:
    """Grow a tree of at most ``depth_limit`` edge-hops below ``root_entity``.

    Candidate children of a node are its graph neighbors, deduplicated by
    entity keeping the smallest relation id, minus any entity already on the
    path back to the root.  Children are kept in ranking order: descending
    similarity to ``context``, ties broken by ascending entity id.
    """
    if depth_limit < 0 or degree_limit < 0:
        raise ValueError("depth_limit and degree_limit must be non-negative")
    if not 0 <= root_entity < graph.n_entities:
        raise IndexError(f"root entity {root_entity} out of range [0, {graph.n_entities})")
    if embeddings.shape[0] != graph.n_entities:
        raise ValueError("embedding table does not cover the graph")

    root = TreeNode(entity=root_entity, depth=0)
    frontier: list[tuple[TreeNode, frozenset[int]]] = [(root, frozenset({root_entity}))]
    for depth in range(depth_limit):
        next_frontier: list[tuple[TreeNode, frozenset[int]]] = []
        for node, path in frontier:
            candidates: dict[int, int] = {}
            for relation, entity in neighbors(graph, node.entity):
                if entity in path:
                    continue
                if entity not in candidates:
                    candidates[entity] = relation
            ranked = sorted(
                candidates,
                key=lambda e: (-context_similarity(context, embeddings[e]), e),
            )
            for entity in ranked[:degree_limit]:
                child = TreeNode(entity=entity, depth=depth + 1, relation=candidates[entity])
                node.children.append(child)
                next_frontier.append((child, path | {entity}))
        frontier = next_frontier
    return KnowledgeTree(root=root, depth_limit=depth_limit, degree_limit=degree_limit)


def _check_name(name: str) -> str:
    if not name or name.startswith((ENTITY_MARKER, RELATION_MARKER)):
        raise TreeParseError(f"name {name!r} cannot be serialized unambiguously")
    return name


def serialize_tree(tree: KnowledgeTree, graph: KnowledgeGraph) -> str:
    """Flatten to marker syntax, preorder: ``#Root $$rel ##Child $$$rel ###Grandchild``.

    An entity at depth d carries ``d + 1`` markers; the relation token before
    a child carries as many markers as the child entity it introduces.
    """
    parts: list[str] = []

    def visit(node: TreeNode) -> None:
        parts.append(ENTITY_MARKER * (node.depth + 1) + _check_name(graph.entity_names[node.entity]))
        for child in node.children:
            assert child.relation is not None
            parts.append(RELATION_MARKER * (child.depth + 1) + _check_name(graph.relation_names[child.relation]))
            visit(child)

    visit(tree.root)
    return " ".join(parts)


@dataclass
class ParsedNode:
    """Name-level tree used to check serialization round trips."""

    name: str
    children: list[tuple[str, "ParsedNode"]] = field(default_factory=list)


def _split_units(text: str) -> list[tuple[str, int, str]]:
    """Break serialized text into (kind, marker_count, name) units."""
    units: list[tuple[str, int, str]] = []
    for raw in text.split():
        if raw.startswith(ENTITY_MARKER):
            kind, marker = "entity", ENTITY_MARKER
        elif raw.startswith(RELATION_MARKER):
            kind, marker = "relation", RELATION_MARKER
        else:
            if not units:
                raise TreeParseError(f"text before first marker: {raw!r}")
            prev_kind, prev_count, prev_name = units[-1]
            units[-1] = (prev_kind, prev_count, f"{prev_name} {raw}".strip())
            continue
        count = len(raw) - len(raw.lstrip(marker))
        name = raw[count:]
        if not name:
            raise TreeParseError(f"marker {raw!r} has no name attached")
        units.append((kind, count, name))
    if not units:
        raise TreeParseError("empty serialization")
    return units


def parse_tree(text: str) -> ParsedNode:
    """Inverse of :func:`serialize_tree`, at the level of names."""
    units = _split_units(text)
    kind, count, name = units[0]
    if kind != "entity" or count != 1:
        raise TreeParseError("serialization must start with a depth-1 entity ('#name')")
    root = ParsedNode(name=name)
    path: list[ParsedNode] = [root]
    i = 1
    while i < len(units):
        kind, count, name = units[i]
        if kind != "relation":
            raise TreeParseError(f"expected relation unit, got entity {name!r}")
        if count < 2 or count > len(path) + 1:
            raise TreeParseError(f"relation with {count} markers has no parent on the path")
        if i + 1 >= len(units):
            raise TreeParseError(f"dangling relation {name!r}")
        entity_kind, entity_count, entity_name = units[i + 1]
        if entity_kind != "entity" or entity_count != count:
            raise TreeParseError(
                f"relation {name!r} must introduce an entity with {count} markers"
            )
        del path[count - 1 :]
        child = ParsedNode(name=entity_name)
        path[-1].children.append((name, child))
        path.append(child)
        i += 2
    return root


def to_parsed(tree: KnowledgeTree, graph: KnowledgeGraph) -> ParsedNode:
    """Project a built tree onto the name-level shape used by the parser."""

    def visit(node: TreeNode) -> ParsedNode:
        out = ParsedNode(name=graph.entity_names[node.entity])
        for child in node.children:
            assert child.relation is not None
            out.children.append((graph.relation_names[child.relation], visit(child)))
        return out

    return visit(tree.root)


def parsed_equal(a: ParsedNode, b: ParsedNode) -> bool:
    if a.name != b.name or len(a.children) != len(b.children):
        return False
    return all(
        ra == rb and parsed_equal(ca, cb) for (ra, ca), (rb, cb) in zip(a.children, b.children)
    )


class TreeEncoder(nn.Module):
    """Encode serialized trees into per-tree vectors and one fused vector.

    Each serialized tree runs through the shared text encoder (leading tokens
    kept on truncation, since the root sits at the front), gets projected to
    the fusion width, and collapses to one vector by an inner attention-sum.
    The stack of per-tree vectors collapses to the fused tree vector by an
    outer attention-sum.  With no trees the learned null vector stands in.
    """

    def __init__(self, d_text: int, d: int):
        super().__init__()
        self.project_tokens = nn.Linear(d_text, d, bias=False)
        self.inner = AttentionSum(d)
        self.outer = AttentionSum(d)
        self.null_tree = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.double()

    def forward(
        self, serialized: list[str], text_encoder: TextEncoder, tokenizer: Tokenizer
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if not serialized:
            empty = self.null_tree.new_zeros((0, self.null_tree.shape[0]))
            return empty, self.null_tree
        per_tree = []
        for text in serialized:
            tokens = encode_text(text_encoder, tokenizer, text, keep="head")
            per_tree.append(self.inner(self.project_tokens(tokens)))
        stacked = torch.stack(per_tree)
        return stacked, self.outer(stacked)
