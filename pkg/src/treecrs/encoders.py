"""Pluggable encoders: whitespace tokenizer, small transformer, relational GCN.

Everything here runs in float64 on CPU.  The text encoder is a compact
stand-in for a pretrained bidirectional encoder: same interface (token
sequence in, one contextual vector per token out), desk-scale weights.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
from torch import nn

from treecrs.kg import KnowledgeGraph

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase wordpiece-free tokenization: words and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Frozen vocabulary lookup built once from a corpus."""

    def __init__(self, vocab: list[str]):
        if list(vocab[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary contains duplicates")
        self.vocab = list(vocab)
        self.token_ids = {t: i for i, t in enumerate(vocab)}
        self.pad_id = self.token_ids[PAD]
        self.unk_id = self.token_ids[UNK]
        self.bos_id = self.token_ids[BOS]
        self.eos_id = self.token_ids[EOS]
        self.sep_id = self.token_ids[SEP]

    @classmethod
    def build(cls, texts: list[str], extra_tokens: list[str] = (), max_size: int | None = None) -> "Tokenizer":
        """Count tokens over ``texts`` and keep the most frequent ones.

        ``extra_tokens`` (entity and relation names, serialization markers)
        are always kept so graph-derived text never degrades to ``<unk>``.
        """
        counts: dict[str, int] = {}
        for text in texts:
            for token in tokenize(text):
                counts[token] = counts.get(token, 0) + 1
        always = list(dict.fromkeys(t for name in extra_tokens for t in tokenize(name)))
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        ranked = [t for t in ranked if t not in set(always)]
        if max_size is not None:
            budget = max_size - len(SPECIAL_TOKENS) - len(always)
            if budget < 0:
                raise ValueError("max_size too small for special and extra tokens")
            ranked = ranked[:budget]
        return cls(list(SPECIAL_TOKENS) + always + ranked)

    def encode(self, text: str) -> list[int]:
        return [self.token_ids.get(t, self.unk_id) for t in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        keep = [self.vocab[i] for i in ids if self.vocab[i] not in SPECIAL_TOKENS]
        return " ".join(keep)

    def __len__(self) -> int:
        return len(self.vocab)


@dataclass
class EncoderConfig:
    d_text: int = 64
    d_ent: int = 64
    text_layers: int = 2
    text_heads: int = 2
    max_len: int = 512
    rgcn_layers: int = 1
    rgcn_bases: int = 4
    seed: int = 0


class _SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head attention + feed-forward, optionally causal."""

    def __init__(self, dim: int, heads: int, causal: bool):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.causal = causal
        self.norm_attn = nn.LayerNorm(dim)
        self.norm_ffn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        h = self.norm_attn(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        head_dim = self.dim // self.heads
        q = q.view(n, self.heads, head_dim).transpose(0, 1)
        k = k.view(n, self.heads, head_dim).transpose(0, 1)
        v = v.view(n, self.heads, head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / head_dim**0.5
        if self.causal:
            mask = torch.triu(torch.ones(n, n, dtype=torch.bool, device=x.device), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        attended = torch.softmax(scores, dim=-1) @ v
        attended = attended.transpose(0, 1).reshape(n, self.dim)
        x = x + self.out(attended)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class TextEncoder(nn.Module):
    """Bidirectional transformer producing one contextual vector per token."""

    def __init__(self, vocab_size: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(vocab_size, config.d_text)
        self.position_embedding = nn.Embedding(config.max_len, config.d_text)
        self.blocks = nn.ModuleList(
            _SelfAttentionBlock(config.d_text, config.text_heads, causal=False)
            for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(config.d_text)
        self.double()

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim != 1 or token_ids.shape[0] == 0:
            raise ValueError("token_ids must be a non-empty 1-d tensor")
        if token_ids.shape[0] > self.config.max_len:
            raise ValueError(f"sequence length {token_ids.shape[0]} exceeds max_len {self.config.max_len}")
        positions = torch.arange(token_ids.shape[0], device=token_ids.device)
        x = self.token_embedding(token_ids) + self.position_embedding(positions)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def truncate_ids(ids: list[int], max_len: int, keep: str) -> list[int]:
    """Trim to ``max_len`` keeping the most recent (``tail``) or leading (``head``) tokens."""
    if keep not in ("head", "tail"):
        raise ValueError(f"keep must be 'head' or 'tail', got {keep!r}")
    if len(ids) <= max_len:
        return list(ids)
    return list(ids[:max_len]) if keep == "head" else list(ids[-max_len:])


def encode_text(
    encoder: TextEncoder, tokenizer: Tokenizer, text: str, keep: str = "tail"
) -> torch.Tensor:
    """Tokenize, truncate, and encode one string to an ``(n, d_text)`` matrix."""
    ids = tokenizer.encode(text)
    if not ids:
        raise ValueError("cannot encode empty or whitespace-only text")
    ids = truncate_ids(ids, encoder.config.max_len, keep)
    return encoder(torch.tensor(ids, dtype=torch.long))


class RGCN(nn.Module):
    """Relational graph convolutions over a fixed graph.

    Layer rule per entity ``v``::

        h'_v = relu( sum_r sum_{u in N_r(v)} (1 / |N_r(v)|) W_r h_u  +  W_0 h_v )

    where ``N_r(v)`` are the relation-``r`` neighbors read from the graph
    adjacency (inverse relations are ordinary relations here).  Relation
    matrices use a shared basis decomposition ``W_r = sum_b a_rb V_b`` to keep
    the parameter count independent of the relation vocabulary.  With zero
    layers the embedding table itself is the output.
    """

    def __init__(self, graph: KnowledgeGraph, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.n_entities = graph.n_entities
        self.n_relations = graph.n_relations
        d = config.d_ent
        self.embedding = nn.Parameter(torch.randn(graph.n_entities, d) * d**-0.5)
        n_bases = min(config.rgcn_bases, self.n_relations)
        self.bases = nn.ParameterList()
        self.coefficients = nn.ParameterList()
        self.self_weights = nn.ParameterList()
        for _ in range(config.rgcn_layers):
            self.bases.append(nn.Parameter(torch.randn(n_bases, d, d) * d**-0.5))
            self.coefficients.append(nn.Parameter(torch.randn(self.n_relations, n_bases) * n_bases**-0.5))
            self.self_weights.append(nn.Parameter(torch.randn(d, d) * d**-0.5))
        self._register_edges(graph)
        self.double()

    def _register_edges(self, graph: KnowledgeGraph) -> None:
        src, dst, rel, norm = [], [], [], []
        for v, pairs in enumerate(graph.adjacency):
            counts: dict[int, int] = {}
            for r, _ in pairs:
                counts[r] = counts.get(r, 0) + 1
            for r, u in pairs:
                src.append(u)
                dst.append(v)
                rel.append(r)
                norm.append(1.0 / counts[r])
        self.register_buffer("edge_src", torch.tensor(src, dtype=torch.long))
        self.register_buffer("edge_dst", torch.tensor(dst, dtype=torch.long))
        self.register_buffer("edge_rel", torch.tensor(rel, dtype=torch.long))
        self.register_buffer("edge_norm", torch.tensor(norm, dtype=torch.float64))

    def forward(self) -> torch.Tensor:
        h = self.embedding
        for layer in range(self.config.rgcn_layers):
            weights = torch.einsum("rb,bij->rij", self.coefficients[layer], self.bases[layer])
            messages = torch.einsum("eij,ej->ei", weights[self.edge_rel], h[self.edge_src])
            messages = messages * self.edge_norm.unsqueeze(-1)
            aggregated = torch.zeros_like(h)
            aggregated.index_add_(0, self.edge_dst, messages)
            h = torch.relu(aggregated + h @ self.self_weights[layer].T)
        return h


def retrieve(table: torch.Tensor, entity_ids: list[int]) -> torch.Tensor:
    """Gather embedding rows for the given entities; empty input gives ``(0, d)``."""
    if table.ndim != 2:
        raise ValueError("embedding table must be 2-d")
    for e in entity_ids:
        if not 0 <= e < table.shape[0]:
            raise IndexError(f"entity id {e} out of range [0, {table.shape[0]})")
    if not entity_ids:
        return table.new_zeros((0, table.shape[1]))
    return table[torch.tensor(entity_ids, dtype=torch.long)]


def pool(sequence: torch.Tensor, mode: str = "mean") -> torch.Tensor:
    """Collapse an ``(n, d)`` sequence to a single ``(d,)`` vector."""
    if sequence.ndim != 2 or sequence.shape[0] == 0:
        raise ValueError("pool needs a non-empty (n, d) matrix")
    if mode == "mean":
        return sequence.mean(dim=0)
    if mode == "max":
        return sequence.max(dim=0).values
    if mode == "first":
        return sequence[0]
    raise ValueError(f"unknown pooling mode {mode!r}")
