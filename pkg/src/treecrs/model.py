"""Full model: knowledge-conditioned prompts driving a frozen causal decoder.

Parameters split into four groups.  The decoder (``plm``) is trained once on
the corpus language-modeling objective in a setup step and then frozen; the
``user`` group covers dialogue/graph encoding and preference modeling, the
``tree`` group covers tree encoding, and the ``prompt`` group holds the
task-specific soft prompts plus the recommendation head.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from treecrs.align import EntityAggregate
from treecrs.config import RunConfig
from treecrs.corpus import Example, render_context
from treecrs.encoders import (
    EncoderConfig,
    RGCN,
    TextEncoder,
    Tokenizer,
    _SelfAttentionBlock,
    encode_text,
    pool,
    retrieve,
    truncate_ids,
)
from treecrs.kg import KnowledgeGraph, graph_hash
from treecrs.ktree import TreeEncoder, build_tree, serialize_tree
from treecrs.user_pref import AttentionSum, CrossInteraction, ItemScorer, user_loss


class CausalDecoder(nn.Module):
    """Small causal transformer used as the frozen backbone."""

    def __init__(self, vocab_size: int, d_dec: int, layers: int, heads: int, max_len: int):
        super().__init__()
        self.d_dec = d_dec
        self.max_len = max_len
        self.token_embedding = nn.Embedding(vocab_size, d_dec)
        self.position_embedding = nn.Embedding(max_len, d_dec)
        self.blocks = nn.ModuleList(
            _SelfAttentionBlock(d_dec, heads, causal=True) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(d_dec)
        self.lm_head = nn.Linear(d_dec, vocab_size, bias=False)
        self.double()

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(token_ids)

    def forward_embeddings(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Run the stack over an already-embedded ``(T, d_dec)`` sequence."""
        n = embeddings.shape[0]
        if n == 0:
            raise ValueError("decoder input is empty")
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds decoder max_len {self.max_len}")
        x = embeddings + self.position_embedding(torch.arange(n))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)


class UserModule(nn.Module):
    """Everything behind the user preference vector (parameter group ``user``)."""

    def __init__(self, graph: KnowledgeGraph, vocab_size: int, config: RunConfig):
        super().__init__()
        enc = config.encoder
        d = config.model.d_fusion
        self.text_encoder = TextEncoder(vocab_size, EncoderConfig(
            d_text=enc.d_text, d_ent=enc.d_ent, text_layers=enc.text_layers,
            text_heads=enc.text_heads, max_len=enc.max_len,
            rgcn_layers=enc.rgcn_layers, rgcn_bases=enc.rgcn_bases,
        ))
        self.rgcn = RGCN(graph, self.text_encoder.config)
        self.cross = CrossInteraction(enc.d_text, enc.d_ent, d)
        self.user_asum = AttentionSum(d)
        self.item_scorer = ItemScorer(enc.d_ent, d)
        self.entity_aggregate = EntityAggregate(enc.d_ent, d)
        self.project_rgcn = nn.Linear(enc.d_ent, config.model.d_dec, bias=False)
        self.project_user = nn.Linear(d, config.model.d_dec, bias=False)
        self.double()


class TreeModule(nn.Module):
    """Tree retrieval projection and tree encoding (parameter group ``tree``)."""

    def __init__(self, config: RunConfig):
        super().__init__()
        enc = config.encoder
        d = config.model.d_fusion
        self.similarity_projection = nn.Linear(enc.d_text, enc.d_ent, bias=False)
        self.tree_encoder = TreeEncoder(enc.d_text, d)
        self.project_tree = nn.Linear(d, config.model.d_dec, bias=False)
        self.double()


class PromptModule(nn.Module):
    """Task soft prompts and the recommendation head (parameter group ``prompt``)."""

    def __init__(self, config: RunConfig):
        super().__init__()
        d_dec = config.model.d_dec
        scale = d_dec**-0.5
        self.soft_rec = nn.Parameter(torch.randn(config.model.soft_len_rec, d_dec) * scale)
        self.soft_conv = nn.Parameter(torch.randn(config.model.soft_len_conv, d_dec) * scale)
        self.item_head = nn.Linear(config.encoder.d_ent, d_dec, bias=False)
        self.double()

    def reinitialize(self, seed: int) -> None:
        """Fresh random draw for all prompt-group tensors (stage-2 start)."""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in self.parameters():
                scale = param.shape[-1] ** -0.5
                fresh = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                param.copy_(fresh * scale)


@dataclass
class PromptBundle:
    """Ordered prompt segments, all decoder-width; empty segments are (0, d)."""

    p_rgcn: torch.Tensor
    p_tree: torch.Tensor
    p_user: torch.Tensor
    p_soft: torch.Tensor

    def matrix(self) -> torch.Tensor:
        return torch.cat([self.p_rgcn, self.p_tree, self.p_user, self.p_soft], dim=0)

    def length(self) -> int:
        return self.p_rgcn.shape[0] + self.p_tree.shape[0] + self.p_user.shape[0] + self.p_soft.shape[0]


@dataclass
class ExampleFeatures:
    """Per-example intermediate tensors shared by the losses and the prompts."""

    entity_ids: list[int]
    context_ids: list[int]
    user_vector: torch.Tensor
    user_scores: torch.Tensor | None
    entity_rows: torch.Tensor
    entity_aggregate: torch.Tensor
    tree_texts: list[str]
    tree_vectors: torch.Tensor
    tree_aggregate: torch.Tensor


def total_loss(
    l_rec: torch.Tensor, l_user: torch.Tensor, l_align: torch.Tensor, alpha: float, beta: float
) -> torch.Tensor:
    """Weighted training objective: ``l_rec + alpha * l_user + beta * l_align``."""
    if alpha < 0 or beta < 0:
        raise ValueError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    return l_rec + alpha * l_user + beta * l_align


class CrsModel(nn.Module):
    """Assembles prompts from dialogue + graph state and drives the decoder."""

    def __init__(self, graph: KnowledgeGraph, tokenizer: Tokenizer, config: RunConfig):
        super().__init__()
        self.graph = graph
        self.tokenizer = tokenizer
        self.config = config
        # Pin construction to float64 so seeded initialization draws the same
        # random stream no matter what default dtype the caller runs under.
        previous_dtype = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            self.decoder = CausalDecoder(
                len(tokenizer), config.model.d_dec, config.model.dec_layers,
                config.model.dec_heads, config.encoder.max_len,
            )
            self.user = UserModule(graph, len(tokenizer), config)
            self.tree = TreeModule(config)
            self.prompt = PromptModule(config)
        finally:
            torch.set_default_dtype(previous_dtype)

    # ----- encoding -------------------------------------------------------

    def graph_embeddings(self) -> torch.Tensor:
        return self.user.rgcn()

    def item_embeddings(self, graph_emb: torch.Tensor) -> torch.Tensor:
        if len(self.graph.items) < 2:
            raise ValueError("recommendation needs at least 2 registered items")
        return retrieve(graph_emb, list(self.graph.items))

    def resolve_entities(self, names: tuple[str, ...]) -> list[int]:
        """Map mentioned entity names to graph ids, dropping unknown mentions.

        Keeps mention order; when more than ``max_entities`` survive, the most
        recent mentions win.
        """
        ids = []
        for name in names:
            try:
                ids.append(self.graph.entity_id(name))
            except KeyError:
                continue
        limit = self.config.model.max_entities
        return ids[-limit:]

    def _tree_texts(self, entity_ids: list[int], context_tokens: torch.Tensor) -> list[str]:
        """Build and serialize one knowledge tree per mentioned entity.

        Tree retrieval is a hard top-N selection, so it runs without gradients
        on a detached similarity space: the pooled context vector through the
        similarity projection against either the convolved or the raw entity
        table (``tree.sim_source``).
        """
        if not entity_ids:
            return []
        with torch.no_grad():
            if self.config.tree.sim_source == "rgcn":
                sim_table = self.graph_embeddings()
            else:
                sim_table = self.user.rgcn.embedding
            context_vec = self.tree.similarity_projection(pool(context_tokens, "mean"))
            trees = [
                build_tree(
                    self.graph, sim_table, context_vec, root,
                    self.config.tree.depth, self.config.tree.degree,
                )
                for root in entity_ids
            ]
        return [serialize_tree(t, self.graph) for t in trees]

    def compute_features(self, example: Example, graph_emb: torch.Tensor) -> ExampleFeatures:
        context_text = render_context(example)
        context_tokens = encode_text(self.user.text_encoder, self.tokenizer, context_text, keep="tail")
        entity_ids = self.resolve_entities(example.mentioned_entities)
        entity_rows = retrieve(graph_emb, entity_ids)

        mixed_tokens, mixed_entities = self.user.cross(
            context_tokens, entity_rows, normalize=self.config.loss.cross_normalize
        )
        user_vector = self.user.user_asum(torch.cat([mixed_tokens, mixed_entities], dim=0))
        user_scores = None
        if len(self.graph.items) >= 2:
            user_scores = self.user.item_scorer(user_vector, self.item_embeddings(graph_emb))

        tree_texts: list[str] = []
        if self.config.model.use_tree_prompt:
            tree_texts = self._tree_texts(entity_ids, context_tokens)
        tree_vectors, tree_aggregate = self.tree.tree_encoder(
            tree_texts, self.user.text_encoder, self.tokenizer
        )
        return ExampleFeatures(
            entity_ids=entity_ids,
            context_ids=self.tokenizer.encode(context_text),
            user_vector=user_vector,
            user_scores=user_scores,
            entity_rows=entity_rows,
            entity_aggregate=self.user.entity_aggregate(entity_rows),
            tree_texts=tree_texts,
            tree_vectors=tree_vectors,
            tree_aggregate=tree_aggregate,
        )

    # ----- prompt assembly -------------------------------------------------

    def prompt_bundle(
        self, features: ExampleFeatures, graph_emb: torch.Tensor, task: str, include_soft: bool = True
    ) -> PromptBundle:
        d_dec = self.config.model.d_dec
        empty = graph_emb.new_zeros((0, d_dec))
        p_rgcn = empty
        if features.entity_ids:
            p_rgcn = self.user.project_rgcn(retrieve(graph_emb, features.entity_ids))
        p_tree = empty
        if self.config.model.use_tree_prompt:
            per_tree_and_fused = torch.cat(
                [features.tree_vectors, features.tree_aggregate.unsqueeze(0)], dim=0
            )
            p_tree = self.tree.project_tree(per_tree_and_fused)
        p_user = empty
        if self.config.model.use_user_prompt:
            p_user = self.user.project_user(features.user_vector).unsqueeze(0)
        p_soft = empty
        if include_soft:
            p_soft = self.prompt.soft_rec if task == "rec" else self.prompt.soft_conv
        return PromptBundle(p_rgcn=p_rgcn, p_tree=p_tree, p_user=p_user, p_soft=p_soft)

    def _assemble(self, bundle: PromptBundle, token_ids: list[int]) -> torch.Tensor:
        prompts = bundle.matrix()
        ids = torch.tensor(token_ids, dtype=torch.long)
        return torch.cat([prompts, self.decoder.embed_tokens(ids)], dim=0)

    def _fit_context(self, context_ids: list[int], reserved: int) -> list[int]:
        budget = self.decoder.max_len - reserved
        if budget < 1:
            raise ValueError("prompt and response leave no room for context tokens")
        return truncate_ids(context_ids, budget, keep="tail")

    def assemble_input(
        self,
        features: ExampleFeatures,
        graph_emb: torch.Tensor,
        task: str,
        response_text: str | None,
        include_soft: bool = True,
    ) -> tuple[torch.Tensor, int, int]:
        """Build the decoder input sequence.

        Returns ``(embeddings, prompt_length, response_start)`` where
        ``response_start`` indexes the first response token (== sequence
        length when no response is attached).  A separator row always closes
        the context so downstream consumers have a fixed summary position at
        ``response_start - 1``.  For the rec task a response is expected; when
        none is given the input degrades to context-plus-separator with a
        warning.
        """
        if task not in ("rec", "conv"):
            raise ValueError(f"unknown task {task!r}")
        bundle = self.prompt_bundle(features, graph_emb, task, include_soft=include_soft)
        response_ids: list[int] = []
        if response_text is not None and response_text.strip():
            response_ids = self.tokenizer.encode(response_text)
        elif task == "rec" and response_text is not None:
            warnings.warn("rec input missing its response; using context only", stacklevel=2)
        context_ids = self._fit_context(
            features.context_ids, bundle.length() + len(response_ids) + 2
        )
        token_ids = list(context_ids)
        token_ids.append(self.tokenizer.sep_id)
        token_ids.extend(response_ids)
        embeddings = self._assemble(bundle, token_ids)
        prompt_len = bundle.length()
        response_start = prompt_len + len(context_ids) + 1
        return embeddings, prompt_len, response_start

    # ----- task heads -------------------------------------------------------

    def pool_hidden(self, hidden: torch.Tensor, anchor: int | None = None) -> torch.Tensor:
        mode = self.config.model.pooling
        if mode == "last":
            return hidden[-1]
        if mode == "anchor":
            # Causal [CLS] analog: the separator row summarizes prompts and
            # context, and later rows cannot influence it, so ranking scores
            # are identical with or without an appended response.
            if anchor is None:
                raise ValueError("anchor pooling needs the separator position")
            return hidden[anchor]
        return pool(hidden, mode)

    def recommend(
        self, features: ExampleFeatures, graph_emb: torch.Tensor, response_text: str | None,
        include_soft: bool = True,
    ) -> torch.Tensor:
        """Score the catalog: softmax over pooled decoder state against items."""
        embeddings, _, response_start = self.assemble_input(
            features, graph_emb, "rec", response_text, include_soft=include_soft
        )
        hidden = self.decoder.forward_embeddings(embeddings)
        pooled = self.pool_hidden(hidden, anchor=response_start - 1)
        item_matrix = self.prompt.item_head(self.item_embeddings(graph_emb))
        return torch.softmax(item_matrix @ pooled, dim=0)

    def conv_loss(
        self, features: ExampleFeatures, graph_emb: torch.Tensor, response_text: str,
        include_soft: bool = True,
    ) -> torch.Tensor:
        """Negative log-likelihood of the gold response tokens only."""
        if not response_text.strip():
            raise ValueError("conversation loss needs a non-empty gold response")
        embeddings, _, response_start = self.assemble_input(
            features, graph_emb, "conv", response_text, include_soft=include_soft
        )
        hidden = self.decoder.forward_embeddings(embeddings)
        logits = self.decoder.logits(hidden)
        n = embeddings.shape[0]
        log_probs = torch.log_softmax(logits[response_start - 1 : n - 1], dim=-1)
        targets = self.tokenizer.encode(response_text)
        target_ids = torch.tensor(targets, dtype=torch.long)
        return -log_probs[torch.arange(len(targets)), target_ids].sum()

    @torch.no_grad()
    def generate(
        self, features: ExampleFeatures, graph_emb: torch.Tensor, max_new_tokens: int,
        include_soft: bool = True,
    ) -> str:
        """Greedy decoding conditioned on the conversation-task prompt bundle."""
        if max_new_tokens <= 0:
            raise ValueError(f"max_new_tokens must be positive, got {max_new_tokens}")
        bundle = self.prompt_bundle(features, graph_emb, "conv", include_soft=include_soft)
        context_ids = self._fit_context(
            features.context_ids, bundle.length() + max_new_tokens + 2
        )
        token_ids = list(context_ids) + [self.tokenizer.sep_id]
        generated: list[int] = []
        for _ in range(max_new_tokens):
            embeddings = self._assemble(bundle, token_ids + generated)
            hidden = self.decoder.forward_embeddings(embeddings)
            next_id = int(torch.argmax(self.decoder.logits(hidden[-1])).item())
            if next_id == self.tokenizer.eos_id:
                break
            generated.append(next_id)
        return self.tokenizer.decode(generated)


def rec_loss(scores: torch.Tensor, labels: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Recommendation loss: same clipped multi-label BCE as the user loss."""
    return user_loss(scores, labels, reduction=reduction)


# ----- parameter groups and checkpoints -------------------------------------

GROUP_NAMES = ("plm", "user", "tree", "prompt")


@dataclass
class ParameterGroups:
    plm: dict[str, nn.Parameter] = field(default_factory=dict)
    user: dict[str, nn.Parameter] = field(default_factory=dict)
    tree: dict[str, nn.Parameter] = field(default_factory=dict)
    prompt: dict[str, nn.Parameter] = field(default_factory=dict)

    def as_dict(self) -> dict[str, dict[str, nn.Parameter]]:
        return {"plm": self.plm, "user": self.user, "tree": self.tree, "prompt": self.prompt}


def parameter_groups(model: CrsModel) -> ParameterGroups:
    return ParameterGroups(
        plm=dict(model.decoder.named_parameters(prefix="decoder")),
        user=dict(model.user.named_parameters(prefix="user")),
        tree=dict(model.tree.named_parameters(prefix="tree")),
        prompt=dict(model.prompt.named_parameters(prefix="prompt")),
    )


def group_hash(params: dict[str, torch.Tensor]) -> str:
    """sha256 over parameter names, shapes, and exact float64 bytes."""
    digest = hashlib.sha256()
    for name in sorted(params):
        tensor = params[name].detach().cpu().to(torch.float64).numpy()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.shape).encode("utf-8"))
        digest.update(tensor.tobytes())
    return digest.hexdigest()


def plm_hash(model: CrsModel) -> str:
    return group_hash(parameter_groups(model).plm)


def freeze_decoder(model: CrsModel) -> None:
    model.decoder.requires_grad_(False)


def save_checkpoint(model: CrsModel, out_dir: str | Path, extra: dict | None = None) -> None:
    """One npz per parameter group plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = parameter_groups(model)
    for name, params in groups.as_dict().items():
        arrays = {k: v.detach().cpu().numpy() for k, v in params.items()}
        np.savez(out / f"{name}.npz", **arrays)
    manifest = {
        "config": model.config.to_dict(),
        "graph_hash": graph_hash(model.graph),
        "vocab": model.tokenizer.vocab,
        "group_hashes": {name: group_hash(params) for name, params in groups.as_dict().items()},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(model: CrsModel, in_dir: str | Path) -> dict:
    """Restore all parameter groups; names must match exactly."""
    in_path = Path(in_dir)
    manifest = json.loads((in_path / "manifest.json").read_text(encoding="utf-8"))
    if manifest["graph_hash"] != graph_hash(model.graph):
        raise ValueError("checkpoint was trained against a different graph")
    groups = parameter_groups(model)
    with torch.no_grad():
        for name, params in groups.as_dict().items():
            stored = np.load(in_path / f"{name}.npz")
            if set(stored.files) != set(params):
                raise ValueError(f"checkpoint group {name!r} does not match the model")
            for key, param in params.items():
                param.copy_(torch.from_numpy(stored[key]))
    return manifest


def checkpoint_hash(checkpoint_dir: str | Path) -> str:
    """Content hash of a saved checkpoint (used as a tree-cache key)."""
    digest = hashlib.sha256()
    in_path = Path(checkpoint_dir)
    for name in GROUP_NAMES:
        digest.update((in_path / f"{name}.npz").read_bytes())
    return digest.hexdigest()
