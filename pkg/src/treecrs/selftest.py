"""Built-in verification suite behind the ``selftest`` command.

Re-derives the core quantities with plain-numpy reference code and compares
against the package implementations: metric definitions, the attention and
interaction algebra, tree construction against exhaustive enumeration,
serialization round trips, and finite-difference gradient checks.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch

from treecrs.align import EntityAggregate, align_loss, contrast_mask
from treecrs.config import RunConfig
from treecrs.corpus import Dialogue, Utterance, expand_corpus, make_label_vector
from treecrs.kg import parse_triples, register_items
from treecrs.ktree import build_tree, parse_tree, parsed_equal, to_parsed, serialize_tree
from treecrs.metrics import distinct_n, mrr_at_k, ndcg_at_k, recall_at_k
from treecrs.model import rec_loss, total_loss
from treecrs.train import build_model, build_tokenizer, rec_examples
from treecrs.user_pref import AttentionSum, CrossInteraction, ItemScorer, user_loss


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# ----- reference implementations ----------------------------------------------


def _ref_recall(ranked, gold, k):
    return sum(1 for x in ranked[:k] if x in gold) / len(gold)


def _ref_ndcg(ranked, gold, k):
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if item in gold:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(gold), k) + 1))
    return dcg / ideal


def _ref_mrr(ranked, gold, k):
    for rank, item in enumerate(ranked[:k], start=1):
        if item in gold:
            return 1.0 / rank
    return 0.0


def _ref_distinct(responses, n):
    seen, total = set(), 0
    for response in responses:
        words = response.lower().split()
        for i in range(len(words) - n + 1):
            seen.add(tuple(words[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def _ref_asum(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    n, d = x.shape
    q, k, v = x @ wq.T, x @ wk.T, x @ wv.T
    out = np.zeros(d)
    for i in range(n):
        scores = np.array([q[i] @ k[j] / math.sqrt(d) for j in range(n)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        for j in range(n):
            out += weights[j] * v[j]
    return out


def _ref_cross(c, e, wc, we, w):
    cp, ep = c @ wc.T, e @ we.T
    a = cp @ w @ ep.T

    def rowsoftmax(m):
        z = np.exp(m - m.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    return cp + rowsoftmax(a) @ ep, ep + rowsoftmax(a.T) @ cp


def _ref_user_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    eps = 1e-12
    total = 0.0
    for b in range(scores.shape[0]):
        for i in range(scores.shape[1]):
            r = min(max(scores[b, i], eps), 1.0 - eps)
            y = labels[b, i]
            total -= y * math.log(r) + (1 - y) * math.log(1 - r)
    return total


def _ref_align(e: np.ndarray, t: np.ndarray, mask: np.ndarray, tau: float) -> float:
    e = e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
    t = t / np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    b = e.shape[0]
    total = 0.0
    for i in range(b):
        denom = sum(math.exp(e[i] @ t[k] / tau) for k in range(b))
        for j in range(b):
            if mask[i, j]:
                total -= math.log(math.exp(e[i] @ t[j] / tau) / denom)
    return total


def _ref_tree_edges(graph, emb: np.ndarray, context: np.ndarray, root, depth_limit, degree_limit):
    """Exhaustive-ranking tree enumeration; returns the set of (path, relation, entity)."""

    def cosine(v):
        num = float(context @ emb[v])
        den = float(np.linalg.norm(context) * np.linalg.norm(emb[v]))
        return num / den if den else 0.0

    edges = set()

    def expand(entity, path, depth):
        if depth == depth_limit:
            return
        candidates = {}
        for relation, neighbor in graph.adjacency[entity]:
            if neighbor in path or neighbor in candidates:
                continue
            candidates[neighbor] = relation
        ranked = sorted(candidates, key=lambda v: (-cosine(v), v))[:degree_limit]
        for neighbor in ranked:
            edges.add((path, candidates[neighbor], neighbor))
            expand(neighbor, path + (neighbor,), depth + 1)

    expand(root, (root,), 0)
    return edges


def _tree_edges(tree):
    edges = set()

    def visit(node, path):
        for child in node.children:
            edges.add((path, child.relation, child.entity))
            visit(child, path + (child.entity,))

    visit(tree.root, (tree.root.entity,))
    return edges


def _random_graph(rng: random.Random, max_entities: int = 50):
    n_entities = rng.randint(5, max_entities)
    n_relations = rng.randint(1, 4)
    lines = []
    for _ in range(rng.randint(n_entities, 3 * n_entities)):
        h = rng.randrange(n_entities)
        t = rng.randrange(n_entities)
        r = rng.randrange(n_relations)
        lines.append(f"e{h}\tr{r}\te{t}")
    return parse_triples("\n".join(lines))


# ----- checks -------------------------------------------------------------------


def check_metrics(n_instances: int = 200, seed: int = 11) -> CheckResult:
    rng = random.Random(seed)
    worst = 0.0
    for _ in range(n_instances):
        n_items = rng.randint(5, 60)
        ranked = list(range(n_items))
        rng.shuffle(ranked)
        gold = set(rng.sample(range(n_items), rng.randint(1, min(5, n_items))))
        for k in (10, 50):
            worst = max(worst, abs(recall_at_k(ranked, gold, k) - _ref_recall(ranked, gold, k)))
            worst = max(worst, abs(ndcg_at_k(ranked, gold, k) - _ref_ndcg(ranked, gold, k)))
            worst = max(worst, abs(mrr_at_k(ranked, gold, k) - _ref_mrr(ranked, gold, k)))
    vocab = ["alpha", "beta", "gamma", "delta", "echo"]
    for _ in range(n_instances):
        responses = [
            " ".join(rng.choice(vocab) for _ in range(rng.randint(1, 12)))
            for _ in range(rng.randint(1, 8))
        ]
        for n in (2, 3, 4):
            with_warn = distinct_n(responses, n) if any(len(r.split()) >= n for r in responses) else 0.0
            worst = max(worst, abs(with_warn - _ref_distinct(responses, n)))
    return CheckResult("metric_oracles", worst <= 1e-9, f"max abs diff {worst:.2e}")


def check_algebra(seed: int = 12) -> CheckResult:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    worst = 0.0

    asum = AttentionSum(6)
    x = torch.tensor(rng.standard_normal((5, 6)))
    got = asum(x).detach().numpy()
    want = _ref_asum(
        x.numpy(), asum.query.weight.detach().numpy(),
        asum.key.weight.detach().numpy(), asum.value.weight.detach().numpy(),
    )
    worst = max(worst, float(np.max(np.abs(got - want))))

    cross = CrossInteraction(5, 4, 6)
    c = torch.tensor(rng.standard_normal((7, 5)))
    e = torch.tensor(rng.standard_normal((3, 4)))
    got_c, got_e = cross(c, e)
    want_c, want_e = _ref_cross(
        c.numpy(), e.numpy(),
        cross.project_tokens.weight.detach().numpy(),
        cross.project_entities.weight.detach().numpy(),
        cross.interaction.detach().numpy(),
    )
    worst = max(worst, float(np.max(np.abs(got_c.detach().numpy() - want_c))))
    worst = max(worst, float(np.max(np.abs(got_e.detach().numpy() - want_e))))

    raw = rng.random((4, 9))
    scores = torch.tensor(raw / raw.sum(axis=1, keepdims=True))
    labels = torch.tensor((rng.random((4, 9)) < 0.3).astype(np.float64))
    got_loss = float(user_loss(scores, labels))
    want_loss = _ref_user_loss(scores.numpy(), labels.numpy())
    worst = max(worst, abs(got_loss - want_loss))

    e_agg = torch.tensor(rng.standard_normal((5, 6)))
    t_agg = torch.tensor(rng.standard_normal((5, 6)))
    seqs = [(1, 2), (3,), (1, 2), (4,), (5,)]
    mask = contrast_mask(seqs)
    got_align = float(align_loss(e_agg, t_agg, mask, tau=0.07))
    want_align = _ref_align(e_agg.numpy(), t_agg.numpy(), mask.numpy(), 0.07)
    worst = max(worst, abs(got_align - want_align))

    return CheckResult("algebra_oracles", worst <= 1e-9, f"max abs diff {worst:.2e}")


def check_tree_builder(n_graphs: int = 30, seed: int = 13) -> CheckResult:
    rng = random.Random(seed)
    for index in range(n_graphs):
        graph = _random_graph(rng)
        emb = np.asarray(np.random.default_rng(seed + index).standard_normal((graph.n_entities, 8)))
        context = np.asarray(np.random.default_rng(seed + index + 1).standard_normal(8))
        for depth_limit in (1, 2):
            for degree_limit in (1, 3, 5):
                root = rng.randrange(graph.n_entities)
                tree = build_tree(
                    graph, torch.tensor(emb), torch.tensor(context), root, depth_limit, degree_limit
                )
                got = _tree_edges(tree)
                want = _ref_tree_edges(graph, emb, context, root, depth_limit, degree_limit)
                if got != want:
                    return CheckResult(
                        "tree_builder_oracle", False,
                        f"graph {index} root {root} L={depth_limit} N={degree_limit}: {len(got)} vs {len(want)} edges",
                    )
    return CheckResult("tree_builder_oracle", True, f"{n_graphs} graphs x 6 shapes exact")


def check_serialization(n_trees: int = 100, seed: int = 14) -> CheckResult:
    rng = random.Random(seed)
    for index in range(n_trees):
        graph = _random_graph(rng, max_entities=20)
        emb = np.random.default_rng(seed + index).standard_normal((graph.n_entities, 6))
        context = np.random.default_rng(seed + 1000 + index).standard_normal(6)
        tree = build_tree(
            graph, torch.tensor(emb), torch.tensor(context),
            rng.randrange(graph.n_entities), rng.choice((1, 2, 3)), rng.choice((1, 2, 3)),
        )
        text = serialize_tree(tree, graph)
        if not parsed_equal(parse_tree(text), to_parsed(tree, graph)):
            return CheckResult("serialization_round_trip", False, f"tree {index} not isomorphic")
    return CheckResult("serialization_round_trip", True, f"{n_trees} trees round-tripped")


# ----- gradient checks -----------------------------------------------------------


def _central_diff(f, param: torch.nn.Parameter, flat_index: int, h: float = 1e-6) -> float:
    with torch.no_grad():
        flat = param.view(-1)
        original = float(flat[flat_index])
        flat[flat_index] = original + h
        up = float(f())
        flat[flat_index] = original - h
        down = float(f())
        flat[flat_index] = original
    return (up - down) / (2 * h)


def max_grad_rel_err(f, params: list[torch.nn.Parameter], per_param: int = 2, seed: int = 0) -> float:
    """Compare autograd against central differences on sampled coordinates."""
    rng = random.Random(seed)
    value = f()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    worst = 0.0
    for param, grad in zip(params, grads):
        analytic_full = torch.zeros_like(param) if grad is None else grad
        n = param.numel()
        for flat_index in rng.sample(range(n), min(per_param, n)):
            analytic = float(analytic_full.view(-1)[flat_index])
            numeric = _central_diff(f, param, flat_index)
            scale = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def check_loss_gradients(seed: int = 15) -> CheckResult:
    torch.manual_seed(seed)
    worst = 0.0

    asum = AttentionSum(6)
    scorer = ItemScorer(4, 6)
    x1 = torch.randn(5, 6, dtype=torch.float64)
    x2 = torch.randn(4, 6, dtype=torch.float64)
    items = torch.randn(7, 4, dtype=torch.float64)
    labels = (torch.rand(2, 7, dtype=torch.float64) < 0.4).to(torch.float64)

    def f_user():
        scores = torch.stack([scorer(asum(x1), items), scorer(asum(x2), items)])
        return user_loss(scores, labels)

    params = list(asum.parameters()) + list(scorer.parameters())
    worst = max(worst, max_grad_rel_err(f_user, params, seed=seed))

    agg = EntityAggregate(4, 6)
    rows = [torch.randn(3, 4, dtype=torch.float64), torch.randn(2, 4, dtype=torch.float64),
            torch.randn(1, 4, dtype=torch.float64)]
    trees = torch.randn(3, 6, dtype=torch.float64)
    mask = contrast_mask([(1,), (1,), (2,)])

    def f_align():
        e = torch.stack([agg(r) for r in rows])
        return align_loss(e, trees, mask, tau=0.07)

    worst = max(worst, max_grad_rel_err(f_align, list(agg.parameters()), seed=seed))

    head = torch.nn.Linear(4, 6, bias=False).double()
    pooled = torch.randn(2, 6, dtype=torch.float64)

    def f_rec():
        logits = pooled @ head(items).T
        return rec_loss(torch.softmax(logits, dim=1), labels)

    worst = max(worst, max_grad_rel_err(f_rec, list(head.parameters()), seed=seed))
    return CheckResult("loss_gradients", worst < 1e-4, f"max rel err {worst:.2e}")


def _toy_setup(seed: int = 16):
    """Tiny in-memory corpus + graph + model for end-to-end checks."""
    rng = random.Random(seed)
    from treecrs import synth

    plan = synth.generate_graph(rng, n_entities=16, n_items=4)
    raw = synth.generate_dialogues(rng, plan, 12)
    dialogues = [
        Dialogue(
            id=d["id"],
            utterances=tuple(
                Utterance(u["speaker"], u["text"], tuple(u["entities"]), tuple(u["items"]))
                for u in d["utterances"]
            ),
        )
        for d in raw
    ]
    graph = parse_triples("".join(f"{h}\t{r}\t{t}\n" for h, r, t in plan.triples))
    graph = register_items(graph, plan.films)
    config = RunConfig.from_dict({
        "task": "rec",
        "encoder": {"d_text": 8, "d_ent": 8, "text_layers": 1, "text_heads": 2, "max_len": 96},
        "model": {"d_fusion": 8, "d_dec": 8, "dec_layers": 1, "dec_heads": 2,
                  "soft_len_rec": 3, "soft_len_conv": 4},
        "training": {"seed_init": seed},
    })
    tokenizer = build_tokenizer(dialogues, graph, config)
    model = build_model(graph, tokenizer, config)
    examples = rec_examples(expand_corpus(dialogues))[:4]
    return model, graph, examples


def check_end_to_end_gradient(seed: int = 16) -> CheckResult:
    model, graph, examples = _toy_setup(seed)
    config = model.config
    labels = torch.stack([torch.from_numpy(make_label_vector(ex, graph)) for ex in examples])

    def f_all():
        graph_emb = model.graph_embeddings()
        features = [model.compute_features(ex, graph_emb) for ex in examples]
        scores = torch.stack([
            model.recommend(f, graph_emb, ex.target_response) for ex, f in zip(examples, features)
        ])
        l_rec = rec_loss(scores, labels)
        l_user = user_loss(torch.stack([f.user_scores for f in features]), labels)
        mask = contrast_mask([tuple(f.entity_ids) for f in features])
        l_align = align_loss(
            torch.stack([f.entity_aggregate for f in features]),
            torch.stack([f.tree_aggregate for f in features]),
            mask, tau=config.loss.tau,
        )
        return total_loss(l_rec, l_user, l_align, config.loss.alpha, config.loss.beta)

    params = [
        model.user.cross.interaction,
        model.user.rgcn.embedding,
        model.user.item_scorer.project_items.weight,
        model.tree.tree_encoder.project_tokens.weight,
        model.tree.tree_encoder.outer.value.weight,
        model.prompt.soft_rec,
        model.prompt.item_head.weight,
    ]
    worst = max_grad_rel_err(f_all, params, per_param=2, seed=seed)
    return CheckResult("end_to_end_gradient", worst < 1e-3, f"max rel err {worst:.2e}")


def run_all() -> list[CheckResult]:
    return [
        check_metrics(),
        check_algebra(),
        check_tree_builder(),
        check_serialization(),
        check_loss_gradients(),
        check_end_to_end_gradient(),
    ]
