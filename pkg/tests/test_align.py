import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from treecrs.align import EntityAggregate, align_loss, contrast_mask

import reference


@pytest.fixture
def aggregate():
    torch.manual_seed(0)
    return EntityAggregate(d_ent=6, d=4)


def test_aggregate_empty_uses_null(aggregate):
    out = aggregate(torch.zeros(0, 6))
    assert torch.equal(out, aggregate.null_entity)


def test_aggregate_single_entity(aggregate):
    rows = torch.randn(1, 6)
    expected = aggregate.project(aggregate.asum.value(rows)[0])
    assert torch.allclose(aggregate(rows), expected, atol=1e-12)


def test_aggregate_permutation_invariant(aggregate):
    rows = torch.randn(4, 6)
    permuted = rows[torch.tensor([2, 0, 3, 1])]
    assert torch.allclose(aggregate(rows), aggregate(permuted), atol=1e-10)


def test_aggregate_matches_composed_oracle(aggregate):
    rng = np.random.default_rng(1)
    rows = torch.from_numpy(rng.normal(size=(3, 6)))

    def w(linear):
        return linear.weight.detach().numpy()

    summed = reference.asum(
        rows.numpy(), w(aggregate.asum.query), w(aggregate.asum.key), w(aggregate.asum.value)
    )
    expected = summed @ w(aggregate.project).T
    assert np.abs(aggregate(rows).detach().numpy() - expected).max() < 1e-6


# ---------------------------------------------------------------------------
# contrast mask


def test_mask_all_distinct_is_identity():
    mask = contrast_mask([("A",), ("B",), ("C",)])
    assert torch.equal(mask, torch.eye(3, dtype=torch.float64))


def test_mask_shared_sequence_crossing():
    mask = contrast_mask([("A", "B"), ("C",), ("A", "B")])
    assert mask[0, 2] == 1.0 and mask[2, 0] == 1.0
    assert mask[0, 1] == 0.0


def test_mask_order_sensitive_by_default():
    mask = contrast_mask([("A", "B"), ("B", "A")])
    assert mask[0, 1] == 0.0
    relaxed = contrast_mask([("A", "B"), ("B", "A")], order_sensitive=False)
    assert relaxed[0, 1] == 1.0


# ---------------------------------------------------------------------------
# align loss


def test_align_single_pair_is_zero():
    e = torch.randn(1, 4)
    t = torch.randn(1, 4)
    mask = torch.ones(1, 1, dtype=torch.float64)
    assert align_loss(e, t, mask).item() == pytest.approx(0.0, abs=1e-12)


def test_align_two_equal_similarities():
    # both tree vectors at the same angle to each entity vector: per-row ln 2
    e = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    t = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
    mask = torch.eye(2, dtype=torch.float64)
    value = align_loss(e, t, mask, tau=1.0).item()
    assert value == pytest.approx(2 * math.log(2), abs=1e-12)


def test_align_matches_transcription():
    rng = np.random.default_rng(2)
    e = torch.from_numpy(rng.normal(size=(5, 4)))
    t = torch.from_numpy(rng.normal(size=(5, 4)))
    seqs = [("A",), ("B",), ("A",), ("C",), ("B",)]
    mask = contrast_mask(seqs)
    for literal in (False, True):
        for normalize in (True, False):
            actual = align_loss(
                e, t, mask, tau=0.07, normalize=normalize, literal_denominator=literal
            ).item()
            expected = reference.infonce(
                e.numpy(), t.numpy(), mask.numpy(), 0.07,
                normalize=normalize, literal=literal,
            )
            assert abs(actual - expected) < 1e-9


def test_align_zero_mask_warns():
    e = torch.randn(2, 3)
    t = torch.randn(2, 3)
    mask = torch.zeros(2, 2, dtype=torch.float64)
    with pytest.warns(UserWarning):
        value = align_loss(e, t, mask)
    assert value.item() == 0.0


def test_align_rejects_bad_temperature():
    e = torch.randn(2, 3)
    with pytest.raises(ValueError):
        align_loss(e, e, torch.eye(2, dtype=torch.float64), tau=0.0)


def test_align_scale_invariance_under_normalization():
    rng = np.random.default_rng(3)
    e = torch.from_numpy(rng.normal(size=(4, 5)))
    t = torch.from_numpy(rng.normal(size=(4, 5)))
    mask = torch.eye(4, dtype=torch.float64)
    base = align_loss(e, t, mask).item()
    scaled = align_loss(7.3 * e, 7.3 * t, mask).item()
    assert base == pytest.approx(scaled, abs=1e-9)


def test_align_monotone_in_positive_similarity():
    e = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    mask = torch.eye(2, dtype=torch.float64)
    losses = []
    for pull in (0.0, 0.5, 0.9):
        t = torch.tensor([[pull, math.sqrt(1 - pull**2)], [0.0, 1.0]])
        losses.append(align_loss(e, t, mask, tau=1.0).item())
    assert losses[0] > losses[1] > losses[2]


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**31 - 1))
def test_align_nonnegative_property(b, seed):
    rng = np.random.default_rng(seed)
    e = torch.from_numpy(rng.normal(size=(b, 4)))
    t = torch.from_numpy(rng.normal(size=(b, 4)))
    mask = torch.eye(b, dtype=torch.float64)
    assert align_loss(e, t, mask).item() >= -1e-12
