"""Distribution invariants checked over large random batches (at least 1000 draws each)."""

import numpy as np
import torch

from mgalign.discriminators import (
    build_pseudo_labels,
    category_consistency_loss,
    category_discriminability_loss,
    category_probs,
    domain_probs,
)
from mgalign.fusion import BRANCHES, gate_from_overlaps, gate_mask
from mgalign.geometry import kernel_iou

N = 4000


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def test_category_probs_normalised():
    for c in (1, 3, 8):
        logits = torch.randn(N, 2 * c, generator=_gen(c), dtype=torch.float64) * 10
        p = category_probs(logits)
        assert p.shape == (N, c)
        assert (p >= 0).all() and torch.allclose(p.sum(dim=1), torch.ones(N, dtype=torch.float64), atol=1e-6)


def test_domain_probs_normalised_per_pair():
    for c in (1, 3, 8):
        logits = torch.randn(N, 2 * c, generator=_gen(10 + c), dtype=torch.float64) * 10
        pairs = domain_probs(logits).unflatten(1, (c, 2))
        assert (pairs >= 0).all()
        assert torch.allclose(pairs.sum(dim=2), torch.ones(N, c, dtype=torch.float64), atol=1e-6)


def test_gate_normalised_and_argmax_preserving():
    g = _gen(20)
    overlaps = torch.rand(N, 6, 1, 1, generator=g, dtype=torch.float64)
    for tau in (0.1, 1.0, 10.0, 100.0):
        gate = gate_from_overlaps(overlaps, tau)
        assert (gate >= 0).all()
        assert torch.allclose(gate.sum(dim=1), torch.ones(N, 1, 1, dtype=torch.float64), atol=1e-6)
        assert torch.equal(gate.argmax(dim=1), overlaps.argmax(dim=1))


def test_gate_from_scales_matches_overlap_argmax():
    rng = np.random.default_rng(21)
    scales = rng.uniform(0, 12, (N, 2))
    gate = gate_mask(torch.tensor(scales).view(N, 2, 1, 1), tau=10.0)[:, :, 0, 0].numpy()
    overlaps = np.array([[kernel_iou(s, b.effective_size) for b in BRANCHES] for s in scales])
    assert np.allclose(gate.sum(axis=1), 1.0, atol=1e-6)
    # where the top two overlaps tie, either index is a valid argmax
    picked = overlaps[np.arange(N), gate.argmax(axis=1)]
    assert np.allclose(picked, overlaps.max(axis=1), atol=1e-12)


def test_gate_shift_invariance():
    g = _gen(22)
    overlaps = torch.rand(N, 6, 1, 1, generator=g, dtype=torch.float64)
    shift = torch.randn(N, 1, 1, 1, generator=g, dtype=torch.float64) * 5
    assert torch.allclose(gate_from_overlaps(overlaps, 7.0), gate_from_overlaps(overlaps + shift, 7.0), atol=1e-12)


def _labels(seed, c):
    g = _gen(seed)
    cats = torch.randint(0, c, (N,), generator=g)
    doms = torch.randint(0, 2, (N,), generator=g)
    sel = torch.ones(N, dtype=torch.bool)
    return build_pseudo_labels(cats, doms, sel, c), sel


def test_category_losses_shift_invariant_per_row():
    c = 3
    pl, sel = _labels(30, c)
    g = _gen(31)
    logits = torch.randn(N, 2 * c, generator=g, dtype=torch.float64) * 3
    shift = torch.randn(N, 1, generator=g, dtype=torch.float64) * 20
    # per-row losses: evaluate each row as its own one-cell selection
    def rows(fn, x, y):
        return torch.stack([fn(x[i : i + 1], y[i : i + 1], sel[i : i + 1]) for i in range(0, N, 4)])

    assert torch.allclose(rows(category_discriminability_loss, logits + shift, pl.dis),
                          rows(category_discriminability_loss, logits, pl.dis), atol=1e-9)
    assert torch.allclose(rows(category_consistency_loss, logits + shift, pl.sim),
                          rows(category_consistency_loss, logits, pl.sim), atol=1e-9)


def test_consistency_loss_invariant_to_per_category_pair_shift():
    c = 4
    pl, sel = _labels(32, c)
    g = _gen(33)
    logits = torch.randn(N, 2 * c, generator=g, dtype=torch.float64) * 3
    pair_shift = (torch.randn(N, c, generator=g, dtype=torch.float64) * 20).repeat_interleave(2, dim=1)
    assert torch.allclose(domain_probs(logits + pair_shift), domain_probs(logits), atol=1e-12)
    assert torch.allclose(category_consistency_loss(logits + pair_shift, pl.sim, sel),
                          category_consistency_loss(logits, pl.sim, sel), atol=1e-9)
