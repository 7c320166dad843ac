import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from reftok.layers import axis_dims, sincos_1d, sincos_3d
from reftok.refencoder import (build_reference_attention_mask, draw_prune_indices, keep_from_pruned,
                               prune_tokens)
from reftok.tokenizer import Tokenizer

T, F = True, False


def test_oneway_mask_example():
    m = build_reference_attention_mask(2, 2, "oneway")
    assert m.tolist() == [[T, T, F, F], [T, T, F, F], [T, T, T, T], [T, T, T, T]]


def test_mask_no_targets():
    for mode in ("oneway", "ref_only", "none"):
        m = build_reference_attention_mask(3, 0, mode)
        assert m.shape == (3, 3) and m.all()


def test_ref_only_mask():
    m = build_reference_attention_mask(1, 2, "ref_only")
    assert m.tolist() == [[T, F, F], [T, T, F], [T, F, T]]


def test_none_mask_and_bad_mode():
    assert build_reference_attention_mask(2, 3, "none").all()
    with pytest.raises(ValueError):
        build_reference_attention_mask(1, 1, "sideways")


@pytest.mark.parametrize("mode", ["oneway", "ref_only"])
def test_mask_barrier_property(mode):
    for n_ref in range(1, 5):
        for n_tgt in range(0, 5):
            m = build_reference_attention_mask(n_ref, n_tgt, mode)
            assert not m[:n_ref, n_ref:].any()


def test_positions_shape_and_injective():
    tab = sincos_3d(3, 4, 4, 160)
    assert tab.shape == (48, 160)
    d = ((tab[:, None] - tab[None]) ** 2).sum(-1)
    assert (d + np.eye(48) > 0).all()


def test_positions_t_axis_constant_for_single_slot():
    dt, dy, dx = axis_dims(96)
    tab = sincos_3d(1, 3, 5, 96)
    t_part = tab[:, :dt]
    assert np.allclose(t_part, sincos_1d(np.zeros(1), dt))
    assert np.allclose(t_part[0], np.concatenate([np.zeros(dt // 2), np.ones(dt // 2)]))


def test_prune_edges():
    x = np.arange(10)
    out, idx = prune_tokens(x, 0, 1)
    assert np.array_equal(out, x) and idx.size == 0
    out, idx = prune_tokens(x, 9, 1)
    assert len(out) == 1 and len(idx) == 9
    with pytest.raises(ValueError):
        prune_tokens(x, 10)
    with pytest.raises(ValueError):
        prune_tokens(x, -1)


def test_prune_keeps_order_and_sorted():
    out, idx = prune_tokens(np.arange(20), 7, 3)
    assert np.all(np.diff(idx) > 0)
    assert np.all(np.diff(out) > 0)
    assert set(out) | set(idx) == set(range(20))


def test_prune_uniform_chi2():
    rng = np.random.default_rng(0)
    n, counts = 12, np.zeros(12)
    for _ in range(10_000):
        _, idx = prune_tokens(np.arange(n), 3, rng)
        counts[idx] += 1
    assert chisquare(counts).pvalue > 0.001


def test_draw_prune_indices():
    gen = torch.Generator().manual_seed(0)
    seen = set()
    for _ in range(50):
        p = draw_prune_indices(3, 48, 12, gen)
        seen.add(p.shape[1])
        assert p.shape[1] <= 12
        if p.numel():
            assert (p.diff(dim=1) > 0).all()
            keep = keep_from_pruned(p, 48)
            assert keep.shape == (3, 48 - p.shape[1])
    assert 0 in seen and len(seen) > 5
    with pytest.raises(ValueError):
        draw_prune_indices(1, 12, 12, gen)


def _clips(b, t, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, t, 32, 32, 3, generator=g)


def test_desk_token_counts(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref, tgt = _clips(2, 1, 0), _clips(2, 6, 1)
    b = tok.encode(ref, tgt)
    assert b.h_r.shape[1] == 16 and b.h_t.shape[1] == 48
    assert b.ref_grid == (1, 4, 4) and b.tgt_grid == (3, 4, 4)


def test_deterministic(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref, tgt = _clips(2, 1, 0), _clips(2, 6, 1)
    a = tok.encode(ref, tgt, generator=torch.Generator().manual_seed(5), prune_max=4)
    b = tok.encode(ref, tgt, generator=torch.Generator().manual_seed(5), prune_max=4)
    assert torch.equal(a.h_t, b.h_t) and torch.equal(a.prune_indices, b.prune_indices)


@pytest.mark.parametrize("mode,causal", [("oneway", True), ("ref_only", True), ("none", False)])
def test_causality(tiny_cfg, mode, causal):
    tok = Tokenizer(tiny_cfg.replace(model={"mask_mode": mode}))
    ref = _clips(4, 1, 0)
    h1 = tok.encode(ref, _clips(4, 6, 1)).h_r
    h2 = tok.encode(ref, _clips(4, 6, 2)).h_r
    diff = float((h1 - h2).detach().abs().max())
    if causal:
        assert diff < 1e-5
    else:
        assert diff > 1e-3


def test_reference_only_pass_matches_joint(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref = _clips(2, 1, 0)
    joint = tok.encode(ref, _clips(2, 6, 3)).h_r
    assert torch.allclose(tok.encode_reference(ref), joint, atol=1e-5)


def test_bad_shape(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    with pytest.raises(Exception):
        tok.encode(_clips(1, 1, 0), _clips(1, 5, 0))
