import pytest
import torch

from reftok.refdecoder import insert_mask_tokens
from reftok.refencoder import keep_from_pruned
from reftok.layers import gather_tokens
from reftok.tokenizer import BypassViolation, Tokenizer


def test_insert_identity():
    x = torch.randn(2, 5, 3)
    out = insert_mask_tokens(x, torch.zeros(2, 0, dtype=torch.long), 5, torch.zeros(1, 1, 3))
    assert torch.equal(out, x)


def test_insert_all_pruned():
    mask = torch.arange(3.0).reshape(1, 1, 3)
    idx = torch.arange(4).expand(2, 4)
    out = insert_mask_tokens(torch.zeros(2, 0, 3), idx, 4, mask)
    assert torch.equal(out, mask.expand(2, 4, 3))


def test_insert_inverts_prune():
    x = torch.randn(2, 8, 4)
    idx = torch.tensor([[1, 5], [0, 7]])
    kept = gather_tokens(x, keep_from_pruned(idx, 8))
    mask = torch.full((1, 1, 4), 9.0)
    out = insert_mask_tokens(kept, idx, 8, mask)
    flag = torch.ones(2, 8, dtype=torch.bool)
    flag.scatter_(1, idx, False)
    assert torch.equal(out[flag], x[flag])
    assert (out[~flag] == 9.0).all()


def test_insert_errors():
    m = torch.zeros(1, 1, 2)
    with pytest.raises(ValueError):
        insert_mask_tokens(torch.zeros(1, 3, 2), torch.tensor([[0]]), 5, m)
    with pytest.raises(ValueError):
        insert_mask_tokens(torch.zeros(1, 3, 2), torch.tensor([[9]]), 4, m)
    with pytest.raises(ValueError):
        insert_mask_tokens(torch.zeros(1, 2, 2), torch.tensor([[1, 1]]), 4, m)


def _inputs(seed=0, b=2):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 1, 32, 32, 3, generator=g), torch.rand(b, 6, 32, 32, 3, generator=g)


def test_decode_shape_and_range(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref, tgt = _inputs()
    bundle = tok.encode(ref, tgt)
    tok.quantizer.init_from_data(bundle.h_t.reshape(-1, bundle.h_t.shape[-1]), rng=0)
    z, *_ = tok.quantize(bundle)
    with torch.no_grad():
        out = tok.decode(z, bundle.h_r, bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)
    assert out.shape == tgt.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_reference_conditioning_reaches_output(tiny_cfg):
    tok = Tokenizer(tiny_cfg).eval()
    ref, tgt = _inputs()
    bundle = tok.encode(ref, tgt)
    tok.quantizer.init_from_data(bundle.h_t.reshape(-1, bundle.h_t.shape[-1]), rng=0)
    z, *_ = tok.quantize(bundle)
    args = (bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)
    a = tok.decode_tokens(z, bundle.h_r, *args)
    b = tok.decode_tokens(z, bundle.h_r + 0.1 * torch.randn_like(bundle.h_r), *args)
    assert float((a - b).abs().max().detach()) > 0
    same = tok.decode_tokens(z, bundle.h_r.clone(), *args)
    assert torch.equal(a, same)


def test_gradient_reaches_both_paths(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref, tgt = _inputs()
    bundle = tok.encode(ref, tgt)
    tok.quantizer.init_from_data(bundle.h_t.reshape(-1, bundle.h_t.shape[-1]), rng=0)
    z = tok.quantizer.lookup(tok.quantizer.indices(bundle.h_t.reshape(-1, bundle.h_t.shape[-1])))
    z = z.reshape(bundle.h_t.shape).clone().requires_grad_(True)
    h_r = bundle.h_r.detach().clone().requires_grad_(True)
    out = tok.decode_tokens(z, h_r, bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)
    (out - tgt).abs().mean().backward()
    assert float(z.grad.abs().sum()) > 0 and float(h_r.grad.abs().sum()) > 0


def test_pruned_decode_shape(tiny_cfg):
    tok = Tokenizer(tiny_cfg).train()
    ref, tgt = _inputs()
    out = tok(ref, tgt, generator=torch.Generator().manual_seed(1), prune_max=4)
    assert out["recon"].shape == tgt.shape


def test_lattice_mismatch(tiny_cfg):
    tok = Tokenizer(tiny_cfg)
    ref, tgt = _inputs()
    bundle = tok.encode(ref, tgt)
    with pytest.raises(ValueError):
        tok.decode_tokens(bundle.h_t[:, :40], bundle.h_r, bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)


def test_bypass_instrumentation(tiny_cfg):
    tok = Tokenizer(tiny_cfg).train()
    ref, tgt = _inputs()
    tok(ref, tgt)
    assert tok.quantizer.last_input_tokens == 2 * 48
    bundle = tok.encode(ref, tgt)
    forged = type(bundle)(bundle.h_r, torch.cat([tok.to_code(bundle.h_r), bundle.h_t], 1),
                          bundle.prune_indices, bundle.ref_grid, bundle.tgt_grid)
    with pytest.raises(BypassViolation):
        tok.quantize(forged)


def test_reference_less_shapes(tiny_cfg):
    tok = Tokenizer(tiny_cfg.replace(train={"mode": "reference_less"})).train()
    ref, tgt = _inputs()
    out = tok(ref, tgt)
    assert out["recon"].shape == (2, 8, 32, 32, 3)
    assert out["recon_target"].shape == tgt.shape
    assert tok.quantizer.last_input_tokens == 2 * 64
