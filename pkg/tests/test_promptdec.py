import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from semtrack.encoder import FeatureMap
from semtrack.errors import InputError, ShapeError
from semtrack.promptdec import (BOX_BR, BOX_TL, FG, LARGE_LOGIT, MAX_SCRIBBLE_TOKENS, MaskDecoder, Prompt,
                                PromptEncoder, TwoWayBlock, decode_mask, encode_prompt, prompt_points,
                                reference_mask_from_prompt, sparse_batch)

from conftest import SMALL, random_mask
import oracles as O


def perturb_(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def attn(a):
    return (O.mat(a.W_q), O.mat(a.W_k), O.mat(a.W_v), O.mat(a.W_o))


def norm(n):
    return (O.mat(n.weight), O.mat(n.bias))


@pytest.mark.parametrize("n_tokens", [2, 3, 4])
def test_two_way_block_matches_loop_oracle(n_tokens):
    d, heads = 4, 2
    blk = TwoWayBlock(d, heads, torch.Generator().manual_seed(n_tokens)).double()
    perturb_(blk, n_tokens)
    g = torch.Generator().manual_seed(100 + n_tokens)
    tokens, tpe = torch.randn(1, n_tokens, d, generator=g, dtype=torch.float64), None
    tpe = torch.randn(1, n_tokens, d, generator=g, dtype=torch.float64)
    src = torch.randn(1, 4, d, generator=g, dtype=torch.float64)
    spe = torch.randn(1, 4, d, generator=g, dtype=torch.float64)
    got_t, got_s = blk(tokens, src, tpe, spe)
    p = {"self": attn(blk.self_attn), "t2i": attn(blk.cross_t2i), "i2t": attn(blk.cross_i2t),
         "mlp": [(O.mat(l.weight), O.mat(l.bias)) for l in blk.mlp.layers],
         "n1": norm(blk.norm1), "n2": norm(blk.norm2), "n3": norm(blk.norm3), "n4": norm(blk.norm4)}
    want_t, want_s = O.two_way_block(O.mat(tokens[0]), O.mat(src[0]), O.mat(tpe[0]), O.mat(spe[0]), p, heads)
    assert torch.max(torch.abs(got_t[0] - torch.tensor(want_t))) < 1e-6
    assert torch.max(torch.abs(got_s[0] - torch.tensor(want_s))) < 1e-6


def test_prompt_validation():
    with pytest.raises(InputError):
        Prompt("lasso", None)
    with pytest.raises(InputError):
        Prompt("point", [(16, 0, "fg")]).validate(16)
    with pytest.raises(InputError):
        Prompt("point", [(1, 1, "maybe")]).validate(16)
    with pytest.raises(InputError):
        Prompt("box", (5, 5, 4, 8)).validate(16)
    with pytest.raises(InputError):
        Prompt("scribble", []).validate(16)
    with pytest.raises(ShapeError):
        Prompt("mask", np.zeros((8, 16))).validate(16)
    with pytest.raises(InputError):
        Prompt("mask", np.full((16, 16), 2)).validate(16)
    Prompt("box", (0, 0, 15, 15)).validate(16)


def test_point_box_and_scribble_coordinates():
    c, lab = prompt_points(Prompt("point", [(3, 5, "fg"), (0, 0, "bg")]), 16)
    assert np.allclose(c, [[3.5 / 16, 5.5 / 16], [0.5 / 16, 0.5 / 16]])
    assert lab.tolist() == [FG, 1]
    c, lab = prompt_points(Prompt("box", (2, 4, 9, 7)), 16)
    assert np.allclose(c, [[2 / 16, 4 / 16], [10 / 16, 8 / 16]])
    assert lab.tolist() == [BOX_TL, BOX_BR]
    walk = [(x, 0) for x in range(16)] + [(15, y) for y in range(1, 10)]
    c, lab = prompt_points(Prompt("scribble", walk), 16)
    assert len(c) == MAX_SCRIBBLE_TOKENS and all(l == FG for l in lab)
    assert np.allclose(c[0], [0.5 / 16, 0.5 / 16]) and np.allclose(c[-1], [15.5 / 16, 9.5 / 16])


@given(st.floats(0, 1), st.floats(0, 1))
def test_positional_code_is_unit_sin_cos(x, y):
    pe = PromptEncoder(SMALL, torch.Generator().manual_seed(0))
    code = pe.positional(torch.tensor([[x, y]], dtype=torch.float64))[0]
    half = SMALL.embed_dim // 2
    assert torch.allclose(code[:half] ** 2 + code[half:] ** 2, torch.ones(half, dtype=torch.float64), atol=1e-6)


def test_decoder_output_is_full_resolution():
    pe = PromptEncoder(SMALL, torch.Generator().manual_seed(0))
    dec = MaskDecoder(SMALL, torch.Generator().manual_seed(1))
    feats = FeatureMap(torch.randn(4, 4, 16, generator=torch.Generator().manual_seed(2)))
    for prompt in (None, Prompt("point", [(3, 3, "fg")]), Prompt("box", (1, 1, 8, 9)),
                   Prompt("scribble", [(2, 2), (2, 3), (3, 3)])):
        tokens = encode_prompt(prompt, pe) if prompt else None
        pred = decode_mask(feats, tokens, pe, dec)
        assert pred.logits.shape == (16, 16) and torch.isfinite(pred.logits).all()
        assert pred.numpy().dtype == bool
    with pytest.raises(ShapeError):
        decode_mask(FeatureMap(torch.zeros(3, 3, 16)), None, pe, dec)


def test_mask_prompt_bypasses_decoder():
    pe = PromptEncoder(SMALL, torch.Generator().manual_seed(0))
    dec = MaskDecoder(SMALL, torch.Generator().manual_seed(1))
    mask = random_mask(np.random.default_rng(0), 16)
    pred = reference_mask_from_prompt(FeatureMap(torch.zeros(4, 4, 16)), Prompt("mask", mask), pe, dec)
    assert np.array_equal(pred.numpy(), mask.astype(bool))
    assert torch.all(pred.logits.abs() == LARGE_LOGIT)
    tokens = encode_prompt(Prompt("mask", mask), pe)
    assert tokens.sparse.shape == (0, 16) and tokens.dense.shape == (4, 4, 16)


def test_sparse_batch_requires_equal_lengths():
    pe = PromptEncoder(SMALL, torch.Generator().manual_seed(0))
    out = sparse_batch([Prompt("box", (0, 0, 3, 3)), Prompt("box", (1, 1, 5, 5))], pe)
    assert out.shape == (2, 2, 16)
    with pytest.raises(ShapeError):
        sparse_batch([Prompt("box", (0, 0, 3, 3)), Prompt("point", [(1, 1, "fg")])], pe)
