import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from semtrack.adapters import init_adapters
from semtrack.config import EncoderConfig
from semtrack.encoder import encode_image, image_to_tensor, init_encoder
from semtrack.errors import ConfigurationError, InputError, ShapeError
from semtrack.model import init_model, parameter_checksum

from conftest import TOY, random_image
import oracles as O


def block_params(blk):
    return {
        "n1w": O.mat(blk.norm1.weight), "n1b": O.mat(blk.norm1.bias),
        "n2w": O.mat(blk.norm2.weight), "n2b": O.mat(blk.norm2.bias),
        "Wq": O.mat(blk.attn.W_q), "Wk": O.mat(blk.attn.W_k),
        "Wv": O.mat(blk.attn.W_v), "Wo": O.mat(blk.attn.W_o),
        "mlp": [(O.mat(l.weight), O.mat(l.bias)) for l in blk.mlp.layers],
    }


def perturb_(module, seed):
    """Give norms and biases non-trivial values so the oracle exercises every term."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def oracle_encode(enc, image_centred, adapters=None):
    ad = None
    if adapters is not None:
        ad = {i: (O.mat(w.W_down), O.mat(w.W_up)) for i in adapters.layer_indices
              for w in adapters.for_layer(i).values()}
    return O.encoder_forward(image_centred, enc.config.patch_size, O.mat(enc.patch_weight),
                             O.mat(enc.patch_bias), O.mat(enc.pos_embed),
                             [block_params(b) for b in enc.blocks], enc.config.num_heads, ad)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_loop_oracle(seed):
    enc = init_encoder(TOY, seed).double()
    perturb_(enc, seed)
    rng = np.random.default_rng(seed)
    img = random_image(rng, 8)
    centred = (img / 255.0 - 0.5).tolist()
    got = encode_image(enc, img).grid.reshape(-1, TOY.embed_dim)
    want = torch.tensor(oracle_encode(enc, centred), dtype=torch.float64)
    assert torch.max(torch.abs(got - want)) < 1e-6


def test_forward_with_adapter_matches_loop_oracle():
    enc = init_encoder(TOY, 5).double()
    perturb_(enc, 5)
    ad = init_adapters(TOY, "adaptformer", 3, seed=1, dtype=torch.float64)
    with torch.no_grad():
        for w in ad:
            w.W_up.normal_(generator=torch.Generator().manual_seed(2))
    img = random_image(np.random.default_rng(9), 8)
    got = encode_image(enc, img, ad).grid.reshape(-1, TOY.embed_dim)
    want = torch.tensor(oracle_encode(enc, (img / 255.0 - 0.5).tolist(), ad), dtype=torch.float64)
    assert torch.max(torch.abs(got - want)) < 1e-6


def test_default_feature_grid_shape():
    enc = init_encoder(EncoderConfig(), 0)
    f = encode_image(enc, np.zeros((64, 64, 3), dtype=np.uint8), frame_id="x")
    assert f.shape == (16, 16, 64)
    assert f.source_frame_id == "x"
    assert torch.isfinite(f.grid).all()


def test_init_is_deterministic_and_frozen():
    a, b = init_encoder(TOY, 4), init_encoder(TOY, 4)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
        assert not pa.requires_grad
    assert not torch.equal(a.patch_weight, init_encoder(TOY, 5).patch_weight)


def test_bad_config_is_rejected():
    with pytest.raises(ConfigurationError):
        init_encoder(EncoderConfig(image_size=63, patch_size=4), 0)
    with pytest.raises(ConfigurationError):
        EncoderConfig(embed_dim=30, num_heads=4).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(adapted_layer_indices=(4,)).validate()


def test_input_errors():
    enc = init_encoder(TOY, 0)
    with pytest.raises(ShapeError):
        encode_image(enc, np.zeros((9, 8, 3), dtype=np.uint8))
    bad = np.zeros((8, 8, 3), dtype=np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        encode_image(enc, bad)


def test_uint8_and_float_inputs_agree():
    img = random_image(np.random.default_rng(0), 8)
    a = image_to_tensor(img, TOY)
    b = image_to_tensor(img.astype(np.float32) / 255.0, TOY)
    assert torch.allclose(a, b)


@given(st.integers(0, 2**31 - 1))
def test_zero_up_projection_is_identity(seed):
    enc = init_encoder(TOY, 0)
    img = random_image(np.random.default_rng(seed), 8)
    for kind in ("adaptformer", "serial_adapter", "lora"):
        ad = init_adapters(TOY, kind, 4, seed=seed % 1000)
        assert torch.equal(encode_image(enc, img, ad).grid, encode_image(enc, img).grid)


def test_prefix_suffix_split_equals_full_forward():
    cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, num_blocks=3, num_heads=2)
    enc = init_encoder(cfg, 0)
    x = image_to_tensor(random_image(np.random.default_rng(1), 16), cfg)
    assert enc.first_adapted == 1
    assert torch.equal(enc.forward_suffix(enc.forward_prefix(x)), enc(x))


# frozen after the oracle tests above verified the forward pass of the same code
GOLDEN_ENCODER = "18aa6467f7524018"
GOLDEN_MODEL = "e92982b9741267e2"


def test_golden_checksums():
    assert parameter_checksum(init_encoder(EncoderConfig(), 0))[:16] == GOLDEN_ENCODER
    assert parameter_checksum(init_model(EncoderConfig(), 0))[:16] == GOLDEN_MODEL
