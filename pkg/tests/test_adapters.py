import numpy as np
import pytest

from polyadapt.adapters import (VARIANTS, Adapter, AdapterDims, EncoderOutput, adapt,
                                as_encoder_output, budget_ratio, closed_form_count,
                                count_params)
from polyadapt.diffusion import Denoiser, DenoiserConfig
from polyadapt.encoders import TextEncoder, encode_text
from polyadapt.errors import ConfigError, ContractViolation
from polyadapt.numerics import Rng, Tensor
from polyadapt.toyworld import build_dataset


@pytest.fixture(scope="module")
def ds():
    return build_dataset(n_train_scenes=8, n_eval_scenes=1, train_langs=2, holdout_langs=1)


def enc_out(b=3, seed=0):
    rng = Rng(seed)
    mask = np.zeros((b, 12), bool)
    for i in range(b):
        mask[i, :4 + i] = True
    tokens = rng.normal((b, 12, 64)) * mask[..., None]
    return EncoderOutput(tokens, rng.normal((b, 64)), mask)


@pytest.mark.parametrize("variant", VARIANTS)
def test_output_shapes(variant):
    bundle = adapt(Adapter(variant, 0), enc_out())
    assert bundle.tokens.shape == (3, 8, 64)
    if variant == "dual_branch":
        assert bundle.pooled.shape == (3, 64)
    else:
        assert bundle.pooled is None
    assert not bundle.is_null


@pytest.mark.parametrize("variant", VARIANTS)
def test_closed_form_counts(variant):
    a = Adapter(variant, 0)
    assert a.param_count() == closed_form_count(variant)
    pc = count_params(a)
    assert pc.trainable == pc.total and pc.frozen == 0
    a.freeze()
    pc = count_params(a)
    assert pc.frozen == pc.total == closed_form_count(variant)


def test_count_ordering_and_budget(ds):
    counts = {v: closed_form_count(v) for v in VARIANTS}
    assert counts["mlp"] < counts["query_transformer"] < counts["dual_branch"]
    enc, den = TextEncoder(ds.vocab.tokens, 0), Denoiser(0)
    for v in VARIANTS:
        assert budget_ratio(Adapter(v, 0), enc, den) < 0.05


def test_closed_form_tracks_dims():
    dims = AdapterDims(m_cond=4, inner=16, ff=16, mlp_hidden=32)
    for v in VARIANTS:
        assert Adapter(v, 0, dims).param_count() == closed_form_count(v, dims)


def test_unknown_variant_has_pointer():
    with pytest.raises(ConfigError) as exc:
        Adapter("lora", 0)
    assert exc.value.pointer == "/adapter/variant"
    with pytest.raises(ConfigError):
        closed_form_count("lora")


def test_mlp_identity_fixture():
    # fc1 = [I, -I], fc2 = [I; -I] computes gelu(x) - gelu(-x) = x exactly
    a = Adapter("mlp", 0)
    eye = np.eye(64)
    a.net.fc1.w.data[...] = np.concatenate([eye, -eye], axis=1)
    a.net.fc1.b.data[...] = 0
    a.net.fc2.w.data[...] = np.concatenate([eye, -eye], axis=0)
    a.net.fc2.b.data[...] = 0
    e = enc_out()
    out = adapt(a, e).tokens.data
    assert np.allclose(out, e.tokens[:, :8], atol=1e-12)


def test_attention_pool_of_single_token_is_its_value():
    a = Adapter("dual_branch", 0)
    e = enc_out(1)
    e.mask[:] = False
    e.mask[0, 0] = True
    pooled = adapt(a, e).pooled.data[0]
    v = a.net.pool.value
    assert np.allclose(pooled, e.tokens[0, 0] @ v.w.data + v.b.data)


def test_masked_positions_do_not_matter():
    a = Adapter("query_transformer", 0)
    e = enc_out(2)
    e2 = EncoderOutput(e.tokens.copy(), e.pooled, e.mask)
    e2.tokens[~e.mask] = 123.0
    assert np.allclose(adapt(a, e).tokens.data, adapt(a, e2).tokens.data, atol=1e-12)


def test_single_caption_path(ds):
    enc = TextEncoder(ds.vocab.tokens, 0)
    out = encode_text(enc, ds.caption_of(0, "L1"))
    bundle = adapt(Adapter("dual_branch", 1), out)
    assert bundle.tokens.shape == (8, 64)
    assert bundle.pooled.shape == (64,)
    # adapting twice is deterministic
    again = adapt(Adapter("dual_branch", 1), out)
    assert np.array_equal(bundle.tokens.data, again.tokens.data)


def test_length_and_shape_errors():
    with pytest.raises(ContractViolation):
        as_encoder_output({"tokens": np.zeros((13, 64)), "pooled": np.zeros(64)})
    with pytest.raises(ContractViolation):
        as_encoder_output({"tokens": np.zeros((1, 3, 64)), "pooled": np.zeros(64)})


def test_dual_branch_needs_pooled_pathway():
    den = Denoiser(0, DenoiserConfig(pooled_cond=False))
    with pytest.raises(ConfigError):
        adapt(Adapter("dual_branch", 0), enc_out(), den)
    adapt(Adapter("query_transformer", 0), enc_out(), den)


def test_seed_determines_init():
    assert Adapter("mlp", 3).checksum() == Adapter("mlp", 3).checksum()
    assert Adapter("mlp", 3).checksum() != Adapter("mlp", 4).checksum()


def test_init_is_truncated_small():
    a = Adapter("query_transformer", 0)
    w = a.net.branch.cross_attn.q.w.data
    assert np.abs(w).max() <= 0.04
    assert isinstance(a.net.branch.queries, Tensor)
