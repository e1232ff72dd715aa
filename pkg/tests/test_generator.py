import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fontnet import dataset as ds
from fontnet.errors import ChannelMismatch, EmptyList, ShapeMismatch
from fontnet.generator import (
    AdaINParams,
    ClassStyleEncoder,
    Generator,
    StyleAffines,
    adain,
    reference_style,
    synthesize,
)
from fontnet.objectives import l1_loss
from fontnet.separator import StyleSeparator, images_to_tensor

from .fd import coordinate_check


def adain_moment_errors(C, seed, eps=1e-5):
    """Max deviation of output (mean, std) from (bias, |scale| sigma / (sigma + eps))."""
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, C, 9, 7, generator=g, dtype=torch.float64) * torch.rand(1, C, 1, 1, generator=g, dtype=torch.float64) * 3 + 1.5
    scale = torch.randn(2, C, generator=g, dtype=torch.float64) * 2
    bias = torch.randn(2, C, generator=g, dtype=torch.float64)
    out = adain(x, AdaINParams(scale, bias), eps)
    sigma = x.std(dim=(2, 3), unbiased=False)
    m_err = (out.mean(dim=(2, 3)) - bias).abs().max().item()
    s_err = (out.std(dim=(2, 3), unbiased=False) - scale.abs() * sigma / (sigma + eps)).abs().max().item()
    return m_err, s_err


@pytest.mark.parametrize("C", [1, 4, 64])
def test_adain_moment_contract(C):
    for seed in range(10):
        m, s = adain_moment_errors(C, seed)
        assert m < 1e-4 and s < 1e-4


def test_adain_identity_params_standardize():
    x = torch.randn(3, 5, 8, 8) * 4 + 2
    out = adain(x, AdaINParams(torch.ones(5), torch.zeros(5)))
    assert torch.allclose(out.mean(dim=(2, 3)), torch.zeros(3, 5), atol=1e-4)
    assert torch.allclose(out.std(dim=(2, 3), unbiased=False), torch.ones(3, 5), atol=1e-4)


def test_adain_constant_channel_gives_bias():
    x = torch.full((1, 2, 4, 4), 3.0)
    out = adain(x, AdaINParams(torch.tensor([2.0, -1.0]), torch.tensor([0.25, 0.5])))
    assert torch.allclose(out[0, 0], torch.full((4, 4), 0.25)) and torch.allclose(out[0, 1], torch.full((4, 4), 0.5))


def test_adain_errors():
    with pytest.raises(ChannelMismatch):
        adain(torch.zeros(1, 3, 4, 4), AdaINParams(torch.ones(2), torch.zeros(2)))
    with pytest.raises(ValueError):
        adain(torch.zeros(1, 2, 4, 4), AdaINParams(torch.ones(2), torch.zeros(2)), eps=0)


@pytest.fixture(scope="module")
def corpus():
    return ds.GlyphCorpus.synthetic(2, 6, 32, seed=0)


def test_default_content_map_shape_and_decode_shape():
    gen = Generator()
    x = torch.zeros(1, 1, 128, 128)
    c = gen.encode_content(x)
    assert c.shape == (1, 512, 4, 4)
    assert gen.decoder.n_layers == 5 and len(gen.style_affines(torch.zeros(1, 256))) == 5
    y = gen.decode(c, torch.randn(1, 256))
    assert y.shape == (1, 1, 128, 128)


def small_gen(**kw):
    return Generator(32, style_dim=16, base_channels=8, max_channels=32, **kw)


def test_encode_content_deterministic_and_content_sensitive(corpus):
    gen = small_gen()
    a = images_to_tensor(corpus.glyph(0, 0))
    b = images_to_tensor(corpus.glyph(0, 1))
    assert torch.equal(gen.encode_content(a), gen.encode_content(a))
    assert (gen.encode_content(a) - gen.encode_content(b)).norm() > 0
    with pytest.raises(ShapeMismatch):
        gen.encode_content(torch.zeros(1, 1, 64, 64))


def test_style_affines_identity_init_and_distinct():
    aff = StyleAffines(16, [8, 4, 2], zero_init=True)
    for p in aff(torch.randn(2, 16)):
        assert torch.all(p.scale == 1) and torch.all(p.bias == 0)
    gen = small_gen()
    s1, s2 = torch.randn(1, 16), torch.randn(1, 16)
    p1, p2 = gen.style_affines(s1), gen.style_affines(s2)
    assert any(not torch.equal(a.scale, b.scale) or not torch.equal(a.bias, b.bias) for a, b in zip(p1, p2))
    for p, ch in zip(p1, gen.decoder.layer_channels):
        assert p.scale.shape[-1] == ch == p.bias.shape[-1]
    with pytest.raises(ShapeMismatch):
        gen.style_affines(torch.randn(1, 15))


def test_decode_output_range_and_layer_check():
    gen = small_gen()
    for seed in range(5):
        torch.manual_seed(seed)
        y = gen.decode(torch.randn(3, 32, 4, 4) * 10, torch.randn(3, 16) * 10)
        assert y.shape == (3, 1, 32, 32) and y.abs().max() <= 1
    with pytest.raises(ShapeMismatch):
        gen.decoder(torch.randn(1, 32, 4, 4), gen.style_affines(torch.randn(1, 16))[:-1])


def test_no_mapping_network_inventory():
    gen = small_gen()
    top = {name.split(".")[0] for name, _ in gen.named_parameters()}
    assert top == {"encoder", "decoder", "affines"}
    # every affine is a single linear layer reading the raw style feature
    for lin in gen.affines.layers:
        assert isinstance(lin, torch.nn.Linear) and lin.in_features == 16
    # the decoder never consumes the style feature except through the affines
    c, s = torch.randn(1, 32, 4, 4), torch.randn(1, 16)
    assert torch.equal(gen.decode(c, s), gen.decoder(c, gen.affines(s)))
    assert not any(isinstance(m, torch.nn.Linear) for m in gen.decoder.modules())


def test_plain_decoder_has_no_affines():
    gen = small_gen(plain_decoder=True)
    assert gen.affines is None and not gen.uses_adain
    assert gen(torch.zeros(2, 1, 32, 32), torch.randn(2, 16)).shape == (2, 1, 32, 32)


def _parts():
    return small_gen(), StyleSeparator(32, 16, 8, 8, 32)


def test_synthesize_matches_pipeline(corpus):
    gen, sep = _parts()
    src, ref = corpus.glyph(0, 2), corpus.glyph(1, 4)
    out = synthesize(src, [ref], gen, sep)
    with torch.no_grad():
        style = sep.features(images_to_tensor(ref))
        y = gen.decode(gen.encode_content(images_to_tensor(src)), style)
    assert np.allclose(out.pixels, ds.to_storage_space(y[0, 0].numpy()), atol=1e-6)
    assert out.font_id == 1 and out.char_id == 2


def test_synthesize_repeated_and_permuted_references(corpus):
    gen, sep = _parts()
    src = corpus.glyph(0, 0)
    refs = [corpus.glyph(1, c) for c in (1, 2, 3)]
    one = synthesize(src, refs[:1], gen, sep).pixels
    thrice = synthesize(src, refs[:1] * 3, gen, sep).pixels
    assert np.allclose(one, thrice, atol=1e-6)
    a = synthesize(src, refs, gen, sep).pixels
    b = synthesize(src, refs[::-1], gen, sep).pixels
    assert np.allclose(a, b, atol=1e-6)
    assert np.array_equal(a, synthesize(src, refs, gen, sep).pixels)


def test_synthesize_errors(corpus):
    gen, sep = _parts()
    with pytest.raises(EmptyList):
        synthesize(corpus.glyph(0, 0), [], gen, sep)
    big = ds.GlyphCorpus.synthetic(1, 1, 64).glyph(0, 0)
    with pytest.raises(ShapeMismatch):
        synthesize(corpus.glyph(0, 0), [big], gen, sep)


def test_reference_style_averages_over_k():
    enc = ClassStyleEncoder(32, 16, 8, 32)
    refs = torch.randn(2, 3, 1, 32, 32)
    got = reference_style(enc, refs)
    want = torch.stack([enc.features(refs[i]).mean(0) for i in range(2)])
    assert torch.allclose(got, want, atol=1e-6)


def generator_gradient_checks(seed=0):
    torch.manual_seed(seed)
    gen = Generator(16, style_dim=8, base_channels=4, max_channels=8).double()
    sep = StyleSeparator(16, 8, 8, 4, 8).double()
    src = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 2 - 1
    refs = torch.rand(2, 3, 1, 16, 16, dtype=torch.float64) * 2 - 1
    gt = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 2 - 1
    content = gen.encode_content(src).detach().requires_grad_()
    style = reference_style(sep, refs).detach()
    out = [("decode/content", coordinate_check(lambda: gen.decode(content, style).mean(), content, 20, seed=seed))]
    flat = torch.nn.utils.parameters_to_vector(gen.parameters()).detach().requires_grad_()
    names = [n for n, _ in gen.named_parameters()]
    shapes = [p.shape for p in gen.parameters()]

    def functional():
        chunks, i = {}, 0
        for n, s in zip(names, shapes):
            k = int(np.prod(s))
            chunks[n] = flat[i:i + k].view(s)
            i += k
        y = torch.func.functional_call(gen, chunks, (src, style))
        return l1_loss(gt, y)

    out.append(("l1/generator params", coordinate_check(functional, flat, 20, seed=seed)))
    x = (torch.rand(1, 24, 8, 8, dtype=torch.float64) * 3).requires_grad_()
    sc = torch.randn(1, 24, dtype=torch.float64, requires_grad=True)
    bi = torch.randn(1, 24, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 24, 8, 8, dtype=torch.float64)
    f = lambda: (adain(x, AdaINParams(sc, bi)) * w).sum()
    out += [("adain/x", coordinate_check(f, x, 20, seed=seed)), ("adain/scale", coordinate_check(f, sc, 20)),
            ("adain/bias", coordinate_check(f, bi, 20))]
    return out


def test_generator_gradients_match_finite_differences():
    for name, res in generator_gradient_checks():
        assert all(r[-1] for r in res), (name, [r for r in res if not r[-1]])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 4, 64]), st.integers(0, 10**6))
def test_adain_moment_property(C, seed):
    m, s = adain_moment_errors(C, seed)
    assert m < 1e-4 and s < 1e-4
