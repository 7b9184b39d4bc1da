import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from vitviz.errors import (LocatorError, ModelError, ModelIntegrityError, SurgeryPlanError,
                           UnsupportedArchitectureError, UnsupportedOperationError)
from vitviz.models import (AttentionSurgeryPlan, FeatureLocator, ViTConfig, VisionTransformer,
                           describe_model, load_model, wrap_vit)
from vitviz.models import convert


def test_tiny_spec(tiny):
    s = tiny.spec
    assert (s.num_layers, s.hidden_dim, s.grid_dims) == (2, 8, (4, 4))
    assert s.ffn_width == s.hidden_dim * s.ffn_expansion
    assert sum(p.numel() for p in tiny.module.parameters()) <= 10_000


def test_vit_b16_spec():
    s = describe_model("vit-b16")
    assert (s.patch_size, s.num_layers, s.hidden_dim, s.ffn_expansion) == (16, 12, 768, 4)
    assert s.grid_dims == (14, 14)


def test_vit_b32_grid():
    s = describe_model("vit-b32")
    assert s.image_size == 224 and s.grid_dims == (224 // 32, 224 // 32) == (7, 7)


@pytest.mark.parametrize("model_id", ["vit-b16", "vit-b32"])
def test_seeded_b_models_grid_shape(model_id):
    h = load_model(model_id, "seed:0")
    grid = h.read_feature(torch.rand(3, 224, 224), FeatureLocator(0, 0))
    assert tuple(grid.values.shape) == h.spec.grid_dims


def test_load_is_deterministic_and_leaves_global_rng(tiny):
    state = torch.random.get_rng_state()
    a = load_model("vit-tiny-test")
    load_model("resnet50", "seed:1")
    assert torch.equal(torch.random.get_rng_state(), state)
    assert a.digest == tiny.digest


def test_unknown_architecture():
    with pytest.raises(UnsupportedArchitectureError):
        load_model("no-such-model")


def test_shape_mismatch_is_integrity_error(tmp_path):
    sd = dict(load_model("vit-tiny-test").module.state_dict())
    sd["blocks.0.fc1.weight"] = torch.zeros(3, 3)
    path = tmp_path / "bad.pt"
    torch.save(sd, path)
    with pytest.raises(ModelIntegrityError):
        load_model("vit-tiny-test", str(path))


def test_missing_key_is_integrity_error(tmp_path):
    sd = dict(load_model("vit-tiny-test").module.state_dict())
    del sd["norm.weight"]
    path = tmp_path / "bad.pt"
    torch.save(sd, path)
    with pytest.raises(ModelIntegrityError):
        load_model("vit-tiny-test", str(path))


def test_native_checkpoint_roundtrip(tmp_path, tiny, rand_image):
    path = tmp_path / "tiny.pt"
    torch.save(tiny.module.state_dict(), path)
    h = load_model("vit-tiny-test", str(path))
    assert torch.equal(h.logits(rand_image), tiny.logits(rand_image))


def test_wrong_input_size(tiny):
    with pytest.raises(ModelError):
        tiny.logits(torch.rand(3, 20, 20))


# --- checkpoint converters against the reference implementations ---------

def _native_model(cfg, sd):
    m = VisionTransformer(cfg)
    m.load_state_dict(convert.to_native(sd))
    return m.eval()


def test_torchvision_converter_matches_reference():
    from torchvision.models.vision_transformer import VisionTransformer as TV

    torch.manual_seed(0)
    ref = TV(image_size=16, patch_size=4, num_layers=2, num_heads=2, hidden_dim=8, mlp_dim=32,
             num_classes=10).eval()
    with torch.no_grad():
        for p in ref.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    sd = ref.state_dict()
    assert convert.detect_format(sd) == "torchvision"
    ours = _native_model(ViTConfig(16, 4, 2, 8, 2, num_classes=10), sd)
    x = torch.randn(4, 3, 16, 16)
    with torch.no_grad():
        assert torch.allclose(ours(x), ref(x), atol=1e-5)


def test_timm_converter_matches_reference():
    from timm.models.vision_transformer import VisionTransformer as TimmViT

    torch.manual_seed(0)
    ref = TimmViT(img_size=16, patch_size=4, embed_dim=8, depth=2, num_heads=2, num_classes=10).eval()
    with torch.no_grad():
        for p in ref.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    sd = ref.state_dict()
    assert convert.detect_format(sd) == "timm"
    ours = _native_model(ViTConfig(16, 4, 2, 8, 2, num_classes=10), sd)
    x = torch.randn(4, 3, 16, 16)
    with torch.no_grad():
        assert torch.allclose(ours(x), ref(x), atol=1e-5)


def test_clip_converter_matches_reference():
    from open_clip.transformer import QuickGELU, VisionTransformer as ClipViT

    torch.manual_seed(0)
    ref = ClipViT(image_size=16, patch_size=4, width=8, layers=2, heads=2, mlp_ratio=4.0,
                  output_dim=6, act_layer=QuickGELU).eval()
    with torch.no_grad():
        for p in ref.parameters():
            p.add_(torch.randn_like(p) * 0.1)
    sd = {f"visual.{k}": v for k, v in ref.state_dict().items()}
    assert convert.detect_format(convert.strip_prefix(sd)) == "clip"
    cfg = ViTConfig(16, 4, 2, 8, 2, num_classes=None, pre_norm=True, act="quick_gelu",
                    norm_eps=1e-5, patch_bias=False, proj_dim=6)
    ours = _native_model(cfg, sd)
    x = torch.randn(4, 3, 16, 16)
    with torch.no_grad():
        out = ref(x)
        out = out[0] if isinstance(out, tuple) else out
        assert torch.allclose(ours(x), out, atol=1e-5)


def test_lukemelas_roundtrip(tiny):
    native = tiny.module.state_dict()
    luke = convert.native_to_lukemelas(native)
    assert convert.detect_format(luke) == "lukemelas"
    back = convert.to_native(luke)
    assert set(back) == set(native)
    assert all(torch.equal(back[k], native[k]) for k in native)


# --- readouts --------------------------------------------------------------

def test_zero_image_grid_shape(tiny):
    for site in ("ffn_gelu", "key", "query", "value", "block_output", "ffn_pre_gelu"):
        grid = tiny.read_feature(torch.zeros(3, 16, 16), FeatureLocator(1, 2, site))
        assert tuple(grid.values.shape) == (4, 4)
        assert grid.cls.shape == ()


@pytest.mark.parametrize("site", ["ffn_gelu", "ffn_pre_gelu", "key", "query", "value", "block_output"])
@pytest.mark.parametrize("layer", [0, 1])
def test_readout_row_count(tiny, rand_image, site, layer):
    ro = tiny.readout(rand_image, layer, site)
    assert ro.tokens.shape[1] == tiny.spec.num_patches + 1
    assert ro.tokens.shape[2] == tiny.spec.site_width(site)
    assert ro.patch_tokens().shape[1] == 16


def _oracle_block0_gelu(handle, image):
    """Straight-line recomputation of block 0's FFN GELU output."""
    sd = handle.module.state_dict()
    x = (image.unsqueeze(0) - 0.5) / 0.5
    d, heads = 8, 2
    patches = F.conv2d(x, sd["patch_embed.weight"], sd["patch_embed.bias"], stride=4)
    tokens = patches.flatten(2).transpose(1, 2)
    tokens = torch.cat([sd["cls_token"], tokens], dim=1) + sd["pos_embed"]
    p = "blocks.0."
    h = F.layer_norm(tokens, (d,), sd[p + "norm1.weight"], sd[p + "norm1.bias"], eps=1e-6)
    qkv = h @ sd[p + "attn.qkv.weight"].T + sd[p + "attn.qkv.bias"]
    q, k, v = qkv[0, :, :d], qkv[0, :, d:2 * d], qkv[0, :, 2 * d:]
    hd = d // heads
    outs = []
    for i in range(heads):
        qi, ki, vi = (t[:, i * hd:(i + 1) * hd] for t in (q, k, v))
        att = torch.softmax(qi @ ki.T / math.sqrt(hd), dim=-1)
        outs.append(att @ vi)
    attn = torch.cat(outs, dim=-1) @ sd[p + "attn.proj.weight"].T + sd[p + "attn.proj.bias"]
    tokens = tokens[0] + attn
    h = F.layer_norm(tokens, (d,), sd[p + "norm2.weight"], sd[p + "norm2.bias"], eps=1e-6)
    pre = h @ sd[p + "fc1.weight"].T + sd[p + "fc1.bias"]
    return 0.5 * pre * (1 + torch.erf(pre / math.sqrt(2)))


def test_read_feature_matches_oracle(tiny, rand_image):
    oracle = _oracle_block0_gelu(tiny, rand_image)
    grid = tiny.read_feature(rand_image, FeatureLocator(0, 3, "ffn_gelu"))
    assert torch.allclose(grid.values, oracle[1:, 3].reshape(4, 4), atol=1e-5)
    assert torch.allclose(grid.cls, oracle[0, 3], atol=1e-5)


@pytest.mark.parametrize("loc", [FeatureLocator(2, 0), FeatureLocator(0, 32), FeatureLocator(0, 8, "key"),
                                 FeatureLocator(-1, 0), FeatureLocator(0, 0, "nope")])
def test_locator_out_of_range(tiny, rand_image, loc):
    with pytest.raises(IndexError):
        tiny.read_feature(rand_image, loc)


def test_locator_key_roundtrip():
    loc = FeatureLocator(3, 17, "value")
    assert FeatureLocator.parse(loc.key) == loc


# --- surgery ---------------------------------------------------------------

def test_empty_plan_is_identity(tiny, rand_image):
    plan = AttentionSurgeryPlan(frozenset(), None)
    assert torch.equal(tiny.forward_with_surgery(rand_image, plan), tiny.logits(rand_image))


def test_isolation_changes_logits(tiny, rand_image):
    plan = AttentionSurgeryPlan.isolate_until_last(2)
    assert plan.cls_isolated_layers == frozenset({0}) and plan.cls_constant_injection_layer == 1
    assert not torch.allclose(tiny.forward_with_surgery(rand_image, plan), tiny.logits(rand_image))


def test_plan_validation(tiny):
    with pytest.raises(SurgeryPlanError):
        AttentionSurgeryPlan(frozenset({1}), 1)
    with pytest.raises(SurgeryPlanError):
        AttentionSurgeryPlan(frozenset({0, 5}), None).validate(tiny.spec)
    with pytest.raises(ValueError):
        tiny.forward_with_surgery(torch.rand(3, 16, 16), AttentionSurgeryPlan(frozenset(), 2))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), layer=st.integers(0, 1), scale=st.floats(0.1, 100.0))
def test_surgery_soundness(tiny, seed, layer, scale):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(2, 17, 8, generator=g)
    perturbed = tokens.clone()
    perturbed[:, 0] += scale * torch.randn(2, 8, generator=g)
    bias = tiny.cls_isolation_bias()
    with torch.no_grad():
        a = tiny.module.blocks[layer](tokens, bias)
        b = tiny.module.blocks[layer](perturbed, bias)
    assert torch.equal(a[:, 1:], b[:, 1:])


def test_isolated_patch_path_independent_of_cls_embedding(tiny, rand_image):
    """Through the full isolated stack, patch tokens entering the last block ignore the CLS input."""
    plan = AttentionSurgeryPlan(frozenset({0}), None)
    biases, _ = tiny._surgery_kwargs(plan)
    tokens = tiny._tokens(rand_image)
    other = tokens.clone()
    other[:, 0] = torch.randn(8)
    with torch.no_grad():
        a = tiny.module.run_blocks(tokens, stop=1, attn_biases=biases)
        b = tiny.module.run_blocks(other, stop=1, attn_biases=biases)
    assert torch.equal(a[:, 1:], b[:, 1:])


# --- constant CLS and head -------------------------------------------------

def test_constant_cls_depth0(tiny):
    m = tiny.module
    expected = (m.cls_token + m.pos_embed[:, :1])[0, 0]
    assert torch.equal(tiny.compute_constant_cls(0), expected)


def test_constant_cls_depth2_oracle(tiny):
    m = tiny.module
    x = m.cls_token + m.pos_embed[:, :1]
    with torch.no_grad():
        for blk in m.blocks:
            x = blk(x)
    assert torch.allclose(tiny.compute_constant_cls(2), x[0, 0], atol=1e-6)


def test_constant_cls_deterministic(tiny):
    assert torch.equal(tiny.compute_constant_cls(1), tiny.compute_constant_cls(1))
    with pytest.raises(LocatorError):
        tiny.compute_constant_cls(3)


def test_constant_cls_needs_cls_token():
    cfg = ViTConfig(16, 4, 1, 8, 2, num_classes=10, has_cls_token=False)
    h = wrap_vit("nocls", VisionTransformer(cfg).init_random(0))
    with pytest.raises(UnsupportedOperationError):
        h.compute_constant_cls(0)


def test_classify_from_cls_is_plain_classification(tiny, rand_image):
    assert torch.equal(tiny.classify_from_token(0, rand_image), tiny.logits(rand_image))


def test_classify_from_patch_oracle(tiny, rand_image):
    m = tiny.module
    with torch.no_grad():
        final = m.run_blocks(tiny._tokens(rand_image))
        oracle = F.layer_norm(final[:, 1], (8,), m.norm.weight, m.norm.bias, eps=1e-6) @ m.head.weight.T + m.head.bias
    assert torch.allclose(tiny.classify_from_token(1, rand_image), oracle, atol=1e-6)
    with pytest.raises(LocatorError):
        tiny.classify_from_token(17, rand_image)


def test_classify_does_not_modify_weights(tiny, rand_image):
    before = tiny.digest
    tiny._digest = None
    for i in range(17):
        tiny.classify_from_token(i, rand_image)
    assert tiny.digest == before


def test_cnn_rejects_vit_operations():
    from vitviz.ablation import run_cls_isolation
    from vitviz.data import TensorEvalSet

    h = load_model("mobilenet_v2", "seed:0")
    with pytest.raises(UnsupportedOperationError):
        run_cls_isolation(h, TensorEvalSet(torch.rand(1, 3, 224, 224), [0]))
