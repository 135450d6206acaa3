import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hta_peft import adapters as ad
from hta_peft.adapters import (
    AdaptedLinear,
    AttachmentConfig,
    BottleneckAdapter,
    ConfigError,
    FullDelta,
    HtaAdapter,
    LoraAdapter,
    UnsupportedMergeError,
)
from hta_peft.linalg import ShapeError, householder_matrix, jacobi_svd, numerical_rank


def random_hta(dim, r, seed, scale=0.5, normalize_v=True):
    a = HtaAdapter.init(dim, r, (seed,), normalize_v)
    rng = np.random.default_rng(seed)
    a.d[...] = rng.standard_normal(dim)
    if r:
        a.w_up[...] = scale * rng.standard_normal((r, dim))
    return a


def dense_hta(a):
    """Reference ``H_l diag(d) H_r + W_down W_up`` with explicitly formed reflectors."""
    w = householder_matrix(a.v_left) @ np.diag(a.d) @ householder_matrix(a.v_right)
    if a.w_down is not None:
        w = w + a.w_down @ a.w_up
    return w


# --- composition and rank ----------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_compose_hta_matches_explicit_reflectors(dim, r, seed):
    a = random_hta(dim, r, seed)
    assert np.allclose(ad.hta_full_adaptation(a), dense_hta(a), atol=1e-12)
    assert np.allclose(ad.compose_hta(a), dense_hta(HtaAdapter(a.v_left, a.v_right, a.d)), atol=1e-12)


def test_rank_law_small_exhaustive():
    rng = np.random.default_rng(0)
    dim = 5
    for mask in itertools.product((0, 1), repeat=dim):
        a = HtaAdapter.init(dim, 0, (1, *mask), normalize_v=True)
        a.d[...] = np.array(mask) * rng.uniform(0.1, 3.0, dim)
        assert numerical_rank(jacobi_svd(ad.compose_hta(a)).sigma) == sum(mask)


def test_singular_values_of_composition_are_abs_d():
    a = HtaAdapter.init(6, 0, (2,), normalize_v=True)
    a.d[...] = [3.0, -2.0, 0.5, 0.0, -1.0, 4.0]
    assert np.allclose(jacobi_svd(ad.compose_hta(a)).sigma, [4, 3, 2, 1, 0.5, 0], atol=1e-13)


def test_rank_addend_can_raise_rank_by_r():
    a = HtaAdapter.init(6, 2, (3,), normalize_v=True)
    a.d[...] = [1.0, 1.0, 0, 0, 0, 0]
    a.w_up[...] = np.random.default_rng(0).standard_normal((2, 6))
    assert numerical_rank(jacobi_svd(ad.hta_full_adaptation(a)).sigma) == 4


def test_identity_reflectors_give_diag():
    a = HtaAdapter(np.zeros(3), np.zeros(3), np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(ad.compose_hta(a), np.diag([1.0, 2.0, 3.0]))


def test_renormalize_keeps_reflector_norm():
    a = HtaAdapter.init(8, 1, (0,), normalize_v=True)
    a.v_left *= 3.0
    a.renormalize()
    assert float(a.v_left @ a.v_left) == pytest.approx(2.0, rel=1e-14)
    assert float(a.v_right @ a.v_right) == pytest.approx(2.0, rel=1e-14)


# --- init --------------------------------------------------------------------


def test_init_is_zero_adaptation_and_deterministic():
    a, b = HtaAdapter.init(8, 2, (5, 1)), HtaAdapter.init(8, 2, (5, 1))
    assert np.array_equal(ad.hta_full_adaptation(a), np.zeros((8, 8)))
    for k in a.params():
        assert np.array_equal(a.params()[k], b.params()[k])
    assert not np.array_equal(HtaAdapter.init(8, 2, (6, 1)).v_left, a.v_left)
    assert np.array_equal(ad.adaptation_matrix(LoraAdapter.init(4, 6, 2, (0,))), np.zeros((4, 6)))
    assert np.array_equal(ad.adaptation_matrix(FullDelta.init(3, 3)), np.zeros((3, 3)))


def test_hta_and_lora_share_down_projection_draw():
    assert np.array_equal(HtaAdapter.init(8, 1, (9,)).w_down, LoraAdapter.init(8, 8, 1, (9,)).w_down)


def test_hta_r0_has_no_factors():
    a = HtaAdapter.init(4, 0)
    assert a.w_down is None and a.rank_r == 0 and set(a.params()) == {"v_left", "v_right", "d"}


def test_adapter_shape_validation():
    with pytest.raises(ShapeError):
        HtaAdapter(np.zeros(3), np.zeros(4), np.zeros(3))
    with pytest.raises(ShapeError):
        HtaAdapter(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros((3, 1)), np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        HtaAdapter(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros((3, 1)), None)
    with pytest.raises(ShapeError):
        LoraAdapter(np.zeros((3, 2)), np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        BottleneckAdapter(np.zeros((3, 1)), np.zeros((1, 3)), "swish")


# --- AdaptedLinear forward and merge ----------------------------------------


def _layer(d_in, d_out, adapter, style="lora_additive", eq7_literal=False, seed=0):
    rng = np.random.default_rng(seed)
    return AdaptedLinear(rng.standard_normal((d_in, d_out)), rng.standard_normal(d_out), adapter, style, eq7_literal)


def test_additive_forward_formula():
    a = random_hta(4, 1, 0)
    layer = _layer(4, 4, a)
    x = np.random.default_rng(1).standard_normal((3, 4))
    assert np.allclose(ad.forward(layer, x), x @ layer.base_w + layer.base_b + x @ dense_hta(a), atol=1e-12)


def test_multiplicative_forward_residual_and_literal():
    a = random_hta(5, 1, 0)
    x = np.random.default_rng(1).standard_normal((2, 3))
    res = _layer(3, 5, a, "adapter_multiplicative")
    lit = _layer(3, 5, a, "adapter_multiplicative", eq7_literal=True)
    z = x @ res.base_w + res.base_b
    assert np.allclose(ad.forward(res, x), z + z @ dense_hta(a), atol=1e-12)
    assert np.allclose(ad.forward(lit, x), z @ dense_hta(a), atol=1e-12)


def test_bottleneck_forward_uses_activation():
    b = BottleneckAdapter(np.eye(3)[:, :2], np.ones((2, 3)), "relu")
    z = np.array([[1.0, -2.0, 5.0]])
    assert np.array_equal(ad.forward_adapter_style(z, b), np.array([[1.0, 1.0, 1.0]]))


@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("kind", ["hta_add", "hta_mul", "lora", "full", "bottleneck_id"])
def test_merge_matches_branched(kind, literal):
    rng = np.random.default_rng(2)
    if kind == "hta_add":
        layer = _layer(6, 6, random_hta(6, 2, 1))
    elif kind == "hta_mul":
        layer = _layer(4, 6, random_hta(6, 1, 1), "adapter_multiplicative", literal)
    elif kind == "lora":
        a = LoraAdapter.init(4, 7, 3, (1,))
        a.w_up[...] = rng.standard_normal(a.w_up.shape)
        layer = _layer(4, 7, a)
    elif kind == "full":
        layer = _layer(3, 5, FullDelta(rng.standard_normal((3, 5))))
    else:
        b = BottleneckAdapter(rng.standard_normal((6, 2)), rng.standard_normal((2, 6)), "identity")
        layer = _layer(4, 6, b, "adapter_multiplicative", literal)
    x = rng.standard_normal((10, layer.d_in))
    merged = ad.merge(layer)
    assert merged.mode == "merged"
    ref = ad.forward_branched(layer, x)
    assert np.abs(ad.forward(merged, x) - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_merge_rejects_nonlinear_bottleneck_and_bare_layers():
    layer = _layer(3, 4, BottleneckAdapter.init(4, 2, (0,), "gelu"), "adapter_multiplicative")
    with pytest.raises(UnsupportedMergeError):
        ad.merge(layer)
    with pytest.raises(UnsupportedMergeError):
        ad.merge(_layer(3, 3, None))


def test_layer_validation():
    with pytest.raises(ConfigError):
        _layer(3, 4, HtaAdapter.init(3, 1))
    with pytest.raises(ShapeError):
        _layer(3, 4, HtaAdapter.init(3, 1), "adapter_multiplicative")
    with pytest.raises(ConfigError):
        _layer(4, 4, BottleneckAdapter.init(4, 1))
    with pytest.raises(ShapeError):
        ad.forward(_layer(3, 3, None), np.ones((2, 4)))
    with pytest.raises(ConfigError):
        ad.forward_merged(_layer(3, 3, None), np.ones((2, 3)))


def test_dropout_mask_scales_branch_only():
    a = random_hta(4, 1, 0)
    layer = _layer(4, 4, a)
    x = np.ones((1, 4))
    out = ad.forward_branched(layer, x, dropout_mask=np.zeros((1, 4)))
    assert np.array_equal(out, x @ layer.base_w + layer.base_b)


# --- attachment config and parameter counts --------------------------------


def test_attachment_config_validation_and_names():
    assert AttachmentConfig(("q", "v"), "hta", 1).name == "hta_r1_q-v"
    assert AttachmentConfig((), "none", 0).name == "linear_probe"
    for bad in [
        dict(positions=("q",), kind="nope"),
        dict(positions=("q",), kind="lora", r=0),
        dict(positions=("q", "q")),
        dict(positions=("post_ffn", "fc2")),
        dict(positions=("fc1",), kind="lora"),
        dict(positions=("q",), kind="bottleneck"),
        dict(positions=("q",), style="adapter_multiplicative"),
        dict(positions=("q",), kind="none"),
        dict(positions=("zz",)),
        dict(positions=("q",), r=-1),
    ]:
        with pytest.raises(ConfigError):
            AttachmentConfig(**bad)


def test_attachment_config_roundtrip():
    c = AttachmentConfig(("q", "post_ffn"), "hta", 2, normalize_v=True, eq7_literal=True)
    assert AttachmentConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 1024), st.integers(0, 16))
def test_param_count_formulas(dim, r):
    assert ad.adapter_param_count("hta", dim, r) == 3 * dim + 2 * dim * r
    assert ad.adapter_param_count("lora", dim, max(r, 1)) == 2 * dim * max(r, 1)
    hta = AttachmentConfig(("q", "v"), "hta", r)
    hta0 = AttachmentConfig(("q", "v"), "hta", 0)
    # r = 0 is cheaper than r by exactly 2 * D * r per position and block
    assert ad.param_count(hta, dim, 3) - ad.param_count(hta0, dim, 3) == 2 * dim * r * 2 * 3


def test_param_count_hta_r1_vs_lora_r8_ratio():
    hta = ad.param_count(AttachmentConfig(("q", "v"), "hta", 1), 64, 4)
    lora = ad.param_count(AttachmentConfig(("q", "v"), "lora", 8), 64, 4)
    assert hta * 16 == lora * 5


def test_param_count_fc1_uses_hidden_width_and_head():
    c = AttachmentConfig(("fc1",), "hta", 1)
    assert ad.param_count(c, 8, 1, mlp_ratio=4) == 5 * 32
    assert ad.param_count(c, 8, 1, mlp_ratio=4, head_classes=3) == 5 * 32 + 8 * 3 + 3
    assert ad.param_count(c, 8, 1, position_dims={"fc1": 8}) == 40


# --- checkpoints --------------------------------------------------------------


def _all_kinds():
    rng = np.random.default_rng(0)
    lora = LoraAdapter.init(4, 6, 2, (1,))
    lora.w_up[...] = rng.standard_normal(lora.w_up.shape)
    return [random_hta(5, 2, 0), random_hta(5, 0, 1), lora, FullDelta(rng.standard_normal((3, 4)))]


@pytest.mark.parametrize("idx", range(4))
def test_checkpoint_roundtrips(idx):
    a = _all_kinds()[idx]
    for back in (ad.adapter_from_json(ad.adapter_to_json(a)), ad.adapter_from_bytes(ad.adapter_to_bytes(a))):
        assert type(back) is type(a)
        for k, v in a.params().items():
            assert np.array_equal(back.params()[k], v)
            assert back.params()[k].flags.writeable
    assert ad.adapter_to_bytes(a) == ad.adapter_to_bytes(ad.adapter_from_bytes(ad.adapter_to_bytes(a)))


def test_bottleneck_json_roundtrip_and_binary_refusal():
    b = BottleneckAdapter.init(4, 2, (0,), "relu")
    back = ad.adapter_from_json(ad.adapter_to_json(b))
    assert back.activation == "relu" and np.array_equal(back.w_down, b.w_down)
    with pytest.raises(ConfigError):
        ad.adapter_to_bytes(b)


def test_checkpoint_version_and_corruption_checks():
    a = random_hta(3, 1, 0)
    d = json.loads(ad.adapter_to_json(a))
    assert d["version"] == ad.CHECKPOINT_VERSION
    d["version"] = 99
    with pytest.raises(ConfigError):
        ad.adapter_from_dict(d)
    blob = ad.adapter_to_bytes(a)
    with pytest.raises(ConfigError):
        ad.adapter_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ConfigError):
        ad.adapter_from_bytes(blob + b"\0" * 8)


def test_binary_header_layout():
    blob = ad.adapter_to_bytes(random_hta(3, 1, 0))
    assert blob[:4] == b"HTAC"
    assert int.from_bytes(blob[4:8], "little") == ad.CHECKPOINT_VERSION
    assert len(blob) == 24 + 8 * (3 * 3 + 2 * 3)
