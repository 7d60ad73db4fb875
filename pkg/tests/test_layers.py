import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from car_retrieval import autodiff as ad
from car_retrieval.autodiff import Tensor, grad_check
from car_retrieval.layers import (Adam, Adapter, LayerNorm, Linear, Module, Parameter,
                                  TransformerLayer, count_params, lr_at_epoch)

TOL = 1e-4


def test_fresh_adapter_is_identity(rng):
    a = Adapter(8, 3, rng)
    h = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(a(h).data, h.data)


def test_adapter_matches_formula(rng):
    a = Adapter(6, 2, rng)
    a.w_up.data[...] = rng.normal(size=(2, 6))
    h = rng.normal(size=(3, 6))
    expected = np.maximum(h @ a.w_down.data, 0) @ a.w_up.data + h
    np.testing.assert_allclose(a(Tensor(h)).data, expected, rtol=0, atol=1e-14)


@pytest.mark.parametrize("bottleneck", [0, 8, 9])
def test_adapter_bottleneck_must_be_smaller(rng, bottleneck):
    with pytest.raises(ValueError):
        Adapter(8, bottleneck, rng)


def test_adapter_wrong_width(rng):
    with pytest.raises(ad.DimensionError):
        Adapter(8, 2, rng)(Tensor(np.zeros((2, 7))))


@given(d=st.sampled_from([4, 6, 8]), b=st.integers(1, 3), rows=st.integers(1, 4),
       seed=st.integers(0, 10_000))
def test_adapter_grad_property(d, b, rows, seed):
    rng = np.random.default_rng(seed)
    a = Adapter(d, b, rng)
    a.w_up.data[...] = rng.normal(size=(b, d))
    w = Tensor(rng.normal(size=(rows, d)))
    x = Tensor(rng.normal(size=(rows, d)))
    assert grad_check(lambda v: (a(v) * w).sum(), x) < TOL
    for p in (a.w_down, a.w_up):
        assert grad_check(lambda _: (a(x) * w).sum(), p) < TOL


@given(n=st.integers(1, 3), t=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_transformer_layer_grad_property(n, t, seed):
    rng = np.random.default_rng(seed)
    layer = TransformerLayer(8, 2, rng, ffn_mult=2)
    slots = (Adapter(8, 2, rng), Adapter(8, 2, rng))
    for a in slots:
        a.w_up.data[...] = rng.normal(0, 0.3, size=(2, 8))
    mask = np.ones((n, t), bool)
    mask[0, t - 1:] = t == 1
    w = Tensor(rng.normal(size=(n, t, 8)))
    x = Tensor(rng.normal(size=(n, t, 8)))
    assert grad_check(lambda v: (layer(v, mask, slots) * w).sum(), x) < TOL
    for p in (layer.attn.qkv.weight, layer.ff1.weight, layer.ln2.gamma, slots[0].w_down, slots[1].w_up):
        assert grad_check(lambda _: (layer(x, mask, slots) * w).sum(), p) < TOL


def test_transformer_mask_ignores_padding(rng):
    layer = TransformerLayer(8, 2, rng)
    x = rng.normal(size=(1, 4, 8))
    mask = np.array([[True, True, True, False]])
    out1 = layer(Tensor(x), mask).data
    x[0, 3] = 100.0
    out2 = layer(Tensor(x), mask).data
    np.testing.assert_allclose(out1[0, :3], out2[0, :3], atol=1e-12)


def test_transformer_accepts_unbatched_and_rejects_empty(rng):
    layer = TransformerLayer(8, 2, rng)
    assert layer(Tensor(rng.normal(size=(3, 8)))).shape == (3, 8)
    with pytest.raises(ValueError):
        layer(Tensor(rng.normal(size=(2, 3, 8))), np.array([[1, 1, 0], [0, 0, 0]], bool))


def test_attention_rows_are_distributions(rng):
    layer = TransformerLayer(8, 4, rng)
    layer(Tensor(rng.normal(size=(2, 5, 8))), np.array([[1, 1, 1, 0, 0], [1] * 5], bool))
    w = layer.attn._last_weights
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert np.all(w[0, :, :, 3:] == 0.0)


class Tiny(Module):
    def __init__(self, rng):
        self.frozen = Linear(3, 3, rng, trainable=False)
        self.blocks = [Linear(3, 2, rng), LayerNorm(2)]


def test_module_naming_counting_state(rng):
    m = Tiny(rng)
    m.assign_names()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["frozen.weight", "frozen.bias", "blocks.0.weight", "blocks.0.bias",
                     "blocks.1.gamma", "blocks.1.beta"]
    assert count_params(m) == (3 * 2 + 2 + 2 + 2, 9 + 3)
    state = m.state_dict()
    m.blocks[0].weight.data += 1
    m.load_state_dict(state)
    np.testing.assert_array_equal(m.blocks[0].weight.data, state["blocks.0.weight"])
    with pytest.raises(KeyError):
        m.load_state_dict({})


def test_adam_first_step_oracle():
    # first bias-corrected step: lr * g / (|g| + eps)
    p = Parameter(np.array([1.0, -2.0, 0.5]))
    opt = Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4 / (4 + 1e-8), 0.5])
    assert p.grad is None


def test_adam_two_steps_match_reference():
    p = Parameter(np.array([0.3]))
    opt = Adam([p], lr=0.01, betas=(0.9, 0.999))
    m = v = 0.0
    x = 0.3
    for k, g in enumerate([1.0, -0.5], start=1):
        p.grad = np.array([g])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    assert p.data[0] == pytest.approx(x, abs=1e-15)


def test_adam_skips_frozen_and_strict_mode(rng):
    frozen = Parameter(np.ones(2), trainable=False)
    live = Parameter(np.ones(2))
    opt = Adam([frozen, live], lr=0.1)
    with pytest.raises(RuntimeError):
        opt.step()
    live.grad = np.ones(2)
    frozen.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(frozen.data, 1.0)
    assert np.all(live.data < 1.0)
    lax = Adam([Parameter(np.ones(2))], strict=False)
    lax.step()
    np.testing.assert_array_equal(lax.params[0].data, 1.0)


def test_adam_grad_clip():
    p = Parameter(np.zeros(2))
    opt = Adam([p], lr=1.0, grad_clip=1.0)
    p.grad = np.array([30.0, 40.0])
    opt.step()
    # clipped grad direction is preserved and first-step magnitude is lr
    np.testing.assert_allclose(p.data, [-1.0, -1.0], rtol=1e-6)


@pytest.mark.parametrize("epoch,expected", [(0, 1e-4), (29, 1e-4), (30, 1e-5), (59, 1e-5), (60, 1e-6), (99, 1e-7)])
def test_lr_schedule(epoch, expected):
    assert lr_at_epoch(1e-4, epoch) == pytest.approx(expected, rel=1e-12)
