import numpy as np
import pytest

from bamoe.autodiff import ModelParams, Tape
from bamoe.config import EncoderConfig
from bamoe.encoder import (
    adapter_forward,
    add_positions,
    encode,
    gate_fuse,
    init_encoder,
    shared_layer_forward,
)
from bamoe.errors import ConfigError
from bamoe.nn import bind

import oracles

CFG = EncoderConfig(num_layers=2, d_model=8, d_ff=16, num_heads=2, d_adapter=4)


def make_params(cfg=CFG, seed=0, moe=True):
    p = ModelParams()
    init_encoder(p, np.random.default_rng(seed), cfg, moe)
    return p


def zero_adapters(params):
    for p in params:
        if ".adapter_" in p.name and p.name.endswith("w_up"):
            p.value[...] = 0.0


def test_shared_layer_residual_identity(rng):
    params = make_params()
    for p in params.with_prefix("enc.layer0.shared."):
        if not p.name.endswith("gamma"):
            p.value[...] = 0.0
    x = rng.normal(size=(5, 8))
    t = Tape()
    y = shared_layer_forward(t.const(x), bind(t, params, "enc.layer0.shared"), CFG)
    assert np.array_equal(y.value, x)


def test_shared_layer_single_frame(rng):
    params = make_params()
    x = rng.normal(size=(1, 8))
    t = Tape()
    y = shared_layer_forward(t.const(x), bind(t, params, "enc.layer0.shared"), CFG)
    assert y.shape == (1, 8)
    # one key: attention output is the value path LN(x) W_v W_o
    g = lambda n: params[f"enc.layer0.shared.{n}"].value
    n1 = oracles.layer_norm(x, g("ln_att.gamma"), g("ln_att.beta"))
    mid = x + n1 @ g("att.wv") @ g("att.wo")
    n2 = oracles.layer_norm(mid, g("ln_ff.gamma"), g("ln_ff.beta"))
    expect = mid + np.maximum(n2 @ g("ff.fc1.w") + g("ff.fc1.b"), 0) @ g("ff.fc2.w") + g("ff.fc2.b")
    assert np.allclose(y.value, expect, atol=1e-12)


def test_shared_layer_matches_straight_line_oracle():
    rng = np.random.default_rng(5)
    params = make_params(seed=3)
    for p in params:  # non-trivial affine LN parameters
        if p.name.endswith(("gamma", "beta")) or p.name.endswith(".b"):
            p.value[...] = rng.normal(size=p.value.shape)
    x = rng.normal(size=(3, 8))
    t = Tape()
    y = shared_layer_forward(t.const(x), bind(t, params, "enc.layer0.shared"), CFG)
    assert np.allclose(y.value, oracles.shared_layer(x, params, "enc.layer0.shared", 2), atol=1e-12)


def test_shared_layer_config_error(rng):
    params = make_params()
    t = Tape()
    with pytest.raises(ConfigError):
        shared_layer_forward(t.const(rng.normal(size=(3, 5))), bind(t, params, "enc.layer0.shared"), CFG)


def _adapter_params(t, w_up, w_down):
    d = len(w_up)
    return {
        "ln.gamma": t.const(np.ones((1, d))),
        "ln.beta": t.const(np.zeros((1, d))),
        "w_up": t.const(w_up),
        "w_down": t.const(w_down),
    }


def test_adapter_zero_up_projection_is_identity(rng):
    t = Tape()
    a = rng.normal(size=(4, 3))
    out = adapter_forward(t.const(a), _adapter_params(t, np.zeros((3, 2)), rng.normal(size=(2, 3))))
    assert np.array_equal(out.value, a)


def test_adapter_relu_kills_negative_path():
    t = Tape()
    out = adapter_forward(t.const([[1.0, 3.0]]), _adapter_params(t, [[1.0], [0.0]], [[1.0, 1.0]]))
    assert np.allclose(out.value, [[1.0, 3.0]])


def test_adapter_hand_evaluated():
    # LN([1,3]) = [-1, 1]; up-proj 1; ReLU 1; + [1,1]
    t = Tape()
    out = adapter_forward(t.const([[1.0, 3.0]]), _adapter_params(t, [[0.0], [1.0]], [[1.0, 1.0]]))
    assert np.allclose(out.value, [[2.0, 4.0]], atol=1e-5)


def test_gate_uniform_when_zero(rng):
    t = Tape()
    h_cn, h_en, a = (rng.normal(size=(4, 3)) for _ in range(3))
    out, gate = gate_fuse(t.const(h_cn), t.const(h_en), t.const(a), {"w": t.const(np.zeros((3, 2))), "b": t.const(np.zeros((1, 2)))})
    assert np.array_equal(gate.value, np.full((4, 2), 0.5))
    assert np.allclose(out.value, (h_cn + h_en) / 2)


def test_gate_saturates(rng):
    t = Tape()
    h_cn, h_en, a = (rng.normal(size=(4, 3)) for _ in range(3))
    out, gate = gate_fuse(t.const(h_cn), t.const(h_en), t.const(a), {"w": t.const(np.zeros((3, 2))), "b": t.const([[20.0, -20.0]])})
    assert np.allclose(gate.value[:, 0], 1.0, atol=1e-15)
    assert np.allclose(out.value, h_cn, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_gate_output_is_convex_per_frame(seed):
    rng = np.random.default_rng(seed)
    params = make_params(seed=seed)
    for p in params:
        p.value += rng.normal(scale=0.5, size=p.value.shape)
    x = rng.normal(size=(7, 8))
    out = encode(Tape(), x, params, CFG)
    for c in out.caches:
        lo = np.minimum(c.h_cn.value, c.h_en.value)
        hi = np.maximum(c.h_cn.value, c.h_en.value)
        assert np.all(lo - 1e-9 <= c.h_out.value) and np.all(c.h_out.value <= hi + 1e-9)
        g = c.gate.value
        assert np.all(g >= 0) and np.allclose(g.sum(axis=1), 1.0, atol=1e-9)
        expect = g[:, :1] * c.h_cn.value + g[:, 1:] * c.h_en.value
        assert np.array_equal(c.h_out.value, expect)


def test_encode_collapses_to_shared_layer(rng):
    cfg = EncoderConfig(num_layers=1, d_model=8, d_ff=16, num_heads=2, d_adapter=4)
    params = make_params(cfg)
    zero_adapters(params)
    params["enc.layer0.gate.w"].value[...] = 0.0
    x = rng.normal(size=(6, 8))
    t = Tape()
    out = encode(t, x, params, cfg)
    shared = shared_layer_forward(add_positions(t, x), bind(t, params, "enc.layer0.shared"), cfg)
    assert np.array_equal(out.h_mix.value, shared.value)


def test_residual_identity_bitwise(rng):
    params = make_params()
    zero_adapters(params)
    out = encode(Tape(), rng.normal(size=(5, 8)), params, CFG)
    for c in out.caches:
        assert np.array_equal(c.h_cn.value, c.a.value)
        assert np.array_equal(c.h_en.value, c.a.value)


@pytest.mark.parametrize("T", [1, 2, 7, 64])
def test_encode_shapes(T, rng):
    params = make_params()
    out = encode(Tape(), rng.normal(size=(T, 8)), params, CFG)
    assert out.h_mix.shape == (T, 8)
    assert len(out.caches) == CFG.num_layers
    for c in out.caches:
        for m in (c.a, c.h_cn, c.h_en, c.h_out):
            assert m.shape == (T, 8)
        assert c.gate.shape == (T, 2)
    assert out.h_mix is out.caches[-1].h_out


def test_encode_is_deterministic(rng):
    params = make_params()
    x = rng.normal(size=(9, 8))
    assert np.array_equal(encode(Tape(), x, params, CFG).h_mix.value, encode(Tape(), x, params, CFG).h_mix.value)


def test_baseline_encoder_has_no_adapters(rng):
    params = make_params(moe=False)
    assert not [p for p in params if "adapter" in p.name or "gate" in p.name]
    out = encode(Tape(), rng.normal(size=(4, 8)), params, CFG, moe=False)
    assert all(c.h_cn is None and c.gate is None for c in out.caches)


def test_encoder_errors_carry_layer_index(rng):
    params = make_params()
    with pytest.raises(ConfigError, match="layer 0"):
        encode(Tape(), rng.normal(size=(4, 5)), params, CFG)
