import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bamoe.autodiff import Tape
from bamoe.cla import MaskedTargets, combine, cla_loss, cross_layer_adapter_mean, mask_targets
from bamoe.ctc import ctc_brute_force
from bamoe.encoder import LayerCache, encode
from bamoe.errors import ContractError, FeasibilityError, TagError
from bamoe.model import init_params
from bamoe.vocab import UNK


def test_mask_targets_rule():
    m = mask_targets([10, 11, 30], ["CN", "CN", "EN"])
    assert m == MaskedTargets((10, 11, UNK), (UNK, UNK, 30))


def test_mask_targets_monolingual_and_empty():
    assert mask_targets([7, 8], ["CN", "CN"]).y_en == (UNK, UNK)
    assert mask_targets([], []) == MaskedTargets((), ())


def test_mask_targets_unknown_tag():
    with pytest.raises(TagError):
        mask_targets([7], ["FR"])


@given(st.lists(st.tuples(st.integers(6, 45), st.sampled_from(["CN", "EN"])), max_size=30))
def test_mask_partition(pairs):
    tokens = [t for t, _ in pairs]
    langs = [l for _, l in pairs]
    m = mask_targets(tokens, langs)
    assert len(m.y_cn) == len(m.y_en) == len(tokens)
    unk_cn = {i for i, t in enumerate(m.y_cn) if t == UNK}
    unk_en = {i for i, t in enumerate(m.y_en) if t == UNK}
    assert not unk_cn & unk_en
    assert unk_cn | unk_en == set(range(len(tokens)))
    for i, tok in enumerate(tokens):
        assert (m.y_cn[i] if langs[i] == "CN" else m.y_en[i]) == tok


def _caches(tape, mats_cn, mats_en):
    return [LayerCache(a=tape.const(c), h_out=tape.const(c), h_cn=tape.const(c), h_en=tape.const(e)) for c, e in zip(mats_cn, mats_en)]


def test_mean_of_one_layer(rng):
    t = Tape()
    x = rng.normal(size=(3, 4))
    assert np.array_equal(cross_layer_adapter_mean(_caches(t, [x], [x]), "CN").value, x)


def test_mean_of_x_and_3x(rng):
    t = Tape()
    x = rng.normal(size=(3, 4))
    assert np.allclose(cross_layer_adapter_mean(_caches(t, [x, 3 * x], [x, x]), "CN").value, 2 * x)


def test_mean_identical_layers_exact(rng):
    t = Tape()
    x = rng.normal(size=(3, 4))
    assert np.array_equal(cross_layer_adapter_mean(_caches(t, [x] * 4, [x] * 4), "EN").value, x)


def test_mean_matches_recomputation(tiny_cfg, rng):
    import dataclasses

    cfg = dataclasses.replace(tiny_cfg, encoder=dataclasses.replace(tiny_cfg.encoder, num_layers=3))
    params = init_params(cfg, 1)
    enc = encode(Tape(), rng.normal(size=(5, 8)), params, cfg.encoder)
    for lang, attr in (("CN", "h_cn"), ("EN", "h_en")):
        expect = sum(getattr(c, attr).value for c in enc.caches) / 3
        assert np.allclose(cross_layer_adapter_mean(enc.caches, lang).value, expect, atol=1e-14)


def test_mean_empty_cache():
    with pytest.raises(ContractError):
        cross_layer_adapter_mean([], "CN")


def test_combine_arithmetic_and_symmetry():
    assert combine(2.0, 4.0) == 3.0
    assert combine(4.0, 2.0) == combine(2.0, 4.0)


def test_cla_loss_matches_brute_force(tiny_cfg, rng):
    params = init_params(tiny_cfg, 2)
    t = Tape()
    enc = encode(t, rng.normal(size=(4, 8)), params, tiny_cfg.encoder)
    masked = mask_targets([6, 10], ["CN", "EN"])
    loss = cla_loss(t, enc.caches, masked, params)

    def brute(lang, head, target):
        h = cross_layer_adapter_mean(enc.caches, lang).value
        logits = h @ params[f"{head}.w"].value + params[f"{head}.b"].value
        lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
        return ctc_brute_force(lp, target)

    expect = (brute("CN", "cla.cn_head", masked.y_cn) + brute("EN", "cla.en_head", masked.y_en)) / 2
    assert loss.item() == pytest.approx(expect, abs=1e-9)


def test_cla_loss_invariant_under_language_swap(tiny_cfg, rng):
    # swap adapter outputs, heads and targets together
    params = init_params(tiny_cfg, 3)
    t = Tape()
    enc = encode(t, rng.normal(size=(6, 8)), params, tiny_cfg.encoder)
    masked = mask_targets([6, 7, 10], ["CN", "CN", "EN"])
    base = cla_loss(t, enc.caches, masked, params).item()

    swapped_params = params.copy()
    for a, b in (("cla.cn_head.w", "cla.en_head.w"), ("cla.cn_head.b", "cla.en_head.b")):
        swapped_params[a].value, swapped_params[b].value = params[b].value.copy(), params[a].value.copy()
    swapped_caches = [LayerCache(a=c.a, h_out=c.h_out, h_cn=c.h_en, h_en=c.h_cn, gate=c.gate) for c in enc.caches]
    swapped = cla_loss(Tape(), swapped_caches, MaskedTargets(masked.y_en, masked.y_cn), swapped_params).item()
    assert swapped == pytest.approx(base, rel=1e-12)


def test_cla_infeasibility_names_language(tiny_cfg, rng):
    params = init_params(tiny_cfg, 0)
    t = Tape()
    enc = encode(t, rng.normal(size=(2, 8)), params, tiny_cfg.encoder)
    with pytest.raises(FeasibilityError, match="CN"):
        cla_loss(t, enc.caches, mask_targets([6, 7, 9], ["CN", "CN", "EN"]), params)
