import dataclasses

import numpy as np
import pytest

from bamoe import counters
from bamoe.autodiff import Tape
from bamoe.config import LossWeights
from bamoe.data import generate_utterance
from bamoe.errors import FeasibilityError
from bamoe.model import init_params
from bamoe.objective import batch_loss, ce_target, combine, total_loss
from bamoe.vocab import CN_TAG, EN_TAG

UNIT = {"l_ce": 1.0, "l_ctc": 2.0, "l_cla": 3.0, "l_b": 4.0}


def test_combine_default_weights():
    assert combine(LossWeights(), *UNIT.values()) == pytest.approx(0.7 + 0.6 + 0.3 + 0.4)


def test_combine_ce_ctc_only():
    assert combine(LossWeights(0.7, 0.3, 0.0, 0.0), 1.0, 1.0, 5.0, 7.0) == pytest.approx(1.0)


def test_combine_is_linear_in_weights():
    w = LossWeights(0.2, 0.5, 0.3, 0.9)
    assert combine(w.scaled(2.0), *UNIT.values()) == pytest.approx(2 * combine(w, *UNIT.values()))
    a, b = LossWeights(0.1, 0.2, 0.3, 0.4), LossWeights(0.5, 0.1, 0.0, 0.2)
    summed = LossWeights(*(x + y for x, y in zip(dataclasses.astuple(a), dataclasses.astuple(b))))
    assert combine(summed, *UNIT.values()) == pytest.approx(combine(a, *UNIT.values()) + combine(b, *UNIT.values()))


def test_ce_target_tags_open_segments():
    assert ce_target([6, 7, 30, 8], ["CN", "CN", "EN", "CN"]) == [CN_TAG, 6, 7, EN_TAG, 30, CN_TAG, 8]
    assert ce_target([], []) == []


@pytest.fixture
def utt(tiny_data_cfg):
    return generate_utterance(tiny_data_cfg, 3)


def test_total_equals_weighted_components(tiny_cfg, utt):
    params = init_params(tiny_cfg, 0)
    w = LossWeights()
    rep = total_loss(Tape(), utt, params, tiny_cfg, w)
    assert rep.total == pytest.approx(combine(w, rep.l_ce, rep.l_ctc, rep.l_cla, rep.l_b), rel=1e-12)
    assert min(rep.l_ce, rep.l_ctc, rep.l_cla, rep.l_b) > 0


def test_doubling_weights_doubles_total_and_grads(tiny_cfg, utt):
    params = init_params(tiny_cfg, 0)
    w = LossWeights()
    one = batch_loss([utt], params, tiny_cfg, w)
    g1 = {p.name: p.grad.copy() for p in params}
    params.zero_grad()
    two = batch_loss([utt], params, tiny_cfg, w.scaled(2.0))
    assert two.total == pytest.approx(2 * one.total, rel=1e-12)
    for p in params:
        assert np.allclose(p.grad, 2 * g1[p.name], rtol=1e-10, atol=1e-14)


def test_encoder_runs_once_per_utterance(tiny_cfg, utt):
    total_loss(Tape(), utt, init_params(tiny_cfg, 0), tiny_cfg, LossWeights())
    assert counters.calls["encode"] == 1


def test_zero_weights_skip_branches(tiny_cfg, utt):
    rep = total_loss(Tape(), utt, init_params(tiny_cfg, 0), tiny_cfg, LossWeights(0.7, 0.3, 0.0, 0.0))
    assert counters.calls["cla"] == 0 and counters.calls["boundary"] == 0
    assert rep.l_cla == 0.0 and rep.l_b == 0.0
    assert rep.total == pytest.approx(0.7 * rep.l_ce + 0.3 * rep.l_ctc, rel=1e-12)


def test_flags_off_skip_branches(tiny_cfg, utt):
    cfg = dataclasses.replace(tiny_cfg, use_moe_adapter=False, use_cla=False, use_bat=False)
    rep = total_loss(Tape(), utt, init_params(cfg, 0), cfg, LossWeights())
    assert counters.calls["cla"] == 0 and counters.calls["boundary"] == 0
    assert rep.l_cla == 0.0 and rep.l_b == 0.0


def test_batch_is_mean_of_utterances(tiny_cfg, tiny_data_cfg):
    params = init_params(tiny_cfg, 0)
    utts = [generate_utterance(tiny_data_cfg, i) for i in range(3)]
    singles = [total_loss(Tape(), u, params, tiny_cfg, LossWeights()).total for u in utts]
    assert batch_loss(utts, params, tiny_cfg, LossWeights(), backward=False).total == pytest.approx(np.mean(singles), rel=1e-12)


def test_component_errors_are_labeled(tiny_cfg, utt):
    short = dataclasses.replace(utt, features=utt.features[:2])
    with pytest.raises(FeasibilityError, match="ctc loss"):
        total_loss(Tape(), short, init_params(tiny_cfg, 0), tiny_cfg, LossWeights())


@pytest.mark.parametrize("flags", [(True, True, True), (True, False, False), (False, False, False)])
def test_packed_batch_matches_separate_graphs(tiny_cfg, tiny_data_cfg, flags):
    cfg = dataclasses.replace(tiny_cfg, use_moe_adapter=flags[0], use_cla=flags[1], use_bat=flags[2])
    params = init_params(cfg, 4)
    utts = [generate_utterance(tiny_data_cfg, i) for i in range(4)]
    w = LossWeights()

    packed = batch_loss(utts, params, cfg, w)
    g_packed = {p.name: p.grad.copy() for p in params}

    params.zero_grad()
    reps = []
    for u in utts:
        tape = Tape()
        rep = total_loss(tape, u, params, cfg, w)
        tape.backward(rep.total_node)
        reps.append(rep)
    for key in ("l_ce", "l_ctc", "l_cla", "l_b", "total"):
        assert getattr(packed, key) == pytest.approx(np.mean([getattr(r, key) for r in reps]), rel=1e-10, abs=1e-12)
    for p in params:
        assert np.allclose(g_packed[p.name], p.grad / len(utts), rtol=1e-8, atol=1e-12), p.name
