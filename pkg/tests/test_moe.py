import json
import math
import warnings

import numpy as np
import pytest

from spectrofm.encoder import EncoderConfig, TransformerEncoder
from spectrofm.errors import ConfigError, MissingExpertOutput, ShapeError, UnbalancedDataset
from spectrofm.moe import (
    EXPERT_ORDER,
    ExpertBank,
    MoeBundle,
    RouteDecision,
    RouteMode,
    Router,
    RouterConfig,
    aggregate,
    moe_infer,
    protocol_index,
    route,
    save_bank,
    top1,
    train_router,
)
from spectrofm.objectives import TrainConfig, cross_entropy

EXP = EncoderConfig(patch=4, depth=1, dim=8, heads=2, max_len=16)
RCFG = RouterConfig(dim=8, depth=1, heads=2, patch=4, max_len=16)


def _bank():
    return ExpertBank([TransformerEncoder(EXP, s) for s in (11, 12, 13)])


def _S(n=6, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 8, 16)).astype(np.float32)


def _biased_router(bias):
    r = Router(RCFG, 0)
    r.gate["gate.w"].data[:] = 0
    r.gate["gate.b"].data[:] = bias
    return r


def test_expert_order():
    assert [p.value for p in EXPERT_ORDER] == ["WIFI_LIKE", "LTE_LIKE", "NR_LIKE"]
    assert protocol_index(["NR_LIKE", "WIFI_LIKE", 1]).tolist() == [2, 0, 1]


def test_equal_logits_uniform_weights():
    d = _biased_router([0.0, 0.0, 0.0]).route(_S())
    assert np.allclose(d.weights, 1 / 3, atol=1e-12)
    assert d.chosen.tolist() == [0] * 6


def test_weights_on_simplex():
    r = Router(RCFG, 3)
    r.gate["gate.w"].data[:] = np.random.default_rng(1).standard_normal((8, 3)) * 5
    d = route(_S(20, 2), r)
    assert np.all(d.weights > 0)
    assert np.allclose(d.weights.sum(axis=1), 1, atol=1e-9)


def test_router_gap_of_constant_tokens():
    r = Router(RCFG, 0)
    from spectrofm import autodiff as ad

    Z = np.broadcast_to(np.arange(8.0), (1, 8, 8))
    assert np.allclose(ad.mean(ad.Tensor(Z), axis=-2).data, np.arange(8.0))
    with pytest.raises(ShapeError):
        r.logits(np.zeros((8, 16)))


def test_top1_tie_break_lowest():
    assert top1(np.array([[0.4, 0.4, 0.2], [0.3, 0.35, 0.35], [1 / 3, 1 / 3, 1 / 3]])).tolist() == [0, 1, 0]


def test_dense_examples():
    h1, h2, h3 = np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), np.array([[5.0, 5.0]])
    d = RouteDecision(np.array([[0.5, 0.5, 0.0]]), np.array([0]), RouteMode.DENSE)
    assert aggregate(d, [h1, h2, h3]).tolist() == [[1.0, 1.0]]
    one_hot = RouteDecision(np.array([[1.0, 0.0, 0.0]]), np.array([0]), RouteMode.DENSE)
    assert np.array_equal(aggregate(one_hot, [h1, h2, h3]), h1)


def test_top1_selects_bitwise():
    rng = np.random.default_rng(3)
    hs = [rng.standard_normal((1, 4)) for _ in range(3)]
    d = RouteDecision(np.array([[0.2, 0.5, 0.3]]), np.array([1]), RouteMode.TOP1)
    assert np.array_equal(aggregate(d, hs), hs[1])
    assert np.array_equal(aggregate(d, [None, hs[1], None]), hs[1])


def test_missing_expert_output():
    d = RouteDecision(np.array([[0.2, 0.5, 0.3]]), np.array([1]), RouteMode.TOP1)
    with pytest.raises(MissingExpertOutput):
        aggregate(d, [np.zeros((1, 4)), None, None])
    with pytest.raises(MissingExpertOutput):
        aggregate(d, [None, np.zeros((1, 4)), None], RouteMode.DENSE)


def test_top1_inference_matches_standalone_expert():
    bank = _bank()
    r = Router(RCFG, 5)
    r.gate["gate.w"].data[:] = np.random.default_rng(4).standard_normal((8, 3)) * 50
    S = _S(12, 5)
    out = moe_infer(S, r, bank, RouteMode.TOP1)
    assert out.expert_evals.tolist() == [1] * 12
    assert bank.eval_count == 12
    for i, k in enumerate(out.decision.chosen):
        alone = bank.experts[k].pooled(S[i : i + 1]).data[0]
        assert np.array_equal(out.embedding[i], alone)


def test_dense_counter_and_head():
    bank = _bank()
    out = moe_infer(_S(4), Router(RCFG, 0), bank, RouteMode.DENSE, head=lambda h: h.sum(axis=1, keepdims=True))
    assert out.expert_evals.tolist() == [3] * 4
    assert bank.eval_count == 12
    assert out.logits.shape == (4, 1)


def test_top1_equals_dense_for_one_hot_gate():
    bank = _bank()
    r = _biased_router([0.0, 100.0, 0.0])
    S = _S(5, 6)
    top = moe_infer(S, r, bank, RouteMode.TOP1).embedding
    dense = moe_infer(S, r, bank, RouteMode.DENSE).embedding
    assert np.max(np.abs(top - dense)) < 1e-12


def test_uniform_router_loss_is_ln3():
    r = _biased_router([0.0, 0.0, 0.0])
    assert cross_entropy(r.logits(_S(6)), [0, 1, 2, 0, 1, 2]).item() == pytest.approx(math.log(3), abs=1e-6)
    fresh = Router(RCFG, 0)
    assert cross_entropy(fresh.logits(_S(6)), [0, 1, 2, 0, 1, 2]).item() == pytest.approx(math.log(3), abs=0.02)


def test_train_router_keeps_experts_frozen():
    bank = _bank()
    before = bank.checksum()
    S = _S(12, 7)
    # separable toy: each protocol lights up its own band of frequency patches
    y = np.repeat([0, 1, 2], 4)
    for i, k in enumerate(y):
        S[i, :, 4 * k : 4 * k + 4] += 3.0
    cfg = TrainConfig(epochs=15, batch_size=6, base_lr=1e-2, warmup_epochs=1)
    r, res = train_router(bank, S, [EXPERT_ORDER[k].value for k in y], cfg, Router(RCFG, 0))
    assert bank.checksum() == before
    assert res.curve[-1]["L_cls"] < res.curve[0]["L_cls"]
    assert np.mean(r.route(S).chosen == y) == 1.0


def test_train_router_warns_when_unbalanced():
    bank = _bank()
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        train_router(bank, _S(4), [0, 0, 1, 2], TrainConfig(epochs=1, batch_size=4, warmup_epochs=0.5), Router(RCFG, 0))
    assert any(issubclass(x.category, UnbalancedDataset) for x in w)


def test_bank_validation():
    with pytest.raises(ConfigError):
        ExpertBank([TransformerEncoder(EXP, 0)] * 2)
    other = EncoderConfig(patch=4, depth=1, dim=16, heads=2)
    with pytest.raises(ConfigError):
        ExpertBank([TransformerEncoder(EXP, 0), TransformerEncoder(EXP, 1), TransformerEncoder(other, 2)])


def test_bundle_roundtrip(tmp_path):
    bank, r = _bank(), Router(RCFG, 4)
    path = save_bank(bank, r, tmp_path / "moe")
    r2, bank2 = MoeBundle.read(path).load(tmp_path / "moe")
    assert bank2.checksum() == bank.checksum()
    assert r2.params.checksum() == r.params.checksum()
    bad = MoeBundle.read(path).to_json()
    bad["expert_order"] = bad["expert_order"][::-1]

    (tmp_path / "bad.json").write_text(json.dumps(bad))
    with pytest.raises(ConfigError):
        MoeBundle.read(tmp_path / "bad.json")
