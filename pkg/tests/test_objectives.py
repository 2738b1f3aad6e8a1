import csv
import math

import numpy as np
import pytest

from spectrofm import autodiff as ad
from spectrofm.autodiff import Tensor
from spectrofm.encoder import EncoderConfig, Heads, TransformerEncoder
from spectrofm.errors import BatchTooSmall, ConfigError, EmptyMask
from spectrofm.objectives import (
    AdamW,
    CosineWarmup,
    EarlyStopping,
    Finetuner,
    LossWeights,
    MaskedPretrainer,
    OptimState,
    TrainConfig,
    adamw_step,
    combine_losses,
    contrastive_views,
    cross_entropy,
    loss_recon,
    loss_supcon,
    lr_schedule,
    stratified_batches,
)

TOY = EncoderConfig(patch=4, depth=1, dim=8, heads=2, ffn_mult=2, max_len=16, cls_channels=4, proj_dim=4)


def _unit(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _supcon_reference(z, labels, tau):
    # direct loop over anchors, positives and candidates
    total = 0.0
    for i in range(len(z)):
        pos = [p for p in range(len(z)) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(z[i] @ z[a] / tau) for a in range(len(z)) if a != i)
        total += -np.mean([math.log(math.exp(z[i] @ z[p] / tau) / denom) for p in pos])
    return total


def test_recon_examples():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert loss_recon(x, x.data).item() == 0.0
    assert loss_recon(Tensor(np.array([[3.0, 4.0]])), np.zeros((1, 2))).item() == 25.0
    a, b = np.random.default_rng(1).standard_normal((2, 3, 4))
    twice = loss_recon(Tensor(np.concatenate([a, a])), np.concatenate([b, b])).item()
    assert twice == pytest.approx(loss_recon(Tensor(a), b).item(), rel=1e-14)
    with pytest.raises(EmptyMask):
        loss_recon(Tensor(np.zeros((0, 4))), np.zeros((0, 4)))


def test_supcon_pairs_are_zero():
    z = Tensor(_unit(np.random.default_rng(2), 2, 4))
    assert loss_supcon(z, ["A", "A"], 0.2).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_supcon(z, ["A", "B"], 0.2).item() == 0.0


def test_supcon_three_sample_case():
    z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    expected = 2 * math.log(1 + math.exp(-5))
    assert expected == pytest.approx(0.01343, abs=1e-5)
    assert abs(loss_supcon(z, ["A", "A", "B"], 0.2).item() - expected) < 1e-6


def test_supcon_matches_reference_loop():
    rng = np.random.default_rng(3)
    for trial in range(10):
        z = _unit(rng, 7, 5)
        labels = rng.integers(0, 3, 7)
        assert loss_supcon(Tensor(z), labels, 0.2).item() == pytest.approx(_supcon_reference(z, labels, 0.2), rel=1e-10)


def test_supcon_permutation_invariant():
    rng = np.random.default_rng(4)
    z = _unit(rng, 9, 6)
    labels = rng.integers(0, 3, 9)
    perm = rng.permutation(9)
    a = loss_supcon(Tensor(z), labels, 0.2).item()
    b = loss_supcon(Tensor(z[perm]), labels[perm], 0.2).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_supcon_decreases_as_positive_aligns():
    anchor, neg = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    losses = []
    for theta in (1.2, 0.8, 0.4, 0.0):
        pos = np.array([math.cos(theta), math.sin(theta), 0.0])
        losses.append(loss_supcon(Tensor(np.stack([anchor, pos, neg])), [0, 0, 1], 0.2).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_supcon_errors():
    with pytest.raises(BatchTooSmall):
        loss_supcon(Tensor(np.array([[1.0, 0.0]])), [0], 0.2)
    with pytest.raises(ValueError):
        loss_supcon(Tensor(np.array([[2.0, 0.0], [0.0, 1.0]])), [0, 0], 0.2)


def test_contrastive_views_invariants():
    pos, cand = contrastive_views(np.array([0, 1, 0, 0]))
    assert not np.any(np.diag(pos)) and not np.any(np.diag(cand))
    assert np.all(cand[pos])


def test_cross_entropy_uniform():
    assert cross_entropy(Tensor(np.zeros((4, 5))), [0, 1, 2, 3]).item() == pytest.approx(math.log(5), abs=1e-12)


def test_combine_losses():
    lr_, lc = Tensor(np.array(2.0)), Tensor(np.array(10.0))
    assert combine_losses(lr_, lc, LossWeights()).item() == pytest.approx(5.0)
    assert combine_losses(lr_, lc, LossWeights(1.0, 0.0)).item() == 2.0
    assert combine_losses(lr_, None, LossWeights()).item() == 2.0
    with pytest.raises(ValueError):
        LossWeights(temperature=0.0)


def _joint_parts(enc, heads, S, y, index, mask):
    Z, X, patches = enc.encode(S, mask)
    src = patches.data.reshape(-1, patches.shape[-1])
    target = src[(np.arange(len(S))[:, None] * 4 + index).ravel()]
    l_r = loss_recon(heads.decode_masked(Z, index), target)
    Zc, _, _ = enc.encode(S)
    l_c = loss_supcon(heads.project(ad.mean(Zc, axis=1)), y, 0.2)
    return l_r, l_c


def test_joint_gradient_is_weighted_sum():
    enc = TransformerEncoder(TOY, 0, np.float64)
    heads = Heads(TOY, 0, 1, np.float64)
    rng = np.random.default_rng(5)
    S = rng.standard_normal((4, 8, 8))
    y = np.array([0, 0, 1, 1])
    index = np.array([[0, 1], [2, 3], [1, 2], [0, 3]])
    mask = np.zeros((4, 4), bool)
    np.put_along_axis(mask, index, True, axis=1)
    params = {**enc.params, **heads.decoder, **heads.projector}
    w = LossWeights(1.0, 0.3, 0.2)

    def grads(which):
        for t in params.values():
            t.grad = None
            t.requires_grad = True
        l_r, l_c = _joint_parts(enc, heads, S, y, index, mask)
        root = {"r": l_r, "c": l_c, "joint": combine_losses(l_r, l_c, w)}[which]
        root.backward()
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    g_r, g_c, g_j = grads("r"), grads("c"), grads("joint")
    assert any(np.any(g != 0) for g in g_c.values())
    for k in params:
        assert np.max(np.abs(g_j[k] - (w.recon * g_r[k] + w.cont * g_c[k]))) < 1e-10


def test_adamw_zero_grad_decay():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    st = OptimState(weight_decay=0.05)
    out = p["w"]
    for _ in range(5):
        prev = out
        out = adamw_step({"w": prev}, {"w": np.zeros(3)}, st, lr=1e-3)["w"]
        assert np.max(np.abs(out - prev * (1 - 5e-5))) < 1e-12


def test_adamw_first_step_sign():
    g = np.array([0.3, -2.0, 1e-3, -7.0])
    out = adamw_step({"w": np.zeros(4)}, {"w": g}, OptimState(weight_decay=0.0), lr=1e-3)["w"]
    assert np.allclose(out, -1e-3 * np.sign(g), rtol=1e-4)


def test_adamw_noop_and_reproducible():
    p = np.array([0.1, 0.2])
    assert np.array_equal(adamw_step({"w": p}, {"w": np.zeros(2)}, OptimState(weight_decay=0.0), 1e-3)["w"], p)
    g = np.random.default_rng(6).standard_normal(2)
    runs = []
    for _ in range(2):
        st, w = OptimState(), p.copy()
        for _ in range(3):
            w = adamw_step({"w": w}, {"w": g}, st, 1e-2)["w"]
        runs.append(w)
    assert np.array_equal(runs[0], runs[1])


def test_adamw_lr_scale_and_shape_error():
    st = OptimState(weight_decay=0.0)
    out = adamw_step({"a": np.zeros(1), "b": np.zeros(1)}, {"a": np.ones(1), "b": np.ones(1)}, st, 1.0, {"b": 0.1})
    assert out["a"][0] == pytest.approx(-1.0, rel=1e-6) and out["b"][0] == pytest.approx(-0.1, rel=1e-6)
    with pytest.raises(ValueError):
        adamw_step({"a": np.zeros(2)}, {"a": np.ones(3)}, OptimState(), 1.0)


def test_adamw_skips_frozen_params():
    params = {"a": Tensor(np.ones(2), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=False)}
    from spectrofm.encoder import ParamSet

    ps = ParamSet(params)
    params["a"].grad = np.ones(2)
    AdamW(ps).step(0.1)
    assert np.array_equal(params["b"].data, np.ones(2))
    assert np.all(params["a"].data < 1)


def test_schedule_table_values():
    s = CosineWarmup()
    assert lr_schedule(0.0) == 0.0
    assert s(5.0) == 5e-4
    assert s(100.0) == 1e-8
    assert s(2.5) == pytest.approx(2.5e-4)
    assert s(52.5) == pytest.approx(1e-8 + 0.5 * (5e-4 - 1e-8))
    vals = [s(e) for e in np.linspace(5, 100, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        CosineWarmup(warmup_epochs=5, total_epochs=5)


def test_train_config():
    cfg = TrainConfig(epochs=6)
    assert cfg.schedule().warmup_epochs == 3
    assert cfg.weights == LossWeights(1.0, 0.3, 0.2)
    with pytest.raises(ConfigError):
        TrainConfig(mode="BOTH")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1})


def test_early_stopping_keeps_best():
    es = EarlyStopping(patience=2, min_delta=0.0)
    seq = [5.0, 3.0, 4.0, 2.5, 2.6, 2.7]
    stops = [es.update(i, v, lambda v=v: {"v": v}) for i, v in enumerate(seq)]
    assert stops == [False, False, False, False, False, True]
    assert es.best == 2.5 and es.best_epoch == 3 and es.snapshot == {"v": 2.5}


def test_stratified_batches_cover_all():
    y = np.array([0] * 5 + [1] * 3 + [2] * 4)
    batches = stratified_batches(y, 4, np.random.default_rng(0))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(12))
    assert len(set(y[batches[0]])) == 3


def _toy_data(n=12, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 8, 16)).astype(np.float32)


def test_pretrainer_resume_identical_next_step(tmp_path):
    S = _toy_data()
    cfg = TrainConfig(epochs=4, batch_size=4, warmup_epochs=1, seed=3)
    a = MaskedPretrainer(TransformerEncoder(TOY, 0), Heads(TOY, 0, 1), cfg)
    a.run_epoch(S)
    a.save(tmp_path / "p.ckpt")
    next_a = a.train_step(S[:4], 1e-3)
    b = MaskedPretrainer(TransformerEncoder(TOY, 9), Heads(TOY, 0, 8), cfg)
    b.load(tmp_path / "p.ckpt")
    assert b.epoch == 1 and b.global_step == 3
    next_b = b.train_step(S[:4], 1e-3)
    assert next_a == next_b
    assert a.params.checksum() == b.params.checksum()


def test_pretrainer_fit_curve_and_best(tmp_path):
    S = _toy_data(16)
    cfg = TrainConfig(epochs=3, batch_size=4, warmup_epochs=1, base_lr=1e-3)
    trainer = MaskedPretrainer(TransformerEncoder(TOY, 0), Heads(TOY, 0, 1), cfg)
    res = trainer.fit(S[:12], S[12:], tmp_path / "curve.csv")
    rows = list(csv.DictReader(open(tmp_path / "curve.csv")))
    assert rows[0]["epoch"] == "0" and rows[0]["split"] == "val"
    assert list(rows[0]) == ["epoch", "split", "L_recon", "L_cont", "L_cls", "lr"]
    vals = [r["L_recon"] for r in res.curve if r["split"] == "val"]
    assert res.best_val == min(vals) and res.initial_val == vals[0]
    assert trainer.val_loss(S[12:]) == pytest.approx(res.best_val, rel=1e-5)


def test_frozen_leaves_encoder_unchanged():
    S = _toy_data(12)
    y = np.repeat([0, 1, 2], 4)
    enc = TransformerEncoder(TOY, 0)
    before = enc.params.checksum()
    heads = Heads(TOY, 3, 1)
    cls_before = heads.classifier.checksum()
    tuner = Finetuner(enc, heads, TrainConfig(epochs=3, batch_size=6, warmup_epochs=1, base_lr=1e-2))
    res = tuner.fit(S, y, S[:6], y[:6])
    assert enc.params.checksum() == before
    assert heads.classifier.checksum() != cls_before
    assert tuner.predict(S).shape == (12,)
    assert res.curve[0]["L_cls"] > 0


def test_ft_mode_updates_encoder_with_all_losses():
    S = _toy_data(8)
    y = np.repeat([0, 1], 4)
    enc = TransformerEncoder(TOY, 0)
    before = enc.params.checksum()
    tuner = Finetuner(enc, Heads(TOY, 2, 1), TrainConfig(epochs=2, batch_size=4, warmup_epochs=1, mode="FT"))
    assert tuner.opt.lr_scale["emb.w"] == 0.1
    res = tuner.fit(S, y)
    assert enc.params.checksum() != before
    assert {"L_recon", "L_cont", "L_cls"} <= set(res.curve[0])
    assert tuner.logits(S).shape == (8, 2)


def test_finetuner_needs_classes():
    with pytest.raises(ConfigError):
        Finetuner(TransformerEncoder(TOY, 0), Heads(TOY, 0, 1), TrainConfig())
