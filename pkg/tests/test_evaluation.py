import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectrofm.encoder import EncoderConfig, TransformerEncoder, save_model
from spectrofm.errors import InsufficientSamples
from spectrofm.evaluation import (
    MetricReport,
    ModelSpec,
    Task,
    class_keys,
    confusion_matrix,
    export_embeddings,
    macro_f1,
    per_class_prf,
    quantize,
    read_pgm,
    render,
    run_task,
    select,
    stratified_split,
    summarize,
)
from spectrofm.specgen import LABEL_FIELDS, DatasetConfig, build_dataset

SMALL = dict(
    protocols=["WIFI_LIKE", "LTE_LIKE"],
    snr_db=[0.0, 20.0],
    mobilities=["STATIC", "VEHICULAR"],
    n_realizations=3,
    n_frames=16,
    n_window=32,
    hop=16,
)
ENC = dict(patch=8, depth=1, dim=8, heads=2, max_len=64)


@pytest.fixture(scope="module")
def small_ds():
    return build_dataset(DatasetConfig(**SMALL), 77)


def test_macro_f1_examples():
    assert macro_f1(np.eye(4, dtype=int) * 5) == 1.0
    p, r, f = per_class_prf([[8, 2], [3, 7]])
    assert f[0] == pytest.approx(0.7619, abs=1e-4)
    assert f[1] == pytest.approx(0.7368, abs=1e-4)
    assert macro_f1([[8, 2], [3, 7]]) == pytest.approx(0.7494, abs=1e-4)
    assert macro_f1(confusion_matrix([0, 0, 1, 1], [0, 0, 0, 0], 2)) == pytest.approx(1 / 3, abs=1e-12)


def test_zero_support_class_counts_as_zero():
    conf = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert macro_f1(conf) == pytest.approx(2 / 3)


def _brute_force_f1(conf):
    n = conf.shape[0]
    out = []
    for c in range(n):
        tp = conf[c, c]
        fp = sum(conf[r, c] for r in range(n) if r != c)
        fn = sum(conf[c, k] for k in range(n) if k != c)
        out.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return np.mean(out)


@given(st.integers(2, 6), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_macro_f1_matches_counting_oracle(n, seed):
    rng = np.random.default_rng(seed)
    y_true, y_pred = rng.integers(0, n, 60), rng.integers(0, n, 60)
    conf = confusion_matrix(y_true, y_pred, n)
    assert np.array_equal(conf.sum(axis=1), np.bincount(y_true, minlength=n))
    assert macro_f1(conf) == pytest.approx(_brute_force_f1(conf), abs=1e-12)


def test_split_sizes_and_determinism():
    y = np.repeat(np.arange(5), 10)
    a = stratified_split(y, 2, seed=3, n_val=1)
    assert a.train.size == 10 and a.val.size == 5 and a.test.size == 35
    assert np.all(np.bincount(y[a.train]) == 2)
    b = stratified_split(y, 2, seed=3, n_val=1)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
    assert not np.array_equal(a.train, stratified_split(y, 2, seed=4).train)


@given(
    st.lists(st.integers(0, 4), min_size=30, max_size=120),
    st.integers(1, 3),
    st.integers(0, 2),
    st.integers(0, 2**31),
)
@settings(max_examples=60, deadline=None)
def test_splits_disjoint_and_stratified(labels, n_per_class, n_val, seed):
    y = np.asarray(labels)
    try:
        plan = stratified_split(y, n_per_class, seed, n_val)
    except InsufficientSamples:
        counts = np.bincount(y)
        assert counts[counts > 0].min() < n_per_class + n_val + 1
        return
    sets = [set(plan.train), set(plan.val), set(plan.test)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    for c in np.unique(y):
        assert np.sum(y[plan.train] == c) == n_per_class


def test_insufficient_samples_names_class():
    y = np.array([0] * 10 + [1] * 2)
    with pytest.raises(InsufficientSamples) as exc:
        stratified_split(y, 2, seed=0, classes=["BPSK", "QPSK"])
    assert exc.value.label == "QPSK" and exc.value.have == 2 and exc.value.need == 3


def test_class_keys_per_task(small_ds):
    y, classes = class_keys(small_ds.labels, Task.MODULATION)
    assert classes == ["BPSK", "QPSK", "QAM16", "QAM64", "QAM256"]
    _, classes = class_keys(small_ds.labels, Task.parse("snr-doppler"))
    assert classes == ["0dB|STATIC", "0dB|VEHICULAR", "20dB|STATIC", "20dB|VEHICULAR"]
    _, classes = class_keys(small_ds.labels, Task.parse("multiprotocol"))
    assert classes == ["WIFI_LIKE", "LTE_LIKE"]


def test_summarize_sorted_sample_std():
    reps = [
        MetricReport.from_predictions([0, 1], [0, 1], ["a", "b"], {"seed": 2}),
        MetricReport.from_predictions([0, 1], [0, 0], ["a", "b"], {"seed": 1}),
    ]
    s = summarize(reps)
    assert s["runs"] == 2
    assert s["accuracy"]["mean"] == pytest.approx(0.75)
    assert s["accuracy"]["std"] == pytest.approx(np.std([1.0, 0.5], ddof=1))


def test_select(small_ds):
    sub = select(small_ds, snr_db=[20], protocol=["LTE_LIKE"])
    assert len(sub) == 5 * 2 * 3
    assert set(sub.column("protocol")) == {"LTE_LIKE"}


def test_run_task_frozen(small_ds):
    spec = ModelSpec(encoder=ENC, train={"epochs": 3})
    res = run_task("modulation", small_ds, spec, n_per_class=2, repeats=2, seed=5)
    assert len(res.reports) == 2
    assert len(res.reports[0].classes) == 5
    assert sum(map(sum, res.reports[0].confusion)) == len(small_ds) - 10
    again = run_task("modulation", small_ds, spec, n_per_class=2, repeats=2, seed=5)
    assert [r.to_dict() for r in again.reports] == [r.to_dict() for r in res.reports]


def test_run_task_snr_doppler_ft(small_ds, tmp_path):
    enc = TransformerEncoder(EncoderConfig(**ENC), 1)
    save_model(tmp_path / "e.ckpt", enc, meta={"norm_stats": small_ds.norm_stats.to_dict()})
    spec = ModelSpec(checkpoint=str(tmp_path / "e.ckpt"), train={"epochs": 1, "mode": "FT", "batch_size": 8})
    res = run_task(Task.SNR_DOPPLER, small_ds, spec, n_per_class=2, repeats=1)
    assert len(res.reports[0].classes) == 4
    assert res.reports[0].meta["mode"] == "FT"


def test_export_embeddings(small_ds, tmp_path):
    enc = TransformerEncoder(EncoderConfig(**ENC), 0)
    n = export_embeddings(enc, small_ds, tmp_path / "a.tsv")
    export_embeddings(enc, small_ds, tmp_path / "b.tsv")
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert n == len(small_ds) == len(lines) - 1
    header = lines[0].split("\t")
    assert header[: 1 + len(LABEL_FIELDS)] == ["sample_id", *LABEL_FIELDS]
    assert len(header) == 1 + len(LABEL_FIELDS) + 8
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_render_roundtrip(tmp_path):
    S = np.random.default_rng(0).standard_normal((12, 20))
    img = render(S, tmp_path / "s.pgm")
    back = read_pgm(tmp_path / "s.pgm")
    assert back.shape == (12, 20)
    assert np.array_equal(back, img)
    assert img.min() == 0 and img.max() == 255


def test_render_constant_is_zero(tmp_path):
    assert not np.any(render(np.full((4, 6, 1), 3.3), tmp_path / "c.pgm"))


def test_pgm_pixels_that_look_like_whitespace(tmp_path):
    # first pixels quantize to byte values 10 and 32
    S = np.array([[10.0, 32.0, 0.0, 255.0]])
    img = render(S, tmp_path / "w.pgm")
    assert img.tolist() == [[10, 32, 0, 255]]
    assert np.array_equal(read_pgm(tmp_path / "w.pgm"), img)


def test_quantize_shape_error():
    with pytest.raises(ValueError):
        quantize(np.zeros((2, 2, 2)))
