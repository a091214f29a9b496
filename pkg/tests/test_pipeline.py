import csv
import gzip
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from ddvi import checkpoint as ckpt_io
from ddvi import diffcore as dc
from ddvi.audit import conjugate_instance, set_meanfield_to
from ddvi.data import CsvSchema, DataError, Dataset, Preprocessor, load_csv, split, write_csv
from ddvi.kernels import rbf_gram
from ddvi.metrics import auc, categorical_nll, gaussian_mixture_nll, metrics, rmse
from ddvi.seeding import derive_seed, splitmix64
from ddvi.training import (METRIC_HEADER, Adam, TrainConfig, TrainingAborted, predict, restore,
                           train)


def write(path, text):
    path.write_text(text)
    return str(path)


# --- CSV ingestion -------------------------------------------------------

def test_load_two_rows(tmp_path):
    d = load_csv(write(tmp_path / "a.csv", "1,2,3\n4,5,6\n"))
    assert d.X.shape == (2, 2) and d.y.shape == (2, 1)
    np.testing.assert_array_equal(d.y[:, 0], [3, 6])


def test_header_skipped(tmp_path):
    d = load_csv(write(tmp_path / "a.csv", "x1,x2,y\n1,2,3\n"), CsvSchema(header=True))
    assert len(d) == 1


def test_gzip_and_classification(tmp_path):
    p = tmp_path / "a.csv.gz"
    with gzip.open(p, "wt") as fh:
        fh.write("0.5,1\n0.1,0\n0.2,2\n")
    d = load_csv(str(p), CsvSchema(task="classification"))
    assert d.y.dtype.kind == "i" and d.num_classes == 3


@pytest.mark.parametrize("text,match", [
    ("", "no data"),
    ("1,2\n1,2,3\n", "row 1"),
    ("1,2\n3,abc\n", "row 1"),
    ("1\n2\n", "columns"),
    ("1,nan\n", "non-finite"),
])
def test_malformed_files(tmp_path, text, match):
    with pytest.raises(DataError, match=match):
        load_csv(write(tmp_path / "bad.csv", text))


def test_bad_labels(tmp_path):
    with pytest.raises(DataError):
        load_csv(write(tmp_path / "a.csv", "1,0.5\n"), CsvSchema(task="classification"))


def test_write_then_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 1))
    write_csv(tmp_path / "a.csv", X, y)
    d = load_csv(str(tmp_path / "a.csv"))
    np.testing.assert_array_equal(d.X, X)
    np.testing.assert_array_equal(d.y, y)


# --- split and normalization ---------------------------------------------

def toy(N=10, D=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((N, D)), rng.standard_normal((N, 1)))


def test_split_sizes_and_determinism():
    tr, te = split(toy(), 0.9, seed=3)
    assert (len(tr), len(te)) == (9, 1)
    tr2, te2 = split(toy(), 0.9, seed=3)
    np.testing.assert_array_equal(tr.X, tr2.X)
    with pytest.raises(DataError):
        split(toy(N=1))


@settings(max_examples=25, deadline=None)
@given(N=st.integers(2, 60), ratio=st.floats(0.1, 0.95), seed=st.integers(0, 100))
def test_split_partitions_rows(N, ratio, seed):
    d = Dataset(np.arange(N, dtype=float)[:, None], np.zeros((N, 1)))
    tr, te = split(d, ratio, seed)
    assert len(te) >= 1
    assert sorted(np.concatenate([tr.X[:, 0], te.X[:, 0]])) == list(range(N))


def test_train_features_in_unit_box_and_constant_column():
    d = toy(N=20)
    d.X[:, 1] = 4.0
    pre = Preprocessor.fit(d)
    Xn = pre.transform_X(d.X)
    assert Xn[:, 0].min() == -1.0 and Xn[:, 0].max() == 1.0
    np.testing.assert_array_equal(Xn[:, 1], 0.0)
    yn = pre.transform_y(d.y)
    np.testing.assert_allclose([yn.mean(), yn.std()], [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(pre.inverse_y(yn), d.y)


def test_out_of_range_test_point_not_clamped():
    pre = Preprocessor.fit(Dataset(np.array([[0.0], [1.0]]), np.zeros((2, 1))))
    np.testing.assert_allclose(pre.transform_X([[3.0]]), [[5.0]])


def test_pca_projection():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((50, 1)) @ rng.standard_normal((1, 6))
    pre = Preprocessor.fit(Dataset(X, np.zeros((50, 1))), pca=2)
    Xn = pre.transform_X(X)
    assert Xn.shape == (50, 2)
    # rank-one data: the second component carries only round-off
    assert np.ptp(((X - pre.pca_mean) @ pre.pca_components)[:, 1]) < 1e-10


# --- checkpoints ---------------------------------------------------------

def test_checkpoint_example_layout():
    ck = ckpt_io.Checkpoint({"a": 1}, {"w": np.array([[1.0, 2.0]])})
    raw = ckpt_io.to_bytes(ck)
    assert raw.startswith(b"DDVI1")
    text = b"a = 1\n"
    assert raw[5:9] == len(text).to_bytes(4, "little") and raw[9:15] == text
    assert raw.endswith(np.array([1.0, 2.0], "<f8").tobytes())


@settings(max_examples=30, deadline=None)
@given(arrays=st.dictionaries(
    st.text("abcxyz/_0123", min_size=1, max_size=8),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=True, allow_infinity=True)),
    max_size=4))
def test_checkpoint_roundtrip_bit_exact(arrays):
    ck = ckpt_io.Checkpoint({"seed": "3", "name": "x y"}, arrays)
    back = ckpt_io.from_bytes(ckpt_io.to_bytes(ck))
    assert back.config == ck.config
    assert list(back.arrays) == list(arrays)
    for k, v in arrays.items():
        assert back.arrays[k].shape == v.shape
        assert back.arrays[k].tobytes() == np.asarray(v, "<f8").tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(ckpt_io.CheckpointError, match="magic"):
        ckpt_io.from_bytes(b"NOPE")
    raw = ckpt_io.to_bytes(ckpt_io.Checkpoint({}, {"w": np.ones(3)}))
    with pytest.raises(ckpt_io.CheckpointError, match="truncated"):
        ckpt_io.from_bytes(raw[:-4])
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.parse_config("no equals sign")


def test_atomic_save_leaves_no_temp(tmp_path):
    path = tmp_path / "sub" / "c.ddvi"
    ckpt_io.save(ckpt_io.Checkpoint({"k": "v"}, {"a": np.zeros(2)}), path)
    assert os.listdir(tmp_path / "sub") == ["c.ddvi"]
    assert ckpt_io.load(path).config == {"k": "v"}


# --- metrics -------------------------------------------------------------

def test_rmse_perfect():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0


def test_mixture_nll_two_samples():
    samples = np.array([0.0, 1.0]).reshape(2, 1, 1)
    y, v = 0.3, 0.5
    p = np.exp(-0.5 * (y - 0.0) ** 2 / v) / np.sqrt(2 * np.pi * v)
    q = np.exp(-0.5 * (y - 1.0) ** 2 / v) / np.sqrt(2 * np.pi * v)
    np.testing.assert_allclose(gaussian_mixture_nll(samples, v, [y]), -np.log((p + q) / 2))


def test_categorical_nll_and_auc():
    probs = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.7, 0.3], [0.4, 0.6]]])
    np.testing.assert_allclose(categorical_nll(probs, [0, 1]), -np.mean(np.log([0.8, 0.7])))
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2, 0.3], [0, 1, 2])


# --- seeding and config --------------------------------------------------

def test_splitmix64_reference_value():
    assert splitmix64(0) == 0xE220A8397B1DCDAF
    assert derive_seed(1, 2) != derive_seed(2, 1)


def test_config_mapping_roundtrip_and_validation():
    c = TrainConfig(iterations=7, lr=0.5, score_hidden="4")
    back = TrainConfig.from_mapping({k: str(v) for k, v in c.to_mapping().items()})
    assert back == c
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(method="mcmc")
    with pytest.raises(ValueError):
        TrainConfig(num_inducing=0)
    cos = TrainConfig(lr=1.0, lr_schedule="cosine", iterations=10)
    assert cos.lr_at(0) == 1.0 and cos.lr_at(5) == pytest.approx(0.5)


def test_adam_single_step():
    p = dc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([0.5, -4.0])
    opt.step()
    # first bias-corrected Adam step moves each coordinate by lr * sign(grad)
    np.testing.assert_allclose(p.values, [0.9, -1.9], rtol=1e-6)


# --- training ------------------------------------------------------------

def sine(N=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (N, 1))
    return Dataset(X, np.sin(3 * X) + 0.1 * rng.standard_normal((N, 1)))


def quick(**kw):
    base = dict(layers=2, num_inducing=6, batch_size=16, iterations=6, n_mc=2, S=5,
                score_hidden="16", checkpoint_every=3, n_mc_eval=8)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_zero_leaves_parameters():
    config = quick(lr=0.0)
    from ddvi.training import build_model
    before = build_model(config, 1, X=sine().X).state_arrays()
    after = train(config, sine()).model.state_arrays()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


@pytest.mark.parametrize("method", ["ddvi", "dsvi"])
def test_identical_seed_identical_checkpoint(method):
    a = train(quick(method=method), sine()).checkpoint
    b = train(quick(method=method), sine()).checkpoint
    assert ckpt_io.to_bytes(a) == ckpt_io.to_bytes(b)


def test_resume_matches_uninterrupted(tmp_path):
    full = train(quick(iterations=6), sine())
    half = train(quick(iterations=3), sine())
    ck = ckpt_io.from_bytes(ckpt_io.to_bytes(half.checkpoint))
    resumed = train(quick(iterations=6), sine(), resume=ck)
    assert ckpt_io.to_bytes(resumed.checkpoint) == ckpt_io.to_bytes(full.checkpoint)


def test_metric_stream(tmp_path):
    train(quick(), sine(), out_dir=str(tmp_path))
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == METRIC_HEADER
    its = [int(r[0]) for r in rows[1:]]
    assert its == sorted(its) == list(range(6))
    for r in rows[1:]:
        v = [float(x) for x in r[1:]]
        assert v[0] == pytest.approx(v[1] + v[2] - v[3] - v[4], rel=1e-8, abs=1e-8)
    assert ckpt_io.load(tmp_path / "checkpoint.ddvi").config["state.iteration"] == "6"


def test_non_finite_bound_aborts_with_last_good(tmp_path):
    d = sine()
    d.y[3, 0] = np.inf
    with np.errstate(invalid="ignore", over="ignore"), pytest.raises(TrainingAborted) as exc:
        train(quick(batch_size=64), d, out_dir=str(tmp_path))
    assert exc.value.checkpoint.config["state.iteration"] == 0
    assert ckpt_io.load(tmp_path / "checkpoint.ddvi").config["state.iteration"] == "0"


def test_sine_regression_elbo_improves():
    config = quick(iterations=2000, num_inducing=16, score_hidden="64,64", n_mc=2, S=10,
                   batch_size=32, checkpoint_every=1000)
    hist = np.array(train(config, sine(N=64)).history)
    assert hist[-100:, 1].mean() > hist[:100, 1].mean()


# --- prediction ----------------------------------------------------------

def test_predict_single_sample_deterministic():
    model = train(quick(), sine()).model
    X = np.linspace(-1, 1, 5)[:, None]
    a = predict(model, X, 1, np.random.default_rng(4)).samples
    b = predict(model, X, 1, np.random.default_rng(4)).samples
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        predict(model, np.zeros((2, 3)), 1, np.random.default_rng(0))


def test_classification_probabilities_normalized():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (30, 2))
    d = Dataset(X, (X[:, 0] > 0).astype(int) + (X[:, 1] > 0.5), task="classification")
    res = train(quick(), d)
    pred = predict(res.model, X, 4, np.random.default_rng(1))
    np.testing.assert_allclose(pred.sample_probs.sum(axis=2), 1.0, rtol=1e-12)
    m = metrics(pred, d.y)
    assert set(m) == {"accuracy", "nll"} and 0 <= m["accuracy"] <= 1


def test_predictive_mean_matches_exact_gp():
    inst = conjugate_instance(0, N=40, M=8, lengthscale=0.3)
    post = inst.exact()
    model = inst.model(meanfield=True)
    set_meanfield_to(model, post)
    X_star = np.linspace(-0.8, 0.8, 7)[:, None]
    n = 4000
    pred = predict(model, X_star, n, np.random.default_rng(2))
    Kzz = rbf_gram(inst.Z, inst.Z, inst.hyper).values + 1e-6 * np.eye(len(inst.Z))
    A = rbf_gram(X_star, inst.Z, inst.hyper).values @ np.linalg.inv(Kzz)
    exact_mean = A @ post.mean
    se = pred.samples[:, :, 0].std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(pred.mean[:, 0] - exact_mean.ravel()) < 3.5 * se)


def test_regression_metrics_denormalized():
    d = sine()
    pre = Preprocessor.fit(d)
    res = train(quick(), pre.transform(d), preprocessor=pre)
    pred = predict(res.model, pre.transform_X(d.X), 8, np.random.default_rng(0), pre)
    m = metrics(pred, d.y)
    assert set(m) == {"rmse", "nll"}
    assert m["rmse"] == pytest.approx(rmse(pred.mean, d.y))
    config, model, pre2 = restore(res.checkpoint)
    np.testing.assert_array_equal(pre2.y_std, pre.y_std)
    assert config == quick()
