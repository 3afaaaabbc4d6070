import numpy as np
import pytest
from conftest import central_difference, relative_error
from sklearn.base import clone

from cmonge.autoencoder import AutoencoderConfig, decode, encode, train_autoencoder
from cmonge.conditioning import DrugEmbeddingTable, RawCondition
from cmonge.data import CellDataset, SplitPlan, make_split
from cmonge.exceptions import ConfigError, NotFittedError
from cmonge.monge import conditional_loss_step
from cmonge.nn import mlp_forward
from cmonge.trainer import (
    ConditionalMongeMap,
    TrainConfig,
    init_map_model,
    load_map_model,
    loss_and_grad,
    predict,
    sample_condition,
    save_map_model,
    train_map,
    transport_latent,
)

SHIFT = np.array([3.0, -2.0, 1.0, 2.0])


def _shift_dataset(seed=0, n=300):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(n, 4)), rng.normal(size=(n, 4)) + SHIFT])
    return CellDataset(X, ["control"] * n + ["a-10"] * n)


def _multi_dataset():
    rng = np.random.default_rng(1)
    labels, blocks = [], []
    for lab, s in [("control", 0.0), ("a-10", 1.0), ("a-100", 2.0), ("b-10", -1.0), ("a+b-10", 0.5)]:
        blocks.append(rng.normal(size=(40, 4)) + s)
        labels += [lab] * 40
    return CellDataset(np.vstack(blocks), labels)


def _table():
    rng = np.random.default_rng(2)
    return DrugEmbeddingTable({"a": rng.normal(size=3), "b": rng.normal(size=3)}, source="fingerprint")


@pytest.fixture(scope="module")
def trained_shift():
    ds = _shift_dataset()
    plan = make_split(ds, "id", seed=0)
    model = init_map_model(4, "none", (32, 32), epsilon=1.0, seed=0)
    model, history = train_map(model, ds, plan, TrainConfig(1000, 64, 1e-3, 0.0, seed=1))
    return ds, plan, model, history


def test_loss_decreases_on_shift_dataset(trained_shift):
    totals = trained_shift[3].totals()
    assert len(totals) == 1000
    assert totals[-50:].mean() < 0.1 * totals[0]


def test_trained_map_recovers_translation(trained_shift):
    ds, plan, model, _ = trained_shift
    src = ds.X[plan.test["control"]]
    moved = predict(model, None, src, ds.condition("a-10")).mean(axis=0) - src.mean(axis=0)
    assert np.linalg.norm(moved - SHIFT) < 0.1 * np.linalg.norm(SHIFT)


def test_history_is_deterministic_text(trained_shift):
    text = trained_shift[3].to_csv()
    lines = text.splitlines()
    assert lines[0] == "step,condition,fitting_term,gap_term,total"
    assert len(lines) == 1001 and lines[1].startswith("0,a-10,")


@pytest.fixture(scope="module")
def small_ae():
    X = _multi_dataset().X
    return train_autoencoder(X, AutoencoderConfig(latent_dim=3, hidden=(8,), epochs=3, batch_size=32))


def test_zero_map_is_autoencoder_round_trip(small_ae):
    model = init_map_model(3, "drug_dose", (6, 6), _table(), drug_dim=4, seed=0, zero_output=True)
    X = _multi_dataset().X[:20]
    out = predict(model, small_ae, X, RawCondition(("a", "b"), 10))
    assert out.tobytes() == decode(small_ae, encode(small_ae, X)).tobytes()


def test_single_cell_prediction(small_ae):
    model = init_map_model(3, "dose", (6,), seed=0)
    assert predict(model, small_ae, np.zeros((1, 4)), RawCondition(("a",), 10)).shape == (1, 4)


def test_condition_sampling_is_uniform():
    rng = np.random.default_rng(0)
    conds = ["a", "b", "c", "d", "e"]
    n = 100_000
    draws = [sample_condition(rng, conds) for _ in range(n)]
    counts = np.array([draws.count(c) for c in conds])
    p = 1 / len(conds)
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def _run(ds, plan, ae, seed=3, mode="drug_dose"):
    table = _table() if mode == "drug_dose" else None
    model = init_map_model(3 if ae else 4, mode, (8,), table, drug_dim=4, epsilon=1.0, seed=seed)
    return train_map(model, ds, plan, TrainConfig(15, 16, 1e-3, 1e-5, seed=seed), ae)


def test_training_leaves_autoencoder_untouched(small_ae):
    ds = _multi_dataset()
    plan = make_split(ds, "id", seed=0)
    before = [a.copy() for a in small_ae.encoder.arrays() + small_ae.decoder.arrays()]
    _run(ds, plan, small_ae)
    after = small_ae.encoder.arrays() + small_ae.decoder.arrays()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(before, after))


def test_training_is_deterministic(small_ae):
    ds = _multi_dataset()
    plan = make_split(ds, "id", seed=0)
    (m1, h1), (m2, h2) = _run(ds, plan, small_ae), _run(ds, plan, small_ae)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(m1.trainable(), m2.trainable()))
    assert h1.to_csv() == h2.to_csv()
    m3, _ = _run(ds, plan, small_ae, seed=4)
    assert m3.trainable()[0].tobytes() != m1.trainable()[0].tobytes()


def test_each_step_uses_one_training_condition():
    ds = _multi_dataset()
    plan = make_split(ds, "id", seed=0)
    _, hist = _run(ds, plan, None, mode="dose")
    assert len(hist.records) == 15
    assert {r.condition for r in hist.records} <= set(plan.train_conditions)


def test_unconditional_mode_reduces_to_plain_objective():
    rng = np.random.default_rng(5)
    Z, Y = rng.normal(size=(10, 2)), rng.normal(size=(10, 2)) + 1
    model = init_map_model(2, "none", (5,), epsilon=1.0, seed=1)
    report, grads = loss_and_grad(model, Z, Y, None)
    T = Z + mlp_forward(model.monge_net, Z)[0]
    direct = conditional_loss_step(Z, T, Y, 1.0, 1e-2)
    assert report.total == direct.total
    assert len(grads) == len(model.trainable())


@pytest.mark.parametrize("mode", ["none", "dose", "drug_dose"])
def test_end_to_end_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(7)
    Z = 0.5 * rng.normal(size=(8, 3))
    Y = 0.5 * rng.normal(size=(8, 3)) + 0.3
    table = _table() if mode == "drug_dose" else None
    model = init_map_model(3, mode, (5, 4), table, drug_dim=3, epsilon=0.5, lambda_=0.5, seed=2)
    cond = RawCondition(("a", "b"), 100)
    kw = {"max_iter": 20000, "tol": 1e-11}
    _, grads = loss_and_grad(model, Z, Y, cond, **kw)
    params = model.trainable()
    for k, arr in enumerate(params):

        def f(a, k=k):
            p = list(params)
            p[k] = a
            return loss_and_grad(model.with_trainable(p), Z, Y, cond, **kw)[0].total

        assert relative_error(grads[k], central_difference(f, arr.copy(), h=1e-5)) < 1e-3


@pytest.mark.parametrize("mode", ["none", "dose", "drug_dose"])
def test_checkpoint_round_trip(tmp_path, mode):
    table = _table() if mode == "drug_dose" else None
    model = init_map_model(3, mode, (5,), table, drug_dim=4, epsilon=0.3, lambda_=0.02, seed=9)
    save_map_model(tmp_path / "m.bin", model, seed=9, step=12)
    back, meta = load_map_model(tmp_path / "m.bin")
    assert meta["step"] == 12 and meta["seed"] == 9
    assert back.context_mode == mode and back.epsilon == 0.3 and back.lambda_ == 0.02
    assert all(x.tobytes() == y.tobytes() for x, y in zip(model.trainable(), back.trainable()))
    Z = np.random.default_rng(0).normal(size=(4, 3))
    cond = RawCondition(("a",), 10)
    assert transport_latent(back, Z, cond).tobytes() == transport_latent(model, Z, cond).tobytes()


def test_training_preflight_errors():
    ds = _multi_dataset()
    plan = make_split(ds, "id", seed=0)
    model = init_map_model(4, "dose", (4,), seed=0)
    empty = SplitPlan("id", {**plan.train, "a-10": np.zeros(0, dtype=np.int64)}, plan.test, [])
    with pytest.raises(ConfigError, match="a-10"):
        train_map(model, ds, empty, TrainConfig(1), conditions=["a-10"])
    with pytest.raises(ConfigError):
        train_map(init_map_model(3, "dose", (4,), seed=0), ds, plan, TrainConfig(1))
    with pytest.raises(ConfigError):
        init_map_model(4, "drug_dose")


def test_estimator_api():
    ds = _shift_dataset(n=60)
    est = ConditionalMongeMap(context_mode="dose", hidden=(8,), epsilon=1.0, n_iter=5, batch_size=16)
    with pytest.raises(NotFittedError):
        est.predict(ds.X[:2], "a-10")
    est.fit(ds.X, ds.labels)
    assert est.conditions_ == ["a-10"]
    assert est.predict(ds.X[:3], "a-10").shape == (3, 4)
    assert est.transform_latent(ds.X[:3], RawCondition(("a",), 10)).shape == (3, 4)
    assert clone(est).get_params()["n_iter"] == 5
    with pytest.raises(ValueError):
        est.predict(np.zeros((1, 5)), "a-10")
