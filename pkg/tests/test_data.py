import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmonge.conditioning import CONTROL
from cmonge.data import (
    CellDataset,
    SplitPlan,
    SynthSpec,
    drug_folds,
    generate_synthetic,
    load_dataset,
    make_split,
    sample_batch,
    sample_indices,
    save_dataset,
)
from cmonge.exceptions import ConfigError, DataError


def test_minimal_file_loads(tmp_path):
    (tmp_path / "d.csv").write_text("condition,group,g1,g2\ncontrol,x,0.0,1.0\nDrugA-10,x,1.5,2\ndruga-10.0,y,3,4\n")
    ds = load_dataset(tmp_path / "d.csv")
    assert ds.n_cells == 3 and ds.n_features == 2
    assert ds.condition_labels == ["druga-10"]
    assert sorted(set(ds.labels)) == ["control", "druga-10"]
    assert list(ds.groups) == ["x", "x", "y"]
    assert ds.condition("druga-10").dose == 10.0


@pytest.mark.parametrize(
    "body, where",
    [
        ("control,x,0.0,inf\n", "row 2, column 4"),
        ("control,x,0.0,1\ncontrol,x,nan,1\n", "row 3, column 3"),
        ("control,x,0.0,abc\n", "row 2, column 4"),
        ("control,x,0.0\n", "row 2"),
    ],
)
def test_bad_values_are_located(tmp_path, body, where):
    (tmp_path / "d.csv").write_text("condition,group,g1,g2\n" + body)
    with pytest.raises(DataError, match=where):
        load_dataset(tmp_path / "d.csv")


def test_structural_errors(tmp_path):
    (tmp_path / "dup.csv").write_text("condition,group,g1,g1\ncontrol,x,0,1\n")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(tmp_path / "dup.csv")
    (tmp_path / "noctl.csv").write_text("condition,group,g1\na-1,x,0\n")
    with pytest.raises(DataError, match="control"):
        load_dataset(tmp_path / "noctl.csv")
    (tmp_path / "hdr.csv").write_text("label,g1\ncontrol,0\n")
    with pytest.raises(DataError, match="header"):
        load_dataset(tmp_path / "hdr.csv")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing.csv")


def test_dataset_invariants():
    with pytest.raises(DataError):
        CellDataset(np.zeros((2, 2)), ["a-1", "a-1"])
    with pytest.raises(DataError, match="row 1, column 0"):
        CellDataset(np.array([[0.0, 0.0], [np.nan, 0.0]]), ["control", "a-1"])
    with pytest.raises(DataError):
        CellDataset(np.zeros((2, 2)), ["control", "a-1"], feature_names=["x", "x"])


def test_save_load_round_trip_is_bit_exact(tmp_path):
    ds, _ = generate_synthetic(SynthSpec(n_drugs=2, doses=(1.5, 20), cells_per_condition=7, n_features=5, intrinsic_dim=2))
    save_dataset(tmp_path / "d.csv", ds, tmp_path / "c.csv")
    back = load_dataset(tmp_path / "d.csv", tmp_path / "c.csv")
    assert back.X.tobytes() == ds.X.tobytes()
    assert list(back.labels) == list(ds.labels)
    assert back.feature_names == ds.feature_names
    assert all(back.condition(lab) == ds.condition(lab) for lab in ds.condition_labels)


def test_companion_file_overrides_label_parsing(tmp_path):
    (tmp_path / "d.csv").write_text("condition,group,g1\ncontrol,x,0\nmix,x,1\n")
    (tmp_path / "c.csv").write_text("condition,drugs,dose\nmix,B+a,5\n")
    ds = load_dataset(tmp_path / "d.csv", tmp_path / "c.csv")
    assert ds.condition("mix").drug_ids == ("a", "b") and ds.condition("mix").dose == 5.0


def _grid(n_drugs=2, doses=(10, 100), cells=100):
    labels = ["control"] * cells
    for j in range(n_drugs):
        for s in doses:
            labels += [f"d{j}-{s}"] * cells
    X = np.random.default_rng(0).normal(size=(len(labels), 3))
    return CellDataset(X, labels)


def test_id_split_is_stratified_80_20():
    plan = make_split(_grid(), "id", seed=1)
    assert plan.ood_conditions == []
    for lab in ["control", "d0-10", "d0-100", "d1-10", "d1-100"]:
        assert len(plan.train[lab]) == 80 and len(plan.test[lab]) == 20
        assert not set(plan.train[lab]) & set(plan.test[lab])


def test_drug_ood_holds_every_dose():
    ds = _grid(doses=(1, 10, 100, 1000), cells=20)
    plan = make_split(ds, "drug_ood", {"holdout_drugs": ["d1"]}, seed=0)
    assert plan.ood_conditions == ["d1-1", "d1-10", "d1-100", "d1-1000"]
    assert all(len(plan.train[lab]) == 0 for lab in plan.ood_conditions)
    assert plan.train_conditions == ["d0-1", "d0-10", "d0-100", "d0-1000"]
    assert set(plan.test_conditions) == set(ds.condition_labels)


def test_dose_ood_holds_dose_of_every_drug():
    plan = make_split(_grid(doses=(10, 100, 1000)), "dose_ood", {"holdout_doses": [100]}, seed=0)
    assert plan.ood_conditions == ["d0-100", "d1-100"]


def test_ood_rows_never_reach_training():
    ds = _grid(n_drugs=3, cells=50)
    plan = make_split(ds, "drug_ood", {"holdout_drugs": ["d2"], "probe_fraction": 0.2}, seed=4)
    train_rows = set(plan.training_rows().tolist())
    for lab in plan.ood_conditions:
        ood_rows = set(ds.rows(lab).tolist())
        assert not ood_rows & train_rows
        assert set(plan.probe[lab]) | set(plan.test[lab]) == ood_rows
        assert not set(plan.probe[lab]) & set(plan.test[lab])
        assert len(plan.probe[lab]) == 10


def test_split_errors():
    ds = _grid()
    with pytest.raises(DataError):
        make_split(ds, "drug_ood", {"holdout_drugs": ["nope"]})
    with pytest.raises(DataError):
        make_split(ds, "dose_ood", {"holdout_doses": [7]})
    with pytest.raises(ConfigError):
        make_split(ds, "drug_ood", {})
    with pytest.raises(ConfigError):
        make_split(ds, "random")


@given(n=st.integers(1, 60), fold_size=st.integers(1, 12), seed=st.integers(0, 1000))
def test_k_fold_covers_each_drug_once(n, fold_size, seed):
    drugs = [f"x{i}" for i in range(n)]
    folds = drug_folds(drugs, fold_size, seed)
    flat = [d for f in folds for d in f]
    assert sorted(flat) == sorted(drugs)
    assert max(len(f) for f in folds) <= fold_size


def test_k_fold_split_uses_fold():
    ds = _grid(n_drugs=20, doses=(1,), cells=5)
    held = set()
    for fold in range(3):
        plan = make_split(ds, "k_fold_drug_ood", {"fold_size": 9, "fold": fold}, seed=2)
        held |= {ds.condition(lab).drug_ids[0] for lab in plan.ood_conditions}
    assert held == set(ds.drugs)
    with pytest.raises(ConfigError):
        make_split(ds, "k_fold_drug_ood", {"fold_size": 9, "fold": 3}, seed=2)


def test_split_is_seeded_and_serializable():
    ds = _grid()
    a, b = make_split(ds, "id", seed=3), make_split(ds, "id", seed=3)
    assert a.to_json() == b.to_json()
    assert make_split(ds, "id", seed=4).to_json() != a.to_json()
    back = SplitPlan.from_json(a.to_json())
    assert back.to_json() == a.to_json()


def test_sampling():
    ds = _grid()
    plan = make_split(ds, "id", seed=0)
    rng = np.random.default_rng(5)
    assert set(sample_indices(plan, "d0-10", 50, "source", rng)) <= set(plan.train[CONTROL])
    assert set(sample_indices(plan, "d0-10", 50, "target", rng, split="test")) <= set(plan.test["d0-10"])
    single = SplitPlan("id", {CONTROL: np.array([7])}, {}, [])
    assert sample_batch(ds, single, None, 1, "source", rng).tolist() == [ds.X[7].tolist()]
    with pytest.raises(DataError):
        sample_indices(single, "d0-10", 1, "target", rng)
    with pytest.raises(ValueError):
        sample_indices(plan, "d0-10", 1, "other", rng)


def test_sampling_stream_determinism():
    plan = make_split(_grid(), "id", seed=0)
    a = sample_indices(plan, "d1-10", 20, "target", np.random.default_rng(9))
    b = sample_indices(plan, "d1-10", 20, "target", np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_sampling_is_uniform():
    pool = np.arange(10)
    plan = SplitPlan("id", {CONTROL: pool}, {}, [])
    n = 100_000
    counts = np.bincount(sample_indices(plan, None, n, "source", np.random.default_rng(0)), minlength=10)
    p = 0.1
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_synthetic_noise_free_shift_is_exact():
    spec = SynthSpec(n_drugs=1, doses=(50.0,), cells_per_condition=30, n_clusters=3, noise=0.0, dose_response="none")
    ds, truth = generate_synthetic(spec)
    diff = ds.X[ds.rows("drug0-50")].mean(axis=0) - ds.X[ds.rows(CONTROL)].mean(axis=0)
    b = np.array(truth["drugs"]["drug0"]["latent_shift"]) @ np.array(truth["basis"])
    np.testing.assert_allclose(diff, b, atol=1e-12)
    np.testing.assert_allclose(truth["conditions"]["drug0-50"]["mean_shift"], b, atol=1e-15)
    # every treated cell is its control counterpart plus b
    np.testing.assert_allclose(ds.X[ds.rows("drug0-50")] - ds.X[ds.rows(CONTROL)], np.tile(b, (30, 1)), atol=1e-12)


def test_synthetic_shift_grows_with_dose():
    ds, truth = generate_synthetic(SynthSpec(cells_per_condition=60))
    ctrl = ds.X[ds.rows(CONTROL)].mean(axis=0)
    for j in range(3):
        norms = [np.linalg.norm(truth["conditions"][f"drug{j}-{s}"]["mean_shift"]) for s in (10, 100, 1000, 10000)]
        assert np.all(np.diff(norms) > 0)
        emp = [np.linalg.norm(ds.X[ds.rows(f"drug{j}-{s}")].mean(axis=0) - ctrl) for s in (10, 1000, 10000)]
        assert emp[0] < emp[1] < emp[2]


def test_synthetic_inventory_and_determinism():
    ds, _ = generate_synthetic(SynthSpec())
    # 3 drugs x 4 doses x 500 cells plus 500 controls
    assert ds.n_cells == 6500
    assert len(ds.condition_labels) == 12
    again, _ = generate_synthetic(SynthSpec())
    assert again.X.tobytes() == ds.X.tobytes()
    other, _ = generate_synthetic(SynthSpec(seed=1))
    assert other.X.tobytes() != ds.X.tobytes()


def test_synthetic_options():
    spec = SynthSpec(
        n_drugs=3, doses=(100,), cells_per_condition=10, shift_correlation=1.0, cov_scale_range=(0.5, 2.0), combinations=((0, 2),)
    )
    ds, truth = generate_synthetic(spec)
    assert "drug0+drug2-100" in ds.condition_labels
    shifts = [np.array(truth["drugs"][f"drug{j}"]["latent_shift"]) for j in range(3)]
    np.testing.assert_allclose(shifts[0], shifts[1], atol=1e-12)
    assert all(0.5 <= truth["drugs"][f"drug{j}"]["cov_scale"] <= 2.0 for j in range(3))
    with pytest.raises(ConfigError):
        SynthSpec(doses=(0,)).validate()
    with pytest.raises(ConfigError):
        SynthSpec(combinations=((0, 7),)).validate()


def test_restrict_to_drugs():
    ds = _grid(n_drugs=3, cells=4)
    sub = ds.restrict_to_drugs(["d1"])
    assert sub.condition_labels == ["d1-10", "d1-100"]
    assert np.sum(sub.labels == CONTROL) == 4
    with pytest.raises(DataError):
        ds.restrict_to_drugs(["zz"])
