"""Datasets, condition bookkeeping, train/test splits and a synthetic generator.

Dataset file format (UTF-8 CSV)::

    condition,group,<feature_1>,...,<feature_d>
    control,lineA,0.12,-1.5,...
    drug0-100,lineA,0.31,-0.2,...

``condition`` is a label (``control`` or ``drug[+drug...][-dose]``),
``group`` is free text carried along but unused by the model. Values are
written with ``repr`` so a save/load round trip is bit-exact. An optional
companion CSV ``condition,drugs,dose`` (drugs joined by ``+``) overrides
label parsing.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditioning import CONTROL, RawCondition, canonical_label
from .exceptions import ConfigError, DataError

SCENARIOS = ("id", "dose_ood", "drug_ood", "k_fold_drug_ood")


class CellDataset:
    """Cells-by-features matrix with one condition label per cell."""

    def __init__(self, X, labels, groups=None, feature_names=None, conditions=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"expression matrix must be 2-D, got shape {X.shape}")
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            r, c = bad[0]
            raise DataError(f"non-finite value at row {r}, column {c}")
        labels = np.array([canonical_label(lab) for lab in labels], dtype=object)
        if labels.shape != (X.shape[0],):
            raise DataError(f"{labels.size} labels for {X.shape[0]} cells")
        if not np.any(labels == CONTROL):
            raise DataError("dataset has no control cells")
        groups = np.array([""] * X.shape[0] if groups is None else [str(g) for g in groups], dtype=object)
        if groups.shape != labels.shape:
            raise DataError("one group tag per cell required")
        names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names")

        self.X = X
        self.labels = labels
        self.groups = groups
        self.feature_names = names
        self._conditions = {}
        for lab in self.condition_labels:
            given = (conditions or {}).get(lab)
            self._conditions[lab] = given if given is not None else RawCondition.from_label(lab)

    @property
    def n_cells(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def condition_labels(self):
        """Sorted treatment labels, control excluded."""
        return sorted(set(self.labels) - {CONTROL})

    def condition(self, label):
        label = canonical_label(label)
        if label not in self._conditions:
            raise DataError(f"unknown condition {label!r}")
        return self._conditions[label]

    @property
    def drugs(self):
        return sorted({d for c in self._conditions.values() for d in c.drug_ids})

    def rows(self, label):
        return np.flatnonzero(self.labels == canonical_label(label))

    def subset(self, rows):
        rows = np.asarray(rows)
        keep = {lab: self._conditions[lab] for lab in set(self.labels[rows]) - {CONTROL}}
        return CellDataset(self.X[rows], self.labels[rows], self.groups[rows], self.feature_names, keep)

    def restrict_to_drugs(self, drugs):
        """Control cells plus conditions made only of ``drugs``."""
        wanted = {d.lower() for d in drugs}
        unknown = wanted - set(self.drugs)
        if unknown:
            raise DataError(f"drugs not in dataset: {sorted(unknown)}")
        keep = [lab for lab in self.condition_labels if set(self._conditions[lab].drug_ids) <= wanted]
        mask = np.isin(self.labels, [CONTROL, *keep])
        return self.subset(np.flatnonzero(mask))


def save_dataset(path, dataset, conditions_path=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["condition", "group", *dataset.feature_names])
        for lab, grp, row in zip(dataset.labels, dataset.groups, dataset.X):
            writer.writerow([lab, grp, *map(repr, row.tolist())])
    if conditions_path is not None:
        with open(conditions_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["condition", "drugs", "dose"])
            for lab in dataset.condition_labels:
                c = dataset.condition(lab)
                writer.writerow([lab, "+".join(c.drug_ids), "" if c.dose is None else repr(c.dose)])


def _read_conditions(path):
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["condition", "drugs", "dose"]:
            raise DataError(f"{path}: header must be condition,drugs,dose")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns")
            try:
                dose = float(row[2]) if row[2].strip() else None
            except ValueError:
                raise DataError(f"{path}:{lineno}: dose {row[2]!r} is not numeric") from None
            cond = RawCondition(tuple(row[1].split("+")), dose)
            out[canonical_label(row[0])] = cond
    return out


def load_dataset(path, conditions_path=None):
    """Parse a dataset file; errors name the offending row and column."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["condition", "group"] or len(header) < 3:
            raise DataError(f"{path}: header must be condition,group,<features...>")
        names = header[2:]
        seen = set()
        for col, name in enumerate(names, start=3):
            if name in seen:
                raise DataError(f"{path}: duplicate header column {name!r} (column {col})")
            seen.add(name)
        labels, groups, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            values = []
            for col, text in enumerate(row[2:], start=3):
                try:
                    v = float(text)
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {col} ({names[col - 3]}): {text!r} is not numeric") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {lineno}, column {col} ({names[col - 3]}): non-finite value {text!r}")
                values.append(v)
            try:
                labels.append(canonical_label(row[0]))
            except DataError as exc:
                raise DataError(f"{path}: row {lineno}, column 1: {exc}") from None
            groups.append(row[1])
            rows.append(values)
    if CONTROL not in labels:
        raise DataError(f"{path}: no control rows")
    conditions = _read_conditions(conditions_path) if conditions_path else None
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return CellDataset(X, labels, groups, names, conditions)


@dataclass
class SplitPlan:
    """Row indices per condition; ``probe`` rows of OOD conditions are reserved
    for placing them in a MoA embedding and never used in training or testing."""

    scenario: str
    train: dict
    test: dict
    ood_conditions: list
    probe: dict = field(default_factory=dict)
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def train_conditions(self):
        return sorted(lab for lab, idx in self.train.items() if lab != CONTROL and len(idx))

    @property
    def test_conditions(self):
        return sorted(lab for lab, idx in self.test.items() if lab != CONTROL and len(idx))

    def training_rows(self):
        """Every row a training artifact may see: all train lists, control included."""
        return np.sort(np.concatenate([np.asarray(v, dtype=np.int64) for v in self.train.values()]))

    def to_json(self):
        def enc(d):
            return {k: [int(i) for i in v] for k, v in sorted(d.items())}

        return json.dumps(
            {
                "scenario": self.scenario,
                "seed": self.seed,
                "params": self.params,
                "ood_conditions": self.ood_conditions,
                "train": enc(self.train),
                "test": enc(self.test),
                "probe": enc(self.probe),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)

        def dec(d):
            return {k: np.asarray(v, dtype=np.int64) for k, v in d.items()}

        return cls(obj["scenario"], dec(obj["train"]), dec(obj["test"]), obj["ood_conditions"],
                   dec(obj["probe"]), obj["seed"], obj["params"])


def drug_folds(drugs, fold_size, seed):
    """Shuffle drugs and cut them into ``ceil(K / fold_size)`` near-equal folds."""
    drugs = sorted(drugs)
    if fold_size < 1:
        raise ConfigError("fold_size must be at least 1")
    order = np.random.default_rng(seed).permutation(len(drugs))
    n_folds = math.ceil(len(drugs) / fold_size)
    return [[drugs[i] for i in sorted(chunk)] for chunk in np.array_split(order, n_folds)]


def _split_rows(rows, fraction, rng):
    rows = rng.permutation(rows)
    n_test = int(round(fraction * rows.size))
    return np.sort(rows[n_test:]), np.sort(rows[:n_test])


def make_split(dataset, scenario="id", params=None, seed=0):
    """Seeded plan for one evaluation scenario.

    ``params`` keys: ``test_fraction`` (0.2), ``holdout_doses`` (dose_ood),
    ``holdout_drugs`` (drug_ood), ``fold_size`` and ``fold`` (k_fold_drug_ood),
    ``probe_fraction`` (0.2; share of each OOD condition set aside as probe).
    Control cells are split train/test like any ID condition.
    """
    params = dict(params or {})
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    frac = float(params.get("test_fraction", 0.2))
    probe_frac = float(params.get("probe_fraction", 0.2))
    if not 0 <= frac < 1 or not 0 <= probe_frac < 1:
        raise ConfigError("test_fraction and probe_fraction must lie in [0, 1)")

    labels = dataset.condition_labels
    if scenario == "id":
        ood = []
    elif scenario == "dose_ood":
        doses = [float(d) for d in params.get("holdout_doses", [])]
        if not doses:
            raise ConfigError("dose_ood needs holdout_doses")
        present = {dataset.condition(lab).dose for lab in labels}
        missing = [d for d in doses if d not in present]
        if missing:
            raise DataError(f"held-out doses not in dataset: {missing}")
        ood = [lab for lab in labels if dataset.condition(lab).dose in doses]
    else:
        if scenario == "drug_ood":
            held = [str(d).lower() for d in params.get("holdout_drugs", [])]
            if not held:
                raise ConfigError("drug_ood needs holdout_drugs")
        else:
            folds = drug_folds(dataset.drugs, int(params.get("fold_size", 9)), seed)
            fold = int(params.get("fold", 0))
            if not 0 <= fold < len(folds):
                raise ConfigError(f"fold must lie in [0, {len(folds)}), got {fold}")
            held = folds[fold]
            params["folds"] = folds
        missing = sorted(set(held) - set(dataset.drugs))
        if missing:
            raise DataError(f"held-out drugs not in dataset: {missing}")
        ood = [lab for lab in labels if set(dataset.condition(lab).drug_ids) & set(held)]

    streams = np.random.SeedSequence(seed).spawn(len(labels) + 1)
    train, test, probe = {}, {}, {}
    for lab, stream in zip([CONTROL, *labels], streams):
        rng = np.random.default_rng(stream)
        rows = dataset.rows(lab)
        if lab in ood:
            rest, held_probe = _split_rows(rows, probe_frac, rng)
            train[lab] = np.zeros(0, dtype=np.int64)
            test[lab] = rest
            probe[lab] = held_probe
        else:
            train[lab], test[lab] = _split_rows(rows, frac, rng)
    return SplitPlan(scenario, train, test, sorted(ood), probe, int(seed), params)


def sample_indices(plan, condition, size, role, rng, split="train"):
    """Row indices drawn uniformly with replacement."""
    if role not in ("source", "target"):
        raise ValueError(f"role must be 'source' or 'target', got {role!r}")
    lists = {"train": plan.train, "test": plan.test, "probe": plan.probe}[split]
    key = CONTROL if role == "source" else canonical_label(condition)
    pool = np.asarray(lists.get(key, []), dtype=np.int64)
    if pool.size == 0:
        raise DataError(f"no {split} rows for {key!r}")
    return pool[rng.integers(0, pool.size, size=int(size))]


def sample_batch(dataset, plan, condition, size, role, rng, split="train"):
    """``size`` cells of the control (source) or the condition (target)."""
    return dataset.X[sample_indices(plan, condition, size, role, rng, split)]


@dataclass
class SynthSpec:
    """Control cells are a Gaussian mixture on a ``intrinsic_dim``-dimensional
    subspace of feature space. Drug ``j`` at dose ``s`` maps a control draw
    ``z`` to ``(1 + sigma(s) (kappa_j - 1)) z + sigma(s) b_j`` in that subspace.

    ``dose_response`` is ``hill`` (``s^h / (s^h + ec50^h)``), ``loglinear``
    (``log1p(s) / log1p(max dose)``) or ``none`` (scale 1).
    ``shift_correlation`` mixes a shared direction into every ``b_j``.
    """

    n_drugs: int = 3
    doses: tuple = (10.0, 100.0, 1000.0, 10000.0)
    cells_per_condition: int = 500
    n_controls: int = None
    n_features: int = 30
    intrinsic_dim: int = 10
    n_clusters: int = 3
    cluster_scale: float = 2.0
    noise: float = 0.5
    shift_norm: float = 4.0
    shift_correlation: float = 0.0
    cov_scale_range: tuple = (1.0, 1.0)
    baseline_scale: float = 1.0
    dose_response: str = "hill"
    ec50: float = 300.0
    hill: float = 1.0
    combinations: tuple = ()
    seed: int = 0

    def validate(self):
        if self.n_drugs < 1 or self.cells_per_condition < 1:
            raise ConfigError("n_drugs and cells_per_condition must be positive")
        if not self.doses or any(float(d) <= 0 for d in self.doses):
            raise ConfigError("doses must be a non-empty list of positive values")
        if not 1 <= self.intrinsic_dim <= self.n_features:
            raise ConfigError("intrinsic_dim must lie in [1, n_features]")
        if self.n_clusters < 1 or self.noise < 0 or self.shift_norm < 0:
            raise ConfigError("n_clusters >= 1, noise >= 0 and shift_norm >= 0 required")
        if not 0 <= self.shift_correlation <= 1:
            raise ConfigError("shift_correlation must lie in [0, 1]")
        lo, hi = self.cov_scale_range
        if not 0 < lo <= hi:
            raise ConfigError("cov_scale_range must satisfy 0 < low <= high")
        if self.dose_response not in ("hill", "loglinear", "none"):
            raise ConfigError(f"unknown dose_response {self.dose_response!r}")
        for combo in self.combinations:
            if len(combo) < 2 or any(not 0 <= int(j) < self.n_drugs for j in combo):
                raise ConfigError(f"bad combination {combo!r}")
        return self

    def dose_scale(self, dose):
        if self.dose_response == "none":
            return 1.0
        if self.dose_response == "loglinear":
            return math.log1p(dose) / math.log1p(max(self.doses))
        s = dose**self.hill
        return s / (s + self.ec50**self.hill)

    def to_dict(self):
        d = asdict(self)
        d["doses"] = list(d["doses"])
        d["cov_scale_range"] = list(d["cov_scale_range"])
        d["combinations"] = [list(c) for c in d["combinations"]]
        return d


def _unit(v):
    return v / np.linalg.norm(v)


def generate_synthetic(spec=None):
    """Returns ``(dataset, truth)``; ``truth`` holds every ground-truth quantity."""
    spec = (spec or SynthSpec()).validate()
    q, d, K = spec.intrinsic_dim, spec.n_features, spec.n_clusters
    ss = np.random.SeedSequence(spec.seed)
    geo_ss, drug_ss, cell_ss = ss.spawn(3)
    geo = np.random.default_rng(geo_ss)
    basis = np.linalg.qr(geo.normal(size=(d, q)))[0].T  # q x d, orthonormal rows
    baseline = spec.baseline_scale * geo.normal(size=d)
    centers = spec.cluster_scale * geo.normal(size=(K, q))
    centers -= centers.mean(axis=0)

    drug_rng = np.random.default_rng(drug_ss)
    names = [f"drug{j}" for j in range(spec.n_drugs)]
    common = drug_rng.normal(size=q)
    rho = spec.shift_correlation
    shifts = {}
    kappas = {}
    for name in names:
        own = drug_rng.normal(size=q)
        shifts[name] = spec.shift_norm * _unit(math.sqrt(rho) * _unit(common) + math.sqrt(1 - rho) * _unit(own))
        kappas[name] = float(drug_rng.uniform(*spec.cov_scale_range))

    groups_of = [(names[j],) for j in range(spec.n_drugs)]
    groups_of += [tuple(names[int(j)] for j in combo) for combo in spec.combinations]
    conditions = [RawCondition(g, dose) for g in groups_of for dose in spec.doses]

    def draw(n, rng):
        assign = np.arange(n) % K
        return centers[assign] + spec.noise * rng.normal(size=(n, q))

    cell_streams = cell_ss.spawn(len(conditions) + 1)
    n_ctrl = spec.n_controls if spec.n_controls is not None else spec.cells_per_condition
    blocks = [draw(n_ctrl, np.random.default_rng(cell_streams[0])) @ basis + baseline]
    labels = [CONTROL] * n_ctrl
    truth_conditions = {}
    for cond, stream in zip(conditions, cell_streams[1:]):
        sigma = spec.dose_scale(cond.dose)
        b = np.mean([shifts[n] for n in cond.drug_ids], axis=0)
        kappa = float(np.mean([kappas[n] for n in cond.drug_ids]))
        scale = 1.0 + sigma * (kappa - 1.0)
        z = draw(spec.cells_per_condition, np.random.default_rng(stream))
        blocks.append((scale * z + sigma * b) @ basis + baseline)
        labels += [cond.label] * spec.cells_per_condition
        truth_conditions[cond.label] = {
            "drugs": list(cond.drug_ids),
            "dose": cond.dose,
            "dose_scale": sigma,
            "latent_shift": (sigma * b).tolist(),
            "mean_shift": ((sigma * b) @ basis).tolist(),
            "cov_scale": scale,
        }
    X = np.vstack(blocks)
    truth = {
        "spec": spec.to_dict(),
        "basis": basis.tolist(),
        "baseline": baseline.tolist(),
        "centers": centers.tolist(),
        "drugs": {n: {"latent_shift": shifts[n].tolist(), "cov_scale": kappas[n]} for n in names},
        "conditions": truth_conditions,
    }
    groups = np.full(X.shape[0], "synthetic", dtype=object)
    dataset = CellDataset(X, labels, groups, [f"g{i}" for i in range(d)], {c.label: c for c in conditions})
    return dataset, truth
