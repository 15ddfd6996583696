"""Task corpus management.

Synthetic generators (two concentric circles, five spiral arms, linear
regression surfaces) hide two signal coordinates among standard-Gaussian
noise columns at a seed-dependent permutation position, so every task has its
own attribute space of 2..10 columns. Local tabular files are ingested with
mean/mode imputation, one-hot encoding, and min-max scaling. Episodes are
drawn per class without replacement.

On disk a task is a CSV (attributes then target columns) plus a ``.meta``
sidecar of ``key=value`` lines; a corpus directory adds a ``manifest.csv``
naming each file's split assignment. All generation and sampling is a pure
function of (seed, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    InvalidConfigError,
    InvalidValueError,
    IngestionError,
    TaskNotSampleableError,
)
from .model import CLASSIFICATION, REGRESSION, Episode


@dataclass
class TaskDataset:
    """A full dataset: attribute matrix, label matrix (one-hot or real), and
    provenance describing how it was produced."""

    name: str
    kind: str
    x: np.ndarray                     # (n_examples, n_attributes)
    y: np.ndarray                     # (n_examples, n_targets)
    class_names: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise InvalidConfigError(f"unknown task kind {self.kind!r}")
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise InvalidValueError(
                f"attribute/label shapes disagree: {self.x.shape} vs {self.y.shape}"
            )
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise InvalidValueError(f"task {self.name!r} contains non-finite values")
        if self.kind == CLASSIFICATION:
            if not (np.all(np.isin(self.y, (0.0, 1.0))) and np.all(self.y.sum(axis=1) == 1.0)):
                raise InvalidValueError(f"task {self.name!r}: labels must be one-hot rows")
            if np.any(self.y.sum(axis=0) < 1):
                raise InvalidValueError(f"task {self.name!r}: empty class")
        else:
            mean = self.y.mean(axis=0)
            var = self.y.var(axis=0)
            if np.any(np.abs(mean) > 1e-4) or np.any((np.abs(var - 1.0) > 1e-3) & (var > 1e-12)):
                raise InvalidValueError(
                    f"task {self.name!r}: regression targets must be standardized"
                )

    @property
    def n_examples(self) -> int:
        return self.x.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.x.shape[1]

    @property
    def n_targets(self) -> int:
        return self.y.shape[1]

    def class_counts(self) -> np.ndarray:
        return self.y.sum(axis=0).astype(int)


@dataclass
class CorpusSplit:
    train: list
    validation: list
    test: list
    seed: int = 0

    def all_tasks(self) -> list:
        return list(self.train) + list(self.validation) + list(self.test)


@dataclass
class SamplerConfig:
    """Episode sampling sizes. Classification draws ``shots`` labeled and
    ``unlabeled_per_class`` unlabeled examples per class (or a total unlabeled
    count when ``unlabeled_total`` is set); regression draws flat counts."""

    shots: int = 1
    unlabeled_per_class: int = 20
    unlabeled_total: bool = False
    labeled_count: int = 10
    unlabeled_count: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.shots < 1 or self.unlabeled_per_class < 1:
            raise InvalidConfigError("shots and unlabeled_per_class must be >= 1")
        if self.labeled_count < 1 or self.unlabeled_count < 1:
            raise InvalidConfigError("labeled_count and unlabeled_count must be >= 1")


# -- synthetic generators ---------------------------------------------------


def _hide_signal(signal: np.ndarray, n_attributes: int, rng: np.random.Generator):
    """Append standard-Gaussian noise columns and permute the column order.
    Returns the attribute matrix and the positions of the two signal columns."""
    n = signal.shape[0]
    noise = rng.standard_normal((n, n_attributes - signal.shape[1]))
    base = np.hstack([signal, noise])
    perm = rng.permutation(n_attributes)
    x = base[:, perm]
    positions = [int(np.flatnonzero(perm == j)[0]) for j in range(signal.shape[1])]
    return x, positions


def _check_attribute_count(n_attributes: int) -> None:
    if not 2 <= n_attributes <= 10:
        raise InvalidConfigError(
            f"synthetic tasks use 2..10 attributes, got {n_attributes}"
        )


def _spread_counts(total: int, groups: int) -> list:
    base = total // groups
    counts = [base] * groups
    for i in range(total - base * groups):
        counts[i] += 1
    return counts


def generate_circle_task(seed: int, n_attributes: int, *, n_examples: int = 100,
                         radii=(1.0, 2.0), radial_jitter: float = 0.05,
                         name: str | None = None) -> TaskDataset:
    """Two classes on concentric circles of the given radii, angle uniform,
    radius jittered by N(0, radial_jitter^2)."""
    _check_attribute_count(n_attributes)
    rng = np.random.default_rng(seed)
    counts = _spread_counts(n_examples, len(radii))
    xs, ys = [], []
    for c, (radius, count) in enumerate(zip(radii, counts)):
        angle = rng.uniform(0.0, 2.0 * math.pi, size=count)
        r = radius + (rng.normal(0.0, radial_jitter, size=count) if radial_jitter > 0 else 0.0)
        xs.append(np.column_stack([r * np.cos(angle), r * np.sin(angle)]))
        onehot = np.zeros((count, len(radii)))
        onehot[:, c] = 1.0
        ys.append(onehot)
    x, positions = _hide_signal(np.vstack(xs), n_attributes, rng)
    return TaskDataset(
        name=name or f"circle-{seed}",
        kind=CLASSIFICATION,
        x=x,
        y=np.vstack(ys),
        provenance={
            "generator": "circle",
            "seed": int(seed),
            "signal_columns": f"{positions[0]} {positions[1]}",
            "radial_jitter": float(radial_jitter),
        },
    )


def generate_spiral_task(seed: int, n_attributes: int, *, n_examples: int = 100,
                         arms: int = 5, t_range=(0.25, 2.25),
                         coord_noise: float = 0.03,
                         name: str | None = None) -> TaskDataset:
    """``arms`` spiral arms: parameter t uniform on ``t_range``, angle
    2*pi*t + 2*pi*c/arms, radius t, plus N(0, coord_noise^2) per coordinate."""
    _check_attribute_count(n_attributes)
    rng = np.random.default_rng(seed)
    counts = _spread_counts(n_examples, arms)
    xs, ys = [], []
    for c, count in enumerate(counts):
        t = rng.uniform(t_range[0], t_range[1], size=count)
        angle = 2.0 * math.pi * t + 2.0 * math.pi * c / arms
        pts = np.column_stack([t * np.cos(angle), t * np.sin(angle)])
        if coord_noise > 0:
            pts = pts + rng.normal(0.0, coord_noise, size=pts.shape)
        xs.append(pts)
        onehot = np.zeros((count, arms))
        onehot[:, c] = 1.0
        ys.append(onehot)
    x, positions = _hide_signal(np.vstack(xs), n_attributes, rng)
    return TaskDataset(
        name=name or f"spiral-{seed}",
        kind=CLASSIFICATION,
        x=x,
        y=np.vstack(ys),
        provenance={
            "generator": "spiral",
            "seed": int(seed),
            "signal_columns": f"{positions[0]} {positions[1]}",
            "coord_noise": float(coord_noise),
        },
    )


def generate_circle_spiral_corpus(seed: int, n_tasks: int = 100,
                                  attribute_range=(2, 10)) -> list:
    """Each task is independently circle-or-spiral with probability 1/2 and a
    uniformly drawn attribute count."""
    if n_tasks < 2:
        raise InvalidConfigError("a corpus needs at least two tasks")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        is_circle = rng.random() < 0.5
        m = int(rng.integers(attribute_range[0], attribute_range[1] + 1))
        sub_seed = int(rng.integers(0, 2**63))
        gen = generate_circle_task if is_circle else generate_spiral_task
        tasks.append(gen(sub_seed, m, name=f"task{t:03d}"))
    return tasks


def generate_linear_regression_task(seed: int, n_attributes: int, *,
                                    n_examples: int = 100, signal_dims: int = 2,
                                    noise_std: float = 0.1,
                                    name: str | None = None) -> TaskDataset:
    """Single standardized target that is linear in ``signal_dims`` hidden
    signal columns; the remaining columns are pure noise."""
    _check_attribute_count(n_attributes)
    rng = np.random.default_rng(seed)
    signal = rng.standard_normal((n_examples, signal_dims))
    weights = rng.uniform(0.5, 2.0, size=signal_dims) * rng.choice((-1.0, 1.0), size=signal_dims)
    target = signal @ weights + rng.normal(0.0, noise_std, size=n_examples)
    target = (target - target.mean()) / target.std()
    x, positions = _hide_signal(signal, n_attributes, rng)
    return TaskDataset(
        name=name or f"linreg-{seed}",
        kind=REGRESSION,
        x=x,
        y=target.reshape(-1, 1),
        provenance={
            "generator": "linear-regression",
            "seed": int(seed),
            "signal_columns": " ".join(str(p) for p in positions),
            "noise_std": float(noise_std),
        },
    )


def generate_regression_corpus(seed: int, n_tasks: int = 60,
                               attribute_range=(2, 10)) -> list:
    if n_tasks < 2:
        raise InvalidConfigError("a corpus needs at least two tasks")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        m = int(rng.integers(attribute_range[0], attribute_range[1] + 1))
        sub_seed = int(rng.integers(0, 2**63))
        tasks.append(generate_linear_regression_task(sub_seed, m, name=f"task{t:03d}"))
    return tasks


# -- splitting and sampling -------------------------------------------------


def split_corpus(tasks: list, seed: int, fractions=(0.7, 0.1, 0.2)) -> CorpusSplit:
    """Random disjoint meta-train/validation/test partition covering the corpus."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidConfigError(f"split fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(tasks))
    n_train = int(math.floor(fractions[0] * len(tasks)))
    n_val = int(math.floor(fractions[1] * len(tasks)))
    train = [tasks[i] for i in order[:n_train]]
    val = [tasks[i] for i in order[n_train : n_train + n_val]]
    test = [tasks[i] for i in order[n_train + n_val :]]
    return CorpusSplit(train=train, validation=val, test=test, seed=seed)


def is_sampleable(ds: TaskDataset, cfg: SamplerConfig) -> bool:
    if ds.kind == REGRESSION:
        return ds.n_examples >= cfg.labeled_count + cfg.unlabeled_count
    counts = ds.class_counts()
    if cfg.unlabeled_total:
        return bool(np.all(counts >= cfg.shots)
                    and (counts - cfg.shots).sum() >= cfg.unlabeled_per_class)
    return bool(np.all(counts >= cfg.shots + cfg.unlabeled_per_class))


def sample_episode(ds: TaskDataset, cfg: SamplerConfig,
                   rng: np.random.Generator) -> Episode:
    """Draw one episode without replacement; labeled and unlabeled index sets
    are disjoint by construction. Raises :class:`TaskNotSampleableError` when
    the task is too small, so callers can resample another task."""
    if not is_sampleable(ds, cfg):
        raise TaskNotSampleableError(
            f"task {ds.name!r} cannot provide the requested episode"
        )
    if ds.kind == REGRESSION:
        order = rng.permutation(ds.n_examples)
        lab = order[: cfg.labeled_count]
        unl = order[cfg.labeled_count : cfg.labeled_count + cfg.unlabeled_count]
        return Episode(ds.x[lab], ds.y[lab], ds.x[unl], ds.y[unl], kind=REGRESSION)
    labeled, unlabeled = [], []
    leftover = []
    for c in range(ds.n_targets):
        members = np.flatnonzero(ds.y[:, c] == 1.0)
        order = rng.permutation(members)
        labeled.append(order[: cfg.shots])
        if cfg.unlabeled_total:
            leftover.append(order[cfg.shots :])
        else:
            unlabeled.append(order[cfg.shots : cfg.shots + cfg.unlabeled_per_class])
    if cfg.unlabeled_total:
        pool = np.concatenate(leftover)
        unlabeled = [rng.permutation(pool)[: cfg.unlabeled_per_class]]
    lab = np.concatenate(labeled)
    unl = np.concatenate(unlabeled)
    return Episode(ds.x[lab], ds.y[lab], ds.x[unl], ds.y[unl], kind=CLASSIFICATION)


# -- tabular ingestion -------------------------------------------------------


def _minmax_scale(col: np.ndarray) -> np.ndarray:
    lo, hi = col.min(), col.max()
    if hi - lo == 0:
        return np.zeros_like(col)
    return (col - lo) / (hi - lo)


def ingest_tabular(path, target_column: str, kind: str = CLASSIFICATION) -> TaskDataset:
    """Turn a delimited text file into a task: mean/mode imputation, one-hot
    encoding of categorical attributes, min-max scaling to [0, 1], label
    encoding (classification) or standardization (regression) of the target."""
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except Exception as err:
        raise IngestionError(f"cannot read {path}: {err}") from err
    if target_column not in frame.columns:
        raise IngestionError(
            f"{path}: target column {target_column!r} not among {list(frame.columns)}"
        )
    target = frame[target_column]
    if target.isna().all():
        raise IngestionError(f"{path}: target column {target_column!r} is entirely missing")
    attrs = frame.drop(columns=[target_column])
    if attrs.shape[1] == 0:
        raise IngestionError(f"{path}: no attribute columns besides the target")

    columns = []
    for name in attrs.columns:
        col = attrs[name]
        if col.isna().all():
            raise IngestionError(f"{path}: column {name!r} is entirely missing")
        if pd.api.types.is_numeric_dtype(col):
            values = col.fillna(col.mean()).to_numpy(dtype=np.float64)
            columns.append(_minmax_scale(values))
        else:
            filled = col.fillna(col.mode(dropna=True).iloc[0]).astype(str)
            for level in sorted(filled.unique()):
                columns.append((filled == level).to_numpy(dtype=np.float64))
    x = np.column_stack(columns)

    class_names: list = []
    if kind == CLASSIFICATION:
        if target.isna().any():
            raise IngestionError(f"{path}: missing values in the target column")
        labels = target.astype(str)
        class_names = sorted(labels.unique())
        index = {nm: i for i, nm in enumerate(class_names)}
        y = np.zeros((len(labels), len(class_names)))
        for row, nm in enumerate(labels):
            y[row, index[nm]] = 1.0
    elif kind == REGRESSION:
        values = pd.to_numeric(target, errors="coerce")
        if values.isna().any():
            raise IngestionError(f"{path}: non-numeric or missing regression targets")
        arr = values.to_numpy(dtype=np.float64)
        std = arr.std()
        y = ((arr - arr.mean()) / std if std > 0 else np.zeros_like(arr)).reshape(-1, 1)
    else:
        raise InvalidConfigError(f"unknown task kind {kind!r}")

    return TaskDataset(
        name=path.stem,
        kind=kind,
        x=x,
        y=y,
        class_names=class_names,
        provenance={"source": path.name},
    )


# -- canonical on-disk form ---------------------------------------------------


def save_dataset(ds: TaskDataset, path) -> None:
    """Write the canonical CSV (attributes a0.., targets t0..) and the
    ``.meta`` sidecar. Floats are written in shortest round-trip form so a
    load reproduces the arrays bit-exactly."""
    path = Path(path)
    header = [f"a{j}" for j in range(ds.n_attributes)] + [f"t{j}" for j in range(ds.n_targets)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        full = np.hstack([ds.x, ds.y])
        for row in full:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    meta_lines = [
        f"name={ds.name}",
        f"kind={ds.kind}",
        f"n_examples={ds.n_examples}",
        f"n_attributes={ds.n_attributes}",
        f"n_targets={ds.n_targets}",
    ]
    if ds.class_names:
        meta_lines.append("class_names=" + ",".join(ds.class_names))
    for key, value in ds.provenance.items():
        meta_lines.append(f"provenance.{key}={value}")
    with open(path.with_suffix(path.suffix + ".meta"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(meta_lines) + "\n")


def load_dataset(path) -> TaskDataset:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not path.exists() or not meta_path.exists():
        raise IngestionError(f"dataset or sidecar missing for {path}")
    meta: dict = {}
    provenance: dict = {}
    for line in meta_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key.startswith("provenance."):
            provenance[key[len("provenance."):]] = value
        else:
            meta[key] = value
    n_attr = int(meta["n_attributes"])
    n_targets = int(meta["n_targets"])
    table = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    return TaskDataset(
        name=meta["name"],
        kind=meta["kind"],
        x=table[:, :n_attr],
        y=table[:, n_attr : n_attr + n_targets],
        class_names=meta["class_names"].split(",") if meta.get("class_names") else [],
        provenance=provenance,
    )


def save_corpus(split: CorpusSplit, out_dir) -> None:
    """One CSV+sidecar per task plus ``manifest.csv`` recording the split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, tasks in (("train", split.train), ("validation", split.validation),
                              ("test", split.test)):
        for ds in tasks:
            fname = f"{ds.name}.csv"
            save_dataset(ds, out_dir / fname)
            rows.append((fname, ds.name, ds.kind, split_name))
    with open(out_dir / "manifest.csv", "w", encoding="utf-8") as fh:
        fh.write("file,name,kind,split\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    with open(out_dir / "manifest.csv.meta", "w", encoding="utf-8") as fh:
        fh.write(f"split_seed={split.seed}\n")


def load_corpus(corpus_dir) -> CorpusSplit:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.csv"
    if not manifest.exists():
        raise IngestionError(f"no manifest.csv under {corpus_dir}")
    buckets = {"train": [], "validation": [], "test": []}
    for line in manifest.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        fname, _name, _kind, split_name = line.split(",")
        if split_name not in buckets:
            raise IngestionError(f"manifest names unknown split {split_name!r}")
        buckets[split_name].append(load_dataset(corpus_dir / fname))
    seed = 0
    meta = corpus_dir / "manifest.csv.meta"
    if meta.exists():
        for line in meta.read_text(encoding="utf-8").splitlines():
            if line.startswith("split_seed="):
                seed = int(line.split("=", 1)[1])
    return CorpusSplit(train=buckets["train"], validation=buckets["validation"],
                       test=buckets["test"], seed=seed)
