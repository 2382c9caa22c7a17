"""Benchmark loaders, a ground-truth synthetic generator, and split helpers.

Every loader normalizes its source into :class:`TaggedDataset` so the rest of
the package sees one schema.  The canonical on-disk form is a UTF-8 CSV with
header ``t, yf, ycf, mu0, mu1, e, x0..x{d-1}``; optional columns are written
as empty cells.  Floats are written with ``repr`` so a write/read round trip
is bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ConfigError, DataLoadError, SchemaError, SplitError

_OPTIONAL_COLUMNS = ("ycf", "mu0", "mu1", "e")


@dataclass
class TaggedDataset:
    """Covariates, treatment, outcomes, and whatever ground truth exists.

    ``mu0``/``mu1`` are noiseless potential outcomes (synthetic and
    semi-synthetic benchmarks), ``y_counterfactual`` the noisy unobserved arm,
    ``randomized_flag`` marks membership in a randomized subsample, and
    ``bundled_test_mask`` marks rows the source archive designates as its
    test split.  ``factor_partition`` maps factor roles to ground-truth
    covariate column indices (synthetic data only).
    """

    x: np.ndarray
    t: np.ndarray
    y_factual: np.ndarray
    y_counterfactual: Optional[np.ndarray] = None
    mu0: Optional[np.ndarray] = None
    mu1: Optional[np.ndarray] = None
    randomized_flag: Optional[np.ndarray] = None
    outcome_type: str = "continuous"
    factor_partition: Optional[dict] = None
    bundled_test_mask: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise SchemaError("x must be a 2-D matrix")
        self.t = np.asarray(self.t).astype(int)
        self.y_factual = np.asarray(self.y_factual, dtype=float)
        n = self.x.shape[0]
        int_fields = ("t", "randomized_flag", "bundled_test_mask")
        for name in int_fields + ("y_factual", "y_counterfactual", "mu0", "mu1"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr)
            if arr.shape != (n,):
                raise SchemaError(f"{name} must have length {n}, got {arr.shape}")
            setattr(self, name, arr.astype(int if name in int_fields else float))
        if not np.isin(self.t, (0, 1)).all():
            raise SchemaError("t must be binary")
        if not 0.0 < self.t.mean() < 1.0:
            raise SchemaError("both treatment arms must be represented")
        if self.outcome_type not in ("binary", "continuous"):
            raise SchemaError(f"unknown outcome_type {self.outcome_type!r}")
        if self.factor_partition is not None:
            seen = set()
            for role, cols in self.factor_partition.items():
                cols = np.asarray(cols, dtype=int)
                self.factor_partition[role] = cols
                if cols.size and (cols.min() < 0 or cols.max() >= self.d):
                    raise SchemaError(f"factor_partition[{role!r}] out of range")
                overlap = seen.intersection(cols.tolist())
                if overlap:
                    raise SchemaError(f"factor_partition sets overlap on {sorted(overlap)}")
                seen.update(cols.tolist())

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def tau_true(self):
        """True unit-level effect; requires both noiseless potentials."""
        if self.mu0 is None or self.mu1 is None:
            return None
        return self.mu1 - self.mu0

    def subset(self, indices):
        """Row subset carrying every optional field through."""
        indices = np.asarray(indices, dtype=int)

        def take(arr):
            return None if arr is None else arr[indices]

        return TaggedDataset(
            x=self.x[indices],
            t=self.t[indices],
            y_factual=self.y_factual[indices],
            y_counterfactual=take(self.y_counterfactual),
            mu0=take(self.mu0),
            mu1=take(self.mu1),
            randomized_flag=take(self.randomized_flag),
            outcome_type=self.outcome_type,
            factor_partition=self.factor_partition,
            bundled_test_mask=take(self.bundled_test_mask),
            metadata=dict(self.metadata),
        )


@dataclass
class SplitSpec:
    """Train/validation/test fractions plus the permutation seed."""

    train: float = 0.63
    validation: float = 0.27
    test: float = 0.10
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train, self.validation, self.test)
        if any(r <= 0 for r in ratios):
            raise ConfigError("every split fraction must be positive")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")


@dataclass
class SyntheticConfig:
    """Sizes and strengths for the ground-truth generator.

    ``confounding_strength`` scales a nonlinear outcome term driven by the
    same confounder score that drives treatment assignment, so naive factual
    regression is genuinely biased; it does not touch the unit-level effect.
    """

    n_units: int = 1000
    d_instrument: int = 8
    d_confounder: int = 8
    d_adjustment: int = 8
    d_noise: int = 4
    treatment_strength: float = 1.0
    outcome_noise_std: float = 0.5
    effect_heterogeneity: float = 1.0
    confounding_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        dims = (self.d_instrument, self.d_confounder, self.d_adjustment, self.d_noise)
        if any(d < 0 for d in dims):
            raise ConfigError("latent block sizes must be nonnegative")
        if sum(dims) == 0:
            raise ConfigError("at least one covariate column is required")
        if self.n_units < 10:
            raise ConfigError("n_units must be at least 10")
        if self.outcome_noise_std < 0:
            raise ConfigError("outcome_noise_std must be nonnegative")


def _split_sizes(n, ratios):
    """Sizes from rounding the cumulative ratio boundaries, so the partition
    is exhaustive and deterministic."""
    bounds = np.round(np.cumsum(ratios) * n).astype(int)
    bounds[-1] = n
    sizes = np.diff(np.concatenate([[0], bounds]))
    if (sizes <= 0).any():
        raise SplitError(f"split of n={n} at ratios {tuple(ratios)} leaves an empty part")
    return sizes


def split(dataset, spec):
    """Disjoint exhaustive (train, validation, test) row partition."""
    ratios = (spec.train, spec.validation, spec.test)
    sizes = _split_sizes(dataset.n, ratios)
    perm = np.random.default_rng(spec.seed).permutation(dataset.n)
    stops = np.cumsum(sizes)
    return (
        dataset.subset(np.sort(perm[: stops[0]])),
        dataset.subset(np.sort(perm[stops[0]: stops[1]])),
        dataset.subset(np.sort(perm[stops[1]:])),
    )


def benchmark_splits(dataset, spec):
    """Like :func:`split`, but honor the archive's bundled test rows when
    present: the bundled test set stays intact and only train/validation are
    carved out of the remaining rows."""
    if dataset.bundled_test_mask is None:
        return split(dataset, spec)
    test_idx = np.flatnonzero(dataset.bundled_test_mask == 1)
    pool_idx = np.flatnonzero(dataset.bundled_test_mask == 0)
    if test_idx.size == 0 or pool_idx.size == 0:
        raise SplitError("bundled test mask selects everything or nothing")
    train_frac = spec.train / (spec.train + spec.validation)
    n_train = int(np.round(train_frac * pool_idx.size))
    if n_train == 0 or n_train == pool_idx.size:
        raise SplitError("bundled split leaves an empty train or validation part")
    perm = np.random.default_rng(spec.seed).permutation(pool_idx.size)
    train_idx = np.sort(pool_idx[perm[:n_train]])
    val_idx = np.sort(pool_idx[perm[n_train:]])
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)


@dataclass
class Scaler:
    """Per-column standardization statistics fitted on the train split."""

    mean: np.ndarray
    std: np.ndarray

    def transform(self, x):
        return (x - self.mean) / self.std


def fit_scaler(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return Scaler(mean=mean, std=std)


def standardize_splits(train, validation, test):
    """Standardize covariates with statistics fitted on the train split only."""
    scaler = fit_scaler(train.x)

    def rescale(ds):
        out = ds.subset(np.arange(ds.n))
        out.x = scaler.transform(ds.x)
        return out

    return rescale(train), rescale(validation), rescale(test), scaler


_BASE_EFFECT = 1.0


def generate_synthetic(config):
    """Observational data with known factor structure and ground truth.

    Covariate columns are, in order, independent standard-normal instrument,
    confounder, adjustment, and noise blocks.  Treatment is a logistic draw
    reading only instrument+confounder columns (scaled by
    ``treatment_strength``).  The control potential is linear in
    confounder+adjustment columns plus a nonlinear function of the same
    confounder score that drives treatment (scaled by
    ``confounding_strength``), so the arms genuinely differ in baseline
    outcome.  The effect is a unit constant plus ``effect_heterogeneity``
    times a linear score of the adjustment block, hence analytically known
    per unit.  Factual/counterfactual outcomes add independent Gaussian
    noise to the noiseless potentials.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    d_i, d_c, d_a, d_n = (cfg.d_instrument, cfg.d_confounder, cfg.d_adjustment, cfg.d_noise)
    n = cfg.n_units

    u_instr = rng.normal(size=d_i)
    u_conf = rng.normal(size=d_c)
    w_out = rng.normal(size=d_c + d_a)
    v_het = rng.normal(size=d_a)
    u_adj = rng.normal(size=d_a)

    block_i = rng.normal(size=(n, d_i))
    block_c = rng.normal(size=(n, d_c))
    block_a = rng.normal(size=(n, d_a))
    block_n = rng.normal(size=(n, d_n))
    x = np.hstack([block_i, block_c, block_a, block_n])

    score_conf = block_c @ u_conf / np.sqrt(d_c) if d_c else np.zeros(n)
    score_adj = block_a @ u_adj / np.sqrt(d_a) if d_a else np.zeros(n)
    logit = np.zeros(n)
    if d_i:
        logit += block_i @ u_instr / np.sqrt(d_i)
    logit += score_conf
    logit *= cfg.treatment_strength
    p = 1.0 / (1.0 + np.exp(-logit))
    t = (rng.uniform(size=n) < p).astype(int)

    outcome_block = np.hstack([block_c, block_a])
    mu0 = outcome_block @ w_out / np.sqrt(max(d_c + d_a, 1))
    # nonlinear baseline driven by the same confounder score that drives
    # treatment (centered quadratic plus a cross-block interaction): biases
    # naive regression without touching the unit-level effect
    mu0 = mu0 + cfg.confounding_strength * (
        score_conf + 0.5 * (score_conf ** 2 - 1.0) + score_conf * score_adj)
    tau = np.full(n, _BASE_EFFECT)
    if d_a:
        tau = tau + cfg.effect_heterogeneity * (block_a @ v_het) / np.sqrt(d_a)
    mu1 = mu0 + tau

    y0 = mu0 + cfg.outcome_noise_std * rng.normal(size=n)
    y1 = mu1 + cfg.outcome_noise_std * rng.normal(size=n)
    y_factual = np.where(t == 1, y1, y0)
    y_counterfactual = np.where(t == 1, y0, y1)

    offsets = np.cumsum([0, d_i, d_c, d_a, d_n])
    partition = {
        "instrument": np.arange(offsets[0], offsets[1]),
        "confounder": np.arange(offsets[1], offsets[2]),
        "adjustment": np.arange(offsets[2], offsets[3]),
        "noise": np.arange(offsets[3], offsets[4]),
    }
    return TaggedDataset(
        x=x, t=t, y_factual=y_factual, y_counterfactual=y_counterfactual,
        mu0=mu0, mu1=mu1, outcome_type="continuous",
        factor_partition=partition,
        metadata={"source": "synthetic", "seed": cfg.seed},
    )


def _format_cell(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def to_csv(dataset, path):
    """Write the canonical CSV form (see module docstring)."""
    path = Path(path)
    header = ["t", "yf", "ycf", "mu0", "mu1", "e"] + [f"x{j}" for j in range(dataset.d)]
    optionals = {
        "ycf": dataset.y_counterfactual,
        "mu0": dataset.mu0,
        "mu1": dataset.mu1,
        "e": dataset.randomized_flag,
    }
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [str(int(dataset.t[i])), repr(float(dataset.y_factual[i]))]
            for name in _OPTIONAL_COLUMNS:
                col = optionals[name]
                if col is None:
                    row.append("")
                elif name == "e":
                    row.append(str(int(col[i])))
                else:
                    row.append(repr(float(col[i])))
            row.extend(repr(float(v)) for v in dataset.x[i])
            writer.writerow(row)


def from_csv(path, outcome_type=None):
    """Read the canonical CSV form back into a :class:`TaggedDataset`.

    ``outcome_type`` defaults to ``binary`` when every observed outcome is 0/1.
    """
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"no such file: {path}")
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    expected_head = ["t", "yf", "ycf", "mu0", "mu1", "e"]
    if list(df.columns[:6]) != expected_head:
        raise SchemaError(f"canonical CSV must start with columns {expected_head}")
    x_cols = [c for c in df.columns[6:]]
    if x_cols != [f"x{j}" for j in range(len(x_cols))] or not x_cols:
        raise SchemaError("covariate columns must be x0..x{d-1}")

    def optional(name, as_int=False):
        col = df[name]
        if col.isna().all():
            return None
        if col.isna().any():
            raise SchemaError(f"column {name} is partially empty")
        return col.to_numpy(int if as_int else float)

    yf = df["yf"].to_numpy(float)
    ycf = optional("ycf")
    if outcome_type is None:
        observed = yf if ycf is None else np.concatenate([yf, ycf])
        outcome_type = "binary" if np.isin(observed, (0.0, 1.0)).all() else "continuous"
    return TaggedDataset(
        x=df[x_cols].to_numpy(float),
        t=df["t"].to_numpy(int),
        y_factual=yf,
        y_counterfactual=ycf,
        mu0=optional("mu0"),
        mu1=optional("mu1"),
        randomized_flag=optional("e", as_int=True),
        outcome_type=outcome_type,
        metadata={"source": str(path)},
    )


def _pick_replication(arr, index, n_reps):
    arr = np.asarray(arr)
    if arr.ndim >= 2 and arr.shape[-1] == n_reps:
        return arr[..., index]
    if arr.ndim >= 2 and arr.shape[-1] == 1:
        return arr[..., 0]
    return arr


def _load_npz_pair(path, suffix_train=".train.npz", suffix_test=".test.npz"):
    """Resolve ``path`` (an npz file, one half of a train/test pair, or a
    directory holding the pair) into loaded arrays plus a bundled test mask."""
    path = Path(path)
    if path.is_dir():
        trains = sorted(path.glob(f"*{suffix_train}"))
        if not trains:
            raise DataLoadError(f"no *{suffix_train} archive under {path}")
        path = trains[0]
    if not path.exists():
        raise DataLoadError(f"no such file: {path}")
    parts = [np.load(path, allow_pickle=False)]
    mask_sizes = None
    name = path.name
    if name.endswith(suffix_train):
        sibling = path.with_name(name[: -len(suffix_train)] + suffix_test)
        if sibling.exists():
            parts.append(np.load(sibling, allow_pickle=False))
    return parts


def _stack_replication(parts, keys, index):
    n_reps = None
    for part in parts:
        x = part["x"]
        reps = x.shape[2] if x.ndim == 3 else 1
        n_reps = reps if n_reps is None else min(n_reps, reps)
    if not 0 <= index < n_reps:
        raise IndexError(f"replication index {index} outside [0, {n_reps})")
    merged = {}
    for key in keys:
        cols = []
        for part in parts:
            if key not in part:
                cols = None
                break
            cols.append(_pick_replication(part[key], index, n_reps))
        merged[key] = None if cols is None else np.concatenate(cols, axis=0)
    sizes = [(_pick_replication(part["x"], index, n_reps)).shape[0] for part in parts]
    mask = None
    if len(parts) == 2:
        mask = np.concatenate([np.zeros(sizes[0], int), np.ones(sizes[1], int)])
    return merged, mask


def load_ihdp(path, replication_index):
    """Load one replication of the infant-health benchmark (747 units, 25
    covariates, continuous outcome, both potentials known)."""
    path = Path(path)
    if path.suffix == ".csv":
        if replication_index != 0:
            raise IndexError("a CSV file holds a single replication")
        ds = from_csv(path, outcome_type="continuous")
    else:
        parts = _load_npz_pair(path)
        merged, mask = _stack_replication(parts, ("x", "t", "yf", "ycf", "mu0", "mu1"), replication_index)
        ds = TaggedDataset(
            x=merged["x"], t=merged["t"], y_factual=merged["yf"],
            y_counterfactual=merged["ycf"], mu0=merged["mu0"], mu1=merged["mu1"],
            outcome_type="continuous", bundled_test_mask=mask,
            metadata={"source": "ihdp", "replication": replication_index},
        )
    if ds.d != 25:
        raise SchemaError(f"expected 25 covariate columns, found {ds.d}")
    return ds


def load_jobs(path, realization):
    """Load one realization of the job-training benchmark (binary outcome,
    randomized-subsample flag, no counterfactuals)."""
    path = Path(path)
    if path.suffix == ".csv":
        if realization != 0:
            raise IndexError("a CSV file holds a single realization")
        ds = from_csv(path, outcome_type="binary")
        if ds.randomized_flag is None:
            raise SchemaError("jobs data must populate the e column")
    else:
        parts = _load_npz_pair(path)
        merged, mask = _stack_replication(parts, ("x", "t", "yf", "e"), realization)
        if merged["e"] is None:
            raise SchemaError("jobs archive lacks the randomized-subsample array e")
        ds = TaggedDataset(
            x=merged["x"], t=merged["t"], y_factual=merged["yf"],
            randomized_flag=np.asarray(merged["e"]).astype(int),
            outcome_type="binary", bundled_test_mask=mask,
            metadata={"source": "jobs", "realization": realization},
        )
    if ds.d != 17:
        raise SchemaError(f"expected 17 covariate columns, found {ds.d}")
    return ds


def _one_hot_expand(df):
    """Expand non-numeric columns into sorted indicator columns."""
    cols = []
    for name in df.columns:
        col = df[name]
        if pd.api.types.is_numeric_dtype(col):
            cols.append(col.to_numpy(float)[:, None])
        else:
            values = sorted(col.astype(str).unique())
            block = np.zeros((len(col), len(values)))
            arr = col.astype(str).to_numpy()
            for j, value in enumerate(values):
                block[:, j] = arr == value
            cols.append(block)
    return np.hstack(cols)


N_ACIC_SETTINGS = 77


def load_acic(path, setting_index):
    """Load one simulation setting of the 2016 causal-inference challenge.

    ``path`` is a directory with ``x.csv`` (covariates; categoricals get
    one-hot expanded) and per-setting files ``zymu_<k>.csv`` (1-based) with a
    ``z`` treatment column, ``mu0``/``mu1``, and either ``y`` or ``y0``/``y1``.
    """
    if not 0 <= setting_index < N_ACIC_SETTINGS:
        raise IndexError(f"setting index {setting_index} outside [0, {N_ACIC_SETTINGS})")
    root = Path(path)
    x_path = root / "x.csv"
    sim_path = root / f"zymu_{setting_index + 1}.csv"
    if not x_path.exists():
        raise DataLoadError(f"no covariate file at {x_path}")
    if not sim_path.exists():
        raise DataLoadError(f"no simulation file at {sim_path}")
    x_df = pd.read_csv(x_path)
    x = _one_hot_expand(x_df)
    sim = pd.read_csv(sim_path)
    sim.columns = [c.strip().lower() for c in sim.columns]
    for needed in ("z", "mu0", "mu1"):
        if needed not in sim.columns:
            raise SchemaError(f"simulation file lacks column {needed!r}")
    t = sim["z"].to_numpy(int)
    mu0 = sim["mu0"].to_numpy(float)
    mu1 = sim["mu1"].to_numpy(float)
    if "y0" in sim.columns and "y1" in sim.columns:
        y0 = sim["y0"].to_numpy(float)
        y1 = sim["y1"].to_numpy(float)
        yf = np.where(t == 1, y1, y0)
        ycf = np.where(t == 1, y0, y1)
    elif "y" in sim.columns:
        yf = sim["y"].to_numpy(float)
        ycf = None
    else:
        raise SchemaError("simulation file needs either y or y0/y1 columns")
    if len(sim) != len(x_df):
        raise SchemaError("covariate and simulation files disagree on row count")
    outcome_type = "binary" if np.isin(yf, (0.0, 1.0)).all() else "continuous"
    return TaggedDataset(
        x=x, t=t, y_factual=yf, y_counterfactual=ycf, mu0=mu0, mu1=mu1,
        outcome_type=outcome_type,
        metadata={
            "source": "acic", "setting": setting_index,
            "d_raw": x_df.shape[1], "d_expanded": x.shape[1],
        },
    )
