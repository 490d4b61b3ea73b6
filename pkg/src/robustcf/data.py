"""Datasets, preprocessing recipes, scaling, splits and retraining scenarios."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .ensemble import TrainConfig


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    # scaler that produced X from raw values, when known
    scaler: "MinMaxScaler | None" = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be n x d with one label per row")
        if not np.isfinite(self.X).all():
            raise ValueError("dataset contains NaN or inf")
        if not self.feature_names:
            self.feature_names = [f"f{i}" for i in range(self.X.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.X[rows], self.y[rows], list(self.feature_names), self.scaler)

    def to_csv(self, path, label_column="label") -> None:
        df = pd.DataFrame(self.X, columns=self.feature_names)
        df[label_column] = self.y
        df.to_csv(path, index=False, float_format="%.17g")


# --------------------------------------------------------------------------
# scaling


@dataclass
class MinMaxScaler:
    min: np.ndarray
    max: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"min": self.min.tolist(), "max": self.max.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "MinMaxScaler":
        obj = json.loads(text)
        return cls(np.asarray(obj["min"], dtype=float), np.asarray(obj["max"], dtype=float))

    @property
    def _span(self):
        span = self.max - self.min
        return np.where(span > 0, span, 1.0)


def minmax_fit_transform(X):
    X = np.asarray(X, dtype=np.float64)
    scaler = MinMaxScaler(X.min(axis=0), X.max(axis=0))
    return minmax_apply(scaler, X), scaler


def minmax_apply(scaler: MinMaxScaler, x):
    # constant columns map to 0
    return (np.asarray(x, dtype=np.float64) - scaler.min) / scaler._span


def minmax_invert(scaler: MinMaxScaler, x):
    return np.asarray(x, dtype=np.float64) * scaler._span + scaler.min


# --------------------------------------------------------------------------
# loading


def load_csv(path, label_column: str, nan_policy: str = "drop", scale: bool = True) -> Dataset:
    """Read a header-row CSV whose cells are numeric.

    ``nan_policy`` is ``"drop"`` (remove incomplete rows) or ``"raise"``.
    Features are min-max scaled to [0, 1] unless ``scale`` is false.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    if label_column not in df.columns:
        raise ValueError(f"label column {label_column!r} not found in {path}")
    try:
        df = df.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from exc
    if df.isna().any().any():
        if nan_policy != "drop":
            raise ValueError(f"{path}: missing values present")
        df = df.dropna().reset_index(drop=True)
    y = df.pop(label_column).to_numpy()
    X = df.to_numpy(dtype=np.float64)
    scaler = None
    if scale:
        X, scaler = minmax_fit_transform(X)
    return Dataset(X, y.astype(np.int64), list(df.columns), scaler)


GERMAN_COLUMNS = [
    "existingchecking", "duration", "credithistory", "purpose", "creditamount", "savings",
    "employmentsince", "installmentrate", "statussex", "otherdebtors", "residencesince",
    "property", "age", "otherinstallmentplans", "housing", "existingcredits", "job",
    "peopleliable", "telephone", "foreignworker", "classification",
]

# Ordinal codes: absence / unknown -> 0, then ascending standing.
GERMAN_ENCODINGS = {
    "existingchecking": {"A14": 0, "A11": 1, "A12": 2, "A13": 3},
    "credithistory": {"A30": 0, "A34": 1, "A33": 2, "A32": 3, "A31": 4},
    "savings": {"A65": 0, "A61": 1, "A62": 2, "A63": 3, "A64": 4},
    "employmentsince": {"A71": 0, "A72": 1, "A73": 2, "A74": 3, "A75": 4},
    "otherdebtors": {"A101": 0, "A102": 1, "A103": 2},
    "property": {"A124": 0, "A123": 1, "A122": 2, "A121": 3},
    "housing": {"A153": 0, "A151": 1, "A152": 2},
    "job": {"A171": 0, "A172": 1, "A173": 2, "A174": 3},
}

GERMAN_FEATURES = [
    "existingchecking", "credithistory", "creditamount", "savings", "employmentsince",
    "otherdebtors", "property", "housing", "existingcredits", "job",
]


def read_german(path) -> pd.DataFrame:
    """Read the raw whitespace-separated UCI ``german.data`` file."""
    return pd.read_csv(path, sep=r"\s+", header=None, names=GERMAN_COLUMNS)


def encode_german(raw: pd.DataFrame) -> pd.DataFrame:
    """Keep the ten used columns and map categorical codes to integers."""
    missing = [c for c in GERMAN_FEATURES + ["classification"] if c not in raw.columns]
    if missing:
        raise ValueError(f"missing German Credit columns: {missing}")
    out = pd.DataFrame(index=raw.index)
    for col in GERMAN_FEATURES:
        if col in GERMAN_ENCODINGS:
            mapping = GERMAN_ENCODINGS[col]
            unknown = set(raw[col].unique()) - set(mapping)
            if unknown:
                raise ValueError(f"unknown category code(s) in {col}: {sorted(unknown)}")
            out[col] = raw[col].map(mapping).astype(float)
        else:
            out[col] = raw[col].astype(float)
    # 1 = good credit (accepted), 2 = bad
    out["label"] = (raw["classification"].astype(int) == 1).astype(int)
    return out


def preprocess_german(raw: pd.DataFrame) -> Dataset:
    enc = encode_german(raw)
    X, scaler = minmax_fit_transform(enc[GERMAN_FEATURES].to_numpy())
    return Dataset(X, enc["label"].to_numpy(), list(GERMAN_FEATURES), scaler)


HELOC_LABEL = "RiskPerformance"
HELOC_DROP = ["MSinceMostRecentDelq", "MSinceMostRecentInqexcl7days", "NetFractionInstallBurden"]
HELOC_FEATURES = [
    "ExternalRiskEstimate", "MSinceOldestTradeOpen", "MSinceMostRecentTradeOpen", "AverageMInFile",
    "NumSatisfactoryTrades", "NumTrades60Ever2DerogPubRec", "NumTrades90Ever2DerogPubRec",
    "PercentTradesNeverDelq", "MaxDelq2PublicRecLast12M", "MaxDelqEver", "NumTotalTrades",
    "NumTradesOpeninLast12M", "PercentInstallTrades", "NumInqLast6M", "NumInqLast6Mexcl7days",
    "NetFractionRevolvingBurden", "NumRevolvingTradesWBalance", "NumInstallTradesWBalance",
    "NumBank2NatlTradesWHighUtilization", "PercentTradesWBalance",
]
HELOC_SENTINELS = (-7, -8, -9)


def preprocess_heloc(raw: pd.DataFrame) -> Dataset:
    """FICO HELOC recipe: drop three sparse columns, then rows with special codes."""
    missing = [c for c in HELOC_FEATURES + HELOC_DROP + [HELOC_LABEL] if c not in raw.columns]
    if missing:
        raise ValueError(f"missing HELOC columns: {missing}")
    df = raw.drop(columns=HELOC_DROP)
    feats = df[HELOC_FEATURES].apply(pd.to_numeric, errors="raise")
    keep = ~feats.isin(HELOC_SENTINELS).any(axis=1) & feats.notna().all(axis=1)
    feats = feats[keep]
    labels = df.loc[keep, HELOC_LABEL]
    if labels.dtype == object:
        y = (labels.str.strip() == "Good").astype(int).to_numpy()
    else:
        y = labels.astype(int).to_numpy()
    X, scaler = minmax_fit_transform(feats.to_numpy(dtype=np.float64))
    return Dataset(X, y, list(HELOC_FEATURES), scaler)


def load_recipe(recipe: str, path, label_column: str = "label") -> Dataset:
    if recipe == "german":
        return preprocess_german(read_german(path))
    if recipe == "heloc":
        return preprocess_heloc(pd.read_csv(path))
    if recipe == "csv":
        return load_csv(path, label_column)
    raise ValueError(f"unknown dataset recipe {recipe!r}")


# --------------------------------------------------------------------------
# splits and scenarios


def split(data: Dataset, test_fraction: float, seed: int):
    """Seeded shuffle split; the test part has ``round(n * test_fraction)`` rows."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(data.n)
    n_test = int(round(data.n * test_fraction))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


SCENARIO_KINDS = ("drop_k", "hyperparam_jitter", "half_split")
JITTERS = ("max_depth-1", "max_depth+1", "n_estimators*0.5", "n_estimators*1.5")


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "drop_k"
    k: int = 1
    jitter: tuple = JITTERS
    n_models: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        bad = [j for j in self.jitter if j not in JITTERS]
        if bad or not self.jitter:
            raise ValueError(f"invalid jitter options {bad or self.jitter}")


def jitter_config(cfg: TrainConfig, option: str) -> TrainConfig:
    if option == "max_depth-1":
        return replace(cfg, max_depth=max(1, cfg.max_depth - 1))
    if option == "max_depth+1":
        return replace(cfg, max_depth=cfg.max_depth + 1)
    if option == "n_estimators*0.5":
        return replace(cfg, n_estimators=max(1, int(round(cfg.n_estimators * 0.5))))
    if option == "n_estimators*1.5":
        return replace(cfg, n_estimators=int(round(cfg.n_estimators * 1.5)))
    raise ValueError(f"unknown jitter {option!r}")


def half_split(train: Dataset, seed: int):
    """Disjoint halves of the training data: (half used for M, other half)."""
    perm = np.random.default_rng(seed).permutation(train.n)
    mid = train.n // 2
    return train.subset(np.sort(perm[:mid])), train.subset(np.sort(perm[mid:]))


def make_scenarios(train: Dataset, base_cfg: TrainConfig, spec: ScenarioSpec):
    """Materialize ``(dataset, config)`` pairs for the retrained models.

    For ``half_split`` the original model is expected to be trained on
    ``half_split(train, spec.seed)[0]``; the returned pairs use the other half.
    """
    rng = np.random.default_rng(spec.seed)
    out = []
    if spec.kind == "drop_k":
        if not 0 <= spec.k < train.n:
            raise ValueError(f"cannot drop k={spec.k} rows from n={train.n}")
        for _ in range(spec.n_models):
            dropped = rng.choice(train.n, size=spec.k, replace=False)
            keep = np.setdiff1d(np.arange(train.n), dropped)
            out.append((train.subset(keep), base_cfg))
    elif spec.kind == "hyperparam_jitter":
        for i in range(spec.n_models):
            out.append((train, jitter_config(base_cfg, spec.jitter[i % len(spec.jitter)])))
    else:
        _, other = half_split(train, spec.seed)
        for i in range(spec.n_models):
            out.append((other, jitter_config(base_cfg, spec.jitter[i % len(spec.jitter)])))
    return out


def save_scaler(scaler: MinMaxScaler, path) -> None:
    Path(path).write_text(scaler.to_json() + "\n")
