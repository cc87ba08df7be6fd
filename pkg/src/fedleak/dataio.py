"""Adult census ingestion, preprocessing, batch sampling and oracle data.

The loader accepts the dataset as distributed: comma separated, optional
spaces around tokens, ``?`` for a missing value, 15 columns per row, and a
label column whose test-split variant carries a trailing period.
Preprocessing integer-encodes categoricals in first-appearance order,
imputes missing entries with the column median of the encoded values, and
standardizes every feature column to zero mean and unit variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError, PreprocessError

NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str


@dataclass(frozen=True)
class TableSchema:
    features: tuple[ColumnSpec, ...]
    label_name: str = "income"
    label_map: tuple[tuple[str, int], ...] = ((">50K", 1), ("<=50K", 0))

    @property
    def n_features(self) -> int:
        return len(self.features)


ADULT_SCHEMA = TableSchema(features=(
    ColumnSpec("age", NUMERIC),
    ColumnSpec("workclass", CATEGORICAL),
    ColumnSpec("fnlwgt", NUMERIC),
    ColumnSpec("education", CATEGORICAL),
    ColumnSpec("education-num", NUMERIC),
    ColumnSpec("marital-status", CATEGORICAL),
    ColumnSpec("occupation", CATEGORICAL),
    ColumnSpec("relationship", CATEGORICAL),
    ColumnSpec("race", CATEGORICAL),
    ColumnSpec("sex", CATEGORICAL),
    ColumnSpec("capital-gain", NUMERIC),
    ColumnSpec("capital-loss", NUMERIC),
    ColumnSpec("hours-per-week", NUMERIC),
    ColumnSpec("native-country", CATEGORICAL),
))


def numeric_schema(n_features: int, label_map=((">50K", 1), ("<=50K", 0))) -> TableSchema:
    """Schema with `n_features` plain numeric columns (used for re-ingestion)."""
    return TableSchema(
        features=tuple(ColumnSpec(f"x{i}", NUMERIC) for i in range(n_features)),
        label_map=label_map)


@dataclass
class RawTable:
    """Parsed but not yet encoded rows: one list per feature column.

    Numeric entries are floats, categoricals strings; missing values are None.
    """
    schema: TableSchema
    columns: list[list]
    labels: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.labels)

    @classmethod
    def from_arrays(cls, features: np.ndarray, labels, schema: TableSchema | None = None):
        features = np.asarray(features, dtype=np.float64)
        if schema is None:
            schema = numeric_schema(features.shape[1])
        cols = [features[:, j].tolist() for j in range(features.shape[1])]
        return cls(schema=schema, columns=cols, labels=np.asarray(labels, dtype=np.int64))


def parse_adult_rows(lines, schema: TableSchema = ADULT_SCHEMA) -> RawTable:
    """Parse Adult-format rows into a RawTable.

    Blank lines and lines starting with '|' (the test-split preamble) are
    skipped.  Raises ParseError, naming the 1-based line number, on a wrong
    column count, an unparseable numeric field or an unknown label token.
    """
    n_cols = schema.n_features + 1
    label_map = dict(schema.label_map)
    columns: list[list] = [[] for _ in range(schema.n_features)]
    labels: list[int] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("|"):
            continue
        tokens = [t.strip() for t in line.split(",")]
        if len(tokens) != n_cols:
            raise ParseError(f"line {lineno}: expected {n_cols} columns, got {len(tokens)}")
        label_token = tokens[-1].rstrip(".").strip()
        if label_token not in label_map:
            raise ParseError(f"line {lineno}: unknown label token {tokens[-1]!r}")
        for j, spec in enumerate(schema.features):
            tok = tokens[j]
            if tok == "?":
                columns[j].append(None)
            elif spec.kind == NUMERIC:
                try:
                    columns[j].append(float(tok))
                except ValueError:
                    raise ParseError(
                        f"line {lineno}: column {spec.name!r} is not numeric: {tok!r}") from None
            else:
                columns[j].append(tok)
        labels.append(label_map[label_token])
    return RawTable(schema=schema, columns=columns, labels=np.asarray(labels, dtype=np.int64))


def load_adult(path, schema: TableSchema = ADULT_SCHEMA) -> RawTable:
    """Parse an Adult-format CSV file into a RawTable."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_adult_rows(fh, schema=schema)


@dataclass
class ColumnStats:
    encoder: dict | None  # category -> code, None for numeric columns
    median: float
    mean: float
    std: float


@dataclass
class Dataset:
    """Preprocessed samples: standardized features plus binary labels."""
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray    # (n,) int64 in {0, 1}
    stats: list[ColumnStats] = field(repr=False, default_factory=list)
    schema: TableSchema | None = field(repr=False, default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return self.n - self.n_positive

    @property
    def positive_ratio(self) -> float:
        return self.n_positive / self.n


def preprocess(raw: RawTable) -> Dataset:
    """Encode, impute and standardize a RawTable into a Dataset."""
    if raw.n_rows == 0:
        raise PreprocessError("empty table")
    n = raw.n_rows
    encoded = np.empty((n, raw.schema.n_features))
    stats: list[ColumnStats] = []
    for j, spec in enumerate(raw.schema.features):
        col = raw.columns[j]
        encoder = None
        if spec.kind == CATEGORICAL:
            encoder = {}
            for v in col:
                if v is not None and v not in encoder:
                    encoder[v] = len(encoder)
            values = np.array([np.nan if v is None else float(encoder[v]) for v in col])
        else:
            values = np.array([np.nan if v is None else float(v) for v in col])
        present = ~np.isnan(values)
        if not present.any():
            raise PreprocessError(f"column {spec.name!r}: all values missing")
        median = float(np.median(values[present]))
        if spec.kind == CATEGORICAL:
            median = float(np.floor(median + 0.5))  # nearest valid code
        values[~present] = median
        encoded[:, j] = values
        stats.append(ColumnStats(encoder=encoder, median=median, mean=0.0, std=0.0))
    means = encoded.mean(axis=0)
    stds = encoded.std(axis=0)
    divisor = np.where(stds == 0.0, 1.0, stds)
    standardized = (encoded - means) / divisor
    for j in range(encoded.shape[1]):
        stats[j].mean = float(means[j])
        stats[j].std = float(stds[j])
    return Dataset(features=standardized, labels=raw.labels.copy(),
                   stats=stats, schema=raw.schema)


@dataclass
class Batch:
    """B samples drawn from a parent Dataset (indices kept for provenance)."""
    features: np.ndarray  # (B, d)
    labels: np.ndarray    # (B,)
    indices: np.ndarray   # (B,)

    @property
    def size(self) -> int:
        return self.features.shape[0]


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw `batch_size` indices uniformly with replacement."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    idx = rng.integers(0, dataset.n, size=batch_size)
    return Batch(features=dataset.features[idx], labels=dataset.labels[idx], indices=idx)


def resample_imbalance(dataset: Dataset, positive_ratio: float, size: int,
                       rng: np.random.Generator) -> Dataset:
    """Bootstrap a dataset with a prescribed class balance, re-standardized.

    Draws round(size * positive_ratio) positives and the rest negatives,
    each with replacement from the respective class pool.
    """
    if not 0.0 < positive_ratio < 1.0:
        raise ContractError(f"positive_ratio must be in (0, 1), got {positive_ratio}")
    if size < 1:
        raise ContractError(f"size must be >= 1, got {size}")
    pos_pool = np.flatnonzero(dataset.labels == 1)
    neg_pool = np.flatnonzero(dataset.labels == 0)
    if pos_pool.size == 0 or neg_pool.size == 0:
        raise ContractError("both classes must be present in the source dataset")
    n_pos = int(round(size * positive_ratio))
    idx = np.concatenate([rng.choice(pos_pool, size=n_pos, replace=True),
                          rng.choice(neg_pool, size=size - n_pos, replace=True)])
    idx = idx[rng.permutation(size)]
    feats = dataset.features[idx]
    means = feats.mean(axis=0)
    stds = feats.std(axis=0)
    divisor = np.where(stds == 0.0, 1.0, stds)
    stats = [ColumnStats(encoder=None, median=float(np.median(feats[:, j])),
                         mean=float(means[j]), std=float(stds[j]))
             for j in range(feats.shape[1])]
    return Dataset(features=(feats - means) / divisor, labels=dataset.labels[idx],
                   stats=stats, schema=dataset.schema)


# -- oracle data ----------------------------------------------------------

def gaussian_mi_nats(dim: int, rho: float) -> float:
    """Exact MI of `dim` independent bivariate-normal coordinate pairs."""
    return -0.5 * dim * float(np.log1p(-rho * rho))


def gaussian_pairs(dim: int, rho: float, n: int, rng: np.random.Generator):
    """Paired samples (X, G): per coordinate bivariate normal, correlation rho.

    Coordinates are independent of each other, so the analytic mutual
    information is -(dim/2) ln(1 - rho^2) nats.
    """
    if dim < 1:
        raise ContractError(f"dim must be >= 1, got {dim}")
    if not abs(rho) < 1.0:
        raise ContractError(f"|rho| must be < 1, got {rho}")
    x = rng.standard_normal((n, dim))
    g = rho * x + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dim))
    return x, g


# -- synthetic Adult-format data -------------------------------------------

_WORKCLASS = ["Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
              "Local-gov", "State-gov", "Without-pay"]
_EDUCATION = ["Preschool", "1st-4th", "5th-6th", "7th-8th", "9th", "10th", "11th",
              "12th", "HS-grad", "Some-college", "Assoc-voc", "Assoc-acdm",
              "Bachelors", "Masters", "Prof-school", "Doctorate"]
_MARITAL = ["Married-civ-spouse", "Never-married", "Divorced", "Separated",
            "Widowed", "Married-spouse-absent"]
_OCCUPATION = ["Prof-specialty", "Exec-managerial", "Craft-repair", "Adm-clerical",
               "Sales", "Other-service", "Machine-op-inspct", "Transport-moving",
               "Handlers-cleaners", "Farming-fishing", "Tech-support",
               "Protective-serv", "Priv-house-serv", "Armed-Forces"]
_RELATIONSHIP = ["Husband", "Not-in-family", "Own-child", "Unmarried", "Wife",
                 "Other-relative"]
_RACE = ["White", "Black", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other"]
_COUNTRY = ["United-States", "Mexico", "Philippines", "Germany", "Canada",
            "India", "England", "Cuba", "China", "South"]


def _pick(rng, values, weights):
    w = np.asarray(weights, dtype=np.float64)
    return values[rng.choice(len(values), p=w / w.sum())]


def generate_adult_like_rows(n_rows: int, n_positive: int, seed: int,
                             missing_rate: float = 0.03,
                             test_style_labels: bool = False) -> list[str]:
    """Rows in the Adult wire format with a learnable income signal.

    Feature distributions are label-conditional so that a logistic
    regression on the preprocessed table is clearly better than chance;
    workclass, occupation and native-country carry '?' entries.
    """
    if not 0 <= n_positive <= n_rows:
        raise ContractError("n_positive out of range")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n_rows, dtype=int)
    labels[:n_positive] = 1
    labels = labels[rng.permutation(n_rows)]
    rows = []
    for y in labels:
        pos = bool(y)
        age = int(np.clip(rng.normal(44 if pos else 36, 11 if pos else 13), 17, 90))
        fnlwgt = int(np.clip(np.exp(rng.normal(11.9, 0.5)), 2e4, 1.4e6))
        edu_num = int(np.clip(rng.normal(12.4 if pos else 9.7, 2.2 if pos else 2.4), 1, 16))
        education = _EDUCATION[edu_num - 1]
        marital = _pick(rng, _MARITAL, [78, 6, 10, 2, 3, 1] if pos else [28, 40, 18, 5, 6, 3])
        occupation = _pick(rng, _OCCUPATION,
                           [26, 28, 12, 4, 13, 2, 3, 4, 1, 2, 4, 3, 0.1, 0.1] if pos else
                           [10, 9, 14, 14, 11, 14, 9, 6, 7, 4, 3, 2, 1, 0.1])
        relationship = _pick(rng, _RELATIONSHIP,
                             [72, 12, 1, 4, 10, 1] if pos else [28, 30, 20, 13, 4, 5])
        race = _pick(rng, _RACE, [89, 5, 4, 1, 1] if pos else [84, 11, 3, 1, 1])
        sex = "Male" if rng.random() < (0.85 if pos else 0.61) else "Female"
        capital_gain = int(np.exp(rng.normal(8.7, 1.0))) if rng.random() < (0.20 if pos else 0.02) else 0
        capital_loss = int(np.exp(rng.normal(7.4, 0.3))) if rng.random() < (0.05 if pos else 0.02) else 0
        hours = int(np.clip(rng.normal(45 if pos else 39, 10 if pos else 12), 1, 99))
        workclass = _pick(rng, _WORKCLASS, [66, 8, 8, 4, 7, 6, 0.1] if pos else
                          [75, 7, 2, 3, 6, 6, 0.3])
        country = _pick(rng, _COUNTRY, [92, 1, 1.5, 1, 1, 1.5, 1, 0.3, 0.5, 0.2])
        if rng.random() < missing_rate:
            workclass = "?"
            occupation = "?"
        if rng.random() < missing_rate / 2:
            country = "?"
        label = ">50K" if pos else "<=50K"
        if test_style_labels:
            label += "."
        rows.append(", ".join(map(str, [
            age, workclass, fnlwgt, education, edu_num, marital, occupation,
            relationship, race, sex, capital_gain, capital_loss, hours,
            country, label])))
    return rows


def write_adult_like(path, n_rows: int = 32561, n_positive: int = 7841,
                     seed: int = 20260613, **kw) -> None:
    rows = generate_adult_like_rows(n_rows, n_positive, seed, **kw)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
