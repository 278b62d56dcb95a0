"""Parsing, validation, scaling, and splitting of flow-record datasets.

The single ingestion format is CSV with a mandatory header (UTF-8, comma
delimited). Categorical columns are expanded to one-hot blocks in header
order; every other declared feature column must parse as a float.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SchemaError

SCALER_FORMAT = "flowsage-scaler"
SCALER_VERSION = 1
STD_FLOOR = 1e-8
CLIP_SIGMA = 5.0


@dataclass(eq=False)
class FlowRecord:
    """One network flow: endpoints, numeric feature vector, optional label."""

    flow_id: int
    src: str
    dst: str
    features: np.ndarray
    label: str | None = None


@dataclass
class FlowSchema:
    """Column layout of a flow CSV.

    ``categorical`` maps a column name to its category list; ``None`` means
    the categories are discovered from the file (sorted for determinism).
    One-hot blocks replace the categorical column at its header position.
    Setting ``src_port``/``dst_port`` switches endpoint identity from plain
    IP to "ip:port".
    """

    numeric: list[str]
    categorical: dict[str, list[str] | None] = field(default_factory=dict)
    src: str = "src"
    dst: str = "dst"
    src_port: str | None = None
    dst_port: str | None = None
    label: str | None = "Label"
    benign_label: str = "Benign"

    def required_columns(self) -> list[str]:
        cols = [self.src, self.dst, *self.numeric, *self.categorical]
        for port in (self.src_port, self.dst_port):
            if port is not None:
                cols.append(port)
        if self.label is not None:
            cols.append(self.label)
        return cols


@dataclass(eq=False)
class FlowDataset:
    """An ordered collection of flow records with a shared feature schema."""

    records: list[FlowRecord]
    feature_names: list[str]
    benign_label: str = "Benign"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def feature_dim(self) -> int:
        return len(self.feature_names)

    def features(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.feature_dim))
        return np.stack([r.features for r in self.records])

    def labels(self) -> list[str | None]:
        return [r.label for r in self.records]

    def binary_labels(self) -> np.ndarray:
        """0 for benign, 1 for any attack class; requires full labels."""
        if any(r.label is None for r in self.records):
            raise DataError("dataset contains unlabeled records")
        return np.array(
            [0 if r.label == self.benign_label else 1 for r in self.records],
            dtype=np.int64,
        )

    def subset(self, indices: list[int]) -> "FlowDataset":
        return FlowDataset(
            records=[self.records[i] for i in indices],
            feature_names=list(self.feature_names),
            benign_label=self.benign_label,
        )


def _resolve_categories(
    path: Path, schema: FlowSchema, header: list[str]
) -> dict[str, list[str]]:
    """Fill in discovered category lists by scanning the file once."""
    resolved = {c: list(v) for c, v in schema.categorical.items() if v is not None}
    missing = [c for c, v in schema.categorical.items() if v is None]
    if not missing:
        return resolved
    col_idx = {name: header.index(name) for name in missing}
    seen: dict[str, set[str]] = {c: set() for c in missing}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            for col, idx in col_idx.items():
                if idx < len(row):
                    seen[col].add(row[idx])
    for col in missing:
        resolved[col] = sorted(seen[col])
    return resolved


def parse_csv(path: str | Path, schema: FlowSchema) -> FlowDataset:
    """Parse a flow CSV into a FlowDataset, one record per data row.

    Raises SchemaError when a declared column is absent from the header,
    ParseError (citing the 1-based data row) for non-numeric feature cells
    or unknown categories.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, missing header") from None
    for col in schema.required_columns():
        if col not in header:
            raise SchemaError(f"{path}: missing column '{col}'")

    categories = _resolve_categories(path, schema, header)
    # Feature columns keep their header order; categoricals expand in place.
    feature_cols = [
        c for c in header if c in schema.numeric or c in schema.categorical
    ]
    feature_names: list[str] = []
    for col in feature_cols:
        if col in categories:
            feature_names.extend(f"{col}={cat}" for cat in categories[col])
        else:
            feature_names.append(col)

    col_idx = {name: header.index(name) for name in header}
    records: list[FlowRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}"
                )
            values: list[float] = []
            for col in feature_cols:
                cell = row[col_idx[col]]
                if col in categories:
                    cats = categories[col]
                    if cell not in cats:
                        raise ParseError(
                            f"{path}: row {row_no}: unknown {col} category '{cell}'"
                        )
                    values.extend(1.0 if cell == cat else 0.0 for cat in cats)
                else:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise ParseError(
                            f"{path}: row {row_no}: non-numeric value '{cell}' "
                            f"in column '{col}'"
                        ) from None
            label = row[col_idx[schema.label]] if schema.label is not None else None
            src = row[col_idx[schema.src]]
            dst = row[col_idx[schema.dst]]
            if schema.src_port is not None:
                src = f"{src}:{row[col_idx[schema.src_port]]}"
            if schema.dst_port is not None:
                dst = f"{dst}:{row[col_idx[schema.dst_port]]}"
            records.append(
                FlowRecord(
                    flow_id=row_no - 1,
                    src=src,
                    dst=dst,
                    features=np.array(values, dtype=np.float64),
                    label=label,
                )
            )
    return FlowDataset(
        records=records,
        feature_names=feature_names,
        benign_label=schema.benign_label,
    )


def serialize_csv(dataset: FlowDataset, path: str | Path) -> None:
    """Write a dataset back to CSV with fully expanded feature columns.

    Floats are written with repr so parse(serialize(parse(x))) is identity.
    """
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", *dataset.feature_names, "Label"])
        for rec in dataset.records:
            writer.writerow(
                [rec.src, rec.dst]
                + [repr(float(v)) for v in rec.features]
                + [rec.label if rec.label is not None else ""]
            )


def roundtrip_schema(dataset: FlowDataset) -> FlowSchema:
    """Schema that re-parses the output of :func:`serialize_csv`."""
    return FlowSchema(
        numeric=list(dataset.feature_names),
        src="src",
        dst="dst",
        label="Label",
        benign_label=dataset.benign_label,
    )


@dataclass
class FeatureScaler:
    """Per-feature clip-then-z-score transform, fitted on training rows only."""

    means: np.ndarray
    stds: np.ndarray
    clip_lo: np.ndarray
    clip_hi: np.ndarray
    feature_names: list[str]

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        doc = dict(extra or {})
        doc.update(
            {
                "format": SCALER_FORMAT,
                "version": SCALER_VERSION,
                "feature_names": self.feature_names,
                "means": self.means.tolist(),
                "stds": self.stds.tolist(),
                "clip_lo": self.clip_lo.tolist(),
                "clip_hi": self.clip_hi.tolist(),
            }
        )
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureScaler":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != SCALER_FORMAT or doc.get("version") != SCALER_VERSION:
            raise DataError(f"{path}: not a version-{SCALER_VERSION} scaler document")
        return cls(
            means=np.array(doc["means"], dtype=np.float64),
            stds=np.array(doc["stds"], dtype=np.float64),
            clip_lo=np.array(doc["clip_lo"], dtype=np.float64),
            clip_hi=np.array(doc["clip_hi"], dtype=np.float64),
            feature_names=list(doc["feature_names"]),
        )


def fit_scaler(train: FlowDataset) -> FeatureScaler:
    """Population mean/std per feature over training rows.

    Stds are floored at 1e-8; clip bounds are mean +- 5 * floored std.
    """
    if len(train) == 0:
        raise DataError("cannot fit a scaler on an empty dataset")
    x = train.features()
    means = x.mean(axis=0)
    stds = np.maximum(x.std(axis=0), STD_FLOOR)
    return FeatureScaler(
        means=means,
        stds=stds,
        clip_lo=means - CLIP_SIGMA * stds,
        clip_hi=means + CLIP_SIGMA * stds,
        feature_names=list(train.feature_names),
    )


def apply_scaler(scaler: FeatureScaler, dataset: FlowDataset) -> FlowDataset:
    """Clip each feature to the fitted bounds, then z-score it."""
    if dataset.feature_dim != scaler.means.shape[0]:
        raise DataError(
            f"scaler dimension {scaler.means.shape[0]} does not match "
            f"dataset dimension {dataset.feature_dim}"
        )
    records = []
    for rec in dataset.records:
        clipped = np.clip(rec.features, scaler.clip_lo, scaler.clip_hi)
        records.append(
            FlowRecord(
                flow_id=rec.flow_id,
                src=rec.src,
                dst=rec.dst,
                features=(clipped - scaler.means) / scaler.stds,
                label=rec.label,
            )
        )
    return FlowDataset(
        records=records,
        feature_names=list(dataset.feature_names),
        benign_label=dataset.benign_label,
    )


def invert_scaler(scaler: FeatureScaler, scaled: np.ndarray) -> np.ndarray:
    """Undo the z-score step; exact for values that were not clipped."""
    return scaled * scaler.stds + scaler.means


def split(
    dataset: FlowDataset, train_fraction: float, seed: int
) -> tuple[FlowDataset, FlowDataset]:
    """Deterministic stratified train/test split.

    Per-class train counts come from largest-remainder allocation of
    round(train_fraction * N) slots, so class proportions are preserved
    within +-1 record. Classes with fewer than 2 members go wholly to
    train with a warning. Records keep their original dataset order.
    """
    if not (0.0 < train_fraction < 1.0):
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    strata: dict[str, list[int]] = {}
    for i, rec in enumerate(dataset.records):
        strata.setdefault(rec.label if rec.label is not None else "", []).append(i)

    train_idx: list[int] = []
    eligible: dict[str, list[int]] = {}
    for label in sorted(strata):
        members = strata[label]
        if len(members) < 2:
            warnings.warn(
                f"class '{label}' has {len(members)} member(s); assigning it "
                "wholly to the training split"
            )
            train_idx.extend(members)
        else:
            eligible[label] = members

    total = sum(len(v) for v in eligible.values())
    target = int(round(train_fraction * total))
    floors = {c: math.floor(train_fraction * len(v)) for c, v in eligible.items()}
    remainders = sorted(
        eligible,
        key=lambda c: (-(train_fraction * len(eligible[c]) - floors[c]), c),
    )
    leftover = target - sum(floors.values())
    counts = dict(floors)
    for c in remainders:
        if leftover <= 0:
            break
        if counts[c] < len(eligible[c]):
            counts[c] += 1
            leftover -= 1

    rng = np.random.default_rng(seed)
    test_idx: list[int] = []
    for label in sorted(eligible):
        members = np.array(eligible[label])
        order = rng.permutation(len(members))
        chosen = members[order[: counts[label]]]
        train_idx.extend(int(i) for i in chosen)
        test_idx.extend(int(i) for i in members[order[counts[label] :]])

    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(test_idx))
