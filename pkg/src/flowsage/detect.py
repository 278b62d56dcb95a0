"""Edge classification and evaluation.

The supervised model is logistic-loss gradient boosting over oblivious
trees: every node at a depth shares one (feature, threshold) split, found
greedily per level from 255-bin quantile histograms of gradient/hessian
sums, with Newton leaf values. An optional ordered mode estimates
gradients with permutation-prefix support models to avoid target leakage.

Unsupervised baselines (PCA residual, HBOS, Isolation Forest) are fitted
on benign rows only and thresholded at the quantile matching the training
attack fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.ensemble import IsolationForest

from ._gbdt_kernels import best_oblivious_split
from .errors import DataError
from .numcore import sigmoid
from .serialize import load_container, save_container

GBDT_KIND = b"GBDT"
GBDT_VERSION = 1
HBOS_EPS = 1e-12


@dataclass
class GbdtParams:
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 8
    min_samples_split: int = 4
    min_samples_leaf: int = 4
    n_bins: int = 255
    l2_reg: float = 1.0
    ordered: bool = False


@dataclass(eq=False)
class ObliviousTree:
    """One (feature, threshold) per level; 2^depth leaf values.

    Rows with feature < threshold go left (bit 0). Leaves untouched by
    training data keep value 0; they exist because the complete table is
    part of the oblivious structure.
    """

    features: np.ndarray
    thresholds: np.ndarray
    leaf_values: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.features)


@dataclass(eq=False)
class GbdtModel:
    trees: list[ObliviousTree]
    params: GbdtParams
    base_score: float
    n_features: int
    train_loss: list[float] = field(default_factory=list)


def _quantile_cuts(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Internal cut points; distinct, at most n_bins - 1 of them."""
    qs = np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    return np.unique(qs)


def _logloss(y: np.ndarray, margins: np.ndarray) -> float:
    p = np.clip(sigmoid(margins), 1e-12, 1 - 1e-12)
    return float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).mean())


class _TreeGrower:
    """Shared level-wise oblivious split search over binned columns."""

    def __init__(self, codes_t: np.ndarray, cuts: list[np.ndarray], params: GbdtParams):
        self.codes_t = codes_t  # (F, n) int16, C-contiguous per feature
        self.cuts = cuts
        self.n_cuts = np.array([c.size for c in cuts], dtype=np.int64)
        self.params = params
        self.n = codes_t.shape[1]

    def grow(self, g: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, list[int], list[float]]:
        """Greedy structure search; returns (leaf assignment, features, thresholds)."""
        p = self.params
        leaf = np.zeros(self.n, dtype=np.int64)
        feats: list[int] = []
        thrs: list[float] = []
        for _ in range(p.max_depth):
            gain, f, b = best_oblivious_split(
                self.codes_t,
                self.n_cuts,
                leaf,
                g,
                h,
                1 << len(feats),
                p.n_bins,
                p.min_samples_leaf,
                p.min_samples_split,
                p.l2_reg,
            )
            if f < 0 or gain <= 0.0:
                break
            feats.append(int(f))
            thrs.append(float(self.cuts[f][b]))
            leaf = leaf * 2 + (self.codes_t[f] > b)
        return leaf, feats, thrs


def _leaf_values(
    leaf: np.ndarray, g: np.ndarray, h: np.ndarray, n_leaves: int, lam: float
) -> np.ndarray:
    gs = np.bincount(leaf, weights=g, minlength=n_leaves)
    hs = np.bincount(leaf, weights=h, minlength=n_leaves)
    return -gs / (hs + lam)


def fit_gbdt(
    x: np.ndarray, y: np.ndarray, params: GbdtParams | None = None, seed: int = 0
) -> GbdtModel:
    """Fit the boosted oblivious-tree classifier on binary labels.

    Boosting stops early when no level-0 split has positive feasible gain.
    Deterministic: histogram accumulation order is fixed and the only
    randomness (ordered mode's permutation) is seeded.
    """
    params = params or GbdtParams()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected 2-D feature matrix, got shape {x.shape}")
    if x.shape[0] != y.shape[0]:
        raise DataError("feature matrix and labels disagree on row count")
    classes = np.unique(y)
    if not np.all(np.isin(classes, [0.0, 1.0])):
        raise DataError("labels must be binary 0/1")
    if classes.size < 2:
        raise DataError("training labels contain a single class")

    n, n_features = x.shape
    if params.n_bins < 2 or params.n_bins > 32767:
        raise DataError(f"n_bins must be in [2, 32767], got {params.n_bins}")
    cuts = [_quantile_cuts(x[:, f], params.n_bins) for f in range(n_features)]
    codes_t = np.empty((n_features, n), dtype=np.int16)
    for f in range(n_features):
        codes_t[f] = np.searchsorted(cuts[f], x[:, f], side="right")
    grower = _TreeGrower(codes_t, cuts, params)

    pos_rate = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    base = math.log(pos_rate / (1.0 - pos_rate))
    model = GbdtModel(trees=[], params=params, base_score=base, n_features=n_features)

    margins = np.full(n, base)
    if params.ordered:
        perm = np.random.default_rng([seed, 31]).permutation(n)
        position = np.empty(n, dtype=np.int64)
        position[perm] = np.arange(n)
        n_support = max(1, math.ceil(math.log2(n))) if n > 1 else 1
        support_margins = np.full((n_support, n), base)
        # Example at permutation position r reads the support model built
        # from the first 2^j <= r examples; position 0 reads the prior.
        level_of = np.full(n, -1, dtype=np.int64)
        prefix_mask = np.zeros((n_support, n), dtype=bool)
        for j in range(n_support):
            prefix_mask[j] = position < min(2**j, n)
            sel = (position >= 2**j) & ((position < 2 ** (j + 1)) | (j == n_support - 1))
            level_of[sel] = j

    for _ in range(params.n_trees):
        if params.ordered:
            est_margins = np.where(
                level_of >= 0, support_margins[np.maximum(level_of, 0), np.arange(n)], base
            )
        else:
            est_margins = margins
        p = sigmoid(est_margins)
        g = p - y
        h = p * (1.0 - p)
        leaf, feats, thrs = grower.grow(g, h)
        if not feats:
            break
        n_leaves = 1 << len(feats)
        if params.ordered:
            for j in range(n_support):
                mask = prefix_mask[j]
                pj = sigmoid(support_margins[j][mask])
                vj = _leaf_values(
                    leaf[mask], pj - y[mask], pj * (1 - pj), n_leaves, params.l2_reg
                )
                support_margins[j] += params.learning_rate * vj[leaf]
        p_full = sigmoid(margins)
        values = _leaf_values(
            leaf, p_full - y, p_full * (1 - p_full), n_leaves, params.l2_reg
        )
        margins += params.learning_rate * values[leaf]
        model.trees.append(
            ObliviousTree(
                features=np.array(feats, dtype=np.int64),
                thresholds=np.array(thrs, dtype=np.float64),
                leaf_values=values,
            )
        )
        model.train_loss.append(_logloss(y, margins))
    return model


def tree_leaf_index(tree: ObliviousTree, x: np.ndarray) -> np.ndarray:
    idx = np.zeros(x.shape[0], dtype=np.int64)
    for f, t in zip(tree.features, tree.thresholds):
        idx = idx * 2 + (x[:, f] >= t)
    return idx


def predict_margin(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise DataError(
            f"input dimension {x.shape[1]} != training dimension {model.n_features}"
        )
    out = np.full(x.shape[0], model.base_score)
    for tree in model.trees:
        out += model.params.learning_rate * tree.leaf_values[tree_leaf_index(tree, x)]
    return out


def predict_proba(model: GbdtModel, x: np.ndarray) -> np.ndarray:
    """Attack probability sigmoid(base + lr * sum of leaf values)."""
    return sigmoid(predict_margin(model, x))


def predict(model: GbdtModel, x: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (predict_proba(model, x) >= threshold).astype(np.int64)


def is_oblivious(tree: ObliviousTree) -> bool:
    """Structural check: one split per level and a complete leaf table."""
    return (
        len(tree.features) == len(tree.thresholds)
        and tree.leaf_values.shape == (1 << len(tree.features),)
    )


def save_gbdt(model: GbdtModel, path: str | Path, meta: dict | None = None) -> None:
    doc = dict(meta or {})
    p = model.params
    doc.update(
        {
            "base_score": model.base_score,
            "n_features": model.n_features,
            "train_loss": model.train_loss,
            "params": {
                "n_trees": p.n_trees,
                "learning_rate": p.learning_rate,
                "max_depth": p.max_depth,
                "min_samples_split": p.min_samples_split,
                "min_samples_leaf": p.min_samples_leaf,
                "n_bins": p.n_bins,
                "l2_reg": p.l2_reg,
                "ordered": p.ordered,
            },
        }
    )
    depths = np.array([t.depth for t in model.trees], dtype=np.int64)
    arrays = {
        "depths": depths,
        "features": np.concatenate([t.features for t in model.trees])
        if model.trees
        else np.zeros(0, dtype=np.int64),
        "thresholds": np.concatenate([t.thresholds for t in model.trees])
        if model.trees
        else np.zeros(0),
        "leaves": np.concatenate([t.leaf_values for t in model.trees])
        if model.trees
        else np.zeros(0),
    }
    save_container(path, GBDT_KIND, GBDT_VERSION, doc, arrays)


def load_gbdt(path: str | Path) -> GbdtModel:
    meta, arrays = load_container(path, GBDT_KIND, GBDT_VERSION)
    params = GbdtParams(**meta["params"])
    trees = []
    off = 0
    leaf_off = 0
    for depth in arrays["depths"]:
        depth = int(depth)
        trees.append(
            ObliviousTree(
                features=arrays["features"][off : off + depth],
                thresholds=arrays["thresholds"][off : off + depth],
                leaf_values=arrays["leaves"][leaf_off : leaf_off + (1 << depth)],
            )
        )
        off += depth
        leaf_off += 1 << depth
    return GbdtModel(
        trees=trees,
        params=params,
        base_score=meta["base_score"],
        n_features=meta["n_features"],
        train_loss=list(meta["train_loss"]),
    )


# ---------------------------------------------------------------------------
# Unsupervised baselines


@dataclass(eq=False)
class PcaDetector:
    means: np.ndarray
    stds: np.ndarray
    components: np.ndarray  # (n_components, dim)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Squared residual norm after projecting standardized rows."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        xs = (x - self.means) / self.stds
        resid = xs - (xs @ self.components.T) @ self.components
        return (resid**2).sum(axis=1)


def fit_pca_detector(benign: np.ndarray, n_components: int) -> PcaDetector:
    """Principal components of the benign correlation matrix."""
    x = np.asarray(benign, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("benign set is empty")
    if not 0 < n_components < x.shape[1]:
        raise DataError(
            f"n_components must be in [1, {x.shape[1] - 1}], got {n_components}"
        )
    stds = x.std(axis=0)
    if np.any(stds == 0.0):
        raise DataError("zero-variance feature: correlation matrix undefined")
    means = x.mean(axis=0)
    xs = (x - means) / stds
    corr = (xs.T @ xs) / x.shape[0]
    _, vecs = np.linalg.eigh(corr)
    comps = vecs[:, -n_components:][:, ::-1].T
    # canonical sign: largest-magnitude entry positive
    for row in comps:
        k = int(np.argmax(np.abs(row)))
        if row[k] < 0:
            row *= -1.0
    return PcaDetector(means=means, stds=stds, components=comps)


@dataclass(eq=False)
class HbosDetector:
    edges: list[np.ndarray]
    masses: list[np.ndarray]

    def score(self, x: np.ndarray) -> np.ndarray:
        """Sum over features of -log(bin mass + eps); out of range counts as empty."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        total = np.zeros(x.shape[0])
        for f in range(x.shape[1]):
            edges = self.edges[f]
            col = x[:, f]
            bins = np.clip(np.searchsorted(edges, col, side="right") - 1, 0, len(self.masses[f]) - 1)
            mass = self.masses[f][bins]
            mass = np.where((col < edges[0]) | (col > edges[-1]), 0.0, mass)
            total += -np.log(mass + HBOS_EPS)
        return total


def fit_hbos(benign: np.ndarray, n_bins: int = 10) -> HbosDetector:
    x = np.asarray(benign, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("benign set is empty")
    if n_bins < 2:
        raise DataError(f"n_bins must be >= 2, got {n_bins}")
    edges: list[np.ndarray] = []
    masses: list[np.ndarray] = []
    for f in range(x.shape[1]):
        lo, hi = float(x[:, f].min()), float(x[:, f].max())
        if hi == lo:
            hi = lo + 1.0
        e = np.linspace(lo, hi, n_bins + 1)
        counts, _ = np.histogram(x[:, f], bins=e)
        edges.append(e)
        masses.append(counts / x.shape[0])
    return HbosDetector(edges=edges, masses=masses)


@dataclass(eq=False)
class IforestDetector:
    model: IsolationForest

    def score(self, x: np.ndarray) -> np.ndarray:
        """Path-length anomaly score 2^(-E[h]/c(n)), in (0, 1)."""
        return -self.model.score_samples(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def fit_iforest(
    benign: np.ndarray, n_trees: int = 100, subsample: int = 256, seed: int = 0
) -> IforestDetector:
    x = np.asarray(benign, dtype=np.float64)
    if x.shape[0] == 0:
        raise DataError("benign set is empty")
    if n_trees < 1:
        raise DataError(f"n_trees must be >= 1, got {n_trees}")
    model = IsolationForest(
        n_estimators=n_trees,
        max_samples=min(subsample, x.shape[0]),
        random_state=seed,
    )
    model.fit(x)
    return IforestDetector(model=model)


def threshold_at_fraction(scores: np.ndarray, attack_fraction: float) -> float:
    """Score cutoff flagging the top attack_fraction share as attacks."""
    if not 0.0 < attack_fraction < 1.0:
        raise DataError(f"attack_fraction must be in (0, 1), got {attack_fraction}")
    return float(np.quantile(scores, 1.0 - attack_fraction))


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class DetectionMetrics:
    f1_macro: float
    accuracy: float
    detection_rate: float
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "DetectionMetrics":
        total = tp + fp + fn + tn
        if total == 0:
            raise DataError("empty confusion matrix")

        def f1(tp_, fp_, fn_):
            denom = 2 * tp_ + fp_ + fn_
            return 2 * tp_ / denom if denom else 0.0

        f1_attack = f1(tp, fp, fn)
        f1_benign = f1(tn, fn, fp)
        return cls(
            f1_macro=(f1_attack + f1_benign) / 2.0,
            accuracy=(tp + tn) / total,
            detection_rate=tp / (tp + fn) if (tp + fn) else 0.0,
            tp=tp,
            fp=fp,
            fn=fn,
            tn=tn,
        )

    def to_dict(self) -> dict:
        return {
            "f1_macro": self.f1_macro,
            "accuracy": self.accuracy,
            "detection_rate": self.detection_rate,
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
        }


def evaluate(predictions, labels) -> DetectionMetrics:
    """Binary detection metrics with attack (1) as the positive class."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if pred.shape != lab.shape:
        raise DataError(
            f"predictions ({pred.shape}) and labels ({lab.shape}) differ in length"
        )
    if pred.size == 0:
        raise DataError("cannot evaluate empty prediction list")
    tp = int(((pred == 1) & (lab == 1)).sum())
    fp = int(((pred == 1) & (lab == 0)).sum())
    fn = int(((pred == 0) & (lab == 1)).sum())
    tn = int(((pred == 0) & (lab == 0)).sum())
    return DetectionMetrics.from_counts(tp, fp, fn, tn)
