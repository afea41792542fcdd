"""From-scratch classical classifiers over flattened feature vectors.

Six kinds share one fit/predict/evaluate contract: logistic regression,
Gaussian naive Bayes, k-nearest neighbors, a linear SVM trained by hinge
subgradient descent, a CART decision tree, and a bootstrap random forest.
Everything is deterministic given (spec, data): random choices derive from
the spec seed, ties break by fixed rules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .features import FeatureTensor
from .ingest import Group

CLASSIFIER_KINDS = ("logreg", "gnb", "knn", "svm_linear", "cart", "random_forest")

DEFAULT_HYPERPARAMS: dict[str, dict] = {
    "logreg": {"learning_rate": 0.1, "epochs": 500, "l2": 1e-4},
    "gnb": {"var_floor": 1e-9},
    "knn": {"k": 5},
    "svm_linear": {"C": 1.0, "learning_rate": 0.01, "epochs": 500},
    "cart": {"max_depth": 12, "min_leaf": 2},
    "random_forest": {"n_trees": 100, "max_depth": 12, "min_leaf": 2,
                      "feature_subsample": "sqrt", "bootstrap": True},
}


class ClassicError(Exception):
    pass


class SingleClassTrainError(ClassicError):
    pass


class InvalidHyperparamError(ClassicError):
    pass


class DimensionMismatchError(ClassicError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledVectors:
    """Feature rows x, labels y in {0 control, 1 alcoholic}."""

    x: np.ndarray
    y: np.ndarray
    feature_kind: str = "raw"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"bad shapes x{x.shape} y{y.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        if y.size and not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size


def flatten_tensor(tensor: FeatureTensor) -> np.ndarray:
    """Row-major flattening; correlation keeps only the upper triangle
    (the matrix is symmetric, so the lower half duplicates features)."""
    if tensor.kind == "correlation":
        plane = tensor.data[0]
        iu = np.triu_indices(plane.shape[0], k=1)
        return plane[iu]
    return tensor.data.ravel()


def vectors_from_tensors(tensors) -> LabeledVectors:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("no tensors")
    kind = tensors[0].kind
    x = np.vstack([flatten_tensor(t) for t in tensors])
    y = np.array([1 if t.label is Group.ALCOHOLIC else 0 for t in tensors])
    return LabeledVectors(x, y, feature_kind=kind)


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str
    hyperparams: dict = dc_field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASSIFIER_KINDS:
            raise InvalidHyperparamError(f"unknown classifier kind {self.kind!r}")
        merged = dict(DEFAULT_HYPERPARAMS[self.kind])
        unknown = set(self.hyperparams) - set(merged)
        if unknown:
            raise InvalidHyperparamError(f"{self.kind}: unknown hyperparams {sorted(unknown)}")
        merged.update(self.hyperparams)
        _validate_hyperparams(self.kind, merged)
        object.__setattr__(self, "hyperparams", merged)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparams": self.hyperparams, "seed": self.seed}


def _validate_hyperparams(kind: str, hp: dict) -> None:
    def positive(name):
        if not hp[name] > 0:
            raise InvalidHyperparamError(f"{kind}: {name} must be > 0, got {hp[name]}")

    if kind == "logreg":
        positive("learning_rate"); positive("epochs")
        if hp["l2"] < 0:
            raise InvalidHyperparamError("logreg: l2 must be >= 0")
    elif kind == "knn":
        if not (isinstance(hp["k"], int) and hp["k"] >= 1):
            raise InvalidHyperparamError(f"knn: k must be a positive int, got {hp['k']!r}")
    elif kind == "svm_linear":
        positive("C"); positive("learning_rate"); positive("epochs")
    elif kind == "cart":
        if hp["max_depth"] < 0:
            raise InvalidHyperparamError("cart: max_depth must be >= 0")
        if hp["min_leaf"] < 1:
            raise InvalidHyperparamError("cart: min_leaf must be >= 1")
    elif kind == "random_forest":
        positive("n_trees")
        if hp["max_depth"] < 0:
            raise InvalidHyperparamError("random_forest: max_depth must be >= 0")
        if hp["feature_subsample"] not in ("sqrt", "log2", "all"):
            raise InvalidHyperparamError(
                f"random_forest: feature_subsample must be sqrt|log2|all, got {hp['feature_subsample']!r}")


@dataclass
class FitReport:
    accuracy: float
    confusion: np.ndarray  # [actual][predicted] counts
    train_accuracy: float
    spec: ClassifierSpec

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "train_accuracy": self.train_accuracy,
            "spec": self.spec.to_dict(),
        }

    def to_csv_row(self) -> str:
        c = self.confusion
        return (f"{self.spec.kind},{self.accuracy:.6f},{self.train_accuracy:.6f},"
                f"{c[0, 0]},{c[0, 1]},{c[1, 0]},{c[1, 1]}")


# ---------------------------------------------------------------------------
# Model base plus the six kinds
# ---------------------------------------------------------------------------

class Model:
    kind = "base"

    def __init__(self, spec: ClassifierSpec, n_features: int):
        self.spec = spec
        self.n_features = n_features
        self.train_accuracy = 0.0

    def _check_dim(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            if x.size != self.n_features:
                raise DimensionMismatchError(
                    f"expected {self.n_features} features, got {x.size}")
            return x[None, :]
        if x.shape[1] != self.n_features:
            raise DimensionMismatchError(
                f"expected {self.n_features} features, got {x.shape[1]}")
        return x

    def scores(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def labels_from_scores(self, s: np.ndarray) -> np.ndarray:
        return (s > 0.5).astype(np.int64)

    def predict_batch(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_dim(x)
        s = self.scores(x)
        return self.labels_from_scores(s), s

    def params_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps({
            "format": "eegscreen-model/1",
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "n_features": self.n_features,
            "train_accuracy": self.train_accuracy,
            "params": self.params_dict(),
        }, sort_keys=True)


class LogisticRegression(Model):
    kind = "logreg"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        hp = self.spec.hyperparams
        n, d = x.shape
        w = np.zeros(d)
        b = 0.0
        lr, lam = hp["learning_rate"], hp["l2"]
        for _ in range(hp["epochs"]):
            p = _sigmoid(x @ w + b)
            err = p - y
            w -= lr * (x.T @ err / n + lam * w)
            b -= lr * float(err.mean())
        self.w, self.b = w, b

    def scores(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(x @ self.w + self.b)

    def params_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b}


class GaussianNaiveBayes(Model):
    kind = "gnb"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        floor = self.spec.hyperparams["var_floor"]
        self.priors = np.array([(y == c).mean() for c in (0, 1)])
        self.means = np.stack([x[y == c].mean(axis=0) for c in (0, 1)])
        self.vars = np.stack([x[y == c].var(axis=0) for c in (0, 1)]) + floor

    def scores(self, x: np.ndarray) -> np.ndarray:
        log_post = np.stack([
            np.log(self.priors[c])
            - 0.5 * (np.log(2 * np.pi * self.vars[c])
                     + (x - self.means[c]) ** 2 / self.vars[c]).sum(axis=1)
            for c in (0, 1)
        ], axis=1)
        shift = log_post.max(axis=1, keepdims=True)
        p = np.exp(log_post - shift)
        return p[:, 1] / p.sum(axis=1)

    def params_dict(self) -> dict:
        return {"priors": self.priors.tolist(), "means": self.means.tolist(),
                "vars": self.vars.tolist()}


class KNearestNeighbors(Model):
    kind = "knn"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        self.train_x = x
        self.train_y = y

    def predict_batch(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._check_dim(x)
        k = min(self.spec.hyperparams["k"], len(self.train_y))
        labels = np.empty(x.shape[0], dtype=np.int64)
        scores = np.empty(x.shape[0])
        for i, row in enumerate(x):
            d2 = ((self.train_x - row) ** 2).sum(axis=1)
            order = np.argsort(d2, kind="stable")[:k]  # distance, then index
            votes = self.train_y[order]
            ones = int(votes.sum())
            zeros = k - ones
            if ones != zeros:
                labels[i] = 1 if ones > zeros else 0
            else:
                # vote tie: smaller mean voter distance wins, then class 0
                d_sel = d2[order]
                mean1 = d_sel[votes == 1].mean()
                mean0 = d_sel[votes == 0].mean()
                labels[i] = 1 if mean1 < mean0 else 0
            scores[i] = ones / k
        return labels, scores

    def scores(self, x: np.ndarray) -> np.ndarray:
        return self.predict_batch(x)[1]

    def params_dict(self) -> dict:
        return {"train_x": self.train_x.tolist(), "train_y": self.train_y.tolist()}


class LinearSVM(Model):
    kind = "svm_linear"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        hp = self.spec.hyperparams
        n, d = x.shape
        sy = 2.0 * y - 1.0
        w = np.zeros(d)
        b = 0.0
        C = hp["C"]
        for t in range(hp["epochs"]):
            lr = hp["learning_rate"] / (1.0 + 0.01 * t)
            margins = sy * (x @ w + b)
            active = margins < 1.0
            gw = w - C * (sy[active, None] * x[active]).sum(axis=0) / n
            gb = -C * sy[active].sum() / n
            w -= lr * gw
            b -= lr * gb
        self.w, self.b = w, b

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.w + self.b

    def labels_from_scores(self, s: np.ndarray) -> np.ndarray:
        return (s > 0.0).astype(np.int64)

    def params_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b}


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "counts")

    def __init__(self, counts):
        self.feature = -1
        self.threshold = 0.0
        self.left = None
        self.right = None
        self.counts = counts

    @property
    def is_leaf(self):
        return self.left is None

    def to_list(self):
        if self.is_leaf:
            return [int(self.counts[0]), int(self.counts[1])]
        return [self.feature, self.threshold, self.left.to_list(), self.right.to_list()]

    @classmethod
    def from_list(cls, enc) -> "_TreeNode":
        if len(enc) == 2:
            return cls(np.array(enc))
        node = cls(np.zeros(2, dtype=np.int64))
        node.feature = int(enc[0])
        node.threshold = float(enc[1])
        node.left = cls.from_list(enc[2])
        node.right = cls.from_list(enc[3])
        return node


def _gini(counts) -> float:
    n = counts[0] + counts[1]
    if n == 0:
        return 0.0
    p0 = counts[0] / n
    p1 = counts[1] / n
    return 1.0 - p0 * p0 - p1 * p1


def _grow_tree(x, y, idx, depth, max_depth, min_leaf, feature_pool, rng) -> _TreeNode:
    ysub = y[idx]
    counts = np.array([int((ysub == 0).sum()), int((ysub == 1).sum())])
    node = _TreeNode(counts)
    if depth >= max_depth or idx.size < 2 * min_leaf or counts[0] == 0 or counts[1] == 0:
        return node

    if feature_pool >= x.shape[1]:
        feats = np.arange(x.shape[1])
    else:
        feats = np.sort(rng.choice(x.shape[1], size=feature_pool, replace=False))

    parent = _gini(counts)
    best_gain, best_feat, best_thr = 0.0, -1, 0.0
    n = idx.size
    for f in feats:
        vals = x[idx, f]
        order = np.argsort(vals, kind="stable")
        vs = vals[order]
        ys = ysub[order]
        ones = np.cumsum(ys)
        total1 = ones[-1]
        for i in range(min_leaf, n - min_leaf + 1):
            if vs[i] == vs[i - 1]:
                continue
            left1 = ones[i - 1]
            lc = (i - left1, left1)
            rc = ((n - i) - (total1 - left1), total1 - left1)
            gain = parent - (i * _gini(lc) + (n - i) * _gini(rc)) / n
            if gain > best_gain + 1e-15:
                best_gain = gain
                best_feat = int(f)
                best_thr = 0.5 * (float(vs[i]) + float(vs[i - 1]))
    if best_feat < 0:
        return node
    node.feature = best_feat
    node.threshold = best_thr
    mask = x[idx, best_feat] <= best_thr
    node.left = _grow_tree(x, y, idx[mask], depth + 1, max_depth, min_leaf,
                           feature_pool, rng)
    node.right = _grow_tree(x, y, idx[~mask], depth + 1, max_depth, min_leaf,
                            feature_pool, rng)
    return node


def _tree_scores(node: _TreeNode, x: np.ndarray) -> np.ndarray:
    out = np.empty(x.shape[0])
    for i, row in enumerate(x):
        cur = node
        while not cur.is_leaf:
            cur = cur.left if row[cur.feature] <= cur.threshold else cur.right
        total = cur.counts[0] + cur.counts[1]
        out[i] = cur.counts[1] / total if total else 0.0
    return out


class CartTree(Model):
    kind = "cart"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        hp = self.spec.hyperparams
        rng = np.random.default_rng(self.spec.seed)
        self.root = _grow_tree(x, y, np.arange(len(y)), 0, hp["max_depth"],
                               hp["min_leaf"], x.shape[1], rng)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return _tree_scores(self.root, x)

    def labels_from_scores(self, s: np.ndarray) -> np.ndarray:
        return (s > 0.5).astype(np.int64)  # exact tie -> class 0

    def params_dict(self) -> dict:
        return {"tree": self.root.to_list()}


def _pool_size(mode: str, d: int) -> int:
    if mode == "sqrt":
        return max(1, int(np.sqrt(d)))
    if mode == "log2":
        return max(1, int(np.log2(d)) if d > 1 else 1)
    return d


class RandomForest(Model):
    kind = "random_forest"

    def fit(self, x: np.ndarray, y: np.ndarray) -> None:
        hp = self.spec.hyperparams
        n = len(y)
        pool = _pool_size(hp["feature_subsample"], x.shape[1])
        seeds = np.random.SeedSequence(self.spec.seed).spawn(hp["n_trees"])
        self.trees = []
        for seq in seeds:
            rng = np.random.default_rng(seq)
            idx = rng.integers(0, n, size=n) if hp["bootstrap"] else np.arange(n)
            self.trees.append(_grow_tree(x, y, np.asarray(idx), 0, hp["max_depth"],
                                         hp["min_leaf"], pool, rng))

    def scores(self, x: np.ndarray) -> np.ndarray:
        votes = np.stack([(_tree_scores(t, x) > 0.5) for t in self.trees])
        return votes.mean(axis=0)

    def labels_from_scores(self, s: np.ndarray) -> np.ndarray:
        return (s > 0.5).astype(np.int64)  # even split of votes -> class 0

    def params_dict(self) -> dict:
        return {"trees": [t.to_list() for t in self.trees]}


_MODEL_CLASSES = {
    "logreg": LogisticRegression,
    "gnb": GaussianNaiveBayes,
    "knn": KNearestNeighbors,
    "svm_linear": LinearSVM,
    "cart": CartTree,
    "random_forest": RandomForest,
}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# fit / predict / evaluate
# ---------------------------------------------------------------------------

def fit(spec: ClassifierSpec, train: LabeledVectors) -> Model:
    """Train one classifier; deterministic for fixed (spec, train)."""
    if len(train) == 0:
        raise ValueError("empty training set")
    classes = np.unique(train.y)
    if classes.size < 2 and spec.kind != "knn":
        raise SingleClassTrainError(
            f"{spec.kind} needs both classes in training data, got {classes.tolist()}")
    model = _MODEL_CLASSES[spec.kind](spec, train.x.shape[1])
    model.fit(train.x, train.y)
    pred, _ = model.predict_batch(train.x)
    model.train_accuracy = float((pred == train.y).mean())
    return model


def predict(model: Model, x) -> tuple[int, float]:
    """Label in {0,1} plus a score: class-1 probability for logreg/gnb,
    vote fraction for knn/cart/forest, signed margin for the SVM."""
    labels, scores = model.predict_batch(np.asarray(x, dtype=np.float64))
    return int(labels[0]), float(scores[0])


def evaluate(model: Model, test: LabeledVectors) -> FitReport:
    """Held-out accuracy and the 2x2 confusion matrix [actual][predicted]."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred, _ = model.predict_batch(test.x)
    confusion = np.zeros((2, 2), dtype=np.int64)
    for actual, guess in zip(test.y, pred):
        confusion[actual, guess] += 1
    accuracy = float(np.trace(confusion)) / len(test)
    return FitReport(accuracy, confusion, model.train_accuracy, model.spec)


def save_model(model: Model, path) -> None:
    from pathlib import Path
    Path(path).write_text(model.to_json() + "\n")


def load_model(path) -> Model:
    from pathlib import Path
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "eegscreen-model/1":
        raise ClassicError(f"unsupported model format {doc.get('format')!r}")
    spec = ClassifierSpec(**doc["spec"])
    model = _MODEL_CLASSES[spec.kind](spec, doc["n_features"])
    model.train_accuracy = doc["train_accuracy"]
    p = doc["params"]
    if spec.kind in ("logreg", "svm_linear"):
        model.w = np.array(p["w"])
        model.b = float(p["b"])
    elif spec.kind == "gnb":
        model.priors = np.array(p["priors"])
        model.means = np.array(p["means"])
        model.vars = np.array(p["vars"])
    elif spec.kind == "knn":
        model.train_x = np.array(p["train_x"])
        model.train_y = np.array(p["train_y"], dtype=np.int64)
    elif spec.kind == "cart":
        model.root = _TreeNode.from_list(p["tree"])
    elif spec.kind == "random_forest":
        model.trees = [_TreeNode.from_list(t) for t in p["trees"]]
    return model
