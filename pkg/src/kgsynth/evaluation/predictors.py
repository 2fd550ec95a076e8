"""Small from-scratch classifier toolkit used by the utility, fidelity and attack metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..schema import DataTable, SchemaError

KINDS = ("cart", "random_forest", "knn", "linear_svm", "logistic_regression", "mlp")


class PredictorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# design matrices


@dataclass
class FeatureEncoder:
    """Numeric design matrix: standardised continuous columns and one-hot discrete columns.

    With ``drop_first`` each discrete column loses its first level (reference
    coding for regression). Unseen categories encode as all zeros.
    """

    columns: list[str]
    continuous: dict[str, tuple[float, float]] = field(default_factory=dict)
    levels: dict[str, list[str]] = field(default_factory=dict)
    drop_first: bool = False

    @classmethod
    def fit(cls, table: DataTable, exclude=(), drop_first: bool = False) -> FeatureEncoder:
        cols = [c for c in table.schema.names if c not in set(exclude)]
        cont, levels = {}, {}
        for name in cols:
            spec = table.schema.column(name)
            v = table[name]
            if spec.is_continuous:
                sd = float(v.std()) if len(v) else 1.0
                cont[name] = (float(v.mean()) if len(v) else 0.0, sd if sd > 0 else 1.0)
            else:
                levels[name] = sorted(set(v.tolist()))
        return cls(cols, cont, levels, drop_first)

    @property
    def feature_names(self) -> list[str]:
        out = []
        for name in self.columns:
            if name in self.continuous:
                out.append(name)
            else:
                lv = self.levels[name][1:] if self.drop_first else self.levels[name]
                out.extend(f"{name}={x}" for x in lv)
        return out

    def transform(self, table: DataTable) -> np.ndarray:
        blocks = []
        for name in self.columns:
            if name not in table.schema:
                raise SchemaError(f"table lacks feature column {name!r}")
            v = table[name]
            if name in self.continuous:
                mu, sd = self.continuous[name]
                blocks.append(((np.asarray(v, dtype=np.float64) - mu) / sd)[:, None])
            else:
                lv = self.levels[name][1:] if self.drop_first else self.levels[name]
                lookup = {x: i for i, x in enumerate(lv)}
                M = np.zeros((len(v), len(lv)))
                idx = np.array([lookup.get(x, -1) for x in v], dtype=np.int64)
                hit = idx >= 0
                M[np.flatnonzero(hit), idx[hit]] = 1.0
                blocks.append(M)
        if not blocks:
            return np.zeros((table.row_count, 0))
        return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# CART


class DecisionTree:
    """Greedy Gini classification tree."""

    def __init__(self, max_depth: int = 6, min_samples_leaf: int = 1, max_features: int | None = None,
                 seed: int = 0, n_classes: int | None = None, complexity: float = 0.0):
        if max_depth < 0 or min_samples_leaf < 1 or complexity < 0:
            raise PredictorError("max_depth and complexity must be >= 0, min_samples_leaf >= 1")
        self.max_depth, self.min_samples_leaf, self.max_features = max_depth, min_samples_leaf, max_features
        # a split must cut total impurity by at least complexity * root impurity
        self.complexity = complexity
        self.seed = seed
        self.n_classes = n_classes

    def fit(self, X: np.ndarray, y: np.ndarray, rng: np.random.Generator | None = None) -> DecisionTree:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        K = self.n_classes or int(y.max()) + 1
        self.n_classes = K
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        Y = np.eye(K)[y]
        root = Y.sum(axis=0)
        self._min_gain = self.complexity * (len(y) - (root ** 2).sum() / max(len(y), 1))
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        stack = [(np.arange(len(y)), 0, self._new_node())]
        while stack:
            idx, depth, node = stack.pop()
            counts = Y[idx].sum(axis=0)
            self.value[node] = counts / counts.sum()
            if depth >= self.max_depth or len(idx) < 2 * self.min_samples_leaf or counts.max() == len(idx):
                continue
            split = self._best_split(X[idx], Y[idx], rng)
            if split is None:
                continue
            f, thr = split
            go_left = X[idx, f] <= thr
            l, r = self._new_node(), self._new_node()
            self.feature[node], self.threshold[node] = f, thr
            self.left[node], self.right[node] = l, r
            # right pushed first so the left subtree is expanded first
            stack.append((idx[~go_left], depth + 1, r))
            stack.append((idx[go_left], depth + 1, l))
        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left, self.right = np.array(self.left), np.array(self.right)
        self.value = np.array(self.value)
        return self

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(None)
        return len(self.feature) - 1

    def _best_split(self, X, Y, rng):
        n, d = X.shape
        feats = np.arange(d)
        if self.max_features is not None and self.max_features < d:
            feats = np.sort(rng.choice(d, size=self.max_features, replace=False))
        Xf = X[:, feats]
        order = np.argsort(Xf, axis=0, kind="stable")
        xs = np.take_along_axis(Xf, order, axis=0)
        cum = np.cumsum(Y[order], axis=0)  # (n, d', K)
        total = cum[-1]
        nl = np.arange(1, n, dtype=np.float64)[:, None]
        left = cum[:-1]
        right = total[None] - left
        nr = n - nl
        imp = (nl - (left ** 2).sum(axis=2) / nl) + (nr - (right ** 2).sum(axis=2) / nr)
        ok = xs[:-1] < xs[1:]
        m = self.min_samples_leaf
        ok[: m - 1] = False
        if m > 1:
            ok[n - m:] = False
        if not ok.any():
            return None
        imp = np.where(ok, imp, np.inf)
        parent = n - (total[0] ** 2).sum() / n
        best = np.argmin(imp.T.ravel())  # feature-major scan: first feature wins ties
        j, i = divmod(int(best), n - 1)
        gain = parent - imp[i, j]
        if not gain > 1e-12 * n or gain < self._min_gain:
            return None
        return int(feats[j]), 0.5 * (xs[i, j] + xs[i + 1, j])

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            a = np.flatnonzero(active)
            f = self.feature[node[a]]
            go_left = X[a, f] <= self.threshold[node[a]]
            node[a] = np.where(go_left, self.left[node[a]], self.right[node[a]])
            active = self.feature[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


class RandomForest:
    def __init__(self, n_trees: int = 50, max_depth: int = 6, max_features: int | str = "sqrt", seed: int = 0):
        if n_trees < 1:
            raise PredictorError("n_trees must be >= 1")
        self.n_trees, self.max_depth, self.max_features, self.seed = n_trees, max_depth, max_features, seed

    def fit(self, X, y) -> RandomForest:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        self.n_classes = int(y.max()) + 1
        mf = max(1, int(np.sqrt(d))) if self.max_features == "sqrt" else int(self.max_features)
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_trees):
            boot = rng.integers(n, size=n)
            t = DecisionTree(self.max_depth, max_features=mf, n_classes=self.n_classes)
            self.trees.append(t.fit(X[boot], y[boot], rng))
        return self

    def predict_proba(self, X) -> np.ndarray:
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class KNearest:
    def __init__(self, k: int = 5, chunk: int = 1024):
        if k < 1:
            raise PredictorError("k must be >= 1")
        self.k, self.chunk = k, chunk

    def fit(self, X, y) -> KNearest:
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.n_classes = int(self.y.max()) + 1
        self._sq = (self.X ** 2).sum(axis=1)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        k = min(self.k, len(self.X))
        out = np.zeros((len(X), self.n_classes))
        for s in range(0, len(X), self.chunk):
            B = X[s:s + self.chunk]
            d2 = np.maximum((B ** 2).sum(axis=1)[:, None] + self._sq[None] - 2.0 * B @ self.X.T, 0.0)
            nn = np.argpartition(d2, k - 1, axis=1)[:, :k] if k < len(self.X) else np.tile(np.arange(k), (len(B), 1))
            votes = self.y[nn]
            for c in range(self.n_classes):
                out[s:s + len(B), c] = (votes == c).sum(axis=1)
        return out / k

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class LinearSVM:
    """One-vs-rest linear hinge-loss classifier, full-batch subgradient descent with iterate averaging."""

    def __init__(self, reg: float = 1e-3, lr: float = 0.1, iters: int = 300):
        if reg <= 0 or lr <= 0 or iters < 1:
            raise PredictorError("reg, lr and iters must be positive")
        self.reg, self.lr, self.iters = reg, lr, iters

    def fit(self, X, y) -> LinearSVM:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, d = X.shape
        K = int(y.max()) + 1
        self.n_classes = K
        S = np.where(np.eye(K)[y] > 0, 1.0, -1.0)  # (n, K)
        W = np.zeros((d, K))
        b = np.zeros(K)
        Wa, ba = np.zeros_like(W), np.zeros_like(b)
        for t in range(1, self.iters + 1):
            margin = S * (X @ W + b)
            active = (margin < 1.0) * S
            gW = self.reg * W - X.T @ active / n
            gb = -active.mean(axis=0)
            eta = self.lr / np.sqrt(t)
            W -= eta * gW
            b -= eta * gb
            Wa += (W - Wa) / t
            ba += (b - ba) / t
        self.W, self.b = Wa, ba
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict(self, X) -> np.ndarray:
        return self.decision_function(X).argmax(axis=1)


@dataclass
class LogisticFit:
    coef: np.ndarray  # intercept first
    se: np.ndarray
    converged: bool
    iterations: int
    loglik: float
    separated: np.ndarray | None = None  # per coefficient: ran past max_coef


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _loglik(X1, y, beta, l2):
    z = X1 @ beta
    return float(np.sum(y * z - np.logaddexp(0.0, z)) - 0.5 * l2 * np.sum(beta[1:] ** 2))


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = 0.0, max_iter: int = 100, tol: float = 1e-10,
                 max_coef: float = 15.0, max_se: float = 100.0) -> LogisticFit:
    """Binary maximum likelihood by damped Newton steps; SE from the inverse observed information.

    Complete or quasi-complete separation shows up as a coefficient running
    past ``max_coef`` or a standard error past ``max_se`` (features are
    standardised or one-hot, so both scales are meaningful); those are marked
    in ``separated``. A fit that fails to converge at all is reported as such.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    X1 = np.concatenate([np.ones((len(X), 1)), X], axis=1)
    d = X1.shape[1]
    pen = np.full(d, l2)
    pen[0] = 0.0
    beta = np.zeros(d)
    ll = _loglik(X1, y, beta, l2)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(X1 @ beta)
        g = X1.T @ (y - p) - pen * beta
        H = (X1 * (p * (1 - p))[:, None]).T @ X1 + np.diag(pen)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c = _loglik(X1, y, cand, l2)
            if ll_c >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, delta = cand, ll_c - ll
        ll = ll_c
        if np.max(np.abs(t * step)) < 1e-8 or abs(delta) < tol:
            converged = True
            break
    p = _sigmoid(X1 @ beta)
    H = (X1 * (p * (1 - p))[:, None]).T @ X1 + np.diag(pen)
    try:
        cov = np.linalg.inv(H)
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se = np.full(d, np.inf)
        converged = False
    return LogisticFit(beta, se, converged, it, ll, (np.abs(beta) > max_coef) | (se > max_se))


class LogisticRegression:
    """One-vs-rest logistic classifier (a single model for binary targets)."""

    def __init__(self, l2: float = 1e-3, max_iter: int = 50):
        self.l2, self.max_iter = l2, max_iter

    def fit(self, X, y) -> LogisticRegression:
        y = np.asarray(y, dtype=np.int64)
        K = int(y.max()) + 1
        self.n_classes = K
        cls = [1] if K == 2 else range(K)
        self.fits = [fit_logistic(X, (y == c).astype(float), self.l2, self.max_iter, max_coef=np.inf, max_se=np.inf) for c in cls]
        return self

    def predict_proba(self, X) -> np.ndarray:
        X1 = np.concatenate([np.ones((len(X), 1)), np.asarray(X, dtype=np.float64)], axis=1)
        P = np.stack([_sigmoid(X1 @ f.coef) for f in self.fits], axis=1)
        if self.n_classes == 2:
            return np.concatenate([1 - P, P], axis=1)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class MLPClassifier:
    """One hidden layer, softmax cross-entropy, Adam on mini-batches (built on the autodiff engine)."""

    def __init__(self, hidden: int = 64, epochs: int = 30, batch: int = 256, lr: float = 1e-2, seed: int = 0):
        self.hidden, self.epochs, self.batch, self.lr, self.seed = hidden, epochs, batch, lr, seed

    def fit(self, X, y) -> MLPClassifier:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        K = int(y.max()) + 1
        self.n_classes = K
        self.net = ad.MLP([X.shape[1], self.hidden, K], "tanh")
        rng = np.random.default_rng(self.seed)
        P = self.net.init(rng)
        opt = ad.Adam(P, lr=self.lr, betas=(0.9, 0.999))
        Y = np.eye(K)[y]
        bounds = [(0, K)]
        for _ in range(self.epochs):
            order = rng.permutation(len(X))
            for s in range(0, len(X), self.batch):
                b = order[s:s + self.batch]
                xb, yb = X[b], Y[b]

                def loss(Pt):
                    logp = ad.log_softmax_segments(self.net.forward(Pt, ad.const(xb)), bounds)
                    return ad.neg(ad.mean(ad.sum(logp * yb, axis=1)))

                _, g = ad.value_and_grad(loss, P)
                P = opt.step(P, g)
        self.params = P
        return self

    def predict_proba(self, X) -> np.ndarray:
        logits = ad.forward(lambda P, x: self.net.forward(P, x), self.params, np.asarray(X, dtype=np.float64))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class PredictorSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PredictorError(f"unknown predictor kind {self.kind!r}")
        for k, v in self.params.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
                raise PredictorError(f"hyperparameter {k!r} must be positive")

    def build(self):
        p = dict(self.params)
        if self.kind == "cart":
            return DecisionTree(p.get("max_depth", 6), p.get("min_samples_leaf", 1), seed=self.seed)
        if self.kind == "random_forest":
            return RandomForest(p.get("n_trees", 50), p.get("max_depth", 6), p.get("max_features", "sqrt"), self.seed)
        if self.kind == "knn":
            return KNearest(p.get("k", 5))
        if self.kind == "linear_svm":
            return LinearSVM(p.get("reg", 1e-3), p.get("lr", 0.1), p.get("iters", 300))
        if self.kind == "logistic_regression":
            return LogisticRegression(p.get("l2", 1e-3))
        return MLPClassifier(p.get("hidden", 64), p.get("epochs", 30), p.get("batch", 256), p.get("lr", 1e-2), self.seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": self.seed}


DEFAULT_SPECS = tuple(PredictorSpec(k) for k in ("random_forest", "knn", "cart", "linear_svm", "mlp"))


@dataclass
class FittedPredictor:
    spec: PredictorSpec
    features: FeatureEncoder
    target: str
    classes: list[str]
    model: object

    def predict_labels(self, table: DataTable) -> np.ndarray:
        idx = self.model.predict(self.features.transform(table))
        return np.array([self.classes[i] for i in idx], dtype=object)

    def accuracy(self, table: DataTable) -> float:
        return float(np.mean(self.predict_labels(table) == table[self.target]))

    def true_label_confidence(self, table: DataTable) -> np.ndarray:
        """Predicted probability of each row's own label (0 for labels never seen)."""
        if not hasattr(self.model, "predict_proba"):
            raise PredictorError(f"{self.spec.kind} has no probability output")
        P = self.model.predict_proba(self.features.transform(table))
        lookup = {c: i for i, c in enumerate(self.classes)}
        idx = np.array([lookup.get(v, -1) for v in table[self.target]])
        out = np.zeros(len(idx))
        ok = idx >= 0
        out[ok] = P[np.flatnonzero(ok), idx[ok]]
        return out


def train_predictor(spec: PredictorSpec, train: DataTable, target: str,
                    features: FeatureEncoder | None = None) -> FittedPredictor:
    if target not in train.schema:
        raise SchemaError(f"unknown target column {target!r}")
    if train.schema.column(target).is_continuous:
        raise PredictorError(f"target {target!r} must be discrete")
    classes = sorted(set(train[target].tolist()))
    if len(classes) < 2:
        raise PredictorError(f"target {target!r} has a single class in the training table")
    feats = features or FeatureEncoder.fit(train, exclude=[target])
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.array([lookup[v] for v in train[target]], dtype=np.int64)
    model = spec.build().fit(feats.transform(train), y)
    return FittedPredictor(spec, feats, target, classes, model)
