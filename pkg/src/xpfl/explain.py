"""Explainers: a gain-ratio decision-tree surrogate, t-SNE and the QoX score."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import models as M
from .numkit import ParameterError, make_rng

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# information measures


def entropy(counts):
    """Shannon entropy in bits of a class-count vector."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log2(p)))


@dataclass(frozen=True)
class SplitScore:
    gain: float
    split_entropy: float
    ratio: float
    valid: bool


def gain_ratio(labels, values, threshold, n_classes=None):
    """Information gain ratio of the binary split ``values <= threshold``.

    A split that leaves one side empty is returned with ``valid=False``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n_classes = n_classes or int(labels.max()) + 1
    left = values <= threshold
    n, nl = len(labels), int(left.sum())
    if nl == 0 or nl == n:
        return SplitScore(0.0, 0.0, 0.0, False)
    parent = entropy(np.bincount(labels, minlength=n_classes))
    parts = [labels[left], labels[~left]]
    weights = [len(p) / n for p in parts]
    expected = sum(w * entropy(np.bincount(p, minlength=n_classes)) for w, p in zip(weights, parts))
    gain = parent - expected
    split_ent = -sum(w * np.log2(w) for w in weights)
    return SplitScore(gain, split_ent, gain / split_ent, True)


# ---------------------------------------------------------------------------
# decision tree


@dataclass(frozen=True)
class TreeLimits:
    max_depth: int = 8
    min_samples_leaf: int = 3
    purity: float = 0.99


@dataclass
class TreeNode:
    histogram: np.ndarray
    n_samples: int
    depth: int
    attribute: int = -1
    threshold: float = 0.0
    left: TreeNode | None = None
    right: TreeNode | None = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def label(self):
        return int(np.argmax(self.histogram))

    def to_dict(self):
        d = {"depth": self.depth, "samples": self.n_samples,
             "histogram": [round(float(h), 6) for h in self.histogram]}
        if self.is_leaf:
            d["class"] = self.label
        else:
            d.update(attribute=self.attribute, threshold=float(self.threshold),
                     left=self.left.to_dict(), right=self.right.to_dict())
        return d


def fit_tree(X, y, n_classes, limits=TreeLimits(), depth=0):
    """Grow a binary tree on continuous attributes.

    Thresholds are midpoints between consecutive distinct values; the
    (attribute, threshold) pair with the highest gain ratio wins, ties going
    to the lowest attribute index and then the lowest threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=n_classes)
    node = TreeNode(counts / counts.sum(), len(y), depth)
    if (depth >= limits.max_depth or len(y) < 2 * limits.min_samples_leaf
            or node.histogram.max() >= limits.purity):
        return node
    thr, gains, ratios = kernels.split_scan(X, y, n_classes, limits.min_samples_leaf)
    if not (gains > 0).any():
        return node
    best = int(np.argmax(ratios))
    go_left = X[:, best] <= thr[best]
    node.attribute, node.threshold = best, float(thr[best])
    node.left = fit_tree(X[go_left], y[go_left], n_classes, limits, depth + 1)
    node.right = fit_tree(X[~go_left], y[~go_left], n_classes, limits, depth + 1)
    return node


def tree_depth(node):
    if node.is_leaf:
        return node.depth
    return max(tree_depth(node.left), tree_depth(node.right))


def tree_predict(node, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty(len(X), dtype=np.int64)
    for i, row in enumerate(X):
        n = node
        while not n.is_leaf:
            n = n.left if row[n.attribute] <= n.threshold else n.right
        out[i] = n.label
    return out


def pooled_attributes(images, block=4):
    """Average-pool each channel over ``block`` x ``block`` cells and flatten."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n, H, W, C = images.shape
    p = images.reshape(n, H // block, block, W // block, block, C).mean(axis=(2, 4))
    return p.reshape(n, -1)


@dataclass
class SurrogateTree:
    root: TreeNode
    n_classes: int
    fidelity: float = float("nan")
    features: str = "avgpool4"
    fit_predictions: np.ndarray = field(default=None, repr=False)
    fit_tree_predictions: np.ndarray = field(default=None, repr=False)

    @property
    def block(self):
        return int(self.features.removeprefix("avgpool"))

    def attributes(self, images):
        return pooled_attributes(images, self.block)

    def predict(self, images):
        return tree_predict(self.root, self.attributes(images))

    def to_dict(self):
        return {"features": self.features, "n_classes": self.n_classes,
                "fidelity": self.fidelity, "root": self.root.to_dict()}

    def render(self, attr_names=None):
        """Indented text rendering, one line per node."""
        lines = []

        def name(a):
            return attr_names[a] if attr_names else f"a{a}"

        def walk(n, indent, prefix):
            hist = " ".join(f"{h:.2f}" for h in n.histogram)
            if n.is_leaf:
                lines.append(f"{indent}{prefix}class {n.label}  (n={n.n_samples}; p=[{hist}])")
                return
            lines.append(f"{indent}{prefix}{name(n.attribute)} <= {n.threshold:.4f}  (n={n.n_samples})")
            walk(n.left, indent + "  ", "yes: ")
            walk(n.right, indent + "  ", "no:  ")

        walk(self.root, "", "")
        return "\n".join(lines) + "\n"


def fit_surrogate(shard_or_images, classifier: M.ClassifierModel, limits=TreeLimits(), block=4):
    """Fit a tree to the classifier's own predictions on every local sample."""
    images = getattr(shard_or_images, "all_images", shard_or_images)
    images = np.asarray(images)
    preds = M.predict(images, classifier)
    X = pooled_attributes(images, block)
    n_classes = classifier.config.n_classes
    root = fit_tree(X, preds, n_classes, limits)
    tree_preds = tree_predict(root, X)
    fidelity = float(np.mean(tree_preds == preds))
    return SurrogateTree(root, n_classes, fidelity, f"avgpool{block}", preds, tree_preds)


def explain_instance(tree: SurrogateTree, image):
    """(predicted class, [(attribute, threshold, 'left' | 'right'), ...])."""
    x = tree.attributes(image)[0]
    path = []
    n = tree.root
    while not n.is_leaf:
        if x[n.attribute] <= n.threshold:
            path.append((n.attribute, n.threshold, "left"))
            n = n.left
        else:
            path.append((n.attribute, n.threshold, "right"))
            n = n.right
    return n.label, path


# ---------------------------------------------------------------------------
# t-SNE


def pairwise_sq_dists(X):
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    return np.sum(diff * diff, axis=-1)


def tsne_affinities(points, perplexity, tol=1e-5):
    """Symmetric joint affinities P and per-point Gaussian widths sigma.

    Exact duplicates are separated by a 1e-10 jitter first.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < 4:
        raise ParameterError(f"t-SNE needs at least 4 points, got {n}")
    if not 0 < perplexity < n:
        raise ParameterError(f"perplexity must be in (0, {n}), got {perplexity}")
    D2 = pairwise_sq_dists(X)
    off = ~np.eye(n, dtype=bool)
    if np.any(D2[off] == 0.0):
        logger.info("duplicate points in t-SNE input; adding 1e-10 jitter")
        X = X + 1e-10 * make_rng(0, 0x717).standard_normal(X.shape)
        D2 = pairwise_sq_dists(X)
    cond, beta = kernels.perplexity_rows(D2, float(perplexity), tol)
    P = (cond + cond.T) / (2.0 * n)
    return P, np.sqrt(1.0 / (2.0 * beta))


def student_t_affinities(Y):
    num = 1.0 / (1.0 + pairwise_sq_dists(Y))
    np.fill_diagonal(num, 0.0)
    return num / num.sum()


def kl_objective(P, Y):
    """KL(P || Q(Y)) in nats over off-diagonal pairs."""
    Q = student_t_affinities(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-12))))


@dataclass(frozen=True)
class TsneSchedule:
    learning_rate: float = 100.0
    exaggeration: float = 4.0
    exaggeration_iters: int = 50
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 100


@dataclass
class EmbeddingRun:
    X: np.ndarray
    Y: np.ndarray
    P: np.ndarray
    sigmas: np.ndarray
    perplexity: float
    schedule: TsneSchedule = TsneSchedule()
    Q: np.ndarray = None
    velocity: np.ndarray = None
    iteration: int = 0
    kl_trace: list = field(default_factory=list)

    @property
    def kl(self):
        """KL divergence at the current layout."""
        return kl_objective(self.P, self.Y)


def default_perplexity(n):
    return min(30.0, n / 4.0)


def tsne_init(points, perplexity=None, seed=0, schedule=TsneSchedule(), init=None):
    X = np.asarray(points, dtype=np.float64)
    perplexity = default_perplexity(len(X)) if perplexity is None else perplexity
    P, sigmas = tsne_affinities(X, perplexity)
    if init is None:
        init = 1e-4 * make_rng(seed, 0x75E).standard_normal((len(X), 2))
    Y = np.array(init, dtype=np.float64)
    return EmbeddingRun(X, Y, P, sigmas, perplexity, schedule, velocity=np.zeros_like(Y))


def tsne_step(run: EmbeddingRun):
    """One momentum gradient step; appends the pre-step KL to the trace."""
    s = run.schedule
    exag = s.exaggeration if run.iteration < s.exaggeration_iters else 1.0
    mom = s.momentum if run.iteration < s.momentum_switch else s.final_momentum
    grad, Q, kl = kernels.tsne_grad(run.Y, run.P, exag)
    run.Q = Q
    run.kl_trace.append(kl)
    run.velocity = mom * run.velocity - s.learning_rate * grad
    run.Y = run.Y + run.velocity
    run.iteration += 1
    return run


def tsne(points, iterations=500, perplexity=None, seed=0, schedule=TsneSchedule(), init=None):
    run = tsne_init(points, perplexity, seed, schedule, init)
    for _ in range(iterations):
        tsne_step(run)
    return run


@dataclass
class AggregationExplanation:
    kl_pre: float
    kl_post: float
    pre: EmbeddingRun
    post: EmbeddingRun

    @property
    def improvement(self):
        """C - C'; positive when the updated model's features embed with lower KL."""
        return self.kl_pre - self.kl_post


def aggregation_explain(pre_model, post_model, test_images, iterations=500, seed=0,
                        perplexity=None, schedule=TsneSchedule()):
    """Embed test-set features of two classifiers from one shared initial layout."""
    test_images = np.asarray(test_images)
    if len(test_images) == 0:
        raise ParameterError("aggregation_explain needs a non-empty test set")
    init = 1e-4 * make_rng(seed, 0x75E).standard_normal((len(test_images), 2))
    runs = []
    for model in (pre_model, post_model):
        feats = M.penultimate(test_images, model)
        runs.append(tsne(feats, iterations, perplexity, seed, schedule, init))
    return AggregationExplanation(runs[0].kl, runs[1].kl, runs[0], runs[1])


def silhouette(points, labels):
    """Mean silhouette coefficient (Euclidean); 0 when fewer than two clusters."""
    X = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        return 0.0
    D = np.sqrt(pairwise_sq_dists(X))
    s = np.zeros(len(X))
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() <= 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in uniq if c != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


# ---------------------------------------------------------------------------
# QoX


@dataclass(frozen=True)
class QoxScore:
    value: float
    decision_term: float
    aggregation_term: float
    chi: float


def qox(tree_or_fidelity, n_samples, model_size, kl_pre, kl_post, n_test, chi=1.0):
    """fidelity * D_k / |w| + chi * (C - C') * D_test / |w|."""
    if model_size <= 0:
        raise ParameterError(f"model size must be positive, got {model_size}")
    if n_test < 0:
        raise ParameterError(f"test-set size must be non-negative, got {n_test}")
    fid = getattr(tree_or_fidelity, "fidelity", tree_or_fidelity)
    decision = fid * n_samples / model_size
    aggregation = chi * (kl_pre - kl_post) * n_test / model_size
    return QoxScore(decision + aggregation, decision, aggregation, chi)
