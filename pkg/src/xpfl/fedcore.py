"""Federated rounds: semi-supervised local training, weighted aggregation,
cosine-similarity personalisation, plus the FedAvg baseline.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import explain
from . import models as M
from . import numkit as nk
from . import quality
from .data import ClientShard, Dataset, PartitionSpec, partition_dirichlet

logger = logging.getLogger(__name__)


class LayoutMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameter vectors


@dataclass
class ParamVector:
    """Flattened parameters in dict order, plus the (name, shape) layout."""

    values: np.ndarray
    layout: tuple

    @classmethod
    def from_params(cls, params):
        layout = tuple((k, tuple(np.shape(v))) for k, v in params.items())
        values = np.concatenate([np.ravel(v) for v in params.values()]) if params else np.zeros(0)
        return cls(values.astype(np.float64), layout)

    @property
    def tag(self):
        return M.layout_tag({k: np.empty(s) for k, s in self.layout})

    def to_params(self):
        out, pos = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape)) if shape else 1
            out[name] = self.values[pos:pos + n].reshape(shape).copy()
            pos += n
        return out

    def check_compatible(self, other):
        if self.layout != other.layout:
            raise LayoutMismatchError(f"layout {self.tag} cannot combine with {other.tag}")

    def __len__(self):
        return len(self.values)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RoundConfig:
    rounds: int = 40
    local_iters: int = 1
    kd_weight: float = 1.0
    tau: float = 2.0
    lr_gae: float = 0.01
    lr_clf: float = 0.05
    batch_size: int = 16
    eps_recon: float = 1e-3
    reliability: str = "accuracy"  # accuracy | constant | inverse_recon

    def __post_init__(self):
        if self.rounds < 1 or self.local_iters < 1:
            raise nk.ParameterError("rounds and local_iters must be >= 1")
        if self.kd_weight < 0:
            raise nk.ParameterError(f"kd_weight must be >= 0, got {self.kd_weight}")
        if not self.tau > 0 or not self.eps_recon > 0:
            raise nk.ParameterError("tau and eps_recon must be positive")
        if self.batch_size < 1:
            raise nk.ParameterError("batch_size must be >= 1")
        if self.reliability not in ("accuracy", "constant", "inverse_recon"):
            raise nk.ParameterError(f"unknown reliability strategy {self.reliability!r}")


@dataclass(frozen=True)
class Scheme:
    """How one federated variant trains, aggregates and redistributes."""

    name: str = "xpfl"
    use_unlabeled: bool = True
    kd: bool = True
    aggregator: str = "weighted"  # weighted | fedavg
    broadcast: str = "fused"  # fused | global
    forced_psi: float | None = None


SCHEMES = {
    "xpfl": Scheme("xpfl"),
    "supervised": Scheme("supervised", use_unlabeled=False, kd=False),
    "local": Scheme("local", forced_psi=1.0),
    "fedavg": Scheme("fedavg", use_unlabeled=False, kd=False, aggregator="fedavg", broadcast="global"),
}


@dataclass
class ModelConfigs:
    gae: M.GaeConfig
    classifier: M.ClassifierConfig

    @classmethod
    def for_dataset(cls, ds: Dataset, gae=None, **clf_kw):
        H, W, C = ds.image_shape
        gae = gae or M.GaeConfig(height=H, width=W, channels=C)
        clf = M.ClassifierConfig(height=H, width=W, channels=C, n_classes=ds.n_classes,
                                 feature_dim=gae.dim, **clf_kw)
        return cls(gae, clf)


@dataclass
class ClientState:
    shard: ClientShard
    classifier: M.ClassifierModel
    gae: M.GaeModel
    last_recon: float = 1.0
    reliability: float = 1.0
    log: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def supervised_loss(logits, label):
    """Cross-entropy; batch mean when ``logits`` is 2-D."""
    return nk.cross_entropy(logits, label).item()


def kd_loss(teacher_feats, student_feats, tau, recon, eps_recon):
    """KL(softmax(F_t/tau) || softmax(F_s/tau)) / max(L_U, eps), batch mean."""
    p = nk.softmax(np.asarray(teacher_feats), tau=tau).data
    logq = nk.log_softmax(student_feats, tau=tau)
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    kl_rows = nk.sum(nk.mul(p, nk.sub(logp, logq)), axis=-1)
    return nk.mul(nk.mean(kl_rows), 1.0 / max(recon, eps_recon))


def semi_supervised_loss(logits, labels, teacher_feats, student_feats, cfg: RoundConfig, recon):
    ce = nk.cross_entropy(logits, labels)
    if cfg.kd_weight == 0:
        return ce, ce, None
    kd = kd_loss(teacher_feats, student_feats, cfg.tau, recon, cfg.eps_recon)
    return nk.add(ce, nk.mul(kd, cfg.kd_weight)), ce, kd


# ---------------------------------------------------------------------------
# local training


def _sgd(params, tensors, lr, names=None):
    for k in names or params:
        g = tensors[k].grad
        if g is not None:
            params[k] = params[k] - lr * g


def gae_step(gae: M.GaeModel, images, lr, rng):
    """One gradient step on the reconstruction loss; returns the pre-step loss."""
    t = M.as_tensors(gae.params, requires_grad=True)
    with nk.GradTape() as tape:
        _, recon = M.gae_forward(images, gae, params=t, rng=rng)
        loss = M.reconstruction_loss(images, recon)
    tape.backward(loss)
    _sgd(gae.params, t, lr)
    return loss.item()


def classifier_step(clf: M.ClassifierModel, images, labels, teacher_feats, cfg: RoundConfig, recon):
    t = M.as_tensors(clf.params, requires_grad=True)
    with nk.GradTape() as tape:
        logits, feats = M.classifier_forward(images, clf, t)
        loss, ce, kd = semi_supervised_loss(logits, labels, teacher_feats, feats, cfg, recon)
    tape.backward(loss)
    _sgd(clf.params, t, cfg.lr_clf)
    return loss.item(), ce.item(), (kd.item() if kd is not None else 0.0)


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def reliability_score(state: ClientState, strategy):
    if strategy == "constant":
        return 1.0
    if strategy == "inverse_recon":
        return float(min(1.0, max(0.01, 1.0 / (1.0 + state.last_recon))))
    shard = state.shard
    if shard.n_labeled == 0:
        return 0.01
    acc = quality.accuracy(M.predict(shard.labeled_images, state.classifier), shard.labels)
    return float(min(1.0, max(0.01, acc)))


def local_train_gfed(state: ClientState, cfg: RoundConfig, rng, scheme: Scheme = SCHEMES["xpfl"]):
    """G passes of (GAE epoch on unlabeled data, then KD epoch on labeled data).

    Returns a new ClientState; the input is left untouched.
    """
    shard = state.shard
    clf, gae = state.classifier.copy(), state.gae.copy()
    recon = state.last_recon
    use_kd = scheme.kd and cfg.kd_weight > 0
    rcfg = cfg if use_kd else replace(cfg, kd_weight=0.0)
    entry = {}
    for _ in range(cfg.local_iters):
        if scheme.use_unlabeled and shard.n_unlabeled:
            xs = shard.unlabeled_images
            batches = _batches(len(xs), cfg.batch_size, rng)
            losses = [gae_step(gae, xs[b], cfg.lr_gae, rng) for b in batches]
            # sample-weighted so a short last batch does not skew the epoch mean
            recon = float(np.dot(losses, [len(b) for b in batches]) / len(xs))
        if shard.n_labeled == 0:
            logger.warning("client %d has no labeled data; skipping supervised phase", shard.client_id)
            continue
        xl, yl = shard.labeled_images, shard.labels
        teacher = M.teacher_features(xl, gae) if use_kd else np.zeros((len(xl), gae.config.dim))
        stats = [classifier_step(clf, xl[b], yl[b], teacher[b], rcfg, recon)
                 for b in _batches(len(xl), cfg.batch_size, rng)]
        entry = {"loss": float(np.mean([s[0] for s in stats])),
                 "ce": float(np.mean([s[1] for s in stats])),
                 "kd": float(np.mean([s[2] for s in stats]))}
    new = ClientState(shard, clf, gae, recon, state.reliability, list(state.log))
    new.reliability = reliability_score(new, cfg.reliability)
    entry.update(recon=recon, reliability=new.reliability)
    new.log.append(entry)
    return new


# ---------------------------------------------------------------------------
# aggregation and fusion


def weighted_average(vectors, coefficients):
    """sum_k a_k w_k with a_k = c_k / sum c, normalised in exact arithmetic.

    Exact normalisation makes the result invariant (bit for bit) to scaling
    every coefficient by the same positive factor.
    """
    if not vectors:
        raise nk.UsageError("need at least one client vector")
    for v in vectors[1:]:
        vectors[0].check_compatible(v)
    fr = [_exact(c) for c in coefficients]
    total = sum(fr)
    if total <= 0:
        logger.warning("all aggregation coefficients are zero; using the plain mean")
        fr, total = [Fraction(1)] * len(vectors), Fraction(len(vectors))
    weights = [float(c / total) for c in fr]
    acc = np.zeros_like(vectors[0].values)
    for w, v in zip(weights, vectors):
        acc = acc + w * v.values
    return ParamVector(acc, vectors[0].layout)


def _exact(x):
    return x if isinstance(x, Fraction) else Fraction(float(x)) if isinstance(x, float) else Fraction(x)


def aggregate_weighted_vectors(vectors, rho, sizes, reliabilities):
    """Weighted average with coefficients rho_k * D_k * C_k."""
    coefs = [_exact(r) * _exact(int(d)) * _exact(c) for r, d, c in zip(rho, sizes, reliabilities)]
    return weighted_average(vectors, coefs)


def _rho(n_labeled, n_unlabeled):
    return Fraction(int(n_labeled), max(int(n_unlabeled), 1))


def client_weights(state: ClientState, scheme: Scheme = SCHEMES["xpfl"]):
    """(rho_k, D_k) as seen by the server; unlabeled data counts only if used."""
    n_l = state.shard.n_labeled
    n_u = state.shard.n_unlabeled if scheme.use_unlabeled else 0
    return _rho(n_l, n_u), n_l + n_u


def aggregate_weighted(states, scheme: Scheme = SCHEMES["xpfl"]):
    """Global model sum_k rho_k D_k C_k w_k / sum_k rho_k D_k C_k."""
    vecs = [ParamVector.from_params(s.classifier.params) for s in states]
    rho, sizes = zip(*(client_weights(s, scheme) for s in states))
    return aggregate_weighted_vectors(vecs, rho, sizes, [float(s.reliability) for s in states])


def fedavg_vectors(vectors, n_labeled):
    return weighted_average(vectors, [int(n) for n in n_labeled])


def fedavg_baseline(states):
    """Global model weighted by labeled-set size."""
    return fedavg_vectors([ParamVector.from_params(s.classifier.params) for s in states],
                          [s.shard.n_labeled for s in states])


def personalize_fuse(local: ParamVector, global_: ParamVector, psi=None):
    """(psi * local + (1 - psi) * global, psi) with psi from cosine similarity."""
    local.check_compatible(global_)
    if psi is None:
        psi = nk.cosine_weight(local.values, global_.values)
    lo = np.minimum(local.values, global_.values)
    hi = np.maximum(local.values, global_.values)
    # clip away last-ulp overshoot so fused stays on the segment
    fused = np.clip(psi * local.values + (1.0 - psi) * global_.values, lo, hi)
    return ParamVector(fused, local.layout), float(psi)


# ---------------------------------------------------------------------------
# evaluation


def weighted_accuracy(model: M.ClassifierModel, test: Dataset, class_weights, preds=None):
    """Per-class accuracy on ``test`` averaged with the client's class mix."""
    preds = M.predict(test.images, model) if preds is None else preds
    per_class = quality.per_class_accuracy(preds, test.labels, test.n_classes)
    w = np.asarray(class_weights, dtype=np.float64)
    present = test.class_counts() > 0
    w = np.where(present, w, 0.0)
    return float(np.dot(w, per_class) / w.sum()) if w.sum() > 0 else 0.0


def labeled_loss(model: M.ClassifierModel, shard: ClientShard):
    if shard.n_labeled == 0:
        return float("nan")
    logits, _ = M.classifier_forward(shard.labeled_images, model)
    return supervised_loss(logits, shard.labels)


# ---------------------------------------------------------------------------
# the round loop


@dataclass(frozen=True)
class ExplainConfig:
    rounds: tuple = ()  # rounds at which the tree and t-SNE explainers fire
    tsne_iters: int = 500
    tsne_points: int = 100
    chi: float = 1.0
    limits: explain.TreeLimits = explain.TreeLimits()


@dataclass
class RoundReport:
    round: int
    scheme: str
    local_loss: list
    local_acc: list
    global_acc: float
    psi: list
    objective: float
    qox: list
    fidelity: list
    kl_pre: list
    kl_post: list
    reliability: list

    def to_dict(self):
        def clean(v):
            if isinstance(v, list):
                return [clean(x) for x in v]
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v
        return {k: clean(v) for k, v in self.__dict__.items()}


@dataclass
class RunResult:
    reports: list
    states: list
    global_model: M.ClassifierModel
    shards: list


def explain_subset(n_test, seed, n_points):
    """Sorted indices of the test samples handed to the t-SNE explainer."""
    return np.sort(nk.make_rng(seed, 0x7E57).permutation(n_test)[:n_points])


def _train_task(args):
    state, cfg, seed, k, t, scheme = args
    return local_train_gfed(state, cfg, nk.make_rng(seed, k, t), scheme)


def init_states(shards, configs: ModelConfigs, seed):
    """One shared classifier draw; one GAE per client."""
    clf = M.init_classifier(configs.classifier, nk.make_rng(seed, 0xC1F))
    return [ClientState(s, clf.copy(), M.init_gae(configs.gae, nk.make_rng(seed, 0x6AE, s.client_id)))
            for s in shards]


def run_xpfl(cfg: RoundConfig, spec: PartitionSpec, datasets, scheme="xpfl", configs=None,
             explain_cfg=ExplainConfig(), workers=1, on_round=None, shards=None, on_explain=None):
    """Run ``cfg.rounds`` federated rounds; returns a :class:`RunResult`.

    ``datasets`` is ``(train, test)``. ``on_round(t, pre_states, post_states,
    global_model, report)`` fires after every round and ``on_explain(t, k,
    tree, explanation, pre_model, post_model)`` after each explainer evaluation. Client randomness is
    keyed by (seed, client, round), so ``workers`` does not change results.
    """
    train, test = datasets
    scheme = SCHEMES[scheme] if isinstance(scheme, str) else scheme
    configs = configs or ModelConfigs.for_dataset(train)
    shards = shards if shards is not None else partition_dirichlet(train, spec)
    states = init_states(shards, configs, spec.seed)
    tsne_idx = explain_subset(len(test), spec.seed, explain_cfg.tsne_points)
    reports = []
    global_model = states[0].classifier
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            tasks = [(s, cfg, spec.seed, s.shard.client_id, t, scheme) for s in states]
            trained = list(pool.map(_train_task, tasks)) if pool else [_train_task(a) for a in tasks]

            fire = t in explain_cfg.rounds
            trees = [explain.fit_surrogate(s.shard, s.classifier, explain_cfg.limits) if fire else None
                     for s in trained]

            vecs = [ParamVector.from_params(s.classifier.params) for s in trained]
            if scheme.aggregator == "fedavg":
                g = fedavg_vectors(vecs, [s.shard.n_labeled for s in trained])
            else:
                g = aggregate_weighted(trained, scheme)
            global_model = M.ClassifierModel(configs.classifier, g.to_params())

            post, psis = [], []
            for s, v in zip(trained, vecs):
                if scheme.broadcast == "global":
                    fused, psi = g, 0.0
                else:
                    fused, psi = personalize_fuse(v, g, scheme.forced_psi)
                model = M.ClassifierModel(configs.classifier, fused.to_params())
                post.append(ClientState(s.shard, model, s.gae, s.last_recon, s.reliability, s.log))
                psis.append(psi)

            test_preds_global = M.predict(test.images, global_model)
            global_acc = quality.accuracy(test_preds_global, test.labels)
            local_acc, local_loss, qox, fid, klp, klq = [], [], [], [], [], []
            for k, (pre_s, post_s, tree) in enumerate(zip(trained, post, trees)):
                local_acc.append(weighted_accuracy(post_s.classifier, test,
                                                   post_s.shard.class_distribution()))
                local_loss.append(labeled_loss(post_s.classifier, post_s.shard))
                if fire:
                    ex = explain.aggregation_explain(pre_s.classifier, post_s.classifier,
                                                     test.images[tsne_idx], explain_cfg.tsne_iters,
                                                     seed=spec.seed)
                    score = explain.qox(tree, len(pre_s.shard), pre_s.classifier.size,
                                        ex.kl_pre, ex.kl_post, len(tsne_idx), explain_cfg.chi)
                    qox.append(score.value)
                    fid.append(tree.fidelity)
                    klp.append(ex.kl_pre)
                    klq.append(ex.kl_post)
                    if on_explain is not None:
                        on_explain(t, k, tree, ex, pre_s.classifier, post_s.classifier)
                else:
                    for lst in (qox, fid, klp, klq):
                        lst.append(float("nan"))
            report = RoundReport(t, scheme.name, local_loss, local_acc, global_acc, psis,
                                 float(np.nanmean(local_loss)), qox, fid, klp, klq,
                                 [s.reliability for s in trained])
            reports.append(report)
            if on_round is not None:
                on_round(t, trained, post, global_model, report)
            states = post
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(reports, states, global_model, shards)
