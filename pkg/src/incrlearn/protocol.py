"""The incremental training protocol: ordered class increments (within a
domain) followed by dataset increments (new acquisition domains), each
minimizing the weighted three-part objective per batch.

State threaded across increments: the growing classifier, the frozen teacher
snapshot from the previous increment, and the exemplar store.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .exceptions import ConfigError, DataError, NumericError
from . import losses
from .data import Dataset
from .losses import LogitView, TargetView, smoothed_onehot
from .metrics import (
    ConfusionCounts,
    accuracy,
    f1,
    forgetting,
    overall_accuracy,
    per_class_accuracy,
    ppv,
    tally,
    tpr,
)
from .model import AdadeltaState, Classifier, adadelta_step, expand_head, snapshot
from .numerics import softmax_temp
from .replay import ExemplarStore, build_increment_batches, select_exemplars

LOG_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class IncrementSpec:
    kind: str  # 'disease' or 'dataset'
    new_class_ids: tuple
    domain_id: int
    epochs: int = 20
    batch_size: int = 16
    tau: float = 2.0
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.25
    exemplar_fraction: float = 0.1
    new_data_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "new_class_ids", tuple(int(c) for c in self.new_class_ids))
        if self.kind not in ("disease", "dataset"):
            raise ConfigError(f"unknown increment kind {self.kind!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0.0 < self.new_data_fraction <= 1.0:
            raise ConfigError("new_data_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class IncrementPlan:
    increments: tuple
    hidden_sizes: tuple = (64, 32)
    init_seed: int = 0
    epsilon: float = 1e-4
    smoothing: float = 0.1
    min_fit_samples: int = 2
    posterior_refresh: str = "epoch"  # 'epoch' or 'batch'
    md_warmup_epochs: int = 0  # epochs before the posterior term engages
    shared_labels: bool = False
    use_exemplars: bool = True  # False: no replay at all (forgetting baseline)
    cumulative: bool = False  # True: plain fine-tuning on all data seen so far

    def __post_init__(self):
        object.__setattr__(self, "increments", tuple(self.increments))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.posterior_refresh not in ("epoch", "batch"):
            raise ConfigError(f"unknown posterior refresh {self.posterior_refresh!r}")
        if self.md_warmup_epochs < 0:
            raise ConfigError("md_warmup_epochs must be nonnegative")
        if not self.shared_labels:
            seen = set()
            for inc in self.increments:
                dup = seen.intersection(inc.new_class_ids)
                if dup:
                    raise ConfigError(f"class ids reused across increments: {sorted(dup)}")
                seen.update(inc.new_class_ids)


@dataclass
class IncrementLog:
    index: int
    kind: str
    domain_id: int
    new_class_ids: list
    head_size: int
    seed: int
    epochs: list = field(default_factory=list)  # per-epoch loss breakdowns
    metric_rows: list = field(default_factory=list)
    per_class_accuracy: dict = field(default_factory=dict)
    per_domain_accuracy: dict = field(default_factory=dict)
    overall_accuracy: float = 0.0
    forgetting: float = None
    md_skipped: int = 0
    wall_time_s: float = 0.0  # not serialized; timing lives in summaries only

    def to_json_dict(self):
        d = asdict(self)
        d.pop("wall_time_s")
        d["schema_version"] = LOG_SCHEMA_VERSION
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        d["per_domain_accuracy"] = {str(k): v for k, v in self.per_domain_accuracy.items()}
        return d


def serialize_logs(logs):
    """Deterministic JSON for a run's logs (no timestamps)."""
    payload = {"schema_version": LOG_SCHEMA_VERSION, "increments": [l.to_json_dict() for l in logs]}
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


class _RunState:
    def __init__(self, plan: IncrementPlan, input_dim):
        self.plan = plan
        self.class_order = []  # logit position -> class id
        self.model = Classifier(
            input_dim, hidden_sizes=plan.hidden_sizes, head_size=0, seed=plan.init_seed
        )
        self.teacher = None
        self.store = ExemplarStore(seed=plan.init_seed)
        self.prev_class_acc = {}
        self.seen_domains = []

    def position(self, class_id):
        return self.class_order.index(class_id)


def _subsample_per_class(dataset, fraction, seed):
    if fraction >= 1.0:
        return dataset
    rng = np.random.default_rng((seed, 11))
    keep = np.zeros(len(dataset), dtype=bool)
    for label in dataset.class_ids():
        idx = np.flatnonzero(dataset.labels == label)
        k = max(1, int(np.floor(fraction * len(idx))))
        keep[rng.choice(idx, size=k, replace=False)] = True
    return dataset.subset(keep)


def _fit_epoch_posterior(state, inc, feats, labels, counts_by_pos):
    """Refresh the class-conditional Gaussians from current student logits."""
    logits = state.model.forward(feats)
    state.model._cache = None  # diagnostic pass; do not leave a stale cache
    z = logits / inc.tau
    by_pos = {}
    for pos, cid in enumerate(state.class_order):
        rows = z[labels == cid]
        if len(rows):
            by_pos[pos] = list(rows)
    # classes absent from the buffer cannot be fit this epoch; drop them from
    # the model entirely (their samples are counted as skipped downstream)
    counts = {pos: counts_by_pos.get(pos, 0) for pos in by_pos}
    if not by_pos or sum(counts.values()) == 0:
        return None
    model = losses.fit_posterior_model(
        by_pos, counts, epsilon=state.plan.epsilon, min_fit_samples=state.plan.min_fit_samples
    )
    return model


def _posterior_full_width(post_model, width):
    """fit_posterior_model only sees buffered classes; re-embed it over all
    logit positions, flagging the missing ones unfit."""
    if post_model is None:
        return None
    if len(post_model.class_ids) == width:
        return post_model
    dim = post_model.dim
    gaussians = dict(post_model.gaussians)
    priors = np.zeros(width)
    unfit = set(post_model.unfit)
    for i, cid in enumerate(post_model.class_ids):
        priors[cid] = post_model.priors[i]
    for pos in range(width):
        if pos not in gaussians:
            # placeholder Gaussian; never evaluated because the class is unfit
            gaussians[pos] = losses.estimate_class_stats(
                [np.zeros(dim)], epsilon=1.0, class_id=pos
            )
            unfit.add(pos)
    return losses.PosteriorModel(
        class_ids=tuple(range(width)), gaussians=gaussians, priors=priors, unfit=unfit
    )


def _batch_losses(state, inc, batch, n_old, post_model):
    """Forward the batch, evaluate the three parts, and return the combined
    breakdown plus diagnostics."""
    plan = state.plan
    logits = state.model.forward(batch.features)
    b_s = len(batch)
    width = logits.shape[1]
    if plan.cumulative:
        views = [LogitView(np.empty(0), logits[i], inc.tau) for i in range(b_s)]
        route_old = np.zeros(b_s, dtype=bool)
        offset = 0
    else:
        views = [LogitView(logits[i, :n_old], logits[i, n_old:], inc.tau) for i in range(b_s)]
        route_old = batch.old_flags
        offset = n_old

    # classification term over new-routed samples
    new_idx = np.flatnonzero(~route_old)
    l_c, grad_c = 0.0, np.zeros((b_s, width))
    if len(new_idx):
        sub_targets, sub_views = [], []
        for i in new_idx:
            local = state.position(batch.labels[i]) - offset
            t_new = smoothed_onehot(width - offset, local, inc.tau, plan.smoothing)
            sub_targets.append(TargetView(np.empty(0), t_new))
            sub_views.append(views[i])
        val, g = losses.classification_loss(sub_targets, sub_views)
        scale = len(new_idx) / b_s
        l_c = val * scale
        grad_c[new_idx] = g * scale

    # distillation term over replayed exemplars, teacher-softened targets
    old_idx = np.flatnonzero(route_old)
    l_d, grad_d = 0.0, np.zeros((b_s, width))
    if len(old_idx) and n_old > 0 and state.teacher is not None:
        t_logits = state.teacher.forward(batch.features[old_idx])
        sub_targets, sub_views = [], []
        for j, i in enumerate(old_idx):
            t_o = softmax_temp(t_logits[j], inc.tau)
            sub_targets.append(TargetView(t_o, np.empty(0)))
            sub_views.append(views[i])
        val, g = losses.distillation_loss(sub_targets, sub_views)
        scale = len(old_idx) / b_s
        l_d = val * scale
        grad_d[old_idx] = g * scale

    # mutual-distillation term over the whole batch
    l_md, grad_md, skipped = 0.0, np.zeros((b_s, width)), 0
    if inc.beta > 0 and post_model is not None:
        md_targets = []
        for i in range(b_s):
            pos = state.position(batch.labels[i])
            if route_old[i]:
                t = smoothed_onehot(n_old, pos, inc.tau, plan.smoothing)
                md_targets.append(TargetView(t, np.empty(0)))
            else:
                t = smoothed_onehot(width - offset, pos - offset, inc.tau, plan.smoothing)
                md_targets.append(TargetView(np.empty(0), t))
        l_md, grad_md, diag = losses.mutual_distillation_loss(
            post_model, md_targets, views, route_old
        )
        skipped = diag["skipped"]

    breakdown = losses.combined_loss(
        inc.alpha, inc.beta, inc.gamma, (l_c, grad_c), (l_md, grad_md), (l_d, grad_d)
    )
    return breakdown, skipped


def _evaluate(state, dataset, index):
    """Test-split evaluation over everything seen so far."""
    seen_classes = list(state.class_order)
    test = dataset.select(labels=seen_classes, domains=state.seen_domains, split="test")
    if len(test) == 0:
        raise DataError("no test samples for the classes seen so far")
    logits = state.model.forward(test.features)
    state.model._cache = None
    preds = [state.class_order[j] for j in np.argmax(logits, axis=1)]
    truths = [int(t) for t in test.labels]
    class_acc = per_class_accuracy(preds, truths, seen_classes)
    rows = []
    per_domain = {}
    for dom in state.seen_domains:
        m = test.domains == dom
        if not m.sum():
            continue
        dom_preds = [p for p, keep in zip(preds, m) if keep]
        dom_truths = [t for t, keep in zip(truths, m) if keep]
        counts = tally(dom_preds, dom_truths, seen_classes)
        per_domain[int(dom)] = overall_accuracy(dom_preds, dom_truths)
        for c in seen_classes:
            if counts[c].tp + counts[c].fn == 0:
                continue  # class absent from this domain's test set
            rows.append(_row_dict(index, int(dom), c, counts[c]))
    counts_all = tally(preds, truths, seen_classes)
    for c in seen_classes:
        rows.append(_row_dict(index, "all", c, counts_all[c]))
    rows.append(_row_dict(index, "all", "micro", counts_all["micro"]))
    return class_acc, overall_accuracy(preds, truths), per_domain, rows


def _row_dict(increment, domain, class_id, counts: ConfusionCounts):
    return {
        "increment": increment,
        "domain": domain,
        "class": class_id,
        "accuracy": accuracy(counts),
        "tpr": tpr(counts),
        "ppv": ppv(counts),
        "f1": f1(counts),
    }


def run_increment(state: _RunState, inc: IncrementSpec, dataset: Dataset, index: int):
    """Train one increment in place on the run state and return its log."""
    plan = state.plan
    t0 = time.perf_counter()
    genuinely_new = [c for c in inc.new_class_ids if c not in state.class_order]
    if not plan.shared_labels and len(genuinely_new) != len(inc.new_class_ids):
        raise ConfigError("increment classes must be disjoint from already-learned classes")
    n_old = len(state.class_order)
    if genuinely_new:
        state.model = expand_head(state.model, len(genuinely_new), seed=(inc.seed, 7))
        state.class_order.extend(genuinely_new)
    if inc.domain_id not in state.seen_domains:
        state.seen_domains.append(inc.domain_id)

    if plan.cumulative:
        train = dataset.select(labels=state.class_order, domains=state.seen_domains, split="train")
        store_for_batches = None
    else:
        train = dataset.select(
            labels=inc.new_class_ids, domains=[inc.domain_id], split="train"
        )
        train = _subsample_per_class(train, inc.new_data_fraction, inc.seed)
        store_for_batches = state.store if state.store.by_class else None
    if len(train) == 0:
        raise DataError(f"increment {index}: no training samples for classes {inc.new_class_ids}")

    # prior source: training-population counts per logit position
    counts_by_pos = {}
    for pos, cid in enumerate(state.class_order):
        n = int((train.labels == cid).sum())
        if store_for_batches is not None and cid in state.store.by_class:
            n += state.store.count(cid)
        counts_by_pos[pos] = n

    optimizer = AdadeltaState(state.model)
    log = IncrementLog(
        index=index,
        kind=inc.kind,
        domain_id=inc.domain_id,
        new_class_ids=list(inc.new_class_ids),
        head_size=state.model.head_size,
        seed=inc.seed,
    )

    all_feats = train.features
    all_labels = train.labels
    if store_for_batches is not None:
        of, ol, _ = state.store.flatten()
        all_feats = np.concatenate([of, all_feats])
        all_labels = np.concatenate([ol, all_labels])

    for epoch in range(inc.epochs):
        post_model = None
        # mutual distillation compares old-block and new-block behaviour; it
        # only applies once a previous increment exists and the logits have
        # had a few epochs to become informative enough to fit Gaussians on
        md_active = (
            inc.beta > 0
            and n_old > 0
            and epoch >= plan.md_warmup_epochs
            and not plan.cumulative
        )
        if md_active and plan.posterior_refresh == "epoch":
            post_model = _posterior_full_width(
                _fit_epoch_posterior(state, inc, all_feats, all_labels, counts_by_pos),
                state.model.head_size,
            )
        batches = build_increment_batches(
            store_for_batches,
            train.features,
            train.labels,
            train.domains,
            inc.batch_size,
            seed=(inc.seed, 13),
            epoch=epoch,
        )
        sums = {"l_c": 0.0, "l_d": 0.0, "l_md": 0.0}
        for batch in batches:
            if md_active and plan.posterior_refresh == "batch":
                post_model = _posterior_full_width(
                    _fit_epoch_posterior(state, inc, all_feats, all_labels, counts_by_pos),
                    state.model.head_size,
                )
            breakdown, skipped = _batch_losses(state, inc, batch, n_old, post_model)
            log.md_skipped += skipped
            if not np.isfinite(breakdown.l_il):
                raise NumericError(
                    f"increment {index} epoch {epoch}: non-finite loss "
                    f"(l_c={breakdown.l_c}, l_d={breakdown.l_d}, l_md={breakdown.l_md})"
                )
            grads = state.model.backward(breakdown.grad_logits)
            adadelta_step(state.model, grads, optimizer)
            sums["l_c"] += breakdown.l_c
            sums["l_d"] += breakdown.l_d
            sums["l_md"] += breakdown.l_md
        nb = len(batches)
        l_c, l_d, l_md = sums["l_c"] / nb, sums["l_d"] / nb, sums["l_md"] / nb
        log.epochs.append(
            {
                "l_c": l_c,
                "l_d": l_d,
                "l_md": l_md,
                "l_il": inc.alpha * l_c + inc.beta * l_md + inc.gamma * l_d,
            }
        )

    state.teacher = snapshot(state.model)
    if plan.use_exemplars and not plan.cumulative:
        picked = select_exemplars(train, inc.exemplar_fraction, seed=(inc.seed, 17))
        for label in picked.classes():
            if label not in state.store.by_class:
                f, d = picked.by_class[label]
                state.store.add_class(label, f, d)

    class_acc, overall, per_domain, rows = _evaluate(state, dataset, index)
    old_classes = state.class_order[:n_old]
    if old_classes:
        before = {c: state.prev_class_acc[c] for c in old_classes}
        after = {c: class_acc[c] for c in old_classes}
        log.forgetting = forgetting(before, after)
        for row in rows:
            if row["class"] in old_classes:
                row["forgetting"] = max(0.0, before[row["class"]] - after[row["class"]])
    state.prev_class_acc = dict(class_acc)
    log.per_class_accuracy = {int(k): v for k, v in class_acc.items()}
    log.per_domain_accuracy = per_domain
    log.overall_accuracy = overall
    log.metric_rows = rows
    log.wall_time_s = time.perf_counter() - t0
    return log


def run_dataset_increment(state: _RunState, inc: IncrementSpec, dataset: Dataset, index: int):
    """A dataset-phase increment: same mechanics, new acquisition domain."""
    if inc.domain_id in state.seen_domains:
        raise ConfigError(
            f"dataset increment {index} reuses already-seen domain {inc.domain_id}"
        )
    return run_increment(state, inc, dataset, index)


def run_plan(plan: IncrementPlan, dataset: Dataset):
    """Execute all increments in order; returns (logs, final state)."""
    available = set(dataset.class_ids())
    for inc in plan.increments:
        missing = set(inc.new_class_ids) - available
        if missing:
            raise ConfigError(f"plan references unknown class ids {sorted(missing)}")
        if not (dataset.domains == inc.domain_id).any():
            raise ConfigError(f"plan references unknown domain id {inc.domain_id}")
    state = _RunState(plan, dataset.dim)
    logs = []
    for index, inc in enumerate(plan.increments):
        if inc.kind == "dataset":
            logs.append(run_dataset_increment(state, inc, dataset, index))
        else:
            logs.append(run_increment(state, inc, dataset, index))
    return logs, state
