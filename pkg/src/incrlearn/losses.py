"""The three training objectives and their analytic logit gradients.

* distillation term: cross entropy between a frozen teacher's softened
  old-class distribution and the student's old-class softmax
* classification term: KL divergence from the student's new-class softmax to
  the (smoothed) ground-truth distribution
* mutual-distillation term: cross entropy between ground-truth targets and a
  Bayes posterior over classes, where each class's likelihood of the
  student's full scaled logit vector is a fitted multivariate Gaussian

All gradients are with respect to the raw (unscaled) logits.  Gaussian
means, covariances, and priors are treated as constants within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ParameterError, ShapeError
from .numerics import (
    estimate_class_stats,
    gaussian_logpdf,
    gaussian_logpdf_grad,
    log_softmax_temp,
)

DEFAULT_SMOOTHING = 0.1


@dataclass(frozen=True)
class LogitView:
    """One sample's raw logits split into old-class and new-class blocks."""

    old_block: np.ndarray
    new_block: np.ndarray
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        object.__setattr__(self, "old_block", np.asarray(self.old_block, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "new_block", np.asarray(self.new_block, dtype=np.float64).reshape(-1))

    @property
    def n_old(self):
        return self.old_block.size

    @property
    def n_new(self):
        return self.new_block.size

    @property
    def total(self):
        return self.old_block.size + self.new_block.size

    def concat_scaled(self):
        """Full logit vector divided by the temperature."""
        return np.concatenate([self.old_block, self.new_block]) / self.tau


@dataclass(frozen=True)
class TargetView:
    """Per-sample target distributions over the old and new blocks."""

    old_targets: np.ndarray
    new_targets: np.ndarray

    def __post_init__(self):
        for name in ("old_targets", "new_targets"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if v.size:
                if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
                    raise ParameterError(f"{name} entries must lie in [0, 1]")
                if abs(v.sum() - 1.0) > 1e-9:
                    raise ParameterError(f"{name} must sum to 1, got {v.sum()!r}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class PosteriorModel:
    """Class-conditional Gaussians over the concatenated scaled logit space,
    plus class priors.  class_ids double as logit positions (0..C-1)."""

    class_ids: tuple
    gaussians: dict
    priors: np.ndarray
    unfit: frozenset = frozenset()

    def __post_init__(self):
        priors = np.asarray(self.priors, dtype=np.float64)
        if len(self.class_ids) != priors.size or len(self.class_ids) != len(self.gaussians):
            raise ShapeError("need one Gaussian and one prior per class id")
        if abs(priors.sum() - 1.0) > 1e-9:
            raise ParameterError(f"priors must sum to 1, got {priors.sum()!r}")
        dims = {self.gaussians[c].dim for c in self.class_ids}
        if len(dims) != 1:
            raise ShapeError(f"Gaussians disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "class_ids", tuple(self.class_ids))
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "unfit", frozenset(self.unfit))

    @property
    def dim(self):
        return self.gaussians[self.class_ids[0]].dim

    def fit_mask(self):
        return np.array([c not in self.unfit for c in self.class_ids])


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted combination of the three parts plus the batch logit gradient."""

    l_c: float
    l_d: float
    l_md: float
    l_il: float
    grad_logits: np.ndarray


def smoothed_onehot(n_classes, target_index, tau, smoothing=DEFAULT_SMOOTHING):
    """One-hot target with smoothing mass smoothing/tau spread over the rest.

    A temperature applied directly to a one-hot would be a no-op, so the
    softening enters through the smoothing mass instead.
    """
    if not 0 <= target_index < n_classes:
        raise ParameterError(f"target index {target_index} out of range [0, {n_classes})")
    if n_classes == 1:
        return np.ones(1)
    mass = smoothing / tau
    t = np.full(n_classes, mass / (n_classes - 1))
    t[target_index] = 1.0 - mass
    return t


def _check_batch(targets, student_logits):
    if len(student_logits) == 0:
        raise ShapeError("batch must be nonempty")
    if len(targets) != len(student_logits):
        raise ShapeError(
            f"targets ({len(targets)}) and logits ({len(student_logits)}) disagree on batch size"
        )


def distillation_loss(teacher_targets, student_logits):
    """Old-block cross entropy against teacher targets, averaged over the batch.

    With no previously learned classes (first increment) the term is defined
    as 0 with zero gradient.
    """
    _check_batch(teacher_targets, student_logits)
    b_s = len(student_logits)
    width = student_logits[0].total
    grad = np.zeros((b_s, width))
    total = 0.0
    for k, (tv, lv) in enumerate(zip(teacher_targets, student_logits)):
        if lv.total != width:
            raise ShapeError("inconsistent logit widths within batch")
        if lv.n_old == 0:
            continue
        t = tv.old_targets
        if t.size != lv.n_old:
            raise ShapeError(f"teacher target size {t.size} != old block size {lv.n_old}")
        logp = log_softmax_temp(lv.old_block, lv.tau)
        total -= float(t @ logp)
        p = np.exp(logp)
        grad[k, : lv.n_old] = (p * t.sum() - t) / lv.tau
    return total / b_s, grad / b_s


def classification_loss(targets, student_logits):
    """New-block KL divergence from student softmax to target distribution."""
    _check_batch(targets, student_logits)
    b_s = len(student_logits)
    width = student_logits[0].total
    grad = np.zeros((b_s, width))
    total = 0.0
    for k, (tv, lv) in enumerate(zip(targets, student_logits)):
        if lv.total != width:
            raise ShapeError("inconsistent logit widths within batch")
        if lv.n_new == 0:
            raise ShapeError("classification loss needs a nonempty new-class block")
        q = tv.new_targets
        if q.size != lv.n_new:
            raise ShapeError(f"target size {q.size} != new block size {lv.n_new}")
        logp = log_softmax_temp(lv.new_block, lv.tau)
        pos = q > 0.0
        total += float(q[pos] @ (np.log(q[pos]) - logp[pos]))
        p = np.exp(logp)
        grad[k, lv.n_old :] = (p * q.sum() - q) / lv.tau
    return total / b_s, grad / b_s


def empirical_prior(class_counts):
    """Class occurrence frequencies: count_i / sum of counts."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.size == 0 or counts.min() < 0:
        raise ParameterError("counts must be nonnegative and nonempty")
    total = counts.sum()
    if total <= 0:
        raise ParameterError("at least one class count must be positive")
    return counts / total


def fit_posterior_model(logit_samples, class_counts, epsilon, min_fit_samples=2):
    """Fit one Gaussian per class over concatenated scaled logits.

    logit_samples maps class id -> list of vectors; class_counts maps class
    id -> training-population count (the prior source, which may differ from
    the buffer size).  Classes with fewer than min_fit_samples buffered
    vectors are flagged unfit and excluded from posterior computation.
    """
    if len(logit_samples) == 0:
        raise ParameterError("need at least one class to fit a posterior model")
    class_ids = tuple(sorted(logit_samples))
    gaussians = {}
    unfit = set()
    for cid in class_ids:
        samples = logit_samples[cid]
        if len(samples) == 0:
            raise ParameterError(f"class {cid} has no logit samples")
        gaussians[cid] = estimate_class_stats(samples, epsilon=epsilon, class_id=cid)
        if len(samples) < min_fit_samples:
            unfit.add(cid)
    priors = empirical_prior([class_counts[cid] for cid in class_ids])
    return PosteriorModel(class_ids=class_ids, gaussians=gaussians, priors=priors, unfit=unfit)


def _log_posterior(model, z):
    """Log posterior over fit classes (unfit -> -inf), entirely in log space."""
    z = np.asarray(z, dtype=np.float64)
    if z.size != model.dim:
        raise ShapeError(f"point dimension {z.size} != model dimension {model.dim}")
    fit = model.fit_mask()
    scores = np.full(len(model.class_ids), -np.inf)
    log_priors = np.full(len(model.class_ids), -np.inf)
    with np.errstate(divide="ignore"):
        log_priors[fit] = np.log(model.priors[fit])
    for i, cid in enumerate(model.class_ids):
        if fit[i]:
            scores[i] = gaussian_logpdf(z, model.gaussians[cid]) + log_priors[i]
    m = scores[fit].max()
    lse = m + np.log(np.exp(scores[fit] - m).sum())
    return scores - lse


def bayes_posterior(model, z):
    """Posterior class probabilities for a scaled logit vector; sums to 1."""
    return np.exp(_log_posterior(model, z))


def mutual_distillation_loss(model, targets, student_logits, old_batch_flags):
    """Cross entropy between block targets and the Bayes posterior at each
    sample's own concatenated scaled logits.

    Old-exemplar samples pay over the old-class block, new-class samples over
    the new-class block.  Gradient flows through z only; samples whose target
    class is unfit contribute 0 and are counted in the returned diagnostics.
    """
    _check_batch(targets, student_logits)
    if len(old_batch_flags) != len(student_logits):
        raise ShapeError("need one old/new flag per sample")
    b_s = len(student_logits)
    width = student_logits[0].total
    if width != model.dim:
        raise ShapeError(f"logit width {width} != posterior model dimension {model.dim}")
    grad = np.zeros((b_s, width))
    fit = model.fit_mask()
    total = 0.0
    skipped = 0
    for k, (tv, lv, is_old) in enumerate(zip(targets, student_logits, old_batch_flags)):
        if lv.total != width:
            raise ShapeError("inconsistent logit widths within batch")
        t_block = tv.old_targets if is_old else tv.new_targets
        offset = 0 if is_old else lv.n_old
        if t_block.size == 0:
            continue
        target_pos = offset + int(np.argmax(t_block))
        if not fit[target_pos]:
            skipped += 1
            continue
        z = lv.concat_scaled()
        logpost = _log_posterior(model, z)
        post = np.exp(logpost)
        # spread the block targets over the full class axis, dropping mass on
        # unfit classes (their posterior is identically zero)
        w = np.zeros(width)
        w[offset : offset + t_block.size] = t_block
        w[~fit] = 0.0
        total -= float(w @ np.where(fit, logpost, 0.0))
        grad_z = np.zeros(width)
        mix = np.zeros(width)
        for i, cid in enumerate(model.class_ids):
            if not fit[i]:
                continue
            g_i = gaussian_logpdf_grad(z, model.gaussians[cid])
            if w[i] > 0.0:
                grad_z -= w[i] * g_i
            mix += post[i] * g_i
        grad_z += w.sum() * mix
        grad[k] = grad_z / lv.tau
    return total / b_s, grad / b_s, {"skipped": skipped}


def combined_loss(alpha, beta, gamma, classification, mutual, distillation):
    """Weighted sum of the three parts; each part is a (value, grad) pair."""
    if min(alpha, beta, gamma) < 0:
        raise ParameterError("loss weights must be nonnegative")
    l_c, grad_c = classification
    l_md, grad_md = mutual
    l_d, grad_d = distillation
    l_il = alpha * l_c + beta * l_md + gamma * l_d
    grad = alpha * grad_c + beta * grad_md + gamma * grad_d
    return LossBreakdown(l_c=l_c, l_d=l_d, l_md=l_md, l_il=l_il, grad_logits=grad)
