"""Pairwise similarity objectives under one coefficient form.

Every objective here is read as a sum over (anchor, candidate) pairs of
``-w_p * s`` for positives and ``+w_n * s`` for negatives. The weights are
held constant when differentiating, so ``dJ/ds`` is ``-w_p`` on positives and
``+w_n`` on negatives. Softmax and InfoNCE weights are chosen so that this
gradient coincides with the gradient of the usual cross-entropy losses.

Two layers of API live side by side:

* row-level (``SimilarityRow``, ``pair_weights``, ``unified_loss``,
  ``naive_combined_loss``) for explicit per-pair inspection;
* matrix-level (``pair_weight_matrix``, ``infonce_term``, ``softmax_ce``,
  ``opera_loss``, ``naive_pair_loss``) used by the training loop.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, LabelError, ShapeError
from .labels import PairRelation, relation_masks

SELF = "self"
FULL = "full"


@dataclass(frozen=True)
class WeightScheme:
    kind: str
    tau: float = 1.0
    w_p: float = 1.0
    w_n: float = 1.0

    def __post_init__(self):
        if self.kind not in ("softmax", "infonce", "constant"):
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if self.kind == "infonce" and not self.tau > 0:
            raise ValueError("InfoNCE temperature must be positive")
        if self.kind == "constant" and not (self.w_p >= 0 and self.w_n >= 0):
            raise ValueError("constant weights must be nonnegative")

    @classmethod
    def softmax(cls):
        return cls("softmax")

    @classmethod
    def infonce(cls, tau=0.2):
        return cls("infonce", tau=float(tau))

    @classmethod
    def constant(cls, w_p, w_n):
        return cls("constant", w_p=float(w_p), w_n=float(w_n))


@dataclass
class SimilarityRow:
    """Similarities of one anchor against a list of candidates.

    ``anchor`` and ``prototypes`` are optional; when present the report from
    ``unified_loss`` also carries the gradient with respect to the anchor.
    """

    anchor_index: int
    sims: np.ndarray
    relations: tuple
    anchor: Optional[np.ndarray] = None
    prototypes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.sims = np.asarray(self.sims, dtype=np.float64).ravel()
        self.relations = tuple(PairRelation(bool(r[0]), bool(r[1])) for r in self.relations)
        if len(self.relations) != self.sims.shape[0]:
            raise ShapeError(f"{self.sims.shape[0]} similarities but {len(self.relations)} relations")
        for r in self.relations:
            if r.same_instance and not r.same_class:
                raise ShapeError("relation (same_instance, not same_class) violates the label hierarchy")

    @classmethod
    def from_vectors(cls, anchor_index, anchor, prototypes, relations):
        anchor = np.asarray(anchor, dtype=np.float64).ravel()
        prototypes = np.asarray(prototypes, dtype=np.float64)
        if prototypes.ndim != 2 or prototypes.shape[1] != anchor.shape[0]:
            raise ShapeError(f"prototypes {prototypes.shape} do not match anchor length {anchor.shape[0]}")
        return cls(anchor_index, prototypes @ anchor, relations, anchor, prototypes)

    def positive_mask(self, level):
        col = 0 if level == SELF else 1
        if level not in (SELF, FULL):
            raise ValueError(f"level must be 'self' or 'full', got {level!r}")
        return np.array([r[col] for r in self.relations], dtype=bool)


@dataclass
class LossReport:
    value: float
    grad_sims: np.ndarray
    grad_anchor: Optional[np.ndarray] = None


def pair_weight_matrix(scheme, sims, positive):
    """Coefficient matrices ``(w_p, w_n)`` for a block of similarity rows.

    ``w_p`` is zero off the positives and ``w_n`` zero off the negatives. A row
    with several positives is treated as the sum of one term per positive, so
    for a single positive the weights are exactly the textbook ones:

    softmax: ``w_p = 1``, ``w_n = exp(s_n) / sum_neg exp(s')``
    InfoNCE: ``w_p = (1/tau) sum_neg e' / (e_p + sum_neg e')``,
             ``w_n = (1/tau) e_n / (e_p + sum_neg e')`` with ``e = exp(s/tau)``.
    """
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    pos = np.atleast_2d(np.asarray(positive, dtype=bool))
    if sims.shape != pos.shape:
        raise ShapeError(f"similarity block {sims.shape} vs mask {pos.shape}")
    neg = ~pos
    posf = pos.astype(np.float64)
    negf = neg.astype(np.float64)

    if scheme.kind == "constant":
        return scheme.w_p * posf, scheme.w_n * negf

    n_pos = posf.sum(axis=1)
    if np.any(n_pos == 0):
        row = int(np.flatnonzero(n_pos == 0)[0])
        raise DegenerateError(f"row {row} has no positive pair")

    if scheme.kind == "softmax":
        masked = np.where(neg, sims, -np.inf)
        row_max = masked.max(axis=1, keepdims=True)
        row_max = np.where(np.isfinite(row_max), row_max, 0.0)
        e = np.exp(masked - row_max)
        z = e.sum(axis=1, keepdims=True)
        z = np.where(z > 0, z, 1.0)
        return posf, (n_pos[:, None] * e / z) * negf

    # InfoNCE
    tau = scheme.tau
    row_max = sims.max(axis=1, keepdims=True)
    e = np.exp((sims - row_max) / tau)
    neg_sum = (e * negf).sum(axis=1, keepdims=True)
    denom = e + neg_sum
    w_p = posf * (neg_sum / denom) / tau
    inv_d = (posf / denom).sum(axis=1, keepdims=True)
    w_n = negf * e * inv_d / tau
    return w_p, w_n


def pair_weights(scheme, row, level):
    """Weights for one row: ``(w_p per positive, w_n per negative)`` in row order."""
    pos = row.positive_mask(level)
    w_p, w_n = pair_weight_matrix(scheme, row.sims[None, :], pos[None, :])
    return w_p[0, pos], w_n[0, ~pos]


def _row_loss(row, scheme, level):
    pos = row.positive_mask(level)
    w_p, w_n = pair_weight_matrix(scheme, row.sims[None, :], pos[None, :])
    grad = (w_n - w_p)[0]
    return float(grad @ row.sims), grad


def _report(rows, values, grads):
    grad_anchor = None
    if rows and all(r.prototypes is not None for r in rows):
        grad_anchor = np.stack([g @ r.prototypes for r, g in zip(rows, grads)])
    flat = np.concatenate(grads) if grads else np.zeros(0)
    return LossReport(float(sum(values)), flat, grad_anchor)


def unified_loss(rows, scheme, level):
    """Sum over rows of ``sum_pairs [-w_p I s + w_n (1 - I) s]`` at one label level."""
    values, grads = [], []
    for row in rows:
        v, g = _row_loss(row, scheme, level)
        values.append(v)
        grads.append(g)
    return _report(rows, values, grads)


def naive_combined_loss(rows, scheme_self, scheme_full):
    """Self and full objectives added on the same similarities.

    On a same-class, different-instance pair the net ``dJ/ds`` is
    ``w_n_self - w_p_full``.
    """
    values, grads = [], []
    for row in rows:
        v_s, g_s = _row_loss(row, scheme_self, SELF)
        v_f, g_f = _row_loss(row, scheme_full, FULL)
        values.append(v_s + v_f)
        grads.append(g_s + g_f)
    return _report(rows, values, grads)


def adaptive_weight(w_n_self, alpha, w_p_full, beta):
    """Net coefficient ``w_n_self * alpha - w_p_full * beta`` on a same-class, cross-instance pair.

    Negative means the pair is pulled together, positive means pushed apart.
    """
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta are squared norms and must be nonnegative")
    return w_n_self * alpha - w_p_full * beta


# ---------------------------------------------------------------------------
# batched terms used for training
# ---------------------------------------------------------------------------


def l2_normalize(x):
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    norms = np.maximum(norms, 1e-12)
    return x / norms, norms


def l2_normalize_backward(x_hat, norms, grad_hat):
    radial = np.sum(x_hat * grad_hat, axis=1, keepdims=True)
    return (grad_hat - x_hat * radial) / norms


def unified_grad(sims, positive, scheme):
    """Surrogate value ``sum(G * S)`` and ``G = dJ/dS`` for a similarity block."""
    w_p, w_n = pair_weight_matrix(scheme, sims, positive)
    grad = w_n - w_p
    return float(np.sum(grad * sims)), grad


def _check_batch(q, k):
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ShapeError(f"query {q.shape} and key {k.shape} batches do not conform")
    if k.shape[0] < 2:
        raise DegenerateError("InfoNCE needs at least two samples in the batch (no negatives otherwise)")


def infonce_term(q, k, instance_ids, scheme, normalize=True, key_instance_ids=None):
    """Mean InfoNCE of queries ``q`` against keys ``k``; keys are constants.

    Returns ``(value, grad_q, grad_sims)`` where ``grad_sims`` already carries
    the ``1/N`` batch average.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_batch(q, k)
    if scheme.kind != "infonce":
        raise ValueError("the self term needs an InfoNCE scheme")
    inst_q = np.asarray(instance_ids)
    inst_k = inst_q if key_instance_ids is None else np.asarray(key_instance_ids)
    positive = inst_q[:, None] == inst_k[None, :]
    if np.any(positive.all(axis=1)):
        raise DegenerateError("an anchor has no negative pair in the batch")
    n = q.shape[0]
    if normalize:
        q_hat, q_norm = l2_normalize(q)
        k_hat, _ = l2_normalize(k)
    else:
        q_hat, k_hat = q, k
    sims = q_hat @ k_hat.T
    _, grad = unified_grad(sims, positive, scheme)
    grad /= n

    logits = sims / scheme.tau
    row_max = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - row_max)
    neg_sum = np.sum(np.where(positive, 0.0, e), axis=1, keepdims=True)
    # -log(e_p / (e_p + neg_sum)) per positive, in shifted log space
    per_pair = np.log(e + neg_sum) - (logits - row_max)
    value = float(np.sum(np.where(positive, per_pair, 0.0)) / n)

    grad_hat = grad @ k_hat
    grad_q = l2_normalize_backward(q_hat, q_norm, grad_hat) if normalize else grad_hat
    return value, grad_q, grad


def softmax_ce(logits, class_ids):
    """Mean softmax cross-entropy (denominator over all classes) and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    cls = np.asarray(class_ids, dtype=np.int64)
    n, c = logits.shape
    if cls.shape != (n,):
        raise ShapeError(f"{n} logit rows but {cls.shape} labels")
    if np.any(cls < 0) or np.any(cls >= c):
        bad = int(cls[(cls < 0) | (cls >= c)][0])
        raise LabelError(f"class id {bad} outside the class-head width {c}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    value = float(np.sum(log_z - shifted[rows, cls]) / n)
    prob = np.exp(shifted - log_z[:, None])
    prob[rows, cls] -= 1.0
    return value, prob / n


@dataclass
class OperaLossReport:
    value: float
    self_value: float
    full_value: float
    grad_self: np.ndarray  # d/d(online predictor output)
    grad_full: np.ndarray  # d/d(class-head output)
    grad_sims: np.ndarray = field(repr=False)


def opera_loss(
    q,
    k,
    y_full,
    instance_ids,
    class_ids,
    scheme_self=None,
    scheme_full=None,
    normalize=True,
    full_weight=1.0,
    key_instance_ids=None,
):
    """Instance-level InfoNCE on the predictor output plus class-level softmax CE on the class head.

    ``q`` are online predictor outputs, ``k`` target outputs (treated as
    constants), ``y_full`` class-head outputs for the same rows as ``q``. Both
    terms are batch means; gradients are returned only for ``q`` and ``y_full``.
    """
    scheme_self = WeightScheme.infonce(0.2) if scheme_self is None else scheme_self
    scheme_full = WeightScheme.softmax() if scheme_full is None else scheme_full
    if scheme_full.kind != "softmax":
        raise ValueError("the full term uses the softmax scheme")
    self_value, grad_q, grad_sims = infonce_term(
        q, k, instance_ids, scheme_self, normalize=normalize, key_instance_ids=key_instance_ids
    )
    full_value, grad_full = softmax_ce(y_full, class_ids)
    return OperaLossReport(
        value=self_value + full_weight * full_value,
        self_value=self_value,
        full_value=full_weight * full_value,
        grad_self=grad_q,
        grad_full=full_weight * grad_full,
        grad_sims=grad_sims,
    )


@dataclass
class NaiveLossReport:
    self_value: float
    full_value: float
    grad_q: np.ndarray
    grad_sims: np.ndarray = field(repr=False)
    conflict_grad_max: float = 0.0

    @property
    def value(self):
        return self.self_value + self.full_value


def naive_pair_loss(q, k, instance_ids, class_ids, scheme_self, scheme_full, normalize=True):
    """Self and full pair objectives summed on one query/key similarity block.

    Values are the coefficient-form surrogates (batch means). ``conflict_grad_max``
    is the largest ``|dJ/ds|`` over same-class, different-instance pairs.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_batch(q, k)
    same_inst, same_cls = relation_masks(instance_ids, class_ids)
    n = q.shape[0]
    if normalize:
        q_hat, q_norm = l2_normalize(q)
        k_hat, _ = l2_normalize(k)
    else:
        q_hat, k_hat = q, k
    sims = q_hat @ k_hat.T
    v_self, g_self = unified_grad(sims, same_inst, scheme_self)
    v_full, g_full = unified_grad(sims, same_cls, scheme_full)
    grad = (g_self + g_full) / n
    conflict = same_cls & ~same_inst
    conflict_max = float(np.max(np.abs(grad[conflict]))) if np.any(conflict) else 0.0
    grad_hat = grad @ k_hat
    grad_q = l2_normalize_backward(q_hat, q_norm, grad_hat) if normalize else grad_hat
    return NaiveLossReport(v_self / n, v_full / n, grad_q, grad, conflict_max)
