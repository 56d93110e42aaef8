"""Numerical checks of the linear-hierarchy equivalence and its consequences.

With linear maps ``g(y) = W_g y`` and ``h(u) = W_h u`` and a fixed prototype
``p``, the hierarchical objective (self term on ``W_g y``, full term on
``W_h W_g y``) moves ``s(y, p) = y^T p`` exactly as a single objective on the
raw representation whose per-relation coefficients are

    same instance              : -w_p_self * alpha - w_p_full * beta
    same class, other instance :  w_n_self * alpha - w_p_full * beta
    other class                :  w_n_self * alpha + w_n_full * beta

with ``alpha = ||W_g p||^2`` and ``beta = ||W_h W_g p||^2``. The checks here
compute both sides along independent paths and report the discrepancy.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ShapeError
from .labels import PairRelation
from .objectives import pair_weight_matrix, WeightScheme

SAME_INSTANCE = PairRelation(True, True)
SAME_CLASS = PairRelation(False, True)
CROSS_CLASS = PairRelation(False, False)
RELATIONS = (SAME_INSTANCE, SAME_CLASS, CROSS_CLASS)


@dataclass(frozen=True)
class LinearHierarchy:
    W_g: np.ndarray
    W_h: np.ndarray

    def __post_init__(self):
        W_g = np.atleast_2d(np.asarray(self.W_g, dtype=np.float64))
        W_h = np.atleast_2d(np.asarray(self.W_h, dtype=np.float64))
        if W_h.shape[1] != W_g.shape[0]:
            raise ShapeError(f"W_h {W_h.shape} cannot follow W_g {W_g.shape}")
        object.__setattr__(self, "W_g", W_g)
        object.__setattr__(self, "W_h", W_h)

    @property
    def dim(self):
        return self.W_g.shape[1]

    @classmethod
    def random(cls, rng, max_dim=8):
        d, e, c = (1 + rng.integers(max_dim, 3)).tolist()
        return cls(rng.normal((e, d)), rng.normal((c, e)))

    def scaled(self, c):
        return LinearHierarchy(c * self.W_g, self.W_h)


@dataclass
class SchemeWeights:
    """The four constant coefficients of a self/full scheme pair."""

    w_p_self: float
    w_n_self: float
    w_p_full: float
    w_n_full: float

    def __post_init__(self):
        if min(self.w_p_self, self.w_n_self, self.w_p_full, self.w_n_full) < 0:
            raise ValueError("scheme weights must be nonnegative")

    @classmethod
    def from_schemes(cls, scheme_self, scheme_full):
        for s in (scheme_self, scheme_full):
            if s.kind != "constant":
                raise ValueError("closed-form coefficients need constant weight schemes")
        return cls(scheme_self.w_p, scheme_self.w_n, scheme_full.w_p, scheme_full.w_n)

    @classmethod
    def random(cls, rng):
        return cls(*rng.uniform(4).tolist())

    def as_tuple(self):
        return (self.w_p_self, self.w_n_self, self.w_p_full, self.w_n_full)


@dataclass
class EquivalenceReport:
    max_rel_discrepancy: float
    trials: int
    coefficients: tuple = ()
    worst_trial: int = -1
    relation_counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "max_rel_discrepancy": self.max_rel_discrepancy,
            "trials": self.trials,
            "coefficients": list(self.coefficients),
            "worst_trial": self.worst_trial,
            "relation_counts": dict(self.relation_counts),
        }


def alpha_beta(hier, p):
    """``(||W_g p||^2, ||W_h W_g p||^2)`` for prototype ``p``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.shape[0] != hier.W_g.shape[1]:
        raise ShapeError(f"prototype length {p.shape[0]} vs W_g {hier.W_g.shape}")
    p_self = hier.W_g @ p
    p_full = hier.W_h @ p_self
    return float(p_self @ p_self), float(p_full @ p_full)


def equivalent_coefficients(weights, alpha, beta):
    """The three per-relation coefficients, ordered (same instance, same class, cross class)."""
    w = weights
    return (
        -w.w_p_self * alpha - w.w_p_full * beta,
        w.w_n_self * alpha - w.w_p_full * beta,
        w.w_n_self * alpha + w.w_n_full * beta,
    )


def coefficient_for(relation, weights, alpha, beta):
    same, same_class, cross = equivalent_coefficients(weights, alpha, beta)
    if relation.same_instance:
        return same
    return same_class if relation.same_class else cross


def hierarchical_gradient(hier, y, p, relation, weights):
    """``dJ^O/dy`` of the two-level pair objective with fixed ``p``, by the chain rule.

    ``J^O = c_self * s(W_g y, W_g p) + c_full * s(W_h W_g y, W_h W_g p)`` where
    ``c`` is ``-w_p`` on positives and ``+w_n`` on negatives at that level.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    c_self = -weights.w_p_self if relation.same_instance else weights.w_n_self
    c_full = -weights.w_p_full if relation.same_class else weights.w_n_full
    p_self = hier.W_g @ p
    p_full = hier.W_h @ p_self
    # d s(u, v)/du = v for s = u^T v
    grad_self = c_self * p_self
    grad_full = c_full * p_full
    return hier.W_g.T @ (grad_self + hier.W_h.T @ grad_full)


def hierarchical_value(hier, y, p, relation, weights):
    c_self = -weights.w_p_self if relation.same_instance else weights.w_n_self
    c_full = -weights.w_p_full if relation.same_class else weights.w_n_full
    y_self, p_self = hier.W_g @ y, hier.W_g @ p
    return c_self * float(y_self @ p_self) + c_full * float((hier.W_h @ y_self) @ (hier.W_h @ p_self))


def _discrepancy(direct, closed, scale):
    if direct == closed:
        return 0.0
    return abs(direct - closed) / max(scale, abs(direct), abs(closed))


def verify_proposition1(hier, rng, trials, schemes=None):
    """Compare ``(dJ^O/dy)^T p`` with the closed-form coefficient over random trials.

    With ``hier=None`` each trial draws its own random hierarchy (dims <= 8).
    ``schemes`` fixes the four constant weights; by default they are drawn per
    trial. The relative discrepancy is measured against the magnitude of the
    two terms making up the coefficient, so cancellation does not inflate it.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    worst, worst_trial = 0.0, -1
    counts = {"same_instance": 0, "same_class": 0, "cross_class": 0}
    names = dict(zip(RELATIONS, counts))
    coeffs = ()
    for t in range(trials):
        trng = rng.spawn(t)
        h = LinearHierarchy.random(trng) if hier is None else hier
        weights = SchemeWeights.random(trng) if schemes is None else schemes
        y = trng.normal(h.dim)
        p = trng.normal(h.dim)
        relation = RELATIONS[int(trng.integers(3, 1)[0])]
        counts[names[relation]] += 1

        direct = float(hierarchical_gradient(h, y, p, relation, weights) @ p)
        alpha, beta = alpha_beta(h, p)
        closed = coefficient_for(relation, weights, alpha, beta)
        w = weights.as_tuple()
        scale = max(w) * (alpha + beta)
        disc = _discrepancy(direct, closed, scale)
        if disc > worst or worst_trial < 0:
            worst, worst_trial = disc, t
        coeffs = equivalent_coefficients(weights, alpha, beta)
    return EquivalenceReport(worst, trials, coeffs, worst_trial, counts)


@dataclass
class Corollary1Result:
    ok: bool
    trials: int
    violations: int
    counterexample: Optional[dict] = None

    def to_dict(self):
        return {
            "ok": self.ok,
            "trials": self.trials,
            "violations": self.violations,
            "counterexample": self.counterexample,
        }


def corollary1_order_holds(coefficients, tol=0.0):
    same, same_class, cross = coefficients
    return same <= same_class + tol and same_class <= cross + tol


def verify_corollary1(hier, schemes, rng, trials):
    """Check ``w(same instance) <= w(same class) <= w(cross class)`` on random prototypes.

    ``schemes`` is either fixed ``SchemeWeights`` or a callable ``rng -> SchemeWeights``
    drawing fresh weights per trial. ``hier=None`` draws a hierarchy per trial.
    Returns the first counterexample (if any) and the total violation count.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    first = None
    violations = 0
    for t in range(trials):
        trng = rng.spawn(t)
        h = LinearHierarchy.random(trng) if hier is None else hier
        weights = schemes(trng) if callable(schemes) else schemes
        p = trng.normal(h.dim)
        alpha, beta = alpha_beta(h, p)
        coeffs = equivalent_coefficients(weights, alpha, beta)
        if not corollary1_order_holds(coeffs):
            violations += 1
            if first is None:
                first = {
                    "trial": t,
                    "weights": list(weights.as_tuple()),
                    "alpha": alpha,
                    "beta": beta,
                    "coefficients": list(coeffs),
                }
    return Corollary1Result(violations == 0, trials, violations, first)


def verify_corollary2(hier, w_n_self, w_p_full, p):
    """Signed net weight on a same-class, cross-instance pair.

    Negative: the pair's similarity is increased (attraction).
    Positive: it is decreased (repulsion).
    """
    alpha, beta = alpha_beta(hier, p)
    return w_n_self * alpha - w_p_full * beta


# ---------------------------------------------------------------------------
# coefficient-form gradient identities against independent closed forms
# ---------------------------------------------------------------------------


def _softmax_ce_grad_reference(sims, pos_index):
    # -s_p + log sum_{neg} exp(s_n), differentiated by hand, scalar loops
    negs = [j for j in range(len(sims)) if j != pos_index]
    m = max(sims[j] for j in negs)
    z = sum(math.exp(sims[j] - m) for j in negs)
    out = [0.0] * len(sims)
    out[pos_index] = -1.0
    for j in negs:
        out[j] = math.exp(sims[j] - m) / z
    return out


def _infonce_grad_reference(sims, pos_index, tau):
    # -log(exp(s_p/tau) / sum_j exp(s_j/tau)); d/ds_j = (softmax_j - [j == p]) / tau,
    # with 1 - softmax_p summed from the other entries to avoid cancellation
    m = max(sims)
    e = [math.exp((s - m) / tau) for s in sims]
    z = sum(e)
    out = [e[j] / z / tau for j in range(len(sims))]
    out[pos_index] = -sum(e[j] / z for j in range(len(sims)) if j != pos_index) / tau
    return out


@dataclass
class IdentityReport:
    scheme: str
    trials: int
    max_rel_error: float

    def to_dict(self):
        return {"scheme": self.scheme, "trials": self.trials, "max_rel_error": self.max_rel_error}


def verify_gradient_identity(kind, rng, trials, taus=(0.2, 0.5, 1.0), perturb=0.0):
    """Max relative error between ``(-w_p, +w_n)`` and a hand-derived loss gradient.

    ``perturb`` is added to the coefficient-form gradient; it exists only so
    the failure path of the command-line check can be exercised.
    """
    worst = 0.0
    for t in range(trials):
        trng = rng.spawn(t)
        n = 2 + int(trng.integers(4, 1)[0])  # 2..5 candidates
        d = 1 + int(trng.integers(8, 1)[0])  # embedding width 1..8
        sims = trng.normal((n, d)) @ trng.normal(d)
        pos = int(trng.integers(n, 1)[0])
        mask = np.zeros(n, dtype=bool)
        mask[pos] = True
        if kind == "softmax":
            scheme = WeightScheme.softmax()
            ref = _softmax_ce_grad_reference(sims.tolist(), pos)
        elif kind == "infonce":
            scheme = WeightScheme.infonce(taus[t % len(taus)])
            ref = _infonce_grad_reference(sims.tolist(), pos, scheme.tau)
        else:
            raise ValueError(kind)
        w_p, w_n = pair_weight_matrix(scheme, sims[None, :], mask[None, :])
        got = (w_n - w_p)[0] + perturb
        ref = np.asarray(ref)
        err = np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300))
        worst = max(worst, float(err))
    return IdentityReport(kind, trials, worst)
