"""Prototype posteriors, consistency penalty, and baseline losses.

Every softmax, log-probability and KL value is computed from max-shifted
logits, so no probability is ever logged after the fact.

The per-example functions take unit vectors and return plain floats.  The
``*_batch`` functions act on a whole minibatch of embeddings and also return
gradients with respect to those embeddings; the trainer chains them into
the embedder's backward pass.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-6


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _check_unit(*arrays):
    for a in arrays:
        norms = np.linalg.norm(np.atleast_2d(a), axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("expected unit-norm vectors")


@dataclass(frozen=True)
class Posterior:
    logits: np.ndarray
    tau: float
    prototype_set_id: str = "s1"

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass(frozen=True)
class LossBreakdown:
    L_s1: float
    L_s2: float
    L_kl: float
    total: float
    alpha: float
    tau: float


def prototype_posterior(anchor, protos, tau: float, prototype_set_id: str = "s1") -> Posterior:
    """Softmax over prototype similarities, sharpened by temperature ``tau``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    anchor = np.asarray(anchor, dtype=np.float64)
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    _check_unit(anchor, protos)
    return Posterior(protos @ anchor / tau, tau, prototype_set_id)


def proto_ce_loss(posterior: Posterior, target: int) -> float:
    if not 0 <= target < posterior.logits.shape[0]:
        raise IndexError(f"target {target} out of range")
    return float(-posterior.log_probs[target])


def kl_div(p: Posterior, q: Posterior) -> float:
    """KL(p || q) in nats; terms with p_k = 0 contribute nothing."""
    if p.logits.shape != q.logits.shape:
        raise ValueError("posteriors have different lengths")
    lp, lq = p.log_probs, q.log_probs
    probs = np.exp(lp)
    live = probs > 0
    return float(max(np.sum(probs[live] * (lp[live] - lq[live])), 0.0))


def total_loss(anchor, protos_1, protos_2, target: int, tau: float = 0.05, alpha: float = 5.0,
               symmetric_kl: bool = False) -> LossBreakdown:
    p1 = prototype_posterior(anchor, protos_1, tau, "s1")
    p2 = prototype_posterior(anchor, protos_2, tau, "s2")
    if p1.logits.shape != p2.logits.shape:
        raise ValueError("prototype sets differ in size")
    l1, l2 = proto_ce_loss(p1, target), proto_ce_loss(p2, target)
    kl = kl_div(p1, p2)
    if symmetric_kl:
        kl = 0.5 * (kl + kl_div(p2, p1))
    return LossBreakdown(l1, l2, kl, l1 + l2 + alpha * kl, alpha, tau)


def avg_pairwise_kl(anchor, all_sets, tau: float, cap: int = 10_000) -> float:
    """``2 / (S (S - 1))`` times the KL summed over all ordered pairs of sets."""
    n = len(all_sets)
    if n > cap:
        raise ValueError(f"{n} prototype sets exceed cap {cap}")
    if n <= 1:
        return 0.0
    posts = [prototype_posterior(anchor, s, tau) for s in all_sets]
    total = sum(kl_div(posts[p], posts[q]) for p, q in itertools.permutations(range(n), 2))
    return 2.0 / (n * (n - 1)) * total


def instance_softmax_loss(head, feature, target: int) -> float:
    logits = np.asarray(head, dtype=np.float64) @ np.asarray(feature, dtype=np.float64)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range")
    return float(-log_softmax(logits)[target])


def triplet_loss(anchor, positive, negative, margin: float = 1.0) -> float:
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (anchor, positive, negative))
    return float(max(0.0, np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin))


def supervised_ce_loss(class_head, feature, class_label: int) -> float:
    """Cross-entropy over the seen-class head; ``class_label`` indexes its rows."""
    n_classes = np.asarray(class_head).shape[0]
    if not 0 <= class_label < n_classes:
        raise ValueError(f"label {class_label} is not a seen class")
    return instance_softmax_loss(class_head, feature, class_label)


# --- minibatch forms with gradients -------------------------------------


def _ce_rows(logits, targets):
    """Per-row cross-entropy and d(sum of rows)/d(logits)."""
    lp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = -lp[rows, targets]
    grad = np.exp(lp)
    grad[rows, targets] -= 1.0
    return loss, grad, lp


def _kl_rows(lp, lq):
    """Per-row KL(p||q) from log-probs, with gradients w.r.t. both logit rows."""
    p = np.exp(lp)
    diff = np.where(p > 0, lp - lq, 0.0)
    kl = np.sum(p * diff, axis=1)
    dl = p * (diff - kl[:, None])
    dr = np.exp(lq) - p
    return kl, dl, dr


def proto_batch_loss(A, P1, P2, tau: float, alpha: float, symmetric_kl: bool = False):
    """Mean prototype loss over a minibatch; anchor ``i`` belongs to instance ``i``.

    Returns ``(total, LossBreakdown of means, dA, dP1, dP2)``.
    """
    m = A.shape[0]
    targets = np.arange(m)
    z1 = A @ P1.T / tau
    z2 = A @ P2.T / tau
    l1, g1, lp1 = _ce_rows(z1, targets)
    l2, g2, lp2 = _ce_rows(z2, targets)
    if alpha != 0.0:
        kl, dk1, dk2 = _kl_rows(lp1, lp2)
        if symmetric_kl:
            kl_r, dr2, dr1 = _kl_rows(lp2, lp1)
            kl = 0.5 * (kl + kl_r)
            dk1, dk2 = 0.5 * (dk1 + dr1), 0.5 * (dk2 + dr2)
        g1 = g1 + alpha * dk1
        g2 = g2 + alpha * dk2
        kl_mean = float(kl.mean())
    else:
        kl_mean = 0.0
    g1 /= m * tau
    g2 /= m * tau
    dA = g1 @ P1 + g2 @ P2
    dP1 = g1.T @ A
    dP2 = g2.T @ A
    L1, L2 = float(l1.mean()), float(l2.mean())
    total = L1 + L2 + alpha * kl_mean
    return total, LossBreakdown(L1, L2, kl_mean, total, alpha, tau), dA, dP1, dP2


def softmax_head_batch_loss(F, W, targets):
    """Mean cross-entropy of ``softmax(W f)``; returns ``(loss, dF, dW)``."""
    targets = np.asarray(targets)
    m = F.shape[0]
    loss, g, _ = _ce_rows(F @ W.T, targets)
    g /= m
    return float(loss.mean()), g @ W, g.T @ F


def triplet_batch_loss(A, P, N, margin: float = 1.0):
    """Mean hinge triplet loss; returns ``(loss, dA, dP, dN)``."""
    dp = A - P
    dn = A - N
    raw = np.sum(dp * dp, axis=1) - np.sum(dn * dn, axis=1) + margin
    active = (raw > 0).astype(np.float64)[:, None]
    m = A.shape[0]
    scale = 2.0 * active / m
    dA = scale * (dp - dn)
    return float(np.maximum(raw, 0.0).mean()), dA, -scale * dp, scale * dn
