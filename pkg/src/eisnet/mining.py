"""Triplet construction over a bank snapshot: random positive choice, the
three negative selectors (random, semi-hard = hard with K=1, K-hard), and
the hinge triplet loss with gradients into the anchor only.

Positives and negatives are detached bank constants; the anchor embedding is
the only gradient-carrying input.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .membank import BankRecord, BankSnapshot


class SelectorKind(enum.Enum):
    RANDOM = "random"
    SEMI_HARD = "semihard"
    K_HARD = "khard"


@dataclass(frozen=True)
class Selector:
    kind: SelectorKind
    k: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"selector K must be >= 1, got {self.k}")
        if self.kind is SelectorKind.SEMI_HARD and self.k != 1:
            object.__setattr__(self, "k", 1)  # semi-hard is K-hard with K=1


def choose_positive(anchor_label: int, snap: BankSnapshot,
                    rng: np.random.Generator) -> tuple[int, BankRecord] | None:
    """Uniform draw among same-label entries; None if there are none.
    Returns (bank index, record)."""
    (cand,) = np.nonzero(snap.labels == anchor_label)
    if cand.size == 0:
        return None
    i = int(cand[rng.integers(cand.size)])
    return i, snap.record(i)


def select_negatives(selector: Selector, anchor_v: np.ndarray, anchor_label: int,
                     d_ap_sq: float, snap: BankSnapshot, margin: float,
                     rng: np.random.Generator,
                     d2_row: np.ndarray | None = None) -> list[int]:
    """Returns bank indices of the selected negatives (possibly empty).

    K-hard: among different-label entries with d(a,n)^2 < d(a,p)^2 + margin,
    the K smallest distances (ties to the lower bank index); short-fall is
    filled by unconstrained uniform draws, and with zero qualifiers all K
    draws are unconstrained. Random: K uniform different-label draws.

    d2_row may pass precomputed squared distances from the anchor to every
    bank entry (mine_batch computes them for the whole batch at once).
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if d_ap_sq < 0:
        raise ValueError(f"d_ap_sq must be non-negative, got {d_ap_sq}")
    (cand,) = np.nonzero(snap.labels != anchor_label)
    if cand.size == 0:
        return []
    k = min(selector.k, cand.size)

    if selector.kind is SelectorKind.RANDOM:
        return [int(i) for i in rng.choice(cand, size=k, replace=False)]

    if d2_row is None:
        d2 = ((snap.embeddings[cand] - anchor_v) ** 2).sum(axis=1)
    else:
        d2 = d2_row[cand]
    hard = d2 < d_ap_sq + margin
    qual, qual_d2 = cand[hard], d2[hard]
    order = np.lexsort((qual, qual_d2))  # distance first, bank index breaks ties
    chosen = [int(i) for i in qual[order[:k]]]
    if len(chosen) < k:
        rest = cand[~hard]
        fill = rng.choice(rest, size=k - len(chosen), replace=False)
        chosen.extend(int(i) for i in fill)
    return chosen


def triplet_loss(anchor_v: np.ndarray, positive_v: np.ndarray,
                 negatives: list[np.ndarray], margin: float):
    """Mean hinge over the negatives actually used:
    (1/K') sum_i [d(a,p)^2 - d(a,n_i)^2 + margin]_+ .

    Returns (loss, grad wrt anchor). Positive/negatives are constants;
    the subgradient at the hinge kink is 0."""
    if len(negatives) == 0:
        raise ValueError("triplet_loss: needs at least one negative")
    neg = np.asarray(negatives)
    d_ap = anchor_v - positive_v
    d_ap_sq = float(d_ap @ d_ap)
    diff = anchor_v - neg                                  # (K, D)
    h = d_ap_sq - (diff * diff).sum(axis=1) + margin
    active = h > 0
    k = len(neg)
    loss = float(h[active].sum()) / k
    grad = (2.0 * int(active.sum()) * d_ap - 2.0 * diff[active].sum(axis=0)) / k
    return loss, grad


def mine_batch(embeddings: np.ndarray, labels, snap: BankSnapshot,
               selector: Selector, margin: float, rng: np.random.Generator):
    """Mines every batch sample as an anchor against the snapshot.

    Anchors lacking a positive or any negative are skipped. Returns the loss
    averaged over contributing anchors and the gradient for each anchor
    embedding (zeros when nothing contributes)."""
    b = embeddings.shape[0]
    grads = np.zeros_like(embeddings)
    total = 0.0
    used = 0
    children = rng.spawn(b)  # one deterministic child per anchor index
    if len(snap) == 0:
        return 0.0, grads
    anchors = embeddings.astype(np.float64)
    v = snap.embeddings
    d2_all = ((anchors * anchors).sum(axis=1)[:, None]
              + (v * v).sum(axis=1)[None, :] - 2.0 * anchors @ v.T)
    np.maximum(d2_all, 0.0, out=d2_all)
    for a in range(b):
        a_rng = children[a]
        a_v = anchors[a]
        pos = choose_positive(int(labels[a]), snap, a_rng)
        if pos is None:
            continue
        pos_idx, pos_rec = pos
        d_ap_sq = float(d2_all[a, pos_idx])
        neg_idx = select_negatives(selector, a_v, int(labels[a]), d_ap_sq,
                                   snap, margin, a_rng, d2_row=d2_all[a])
        if not neg_idx:
            continue
        loss, grad = triplet_loss(a_v, pos_rec.v, snap.embeddings[neg_idx], margin)
        total += loss
        grads[a] = grad.astype(grads.dtype)
        used += 1
    if used == 0:
        return 0.0, grads
    return total / used, grads / used
