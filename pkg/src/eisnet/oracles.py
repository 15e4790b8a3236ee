"""Brute-force reference implementations used only for verification. They
deliberately avoid the vectorized code paths they check: plain loops over
bank entries, exhaustive matching, closed forms."""

from __future__ import annotations

import numpy as np

from . import nn
from .membank import BankSnapshot


def random_snapshot(rng: np.random.Generator, max_size: int = 64,
                    dim: int = 8, num_labels: int = 3) -> BankSnapshot:
    n = int(rng.integers(0, max_size + 1))
    if n == 0:
        return BankSnapshot(np.empty((0, dim)), np.empty((0,), dtype=np.int64))
    emb = np.stack([nn.l2_normalize(rng.standard_normal(dim)) for _ in range(n)])
    labels = rng.integers(num_labels, size=n)
    return BankSnapshot(emb.astype(np.float64), labels.astype(np.int64))


def khard_oracle(anchor_v: np.ndarray, anchor_label: int, d_ap_sq: float,
                 snap: BankSnapshot, margin: float, k: int):
    """Exhaustive scan: all different-label entries within the distance
    constraint, sorted by (squared distance, bank index), truncated to k.
    Returns (hard indices, total different-label candidate count)."""
    scored = []
    n_cand = 0
    for i, rec in snap:
        if rec.label == anchor_label:
            continue
        n_cand += 1
        diff = anchor_v - rec.v
        d2 = float(diff @ diff)
        if d2 < d_ap_sq + margin:
            scored.append((d2, i))
    scored.sort()
    return [i for _, i in scored[:k]], n_cand


def mine_anchor_oracle(anchor_v: np.ndarray, positive_v: np.ndarray,
                       negative_vs, margin: float) -> float:
    """Per-triplet hinge mean, computed term by term."""
    d_ap = float(((anchor_v - positive_v) ** 2).sum())
    total = 0.0
    for n_v in negative_vs:
        d_an = float(((anchor_v - n_v) ** 2).sum())
        total += max(0.0, d_ap - d_an + margin)
    return total / len(negative_vs)


def jigsaw_label_oracle(original: np.ndarray, transformed: np.ndarray,
                        perms: np.ndarray) -> int | None:
    """Recovers the order class by matching against all 31 shuffles."""
    from .jigsaw import shuffle_image
    for cls in range(len(perms)):
        if np.array_equal(shuffle_image(original, perms[cls]), transformed):
            return cls
    return None


def ema_closed_form(theta0: np.ndarray, theta_f: np.ndarray, delta: float,
                    n: int) -> np.ndarray:
    """n EMA steps toward a constant target: delta^n * theta0 + (1-delta^n) * theta_f."""
    return delta ** n * theta0 + (1.0 - delta ** n) * theta_f
