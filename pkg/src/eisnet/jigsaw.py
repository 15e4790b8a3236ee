"""Patch-order self-supervision: a fixed set of 31 orderings of the 3x3
patch grid (identity at index 0), image shuffling, batch labeling, and the
order-classification loss.

The shipped default ordering set lives in data/permutations.txt so labels
stay stable across runs; regenerating with the same seed reproduces it.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .nn import softmax_cross_entropy

NUM_CLASSES = 31  # identity + 30 shuffles, not tunable
DEFAULT_SEED = 0
DEFAULT_CANDIDATES = 2000


@dataclass(frozen=True)
class PermutationSet:
    perms: np.ndarray  # (31, 9) int, row 0 = identity
    seed: int
    min_hamming: int  # achieved min pairwise Hamming among rows 1..30

    def __post_init__(self):
        p = self.perms
        if p.shape != (NUM_CLASSES, 9):
            raise ValueError(f"permutation set must be {NUM_CLASSES}x9, got {p.shape}")
        if not np.array_equal(p[0], np.arange(9)):
            raise ValueError("entry 0 must be the identity ordering")
        for row in p:
            if not np.array_equal(np.sort(row), np.arange(9)):
                raise ValueError("each row must be a permutation of 0..8")
        if len({tuple(row) for row in p}) != NUM_CLASSES:
            raise ValueError("orderings must be pairwise distinct")

    def __len__(self) -> int:
        return NUM_CLASSES


def _min_pairwise_hamming(perms: np.ndarray) -> int:
    best = 9
    for i in range(len(perms)):
        for j in range(i + 1, len(perms)):
            best = min(best, int((perms[i] != perms[j]).sum()))
    return best


def generate_permutation_set(rng: np.random.Generator | int = DEFAULT_SEED,
                             candidates: int = DEFAULT_CANDIDATES) -> PermutationSet:
    """Greedy max-min-Hamming construction: grow the set by repeatedly adding,
    out of `candidates` random permutations, the one farthest (in minimum
    Hamming distance) from everything chosen so far."""
    seed = rng if isinstance(rng, int) else -1
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    identity = np.arange(9)
    first = rng.permutation(9)
    while np.array_equal(first, identity):
        first = rng.permutation(9)
    chosen = [first]
    while len(chosen) < 30:
        pool = np.stack([rng.permutation(9) for _ in range(candidates)])
        stack = np.stack(chosen)
        # min Hamming distance of each candidate to the chosen set
        dists = (pool[:, None, :] != stack[None, :, :]).sum(axis=2).min(axis=1)
        dists[np.all(pool == identity, axis=1)] = -1
        for row in chosen:  # duplicates can't be re-added
            dists[np.all(pool == row, axis=1)] = -1
        chosen.append(pool[int(dists.argmax())])
    perms = np.vstack([identity[None, :], np.stack(chosen)])
    return PermutationSet(perms=perms, seed=seed,
                          min_hamming=_min_pairwise_hamming(perms[1:]))


# ---------------------------------------------------------------------------
# Set file: header "# seed=<s> min_hamming=<h>", then 31 lines of 9 indices.
# ---------------------------------------------------------------------------


def save_permutation_set(path, pset: PermutationSet) -> None:
    with open(path, "w") as f:
        f.write(f"# seed={pset.seed} min_hamming={pset.min_hamming}\n")
        for row in pset.perms:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def _parse_permutation_text(text: str) -> PermutationSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].lstrip("# ").split()
    meta = dict(kv.split("=") for kv in header)
    perms = np.array([[int(v) for v in ln.split()] for ln in lines[1:]])
    return PermutationSet(perms=perms, seed=int(meta["seed"]),
                          min_hamming=int(meta["min_hamming"]))


def load_permutation_set(path) -> PermutationSet:
    with open(path) as f:
        return _parse_permutation_text(f.read())


def default_permutation_set() -> PermutationSet:
    text = resources.files("eisnet.data").joinpath("permutations.txt").read_text()
    return _parse_permutation_text(text)


# ---------------------------------------------------------------------------
# Shuffling
# ---------------------------------------------------------------------------


def shuffle_image(img: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Rearranges the 3x3 patch grid: destination cell i (row-major) receives
    source patch perm[i]. img is (C, S, S) with S divisible by 3."""
    c, s, s2 = img.shape
    if s != s2 or s % 3 != 0:
        raise ValueError(f"image side must be square and divisible by 3, got {img.shape}")
    p = s // 3
    out = np.empty_like(img)
    for dst in range(9):
        src = int(perm[dst])
        dr, dc = divmod(dst, 3)
        sr, sc = divmod(src, 3)
        out[:, dr * p:(dr + 1) * p, dc * p:(dc + 1) * p] = \
            img[:, sr * p:(sr + 1) * p, sc * p:(sc + 1) * p]
    return out


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty(9, dtype=np.int64)
    inv[np.asarray(perm)] = np.arange(9)
    return inv


def unshuffle_image(img: np.ndarray, perm: np.ndarray) -> np.ndarray:
    return shuffle_image(img, invert_permutation(perm))


def make_jigsaw_batch(images: np.ndarray, pset: PermutationSet, p_shuffle: float,
                      rng: np.random.Generator):
    """Each image independently: with probability p_shuffle apply a uniformly
    drawn non-identity ordering (classes 1..30), otherwise keep it (class 0).
    Returns (transformed images, order labels)."""
    if not 0.0 <= p_shuffle <= 1.0:
        raise ValueError(f"p_shuffle must be in [0, 1], got {p_shuffle}")
    out = np.empty_like(images)
    labels = np.zeros(len(images), dtype=np.int64)
    for i, img in enumerate(images):
        if rng.random() < p_shuffle:
            cls = int(rng.integers(1, NUM_CLASSES))
            labels[i] = cls
            out[i] = shuffle_image(img, pset.perms[cls])
        else:
            out[i] = img
    return out, labels


def aux_loss(aux_logits: np.ndarray, order_labels):
    """Cross-entropy over the 31 order classes, mean over the batch."""
    if aux_logits.shape[1] != NUM_CLASSES:
        raise ValueError(f"aux logits must have {NUM_CLASSES} columns")
    return softmax_cross_entropy(aux_logits, order_labels)
