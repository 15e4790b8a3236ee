"""Fast built-in verification: gradient checks against central finite
differences, the brute-force mining oracle, the FIFO bank oracle, and the
patch-shuffle round trip. Mirrors the heavier pytest suite so a deployed
install can vouch for itself."""

from __future__ import annotations

import numpy as np

from . import jigsaw, model, nn
from .membank import BankRecord, MemoryBank
from .mining import Selector, SelectorKind, select_negatives
from .oracles import khard_oracle, random_snapshot

GRAD_TOL = 1e-4


def _layer_grad_checks() -> bool:
    rng = np.random.default_rng(7)

    def affine_loss(p):
        y = nn.affine_forward(p["x"], p["w"], p["b"])
        gx, gw, gb = nn.affine_backward(2 * y, p["x"], p["w"])
        return float((y * y).sum()), {"x": gx, "w": gw, "b": gb}

    params = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 5)),
              "b": rng.standard_normal(5)}
    if nn.finite_diff_check(affine_loss, params) > GRAD_TOL:
        return False

    def conv_loss(p):
        y = nn.conv2d_forward(p["x"], p["k"])
        gx, gk = nn.conv2d_backward(2 * y, p["x"], p["k"])
        return float((y * y).sum()), {"x": gx, "k": gk}

    params = {"x": rng.standard_normal((2, 3, 6, 6)),
              "k": rng.standard_normal((4, 3, 3, 3))}
    if nn.finite_diff_check(conv_loss, params) > GRAD_TOL:
        return False

    def norm_loss(p):
        u = nn.l2_normalize(p["v"])
        t = np.arange(u.size, dtype=float)
        return float((u * t).sum()), {"v": nn.l2_normalize_backward(t, p["v"])}

    if nn.finite_diff_check(norm_loss, {"v": rng.standard_normal(8) + 2.0}) > GRAD_TOL:
        return False
    return True


def _model_grad_check() -> bool:
    mcfg = model.ModelConfig(image_side=6, num_classes=3, encoder_kind="mlp")
    rng = np.random.default_rng(11)
    params = model.init_params(mcfg, rng, dtype=np.float64)
    x = rng.random((2, 3, 6, 6))
    targets = np.array([0, 2])

    def loss_fn(p):
        out = model.forward_all(p, mcfg, x)
        loss, g = nn.softmax_cross_entropy(out.class_logits, targets)
        grads = model.backward_all(p, mcfg, out, g, None, None)
        return loss, grads

    return nn.finite_diff_check(loss_fn, params, coords_per_tensor=24) <= GRAD_TOL


def _mining_oracle(trials: int = 200) -> bool:
    rng = np.random.default_rng(23)
    for _ in range(trials):
        snap = random_snapshot(rng, max_size=32)
        anchor = nn.l2_normalize(rng.standard_normal(8))
        label = int(rng.integers(3))
        d_ap_sq = float(rng.uniform(0, 4))
        k = int(rng.integers(1, 6))
        sel = Selector(kind=SelectorKind.K_HARD, k=k)
        got = select_negatives(sel, anchor, label, d_ap_sq, snap, 2.0, rng)
        want_hard, n_cand = khard_oracle(anchor, label, d_ap_sq, snap, 2.0, k)
        if got[:len(want_hard)] != want_hard:
            return False
        if len(got) != min(k, n_cand):
            return False
    return True


def _fifo_oracle(trials: int = 100) -> bool:
    rng = np.random.default_rng(29)
    for _ in range(trials):
        cap = int(rng.integers(1, 16))
        bank = MemoryBank(cap, dim=4)
        shadow: list[int] = []
        for _ in range(int(rng.integers(1, 8))):
            n = int(rng.integers(1, 6))
            recs = []
            for _ in range(n):
                v = nn.l2_normalize(rng.standard_normal(4))
                lab = int(rng.integers(5))
                recs.append(BankRecord(v=v, label=lab))
                shadow.append(lab)
            bank.push_batch(recs)
        got = [r.label for _, r in bank.snapshot()]
        if got != shadow[-cap:]:
            return False
    return True


def _jigsaw_roundtrip(trials: int = 50) -> bool:
    rng = np.random.default_rng(31)
    pset = jigsaw.default_permutation_set()
    for _ in range(trials):
        img = rng.random((3, 9, 9)).astype(np.float32)
        cls = int(rng.integers(31))
        perm = pset.perms[cls]
        if not np.array_equal(jigsaw.unshuffle_image(jigsaw.shuffle_image(img, perm),
                                                     perm), img):
            return False
    return True


def run_all() -> list[tuple[str, bool]]:
    return [
        ("layer gradient checks", _layer_grad_checks()),
        ("full-model gradient check", _model_grad_check()),
        ("k-hard mining vs brute force", _mining_oracle()),
        ("bank FIFO vs unbounded list", _fifo_oracle()),
        ("patch shuffle round trip", _jigsaw_roundtrip()),
    ]
