"""Minimal differentiable numerics: layer forward/backward pairs with
analytic gradients, SGD and EMA parameter updates, and a finite-difference
gradient checker.

All functions are pure over numpy arrays. Dtype follows the inputs: use
float64 arrays for gradient checking, float32 for training.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np

L2_EPS = 1e-12


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# ---------------------------------------------------------------------------
# Affine
# ---------------------------------------------------------------------------


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b.  x (B, I), w (I, O), b (O,) -> y (B, O)."""
    _require(x.ndim == 2 and w.ndim == 2 and b.ndim == 1,
             f"affine: expected 2d x, 2d w, 1d b, got {x.shape}, {w.shape}, {b.shape}")
    _require(x.shape[1] == w.shape[0], f"affine: x cols {x.shape[1]} != w rows {w.shape[0]}")
    _require(w.shape[1] == b.shape[0], f"affine: w cols {w.shape[1]} != b size {b.shape[0]}")
    return x @ w + b


def affine_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Gradients of y = x @ w + b. Returns (grad_x, grad_w, grad_b)."""
    _require(grad_y.shape == (x.shape[0], w.shape[1]),
             f"affine_backward: grad shape {grad_y.shape} != {(x.shape[0], w.shape[1])}")
    return grad_y @ w.T, x.T @ grad_y, grad_y.sum(axis=0)


# ---------------------------------------------------------------------------
# Convolution (valid, 3x3, stride 1) via patch-matrix expansion
# ---------------------------------------------------------------------------


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Extract all 3x3 patches. x (B, C, H, W) -> (B, H-2, W-2, C*9)."""
    b, c, h, w = x.shape
    s0, s1, s2, s3 = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, h - 2, w - 2, 3, 3), strides=(s0, s1, s2, s3, s2, s3))
    return patches.transpose(0, 2, 3, 1, 4, 5).reshape(b, h - 2, w - 2, c * 9)


def conv2d_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation, stride 1. x (B, C, H, W), k (F, C, 3, 3)
    -> y (B, F, H-2, W-2)."""
    _require(x.ndim == 4 and k.ndim == 4, "conv2d: expected 4d input and kernel")
    _require(k.shape[2:] == (3, 3), f"conv2d: kernel must be 3x3, got {k.shape[2:]}")
    _require(x.shape[1] == k.shape[1],
             f"conv2d: input channels {x.shape[1]} != kernel channels {k.shape[1]}")
    _require(x.shape[2] >= 3 and x.shape[3] >= 3,
             f"conv2d: kernel larger than input {x.shape[2:]}")
    b, _, h, w = x.shape
    f = k.shape[0]
    cols = _im2col3(x)                               # (B, H', W', C*9)
    y = cols @ k.reshape(f, -1).T                    # (B, H', W', F)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_forward_cached(x: np.ndarray, k: np.ndarray):
    """conv2d_forward that also returns the patch matrix for reuse in the
    backward pass."""
    f = k.shape[0]
    _require(x.shape[1] == k.shape[1] and k.shape[2:] == (3, 3),
             "conv2d: kernel/input mismatch")
    _require(x.shape[2] >= 3 and x.shape[3] >= 3, "conv2d: kernel larger than input")
    cols = _im2col3(x)
    y = cols @ k.reshape(f, -1).T
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def conv2d_backward(grad_y: np.ndarray, x: np.ndarray, k: np.ndarray,
                    cols: np.ndarray | None = None, need_input_grad: bool = True):
    """Gradients of conv2d_forward. Returns (grad_x, grad_k). `cols` may pass
    the patch matrix from the forward pass to avoid re-extraction;
    need_input_grad=False skips grad_x (returned as None)."""
    b, c, h, w = x.shape
    f = k.shape[0]
    _require(grad_y.shape == (b, f, h - 2, w - 2),
             f"conv2d_backward: grad shape {grad_y.shape} != {(b, f, h - 2, w - 2)}")
    g = grad_y.transpose(0, 2, 3, 1).reshape(-1, f)          # (B*H'*W', F)
    if cols is None:
        cols = _im2col3(x)
    cols = cols.reshape(-1, c * 9)
    grad_k = (g.T @ cols).reshape(f, c, 3, 3)
    if not need_input_grad:
        return None, grad_k
    # grad_x: scatter each patch-gradient back to its window
    gcols = (g @ k.reshape(f, -1)).reshape(b, h - 2, w - 2, c, 3, 3)
    grad_x = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            grad_x[:, :, di:di + h - 2, dj:dj + w - 2] += \
                gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return grad_x, grad_k


# ---------------------------------------------------------------------------
# ReLU / max-pool
# ---------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_y * (x > 0)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2. x (B, C, H, W), H and W even."""
    b, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"maxpool2: spatial dims must be even, got {h}x{w}")
    rows = np.maximum(x[:, :, 0::2, :], x[:, :, 1::2, :])
    return np.maximum(rows[:, :, :, 0::2], rows[:, :, :, 1::2])


def maxpool2_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Routes gradient to the argmax of each window; ties go to the first
    position in row-major order."""
    b, c, h, w = x.shape
    _require(grad_y.shape == (b, c, h // 2, w // 2), "maxpool2_backward: grad shape mismatch")
    win = _pool_windows(x)                            # (B, C, H/2, W/2, 4)
    arg = win.argmax(axis=4)                          # first max wins ties
    grad_win = np.zeros_like(win)
    np.put_along_axis(grad_win, arg[..., None], grad_y[..., None], axis=4)
    grad_x = grad_win.reshape(b, c, h // 2, w // 2, 2, 2) \
        .transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return grad_x


def _pool_windows(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C, H/2, W/2, 4) with window cells in row-major order."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(b, c, h // 2, w // 2, 4)


# ---------------------------------------------------------------------------
# L2 normalization
# ---------------------------------------------------------------------------


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """u = v / ||v||, along the last axis."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    _require(bool(np.all(norm > L2_EPS)), "l2_normalize: degenerate (near-zero) vector")
    return v / norm


def l2_normalize_backward(grad_u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jacobian-vector product (I - u u^T) / ||v|| applied along the last axis."""
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    _require(bool(np.all(norm > L2_EPS)), "l2_normalize_backward: degenerate vector")
    u = v / norm
    return (grad_u - u * (u * grad_u).sum(axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# Losses / distances
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, targets: Sequence[int]):
    """Mean cross-entropy over the batch. Returns (loss, grad_logits) with
    grad = (softmax - onehot) / B."""
    _require(logits.ndim == 2, f"softmax_cross_entropy: expected 2d logits, got {logits.shape}")
    b, c = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    _require(t.shape == (b,), f"softmax_cross_entropy: {len(t)} targets for batch {b}")
    _require(bool(np.all((t >= 0) & (t < c))),
             f"softmax_cross_entropy: target out of range [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float((log_z - shifted[np.arange(b), t]).mean())
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(b), t] -= 1.0
    return loss, grad / b


def sq_euclidean(u: np.ndarray, v: np.ndarray) -> float:
    """||u - v||^2. Gradient w.r.t. u is 2(u - v)."""
    _require(u.shape == v.shape, f"sq_euclidean: shape mismatch {u.shape} vs {v.shape}")
    d = u - v
    return float(d @ d)


def sq_euclidean_backward(u: np.ndarray, v: np.ndarray):
    """Returns (grad_u, grad_v) of ||u - v||^2."""
    g = 2.0 * (u - v)
    return g, -g


# ---------------------------------------------------------------------------
# Parameter updates
# ---------------------------------------------------------------------------


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
    """theta <- theta - lr * grad, per named tensor. Returns a new mapping."""
    _require(lr > 0, f"sgd_step: lr must be positive, got {lr}")
    out = {}
    for name, p in params.items():
        g = grads[name]
        _require(g.shape == p.shape, f"sgd_step: shape mismatch for {name}")
        out[name] = p - lr * g
    return out


def ema_step(theta_g: np.ndarray, theta_f: np.ndarray, delta: float) -> np.ndarray:
    """theta_g <- delta * theta_g + (1 - delta) * theta_f."""
    _require(0.0 <= delta < 1.0, f"ema_step: delta must be in [0, 1), got {delta}")
    _require(theta_g.shape == theta_f.shape, "ema_step: shape mismatch")
    if delta == 0.0:
        return theta_f.copy()
    return delta * theta_g + (1.0 - delta) * theta_f


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------


def finite_diff_check(loss_fn: Callable[[Mapping[str, np.ndarray]], tuple],
                      params: Mapping[str, np.ndarray],
                      eps: float = 1e-5,
                      coords_per_tensor: int = 64,
                      rng: np.random.Generator | None = None) -> float:
    """Compares the analytic gradients produced by loss_fn against central
    finite differences.

    loss_fn(params) must return (loss, grads) with grads keyed like params.
    Coordinates are subsampled (at least coords_per_tensor per tensor) for
    large tensors. Returns the max relative error over checked coordinates.
    """
    _require(1e-6 <= eps <= 1e-3, f"finite_diff_check: eps {eps} outside [1e-6, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)
    loss0, grads = loss_fn(params)
    _require(np.isfinite(loss0), "finite_diff_check: non-finite loss")
    max_err = 0.0
    for name, p in params.items():
        n = p.size
        if n <= coords_per_tensor:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=coords_per_tensor, replace=False)
        for i in idx:
            orig = p.flat[i]
            p.flat[i] = orig + eps
            lp, _ = loss_fn(params)
            p.flat[i] = orig - eps
            lm, _ = loss_fn(params)
            p.flat[i] = orig
            _require(np.isfinite(lp) and np.isfinite(lm),
                     "finite_diff_check: non-finite perturbed loss")
            numeric = (lp - lm) / (2 * eps)
            analytic = grads[name].flat[i]
            err = abs(analytic - numeric) / max(1e-8, abs(numeric))
            max_err = max(max_err, err)
    return max_err
