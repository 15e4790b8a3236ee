"""Encoder with three heads (classifier, unit-normalized 128-d embedding,
31-way patch-order head) plus a momentum-updated twin encoder whose
parameters follow an exponential moving average of the trained encoder.

Parameters live in a plain dict keyed by stable names; the key order is the
serialization and EMA-pairing schema.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn

CHECKPOINT_MAGIC = b"EISP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 30
    channels: int = 3
    num_classes: int = 5
    embed_dim: int = 128
    aux_classes: int = 31
    encoder_kind: str = "conv"  # "conv" | "mlp"
    # Width of the shared feature vector all three heads read.
    feature_dim: int = 128

    def __post_init__(self):
        if self.image_side % 3 != 0:
            raise ValueError(f"image_side must be divisible by 3, got {self.image_side}")
        if self.aux_classes != 31:
            raise ValueError("aux_classes is fixed at 31 (30 shuffles + identity)")
        if self.encoder_kind not in ("conv", "mlp"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.encoder_kind == "conv":
            s = self.image_side - 2
            if s % 2 or (s // 2 - 2) % 2:
                raise ValueError(
                    f"image_side {self.image_side} incompatible with conv encoder "
                    "(pooling needs even spatial dims; try 18 or 30)")

    def conv_flat_dim(self) -> int:
        s = ((self.image_side - 2) // 2 - 2) // 2
        return 32 * s * s


# Parameter schema, in order. Heads: cls = classifier, emb = embedding, aux = order head.
def param_schema(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    if cfg.encoder_kind == "conv":
        enc = [
            ("conv1.k", (16, cfg.channels, 3, 3)),
            ("conv2.k", (32, 16, 3, 3)),
            ("fc.w", (cfg.conv_flat_dim(), cfg.feature_dim)),
            ("fc.b", (cfg.feature_dim,)),
        ]
    else:
        d = cfg.channels * cfg.image_side * cfg.image_side
        enc = [
            ("fc1.w", (d, 256)),
            ("fc1.b", (256,)),
            ("fc2.w", (256, cfg.feature_dim)),
            ("fc2.b", (cfg.feature_dim,)),
        ]
    heads = [
        ("emb.w", (cfg.feature_dim, cfg.embed_dim)),
        ("emb.b", (cfg.embed_dim,)),
        ("cls.w", (cfg.feature_dim, cfg.num_classes)),
        ("cls.b", (cfg.num_classes,)),
        ("aux.w", (cfg.feature_dim, cfg.aux_classes)),
        ("aux.b", (cfg.aux_classes,)),
    ]
    return enc + heads


# The EMA twin tracks encoder + embedding head only (its sole job is
# producing bank embeddings); classifier and order heads stay out.
def tracked_names(cfg: ModelConfig) -> list[str]:
    return [n for n, _ in param_schema(cfg)
            if not n.startswith("cls.") and not n.startswith("aux.")]


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:  # conv kernel (F, C, 3, 3)
        return shape[1] * 9, shape[0] * 9
    if len(shape) == 2:
        return shape[0], shape[1]
    return shape[0], shape[0]


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, drawn from the given rng."""
    params = {}
    for name, shape in param_schema(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in, fan_out = _fans(name, shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def forward_features(params: dict, cfg: ModelConfig, x: np.ndarray):
    """Encoder forward. Returns (features (B, feature_dim), cache for backward)."""
    b = x.shape[0]
    expect = (b, cfg.channels, cfg.image_side, cfg.image_side)
    if x.shape != expect:
        raise ValueError(f"forward_features: input shape {x.shape}, expected {expect}")
    cache = {"x": x}
    if cfg.encoder_kind == "conv":
        c1, cols1 = nn.conv2d_forward_cached(x, params["conv1.k"])
        r1 = nn.relu(c1)
        p1 = nn.maxpool2(r1)
        c2, cols2 = nn.conv2d_forward_cached(p1, params["conv2.k"])
        r2 = nn.relu(c2)
        p2 = nn.maxpool2(r2)
        flat = p2.reshape(b, -1)
        pre = nn.affine_forward(flat, params["fc.w"], params["fc.b"])
        feats = nn.relu(pre)
        cache.update(c1=c1, r1=r1, p1=p1, c2=c2, r2=r2, p2=p2, flat=flat, pre=pre,
                     cols1=cols1, cols2=cols2)
    else:
        flat = x.reshape(b, -1)
        pre1 = nn.affine_forward(flat, params["fc1.w"], params["fc1.b"])
        h1 = nn.relu(pre1)
        pre2 = nn.affine_forward(h1, params["fc2.w"], params["fc2.b"])
        feats = nn.relu(pre2)
        cache.update(flat=flat, pre1=pre1, h1=h1, pre2=pre2)
    cache["feats"] = feats
    return feats, cache


def features_backward(grad_feats: np.ndarray, cache: dict, params: dict,
                      cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Backprop through the encoder. Returns grads for encoder params."""
    grads = {}
    if cfg.encoder_kind == "conv":
        g = nn.relu_backward(grad_feats, cache["pre"])
        g, grads["fc.w"], grads["fc.b"] = nn.affine_backward(g, cache["flat"], params["fc.w"])
        g = g.reshape(cache["p2"].shape)
        g = nn.maxpool2_backward(g, cache["r2"])
        g = nn.relu_backward(g, cache["c2"])
        g, grads["conv2.k"] = nn.conv2d_backward(g, cache["p1"], params["conv2.k"],
                                                 cols=cache["cols2"])
        g = nn.maxpool2_backward(g, cache["r1"])
        g = nn.relu_backward(g, cache["c1"])
        _, grads["conv1.k"] = nn.conv2d_backward(g, cache["x"], params["conv1.k"],
                                                 cols=cache["cols1"],
                                                 need_input_grad=False)
    else:
        g = nn.relu_backward(grad_feats, cache["pre2"])
        g, grads["fc2.w"], grads["fc2.b"] = nn.affine_backward(g, cache["h1"], params["fc2.w"])
        g = nn.relu_backward(g, cache["pre1"])
        _, grads["fc1.w"], grads["fc1.b"] = nn.affine_backward(g, cache["flat"], params["fc1.w"])
    return grads


def classify(params: dict, feats: np.ndarray) -> np.ndarray:
    return nn.affine_forward(feats, params["cls.w"], params["cls.b"])


def aux_classify(params: dict, feats: np.ndarray) -> np.ndarray:
    return nn.affine_forward(feats, params["aux.w"], params["aux.b"])


def embed_from_features(params: dict, feats: np.ndarray):
    """Embedding head + row-wise L2 normalization. Returns (emb, pre-norm)."""
    pre = nn.affine_forward(feats, params["emb.w"], params["emb.b"])
    return nn.l2_normalize(pre), pre


def embed(params: dict, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    feats, _ = forward_features(params, cfg, x)
    return embed_from_features(params, feats)[0]


@dataclass
class ForwardAll:
    feats: np.ndarray
    class_logits: np.ndarray
    aux_logits: np.ndarray
    embeddings: np.ndarray
    emb_pre: np.ndarray
    cache: dict = field(repr=False)


def forward_all(params: dict, cfg: ModelConfig, x: np.ndarray) -> ForwardAll:
    """One encoder pass feeding all three heads."""
    feats, cache = forward_features(params, cfg, x)
    emb, emb_pre = embed_from_features(params, feats)
    return ForwardAll(feats=feats,
                      class_logits=classify(params, feats),
                      aux_logits=aux_classify(params, feats),
                      embeddings=emb, emb_pre=emb_pre, cache=cache)


def backward_all(params: dict, cfg: ModelConfig, out: ForwardAll,
                 grad_class_logits: np.ndarray | None,
                 grad_aux_logits: np.ndarray | None,
                 grad_embeddings: np.ndarray | None) -> dict[str, np.ndarray]:
    """Accumulates head gradients into the shared features and backprops the
    encoder. Any head gradient may be None (contributes nothing)."""
    feats = out.feats
    zeros = lambda shape: np.zeros(shape, dtype=feats.dtype)
    grads = {}
    grad_feats = np.zeros_like(feats)

    if grad_class_logits is not None:
        gf, grads["cls.w"], grads["cls.b"] = nn.affine_backward(
            grad_class_logits, feats, params["cls.w"])
        grad_feats += gf
    else:
        grads["cls.w"], grads["cls.b"] = zeros(params["cls.w"].shape), zeros(params["cls.b"].shape)

    if grad_aux_logits is not None:
        gf, grads["aux.w"], grads["aux.b"] = nn.affine_backward(
            grad_aux_logits, feats, params["aux.w"])
        grad_feats += gf
    else:
        grads["aux.w"], grads["aux.b"] = zeros(params["aux.w"].shape), zeros(params["aux.b"].shape)

    if grad_embeddings is not None:
        g_pre = nn.l2_normalize_backward(grad_embeddings, out.emb_pre)
        gf, grads["emb.w"], grads["emb.b"] = nn.affine_backward(g_pre, feats, params["emb.w"])
        grad_feats += gf
    else:
        grads["emb.w"], grads["emb.b"] = zeros(params["emb.w"].shape), zeros(params["emb.b"].shape)

    grads.update(features_backward(grad_feats, out.cache, params, cfg))
    return grads


# ---------------------------------------------------------------------------
# Momentum twin
# ---------------------------------------------------------------------------


@dataclass
class MomentumParams:
    theta: dict[str, np.ndarray]
    delta: float

    def __post_init__(self):
        if not (0.0 <= self.delta < 1.0):
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")


def momentum_init(params: dict, cfg: ModelConfig, delta: float) -> MomentumParams:
    """Deep-copies the tracked subset of the trained parameters."""
    return MomentumParams(theta={n: params[n].copy() for n in tracked_names(cfg)},
                          delta=delta)


def momentum_update(mom: MomentumParams, params: dict, cfg: ModelConfig) -> None:
    """In-place EMA step on every tracked tensor."""
    for name in tracked_names(cfg):
        if mom.theta[name].shape != params[name].shape:
            raise ValueError(f"momentum_update: schema mismatch at {name}")
        mom.theta[name] = nn.ema_step(mom.theta[name], params[name], mom.delta)


def momentum_embed(mom: MomentumParams, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Embeddings from the EMA twin; never part of any gradient path."""
    feats, _ = forward_features(mom.theta, cfg, x)
    return embed_from_features(mom.theta, feats)[0]


# ---------------------------------------------------------------------------
# Checkpoint format: magic "EISP", u32 version, u32 tensor count; then per
# tensor: u16 name length, utf-8 name, u8 ndim, u32 dims, float32 LE data.
# All integers little-endian. Tensors appear in schema order.
# ---------------------------------------------------------------------------


def save_params(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in params.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape).copy()
        return params
