"""Multi-task training loop (weighted classification + triplet + patch-order
losses), leave-one-domain-out evaluation, ablation sweeps, and embedding
export with a 2-D PCA projection.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import datagen, jigsaw, model, nn
from .membank import MemoryBank
from .mining import Selector, SelectorKind, mine_batch

METHODS = ("baseline", "extrinsic", "intrinsic", "full")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.7
    margin: float = 2.0
    k: int = 256
    bank: int = 1024
    delta: float = 0.99
    selector: str = "khard"
    epochs: int = 30
    batch: int = 64
    lr: float = 0.1
    lr_decay_frac: float = 0.8
    p_shuffle: float = 0.6
    seed: int = 0
    held_out: int = 0
    encoder: str = "conv"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0 or \
                max(self.alpha, self.beta, self.gamma) == 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must be in [0,1), got {self.delta}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.bank < self.batch:
            raise ValueError(f"bank capacity {self.bank} must be >= batch {self.batch}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0.0 <= self.p_shuffle <= 1.0:
            raise ValueError(f"p_shuffle must be in [0,1], got {self.p_shuffle}")
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("lr, epochs and batch must be positive")
        SelectorKind(self.selector)  # raises on unknown name

    def make_selector(self) -> Selector:
        return Selector(kind=SelectorKind(self.selector), k=self.k)

    @property
    def decay_epoch(self) -> int:
        """First epoch (1-based) that runs at the reduced rate is decay_epoch+1."""
        return math.ceil(self.lr_decay_frac * self.epochs)


# Loss weights of §Table-4-style method variants.
def method_config(cfg: TrainConfig, method: str) -> TrainConfig:
    if method == "baseline":
        return replace(cfg, beta=0.0, gamma=0.0)
    if method == "extrinsic":
        return replace(cfg, gamma=0.0)
    if method == "intrinsic":
        return replace(cfg, beta=0.0)
    if method == "full":
        return cfg
    raise ValueError(f"unknown method {method!r}")


VLCS_STYLE_WEIGHTS = {"alpha": 1.0, "beta": 0.1, "gamma": 0.05}


@dataclass
class StepLosses:
    l_cls: float
    l_trip: float
    l_aux: float
    total: float


@dataclass
class EpochRow:
    epoch: int
    l_cls: float
    l_trip: float
    l_aux: float
    l_total: float
    source_acc: float


@dataclass
class MetricsLog:
    rows: list[EpochRow] = field(default_factory=list)
    target_acc: float = 0.0
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        lines = ["epoch,l_cls,l_trip,l_aux,l_total,source_acc"]
        for r in self.rows:
            lines.append(f"{r.epoch},{r.l_cls:.10g},{r.l_trip:.10g},"
                         f"{r.l_aux:.10g},{r.l_total:.10g},{r.source_acc:.10g}")
        return "\n".join(lines) + "\n"

    def summary(self, cfg: TrainConfig) -> dict:
        return {"payload": {"target_acc": self.target_acc, "config": asdict(cfg)},
                "meta": {"wall_clock_s": self.wall_clock}}


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic state dump."""

    def __init__(self, msg: str, state: dict):
        super().__init__(msg)
        self.state = state


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def train_step(params: dict, mom: model.MomentumParams, bank: MemoryBank,
               images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
               mcfg: model.ModelConfig, pset: jigsaw.PermutationSet,
               lr: float, rng: np.random.Generator):
    """Runs one iteration: jigsaw transform, shared forward, the three losses,
    SGD on the trained parameters, EMA update, bank refill. Returns
    (StepLosses, new params); mom and bank are updated in place.

    With gamma == 0 the patch shuffle is disabled (the intrinsic task is
    absent); with beta == 0 mining and the momentum/bank machinery are inert
    and skipped.
    """
    use_aux = cfg.gamma > 0
    use_trip = cfg.beta > 0

    if use_aux:
        imgs, order_labels = jigsaw.make_jigsaw_batch(images, pset, cfg.p_shuffle, rng)
    else:
        imgs, order_labels = images, np.zeros(len(images), dtype=np.int64)

    out = model.forward_all(params, mcfg, imgs)

    # classification only on unshuffled images (their object labels are intact)
    keep = order_labels == 0
    grad_cls = None
    l_cls = 0.0
    if cfg.alpha > 0 and keep.any():
        l_cls, g_sub = nn.softmax_cross_entropy(out.class_logits[keep], labels[keep])
        grad_cls = np.zeros_like(out.class_logits)
        grad_cls[keep] = cfg.alpha * g_sub

    grad_aux = None
    l_aux = 0.0
    if use_aux:
        l_aux, g_aux = jigsaw.aux_loss(out.aux_logits, order_labels)
        grad_aux = cfg.gamma * g_aux

    grad_emb = None
    l_trip = 0.0
    if use_trip:
        l_trip, g_emb = mine_batch(out.embeddings, labels, bank.snapshot(),
                                   cfg.make_selector(), cfg.margin, rng)
        grad_emb = cfg.beta * g_emb

    total = cfg.alpha * l_cls + cfg.beta * l_trip + cfg.gamma * l_aux
    if not np.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss (cls={l_cls}, trip={l_trip}, aux={l_aux})",
            state={"losses": (l_cls, l_trip, l_aux), "lr": lr,
                   "param_norms": {k: float(np.linalg.norm(v))
                                   for k, v in params.items()}})

    grads = model.backward_all(params, mcfg, out, grad_cls, grad_aux, grad_emb)
    params = nn.sgd_step(params, grads, lr)

    if use_trip:
        model.momentum_update(mom, params, mcfg)
        bank.push_embeddings(model.momentum_embed(mom, mcfg, imgs), labels)

    return StepLosses(l_cls=l_cls, l_trip=l_trip, l_aux=l_aux, total=total), params


# ---------------------------------------------------------------------------
# Full training run
# ---------------------------------------------------------------------------


def _pool_sources(dataset: datagen.Dataset, held_out: int):
    keep = [d for d in range(dataset.num_domains) if d != held_out]
    imgs = np.concatenate([dataset.train[d].images for d in keep])
    labels = np.concatenate([dataset.train[d].labels for d in keep])
    test_imgs = np.concatenate([dataset.test[d].images for d in keep])
    test_labels = np.concatenate([dataset.test[d].labels for d in keep])
    return imgs, labels, test_imgs, test_labels


def train(cfg: TrainConfig, dataset: datagen.Dataset,
          dtype=np.float32, augment: bool = True):
    """Trains on all domains except cfg.held_out. Returns (params, MetricsLog)."""
    if not 0 <= cfg.held_out < dataset.num_domains:
        raise ValueError(f"held_out {cfg.held_out} out of range")
    t0 = time.perf_counter()
    mcfg = model.ModelConfig(image_side=dataset.image_side,
                             num_classes=dataset.num_classes,
                             encoder_kind=cfg.encoder)
    rng = np.random.default_rng(cfg.seed)
    params = model.init_params(mcfg, rng, dtype=dtype)
    mom = model.momentum_init(params, mcfg, cfg.delta)
    bank = MemoryBank(cfg.bank, dim=mcfg.embed_dim)
    pset = jigsaw.default_permutation_set()

    imgs, labels, src_test_imgs, src_test_labels = _pool_sources(dataset, cfg.held_out)
    imgs = imgs.astype(dtype)
    n = len(labels)
    steps = n // cfg.batch
    if steps == 0:
        raise ValueError(f"batch {cfg.batch} larger than pooled source set {n}")

    log = MetricsLog()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr if epoch <= cfg.decay_epoch else cfg.lr * 0.1
        order = rng.permutation(n)
        sums = np.zeros(4)
        for s in range(steps):
            idx = order[s * cfg.batch:(s + 1) * cfg.batch]
            batch = imgs[idx]
            if augment:
                batch = datagen.augment_batch(batch, rng).astype(dtype)
            losses, params = train_step(params, mom, bank, batch, labels[idx],
                                        cfg, mcfg, pset, lr, rng)
            sums += (losses.l_cls, losses.l_trip, losses.l_aux, losses.total)
        sums /= steps
        log.rows.append(EpochRow(epoch=epoch, l_cls=sums[0], l_trip=sums[1],
                                 l_aux=sums[2], l_total=sums[3],
                                 source_acc=evaluate(params, mcfg,
                                                     src_test_imgs, src_test_labels)))
    log.target_acc = evaluate(params, mcfg, dataset.test[cfg.held_out].images,
                              dataset.test[cfg.held_out].labels)
    log.wall_clock = time.perf_counter() - t0
    return params, log


def evaluate(params: dict, mcfg: model.ModelConfig,
             images: np.ndarray, labels: np.ndarray,
             eval_batch: int = 256) -> float:
    """Classifier accuracy on unshuffled, unaugmented images."""
    if len(images) == 0:
        raise ValueError("evaluate: empty split")
    correct = 0
    for s in range(0, len(images), eval_batch):
        x = images[s:s + eval_batch].astype(params["cls.w"].dtype)
        feats, _ = model.forward_features(params, mcfg, x)
        pred = model.classify(params, feats).argmax(axis=1)
        correct += int((pred == labels[s:s + eval_batch]).sum())
    return correct / len(images)


# ---------------------------------------------------------------------------
# Protocols: leave-one-domain-out and ablation sweeps
# ---------------------------------------------------------------------------


@dataclass
class LooResult:
    domain_names: tuple[str, ...]
    methods: tuple[str, ...]
    # mean/std accuracy per (method, domain) over seeds
    mean: np.ndarray
    std: np.ndarray

    def average(self, method: str) -> float:
        return float(self.mean[self.methods.index(method)].mean())

    def to_csv(self) -> str:
        header = "method," + ",".join(self.domain_names) + ",average"
        lines = [header]
        for i, m in enumerate(self.methods):
            cells = [f"{v:.6f}" for v in self.mean[i]]
            lines.append(f"{m}," + ",".join(cells) + f",{self.mean[i].mean():.6f}")
        return "\n".join(lines) + "\n"


def leave_one_domain_out(cfg_base: TrainConfig, dataset: datagen.Dataset,
                         seeds, methods=METHODS, workers: int = 1) -> LooResult:
    """Each domain takes a turn as the held-out target; each method variant
    trains on the remaining domains for every seed."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    methods = tuple(methods)
    jobs = [(mi, d, s)
            for mi, m in enumerate(methods)
            for d in range(dataset.num_domains)
            for s in seeds]

    def run(job):
        mi, d, s = job
        cfg = replace(method_config(cfg_base, methods[mi]), held_out=d, seed=s)
        _, log = train(cfg, dataset)
        return mi, d, log.target_acc

    accs = np.zeros((len(methods), dataset.num_domains, len(seeds)))
    counts = np.zeros((len(methods), dataset.num_domains), dtype=int)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for mi, d, acc in results:
        accs[mi, d, counts[mi, d]] = acc
        counts[mi, d] += 1
    return LooResult(domain_names=dataset.domain_names, methods=methods,
                     mean=accs.mean(axis=2), std=accs.std(axis=2))


SWEEP_AXES = ("K", "delta", "selector", "bank_size")
# Paired (bank size, K) settings used by the bank_size axis.
BANK_SIZE_PAIRS = ((1024, 256), (512, 128), (256, 64), (128, 32))


def _sweep_config(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "K":
        return replace(cfg, k=int(value))
    if axis == "delta":
        return replace(cfg, delta=float(value))
    if axis == "selector":
        return replace(cfg, selector=str(value))
    if axis == "bank_size":
        m, k = value
        return replace(cfg, bank=int(m), k=int(k))
    raise ValueError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")


@dataclass
class SweepResult:
    axis: str
    values: list
    mean: np.ndarray  # accuracy per value (over seeds), fixed target domain
    std: np.ndarray

    def to_csv(self) -> str:
        lines = [f"{self.axis},mean_acc,std_acc"]
        for v, m, s in zip(self.values, self.mean, self.std):
            label = f"{v[0]}:{v[1]}" if self.axis == "bank_size" else str(v)
            lines.append(f"{label},{m:.6f},{s:.6f}")
        return "\n".join(lines) + "\n"


def ablation_sweep(axis: str, values, cfg_base: TrainConfig,
                   dataset: datagen.Dataset, seeds, workers: int = 1) -> SweepResult:
    """One fixed-target training run per value per seed on the base config's
    held-out domain."""
    seeds = list(seeds)
    values = list(values)
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; pick one of {SWEEP_AXES}")
    jobs = [(vi, s) for vi in range(len(values)) for s in seeds]

    def run(job):
        vi, s = job
        cfg = replace(_sweep_config(cfg_base, axis, values[vi]), seed=s)
        _, log = train(cfg, dataset)
        return vi, log.target_acc

    accs = np.zeros((len(values), len(seeds)))
    counts = np.zeros(len(values), dtype=int)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for vi, acc in results:
        accs[vi, counts[vi]] = acc
        counts[vi] += 1
    return SweepResult(axis=axis, values=values,
                       mean=accs.mean(axis=1), std=accs.std(axis=1))


# ---------------------------------------------------------------------------
# Embedding export + PCA
# ---------------------------------------------------------------------------


def batch_embed(params: dict, mcfg: model.ModelConfig, images: np.ndarray,
                eval_batch: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), eval_batch):
        x = images[s:s + eval_batch].astype(params["cls.w"].dtype)
        out.append(model.embed(params, mcfg, x))
    return np.concatenate(out)


def export_embeddings(params: dict, mcfg: model.ModelConfig,
                      images: np.ndarray, labels: np.ndarray,
                      domains: np.ndarray, path) -> None:
    """CSV rows: dim_0,...,dim_{D-1},label,domain."""
    emb = batch_embed(params, mcfg, images)
    with open(path, "w") as f:
        f.write(",".join(f"dim_{i}" for i in range(emb.shape[1])) + ",label,domain\n")
        for row, y, d in zip(emb, labels, domains):
            f.write(",".join(f"{v:.8g}" for v in row) + f",{int(y)},{int(d)}\n")


def pca_project(embeddings: np.ndarray, dims: int = 2,
                tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
    """Projects onto the top principal components via power iteration with
    deflation on the centered covariance."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] < dims:
        raise ValueError(f"need at least {dims} samples, got {x.shape[0]}")
    x = x - x.mean(axis=0)
    cov = x.T @ x / x.shape[0]
    comps = []
    rng = np.random.default_rng(0)
    for _ in range(dims):
        v = rng.standard_normal(cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        lam = float(v @ cov @ v)
        comps.append(v)
        cov = cov - lam * np.outer(v, v)
    return x @ np.stack(comps, axis=1)


def save_metrics(log: MetricsLog, cfg: TrainConfig, csv_path, json_path) -> None:
    with open(csv_path, "w") as f:
        f.write(log.to_csv())
    with open(json_path, "w") as f:
        json.dump(log.summary(cfg), f, indent=2)
        f.write("\n")
