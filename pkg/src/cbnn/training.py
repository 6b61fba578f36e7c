"""Small-scale distillation: a dense ReLU teacher and a Sign-activated student.

Both are MLPs with at most three weight layers and hand-written backprop.
The student keeps real weights; hidden pre-activations go through batch
norm and a {-1,+1} Sign whose gradient is the identity clipped to |a| <= 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import FC, BatchNorm, ModelGraph, ReLU, Sign
from .oracle import DistillConfig, kd_loss, log_softmax_T, softmax_T

STE_CLIP = 1.0
GAMMA_FLOOR = 1e-2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def make_blobs(n_train: int = 1000, n_val: int = 1000, n_classes: int = 6, dim: int = 16,
               separation: float = 2.0, seed: int = 0) -> Dataset:
    """Gaussian blobs with unit-variance noise, rescaled into [-1, 1].

    Centres are drawn once per seed with spread ``separation``; the scale
    factor comes from the training split and validation points are clipped.
    """
    if not 2 <= n_classes:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, (n_classes, dim))

    def draw(n):
        y = rng.integers(0, n_classes, n)
        return centers[y] + rng.normal(0.0, 1.0, (n, dim)), y

    xt, yt = draw(n_train)
    xv, yv = draw(n_val)
    s = np.max(np.abs(xt))
    return Dataset(xt / s, yt, np.clip(xv / s, -1.0, 1.0), yv, n_classes)


def load_csv_dataset(path, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Rows of ``features..., label``; features are rescaled into [-1, 1]."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        data = np.array([[float(v) for v in r] for r in rows[1:]])  # header row
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    x, y = data[:, :-1], data[:, -1].astype(np.int64)
    classes = np.unique(y)
    y = np.searchsorted(classes, y)
    perm = np.random.default_rng(seed).permutation(len(y))
    n_val = int(round(len(y) * val_fraction))
    val, tr = perm[:n_val], perm[n_val:]
    lo, hi = x[tr].min(axis=0), x[tr].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)

    def scale(a):
        return np.clip(2.0 * (a - lo) / span - 1.0, -1.0, 1.0)

    return Dataset(scale(x[tr]), y[tr], scale(x[val]), y[val], len(classes))


# --------------------------------------------------------------------------
# model


@dataclass
class ToyMlp:
    """MLP with real weights; ``binarized`` hidden layers use BN + Sign."""

    sizes: list[int]
    binarized: bool = False
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    gamma: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    run_mean: list = field(default_factory=list)
    run_var: list = field(default_factory=list)

    @classmethod
    def init(cls, sizes: list[int], binarized: bool, rng: np.random.Generator) -> "ToyMlp":
        if len(sizes) < 2 or len(sizes) > 4:
            raise ValueError("between one and three weight layers")
        m = cls(list(sizes), binarized)
        for a, b in zip(sizes[:-1], sizes[1:]):
            m.weights.append(rng.normal(0.0, np.sqrt(2.0 / a), (b, a)))
            m.biases.append(np.zeros(b))
        if binarized:
            for h in sizes[1:-1]:
                m.gamma.append(np.ones(h))
                m.beta.append(np.zeros(h))
                m.run_mean.append(np.zeros(h))
                m.run_var.append(np.ones(h))
        return m

    @property
    def hidden(self) -> int:
        return len(self.sizes) - 2

    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases + self.gamma + self.beta

    def forward(self, x: np.ndarray, train: bool = False):
        cache = []
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.hidden):
            z = h @ self.weights[i].T + self.biases[i]
            if self.binarized:
                if train:
                    mu, var = z.mean(axis=0), z.var(axis=0)
                    self.run_mean[i] = (1 - BN_MOMENTUM) * self.run_mean[i] + BN_MOMENTUM * mu
                    self.run_var[i] = (1 - BN_MOMENTUM) * self.run_var[i] + BN_MOMENTUM * var
                else:
                    mu, var = self.run_mean[i], self.run_var[i]
                std = np.sqrt(var + BN_EPS)
                xhat = (z - mu) / std
                a = self.gamma[i] * xhat + self.beta[i]
                out = np.where(a >= 0, 1.0, -1.0)
                cache.append((h, xhat, std, a))
            else:
                out = np.maximum(z, 0.0)
                cache.append((h, None, None, z))
            h = out
        logits = h @ self.weights[-1].T + self.biases[-1]
        cache.append((h, None, None, None))
        return logits, cache

    def backward(self, cache, dlogits: np.ndarray) -> list[np.ndarray]:
        L = len(self.weights)
        gw, gb = [None] * L, [None] * L
        gg, gbeta = [None] * self.hidden, [None] * self.hidden
        h = cache[-1][0]
        gw[-1] = dlogits.T @ h
        gb[-1] = dlogits.sum(axis=0)
        dh = dlogits @ self.weights[-1]
        for i in reversed(range(self.hidden)):
            hin, xhat, std, a = cache[i]
            if self.binarized:
                da = dh * (np.abs(a) <= STE_CLIP)
                gg[i] = np.sum(da * xhat, axis=0)
                gbeta[i] = da.sum(axis=0)
                dxhat = da * self.gamma[i]
                n = dxhat.shape[0]
                dz = (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)) / (n * std)
            else:
                dz = dh * (a > 0)
            gw[i] = dz.T @ hin
            gb[i] = dz.sum(axis=0)
            dh = dz @ self.weights[i]
        return gw + gb + (gg + gbeta if self.binarized else [])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(x)[0], axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))

    def to_graph(self, l: int = 32, f: int = 13, d: int = 8) -> ModelGraph:
        layers = []
        for i in range(self.hidden):
            layers.append(FC(self.weights[i].copy(), self.biases[i].copy()))
            if self.binarized:
                layers.append(BatchNorm(self.gamma[i].copy(), self.beta[i].copy(),
                                        self.run_mean[i].copy(), self.run_var[i].copy(), BN_EPS))
                layers.append(Sign(pm=True))
            else:
                layers.append(ReLU())
        layers.append(FC(self.weights[-1].copy(), self.biases[-1].copy()))
        return ModelGraph((self.sizes[0],), layers, l, f, d)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    seed: int = 0
    hidden: tuple = (32,)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class History:
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    return np.eye(k)[y]


def _run(model: ToyMlp, data: Dataset, cfg: TrainConfig, grad_fn, rng) -> History:
    opt = Adam(model.params(), cfg.lr)
    hist = History()
    n = len(data.y_train)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if model.binarized and len(idx) < 2:
                continue
            logits, cache = model.forward(data.x_train[idx], train=True)
            loss, dlogits = grad_fn(logits, idx)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            opt.step(model.backward(cache, dlogits / len(idx)))
            for g in model.gamma:
                np.maximum(g, GAMMA_FLOOR, out=g)
        hist.loss.append(total / n)
        hist.train_acc.append(model.accuracy(data.x_train, data.y_train))
        hist.val_acc.append(model.accuracy(data.x_val, data.y_val))
    return hist


def train_teacher(data: Dataset, cfg: TrainConfig, hidden: tuple = (128,)) -> tuple[ToyMlp, History]:
    """Dense ReLU MLP trained with plain cross-entropy."""
    rng = np.random.default_rng(cfg.seed)
    model = ToyMlp.init([data.dim, *hidden, data.n_classes], False, rng)
    onehot = _one_hot(data.y_train, data.n_classes)

    def grad(logits, idx):
        loss = float(-np.sum(onehot[idx] * log_softmax_T(logits)))
        return loss / len(idx), softmax_T(logits) - onehot[idx]

    return model, _run(model, data, cfg, grad, rng)


def train_student_kd(data: Dataset, teacher: ToyMlp | None, cfg: TrainConfig) -> tuple[ToyMlp, History]:
    """Sign-activated student on lam * hard + (1 - lam) * soft-target loss.

    With lam = 1 the teacher is never evaluated.  The soft term is the
    temperature-T cross-entropy from teacher to student without a T^2
    factor, so its gradient is (q^T - p^T) / T.
    """
    lam, T = cfg.distill.lam, cfg.distill.T
    rng = np.random.default_rng(cfg.seed)
    model = ToyMlp.init([data.dim, *cfg.hidden, data.n_classes], True, rng)
    onehot = _one_hot(data.y_train, data.n_classes)
    soft = None
    if lam < 1.0:
        if teacher is None:
            raise ValueError("a teacher is required when lambda < 1")
        soft_logits = teacher.forward(data.x_train)[0]
        soft = softmax_T(soft_logits, T)

    def grad(logits, idx):
        loss = float(np.sum(kd_loss(logits, soft_logits[idx] if soft is not None else logits,
                                    data.y_train[idx], cfg.distill)))
        g = lam * (softmax_T(logits) - onehot[idx])
        if soft is not None:
            g = g + (1.0 - lam) * (softmax_T(logits, T) - soft[idx]) / T
        return loss / len(idx), g

    return model, _run(model, data, cfg, grad, rng)


@dataclass
class SweepResult:
    lams: list
    seeds: list
    val_acc: np.ndarray  # (len(lams), len(seeds))
    histories: dict

    def mean(self, lam: float) -> float:
        return float(self.val_acc[self.lams.index(lam)].mean())


def lambda_sweep(data: Dataset, teacher: ToyMlp, cfg: TrainConfig, lams, seeds) -> SweepResult:
    """Final validation accuracy of the student for every (lambda, seed)."""
    lams, seeds = [float(v) for v in lams], [int(s) for s in seeds]
    acc = np.zeros((len(lams), len(seeds)))
    hists = {}
    for i, lam in enumerate(lams):
        for j, seed in enumerate(seeds):
            c = TrainConfig(cfg.epochs, cfg.batch_size, cfg.lr, seed, cfg.hidden,
                            DistillConfig(cfg.distill.T, lam))
            model, h = train_student_kd(data, teacher, c)
            acc[i, j] = h.val_acc[-1] if h.val_acc else model.accuracy(data.x_val, data.y_val)
            hists[(lam, seed)] = h
    return SweepResult(lams, seeds, acc, hists)


def export_model(mlp: ToyMlp, path, l: int = 32, f: int = 13, d: int = 8) -> ModelGraph:
    from .modelio import save_model

    graph = mlp.to_graph(l, f, d)
    save_model(graph, path)
    return graph
