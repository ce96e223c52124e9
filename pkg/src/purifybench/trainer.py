"""Maximum-likelihood EBM training with the Adam-to-SGD switch, plus
natural cross-entropy training of the classifier.

The EBM loop follows the persistent-chain recipe: each step perturbs a
data batch with small Gaussian noise, refreshes a batch of negative
chains from the persistent bank with short-run Langevin, writes the
chains back, and applies the contrastive gradient

    (1/n) sum grad_theta U(X+) - (1/m) sum grad_theta U(X-)

with Adam for the first ``switch_step`` steps and plain SGD afterwards.
The late SGD phase is what aligns long-run samples with short-run ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng, StreamBank, derive_key
from .sampler import ChainBank, ChainDivergenceError, LangevinConfig, langevin_step

TRAIN_LOG_HEADER = ["step", "phase", "pos_energy", "neg_energy", "grad_norm"]


@dataclass
class TrainConfig:
    total_steps: int = 20000        # paper-scale preset: 150000
    switch_step: int = 8000         # paper-scale preset: 50000
    lr_adam: float = 0.0001
    lr_sgd: float = 0.00005
    data_noise: float = 0.02
    batch_pos: int = 64
    batch_neg: int = 64
    langevin_steps: int = 100
    tau: float = 0.01

    def __post_init__(self):
        # switch_step == total_steps + 1 means "never switch" (Adam-only ablation)
        if self.total_steps > 0 and not (0 < self.switch_step <= self.total_steps + 1):
            raise ValueError("need 0 < switch_step <= total_steps + 1")
        for name in ("lr_adam", "lr_sgd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_pos < 1 or self.batch_neg < 1:
            raise ValueError("batch sizes must be positive")

    @classmethod
    def paper_scale(cls) -> "TrainConfig":
        return cls(total_steps=150000, switch_step=50000)


@dataclass
class AdamState:
    """First/second moment accumulators with bias correction."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def ml_gradient(net, positives: np.ndarray, negatives: np.ndarray) -> dict:
    """Contrastive maximum-likelihood gradient over the parameters.

    Returns {param name: gradient array}; the nets' own .grad buffers are
    left untouched.
    """
    grads, _, _ = _ml_gradient_stats(net, positives, negatives)
    return grads


def _ml_gradient_stats(net, positives, negatives):
    positives = np.asarray(positives, dtype=net.dtype)
    negatives = np.asarray(negatives, dtype=net.dtype)
    if positives.shape[0] == 0 or negatives.shape[0] == 0:
        raise ValueError("positive and negative batches must be non-empty")
    saved = {name: (p.requires_grad, p.grad) for name, p in net.params.items()}
    net.set_trainable(True)
    try:
        with T.Tape() as tape:
            pos_e = net.energy(T.Tensor(positives))
            neg_e = net.energy(T.Tensor(negatives))
            loss = T.subtract(T.tmean(pos_e), T.tmean(neg_e))
            tape.backward(loss)
        grads = {}
        for name, p in net.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    finally:
        for name, p in net.params.items():
            p.requires_grad, p.grad = saved[name]
    return grads, float(pos_e.data.mean()), float(neg_e.data.mean())


def sgd_update(params: dict, grads: dict, lr: float):
    """Plain in-place SGD step."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise T.ShapeError(f"sgd_update: gradient shape mismatch for {name}")
        p.data -= p.data.dtype.type(lr) * g.astype(p.data.dtype, copy=False)


def adam_update(state: AdamState, params: dict, grads: dict, lr: float):
    """Standard bias-corrected Adam step, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64, copy=False)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"adam_update: gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.data.shape)
            v = np.zeros(p.data.shape)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)


class MomentumState:
    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.vel = {}

    def update(self, params, grads, lr):
        for name, p in params.items():
            v = self.vel.get(name)
            v = grads[name].copy() if v is None else self.momentum * v + grads[name]
            self.vel[name] = v
            p.data -= p.data.dtype.type(lr) * v.astype(p.data.dtype, copy=False)


def train_ebm(net, images: np.ndarray, cfg: TrainConfig, rng: Rng,
              log_path=None, progress=None):
    """Run the two-phase maximum-likelihood loop on an initialized EnergyNet.

    images: (N, C, H, W) natural training set in [0, 1].  Returns
    (net, log rows); each row is [step, phase, pos_energy, neg_energy,
    grad_norm] with phase "adam" or "sgd".
    """
    images = np.asarray(images, dtype=net.dtype)
    n_data = images.shape[0]
    bank = ChainBank(n_data, images.shape[1:], rng.spawn("bank_init"), dtype=net.dtype)
    lcfg = LangevinConfig(tau=cfg.tau, steps=cfg.langevin_steps)
    opt_adam = AdamState()
    rows = []
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_HEADER)
    try:
        for j in range(1, cfg.total_steps + 1):
            phase = "adam" if j < cfg.switch_step else "sgd"
            idx = rng.spawn("train_batch", j).integers(cfg.batch_pos, 0, n_data)
            noise = StreamBank.from_tokens(rng.key, "train_pos", [(j, i) for i in range(cfg.batch_pos)])
            z = noise.gaussian(int(np.prod(images.shape[1:])), dtype=net.dtype)
            pos = images[idx] + net.dtype.type(cfg.data_noise) * z.reshape(-1, *images.shape[1:])

            neg_idx = rng.spawn("train_bank", j).integers(cfg.batch_neg, 0, n_data)
            chains = bank.draw(neg_idx)
            bankstreams = StreamBank.from_tokens(
                rng.key, "train_neg", [(j, i) for i in range(cfg.batch_neg)])
            try:
                for _ in range(lcfg.steps):
                    chains = langevin_step(net, chains, lcfg, bankstreams)
            except ChainDivergenceError as e:
                raise ChainDivergenceError(f"negative chains diverged at training step {j}: {e}")
            bank.replace(neg_idx, chains)

            grads, pos_mean, neg_mean = _ml_gradient_stats(net, pos, chains)
            if phase == "adam":
                adam_update(opt_adam, net.params, grads, cfg.lr_adam)
            else:
                sgd_update(net.params, grads, cfg.lr_sgd)

            gnorm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                      for g in grads.values())))
            row = [j, phase, pos_mean, neg_mean, gnorm]
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if progress is not None and j % progress == 0:
                print(f"  ebm step {j}/{cfg.total_steps} [{phase}] "
                      f"E+={pos_mean:.4f} E-={neg_mean:.4f} |g|={gnorm:.4f}", flush=True)
    finally:
        if fh is not None:
            fh.close()
    return net, rows


def train_classifier(net, images: np.ndarray, labels: np.ndarray, epochs: int,
                     lr: float, rng: Rng, momentum: float = 0.9, batch_size: int = 64):
    """Natural-image cross-entropy training with SGD + momentum."""
    images = np.asarray(images, dtype=net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    j = net.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= j):
        raise ValueError(f"label out of range [0, {j})")
    n = images.shape[0]
    opt = MomentumState(momentum)
    for epoch in range(epochs):
        perm = np.argsort(rng.spawn("clf_shuffle", epoch).uniform((n,)), kind="stable")
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            grads = _classifier_grads(net, images[sel], labels[sel])
            opt.update(net.params, grads, lr)
    return net


def _classifier_grads(net, x, y):
    saved = {name: (p.requires_grad, p.grad) for name, p in net.params.items()}
    net.set_trainable(True)
    try:
        with T.Tape() as tape:
            loss = T.tmean(T.softmax_cross_entropy(net.logits(T.Tensor(x, dtype=net.dtype)), y))
            tape.backward(loss)
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in net.params.items()}
    finally:
        for name, p in net.params.items():
            p.requires_grad, p.grad = saved[name]
    return grads


def classifier_loss(net, x, y) -> float:
    with T.Tape():
        loss = T.tmean(T.softmax_cross_entropy(net.logits(T.Tensor(x, dtype=net.dtype)), y))
    return float(loss.data)


def classifier_accuracy(net, x, y) -> float:
    logits = net.logits(T.Tensor(np.asarray(x, dtype=net.dtype))).data
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())
