"""Expectation-over-transformation defense.

The defended classifier is the expectation of the base classifier's
logits over the stochastic Langevin transformation.  It is approximated
by averaging logits over H independently purified replicates of the
input; the predicted label is the argmax of the mean logits (ties break
to the lowest class index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng, StreamBank
from .sampler import LangevinConfig, langevin_step

HISTOGRAM_HEADER = ["trial", "class", "logit"]


@dataclass
class EotConfig:
    replicates: int = 150            # screening default is 15
    langevin: LangevinConfig = field(default_factory=LangevinConfig)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass
class LogitsEstimate:
    mean_logits: np.ndarray           # (J,)
    per_replicate: np.ndarray         # (H, J)
    samples: np.ndarray | None = None  # (H, C, Hh, Ww) purified replicates

    def __post_init__(self):
        self.mean_logits = np.asarray(self.mean_logits, dtype=np.float64)


def transform_batch(ebm, xs: np.ndarray, lcfg: LangevinConfig, keys) -> np.ndarray:
    """Purify a batch of chains, one noise stream key per chain row."""
    bank = StreamBank(keys)
    out = np.array(xs, copy=True)
    for _ in range(lcfg.steps):
        out = langevin_step(ebm, out, lcfg, bank)
    return out


def eot_logits(ebm, clf, x: np.ndarray, cfg: EotConfig, rng: Rng,
               keep_samples: bool = False) -> LogitsEstimate:
    """H-replicate Monte-Carlo estimate of the expected logits at x.

    Replicate h purifies an independent copy of x on stream rng.spawn(h);
    the estimate is deterministic given (x, rng key).
    """
    x = np.asarray(x, dtype=ebm.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise T.ShapeError("eot_logits takes a single image; use eot_logits_batch")
    h = cfg.replicates
    keys = np.array([rng.spawn(i).key for i in range(h)], dtype=np.uint64)
    purified = transform_batch(ebm, np.repeat(x, h, axis=0), cfg.langevin, keys)
    logits = clf.logits(T.Tensor(purified.astype(clf.dtype, copy=False))).data
    return LogitsEstimate(
        mean_logits=logits.mean(axis=0),
        per_replicate=np.asarray(logits, dtype=np.float64),
        samples=purified if keep_samples else None,
    )


def eot_logits_batch(ebm, clf, xs: np.ndarray, replicates: int,
                     lcfg: LangevinConfig, keys: np.ndarray,
                     keep_samples: bool = False):
    """Vectorized estimator over M images at once.

    keys: (M, replicates) stream keys, one per purification chain.
    Returns (mean_logits (M, J), per_replicate (M, H, J), samples or None).
    """
    xs = np.asarray(xs, dtype=ebm.dtype)
    m, h = xs.shape[0], replicates
    keys = np.asarray(keys, dtype=np.uint64)
    if keys.shape != (m, h):
        raise ValueError(f"need key matrix of shape {(m, h)}, got {keys.shape}")
    tiled = np.repeat(xs, h, axis=0)
    purified = transform_batch(ebm, tiled, lcfg, keys.reshape(-1))
    logits = clf.logits(T.Tensor(purified.astype(clf.dtype, copy=False))).data
    logits = np.asarray(logits, dtype=np.float64).reshape(m, h, -1)
    samples = purified.reshape(m, h, *xs.shape[1:]) if keep_samples else None
    return logits.mean(axis=1), logits, samples


def eot_label(estimate) -> int:
    """Predicted class: argmax of mean logits, ties to the lowest index."""
    logits = estimate.mean_logits if isinstance(estimate, LogitsEstimate) else np.asarray(estimate)
    return int(np.argmax(logits))


def logit_histogram(ebm, clf, x: np.ndarray, replicates: int, trials: int,
                    rng: Rng, lcfg: LangevinConfig | None = None):
    """Independent realizations of the H-replicate mean logits.

    Returns (rows, top2): rows are [trial, class, logit] for the two
    classes with the highest pooled mean logits.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    cfg = EotConfig(replicates=replicates, langevin=lcfg or LangevinConfig())
    means = np.stack([
        eot_logits(ebm, clf, x, cfg, rng.spawn("trial", t)).mean_logits
        for t in range(trials)
    ])
    pooled = means.mean(axis=0)
    top2 = np.argsort(-pooled, kind="stable")[:2]
    rows = []
    for t in range(trials):
        for cls in top2:
            rows.append([t, int(cls), float(means[t, cls])])
    return rows, [int(c) for c in top2]


def write_histogram_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTOGRAM_HEADER)
        w.writerows(rows)
