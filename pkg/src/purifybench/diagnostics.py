"""Quantitative diagnostics: energy separation, Langevin-step sweep,
maximal Lyapunov exponent, and Fréchet feature distance over steps.

The Lyapunov estimator is the classical Benettin procedure on the
noise-scaled map T_eta: two trajectories sharing the same noise
realization are advanced in parallel and the finite separation vector is
renormalized to delta_0 at a fixed interval; the exponent is the average
log growth rate per step.  Common noise means the perturbation evolves
through the gradient term only.

The Fréchet feature distance is the 2-Wasserstein distance between
Gaussian fits of the trained classifier's penultimate-layer features; it
plays the role of FID at a scale where Inception embeddings do not apply.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .sampler import LangevinConfig, langevin_step_given_noise

LYAPUNOV_HEADER = ["eta", "lambda"]
FID_HEADER = ["k", "model", "frechet"]
KSWEEP_HEADER = ["k", "natural_acc", "robust_acc"]
ENERGY_HEADER = ["set", "image_id", "energy"]

DEFAULT_K_GRID = (0, 10, 100, 500, 1000, 1500, 2000)

_SEPARATION_FLOOR = 1e-300


def default_eta_grid(num: int = 21, lo: float = 0.05, hi: float = 5.0) -> np.ndarray:
    """Log-spaced noise-scale grid with the point nearest 1 snapped to 1.0."""
    grid = np.geomspace(lo, hi, num)
    grid[np.argmin(np.abs(grid - 1.0))] = 1.0
    return np.sort(grid)


@dataclass
class LyapunovConfig:
    etas: np.ndarray = field(default_factory=default_eta_grid)
    t_steps: int = 5000
    renorm_interval: int = 1
    delta0: float = 1e-6
    burn_in: int = 500
    tau: float = 0.01

    def __post_init__(self):
        self.etas = np.asarray(self.etas, dtype=np.float64)
        if self.etas.size == 0 or np.any(self.etas <= 0):
            raise ValueError("eta grid must be non-empty and positive")
        if np.any(np.diff(self.etas) < 0):
            raise ValueError("eta grid must be sorted")
        if self.t_steps <= 0 or self.renorm_interval <= 0 or self.burn_in < 0:
            raise ValueError("t_steps and renorm_interval must be positive")
        if not (self.delta0 > 0 and self.tau > 0):
            raise ValueError("delta0 and tau must be positive")


@dataclass
class FeatureMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        self.cov = 0.5 * (cov + cov.T)
        d = self.mean.size
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape does not match mean")


def batch_energies(ebm, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Per-image energies U(x) as a float64 vector."""
    images = np.asarray(images, dtype=getattr(ebm, "dtype", np.float64))
    out = np.empty(images.shape[0])
    for s in range(0, images.shape[0], chunk):
        part = images[s:s + chunk]
        out[s:s + part.shape[0]] = np.asarray(
            ebm.energy(T.Tensor(part)).data, dtype=np.float64)
    return out


def energy_stats(ebm, sets: dict):
    """Energy summaries over named image sets (e.g. natural/adversarial/noise).

    Returns (rows, summary): rows are [set, image_id, energy] for
    histogramming; summary maps each set name to mean/std/stderr/quantiles.
    """
    rows, summary = [], {}
    for name, images in sets.items():
        images = np.asarray(images)
        if images.shape[0] == 0:
            raise ValueError(f"energy_stats: set {name!r} is empty")
        e = batch_energies(ebm, images)
        rows.extend([name, i, float(e[i])] for i in range(e.size))
        summary[name] = {
            "n": int(e.size),
            "mean": float(e.mean()),
            "std": float(e.std(ddof=1)) if e.size > 1 else 0.0,
            "stderr": float(e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else 0.0,
            "q05": float(np.quantile(e, 0.05)),
            "q50": float(np.quantile(e, 0.50)),
            "q95": float(np.quantile(e, 0.95)),
        }
    return rows, summary


def k_sweep(ebm, clf, images, labels, k_grid, attack_cfg, tau: float,
            master_seed, progress=None, max_chains=None):
    """Natural and robust accuracy of the defense across Langevin step counts.

    Runs the full screening/verification evaluation at each K; the attack
    configuration's reduced replicate count (h_adv) applies throughout.
    Returns rows [k, natural_acc, robust_acc].
    """
    from .attack import MAX_CHAINS, evaluate_defense

    rows = []
    for k in k_grid:
        lcfg = LangevinConfig(tau=tau, steps=int(k))
        _, summary = evaluate_defense(
            ebm, clf, images, labels, attack_cfg, lcfg,
            derive_subseed(master_seed, "ksweep", int(k)),
            progress=progress, max_chains=max_chains or MAX_CHAINS)
        rows.append([int(k), summary["natural_acc"], summary["robust_acc"]])
        if progress is not None:
            print(f"  ksweep K={k}: nat={rows[-1][1]:.4f} rob={rows[-1][2]:.4f}",
                  flush=True)
    return rows


def derive_subseed(master_seed, *tokens) -> int:
    from .rng import derive_key
    return int(derive_key(master_seed, *tokens))


def lyapunov(ebm, cfg: LyapunovConfig, x0: np.ndarray, rng: Rng):
    """Maximal Lyapunov exponent of T_eta for every eta in the grid.

    All eta points run in lockstep as one batch: for each eta a base and a
    perturbed trajectory share the same noise stream, the separation is
    renormalized to delta0 every ``renorm_interval`` steps, and lambda is
    the mean log growth per step after the burn-in is discarded.

    Returns (rows [eta, lambda], flags): flags[i] is True when the
    separation underflowed and the exponent was clamped.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 3:
        x0 = x0[None]
    n_eta = cfg.etas.size
    d = x0.size

    base = np.repeat(x0, n_eta, axis=0)                      # (n_eta, C, H, W)
    direction = rng.spawn("perturbation").gaussian(x0.shape[1:])
    direction /= np.sqrt((direction ** 2).sum())
    pert = base + cfg.delta0 * direction[None]

    streams = [rng.spawn("noise", i) for i in range(n_eta)]
    lcfg = LangevinConfig(tau=cfg.tau, steps=1, eta=1.0)
    etas = cfg.etas.reshape(n_eta, *([1] * (x0.ndim - 1)))

    log_sum = np.zeros(n_eta)
    steps_counted = np.zeros(n_eta, dtype=np.int64)
    flags = np.zeros(n_eta, dtype=bool)
    since_renorm = 0
    total = cfg.burn_in + cfg.t_steps
    for t in range(total):
        z = np.stack([s.gaussian(x0.shape[1:]) for s in streams])
        z = etas * z                                          # per-eta noise scale
        both = np.concatenate([base, pert], axis=0)
        both = langevin_step_given_noise(ebm, both, lcfg, np.concatenate([z, z], axis=0))
        base, pert = both[:n_eta], both[n_eta:]
        since_renorm += 1
        if since_renorm == cfg.renorm_interval:
            sep = pert - base
            norms = np.sqrt((sep.reshape(n_eta, -1) ** 2).sum(axis=1))
            under = norms < _SEPARATION_FLOOR
            flags |= under & (t >= cfg.burn_in)
            safe = np.maximum(norms, _SEPARATION_FLOOR)
            if t >= cfg.burn_in:
                log_sum += np.log(safe / cfg.delta0)
                steps_counted += cfg.renorm_interval
            pert = base + sep * (cfg.delta0 / safe).reshape(n_eta, *([1] * (x0.ndim - 1)))
            since_renorm = 0

    lam = np.where(steps_counted > 0, log_sum / np.maximum(steps_counted, 1), 0.0)
    rows = [[float(cfg.etas[i]), float(lam[i])] for i in range(n_eta)]
    return rows, flags


def feature_moments(features: np.ndarray, regularize: float = 1e-6) -> FeatureMoments:
    """Gaussian fit of a feature sample; covariance regularized when the
    sample is too small to have full rank (n <= d)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite feature values")
    n, d = f.shape
    mu = f.mean(axis=0)
    if n > 1:
        c = np.cov(f, rowvar=False, ddof=1).reshape(d, d)
    else:
        c = np.zeros((d, d))
    if n <= d:
        c = c + regularize * np.eye(d)
    return FeatureMoments(mu, c)


def frechet_gaussian(a: FeatureMoments, b: FeatureMoments) -> float:
    """Fréchet (2-Wasserstein) distance between two Gaussian fits.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions so the result
    is exactly real.
    """
    if a.mean.size != b.mean.size:
        raise ValueError("feature dimensions differ")
    diff = float(((a.mean - b.mean) ** 2).sum())
    wa, va = np.linalg.eigh(a.cov)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    m = root_a @ b.cov @ root_a
    wm = np.linalg.eigvalsh(0.5 * (m + m.T))
    cross = 2.0 * float(np.sqrt(np.clip(wm, 0.0, None)).sum())
    return diff + float(np.trace(a.cov) + np.trace(b.cov)) - cross


def classifier_features(clf, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Penultimate-layer embeddings of the trained classifier."""
    images = np.asarray(images, dtype=clf.dtype)
    outs = []
    for s in range(0, images.shape[0], chunk):
        outs.append(np.asarray(
            clf.features(T.Tensor(images[s:s + chunk])).data, dtype=np.float64))
    return np.concatenate(outs, axis=0)


def frechet_feature_distance(clf, set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Fréchet distance between feature-space Gaussian fits of two image sets."""
    ma = feature_moments(classifier_features(clf, set_a))
    mb = feature_moments(classifier_features(clf, set_b))
    return frechet_gaussian(ma, mb)


def fid_over_steps(convergent_ebm, nonconvergent_ebm, clf, init_images,
                   heldout_images, k_grid, tau: float, master_seed,
                   progress=None):
    """Fréchet feature distance of data-initialized K-step samples vs data.

    One trajectory per init image per model; each K in the grid is a
    snapshot of the same trajectory.  Returns rows [k, model, frechet] for
    models "convergent" and "nonconvergent".
    """
    from .rng import StreamBank, derive_keys
    from .sampler import langevin_step

    heldout = np.asarray(heldout_images)
    rows = []
    grid = sorted(set(int(k) for k in k_grid))
    for tag, ebm in (("convergent", convergent_ebm), ("nonconvergent", nonconvergent_ebm)):
        xs = np.asarray(init_images, dtype=ebm.dtype)
        keys = derive_keys(master_seed, "fid", tag, np.arange(xs.shape[0]))
        bank = StreamBank(keys)
        k_done = 0
        lcfg = LangevinConfig(tau=tau, steps=1)
        for k in grid:
            while k_done < k:
                xs = langevin_step(ebm, xs, lcfg, bank)
                k_done += 1
            dist = frechet_feature_distance(clf, xs, heldout)
            rows.append([k, tag, float(dist)])
            if progress is not None:
                print(f"  fid {tag} K={k}: {dist:.4f}", flush=True)
    return rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
