"""Unadjusted Langevin dynamics and the persistent chain bank.

One Langevin step moves a batch of images downhill on the potential with
Gaussian exploration noise::

    x' = x - (tau^2 / 2) * grad_x U(x) + eta * tau * z,   z ~ N(0, I)

No Metropolis correction and no clamping of iterates: long-run chains are
free to leave [0, 1]^D.  ``eta`` rescales only the noise term and is 1 for
training and defense; other values are used by the chaos diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .rng import Rng, StreamBank

DIVERGENCE_LIMIT = 1.0e6


class ChainDivergenceError(RuntimeError):
    """A Langevin chain produced non-finite or runaway values."""


@dataclass
class LangevinConfig:
    tau: float = 0.01
    steps: int = 1500
    eta: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    def with_steps(self, k: int) -> "LangevinConfig":
        return replace(self, steps=k)


def energy_grad(net, x: np.ndarray) -> np.ndarray:
    """grad_x of summed per-image energy; x is not modified."""
    with T.Tape() as tape:
        xt = T.Tensor(x, requires_grad=True)
        tape.backward(T.tsum(net.energy(xt)))
    return xt.grad


def _draw_noise(rng, x: np.ndarray) -> np.ndarray:
    if isinstance(rng, StreamBank):
        rows = x.shape[0]
        if len(rng) != rows:
            raise ValueError(f"StreamBank has {len(rng)} streams for batch of {rows}")
        return rng.gaussian(x.size // rows, dtype=x.dtype).reshape(x.shape)
    return rng.gaussian(x.shape, dtype=x.dtype)


def langevin_step(net, x: np.ndarray, cfg: LangevinConfig, rng) -> np.ndarray:
    """One update of every chain in the batch; returns a new array.

    rng is either a single ``Rng`` stream covering the whole batch or a
    ``StreamBank`` with one stream per leading-axis chain.
    """
    x = np.asarray(x)
    return langevin_step_given_noise(net, x, cfg, _draw_noise(rng, x))


def langevin_step_given_noise(net, x: np.ndarray, cfg: LangevinConfig, z: np.ndarray) -> np.ndarray:
    """Langevin update with a caller-supplied noise realization.

    Used for common-noise trajectory coupling in the chaos diagnostics.
    """
    x = np.asarray(x)
    grad = energy_grad(net, x)
    if not np.all(np.isfinite(grad)):
        raise ChainDivergenceError("non-finite energy gradient")
    dt = x.dtype.type
    out = x - dt(cfg.tau**2 / 2.0) * grad + dt(cfg.eta * cfg.tau) * z
    if np.max(np.abs(out)) > DIVERGENCE_LIMIT:
        raise ChainDivergenceError(f"chain exceeded |x| = {DIVERGENCE_LIMIT:g}")
    return out


def transform(net, x: np.ndarray, cfg: LangevinConfig, rng) -> np.ndarray:
    """K composed Langevin steps from X_0 = x; K = 0 is the identity."""
    out = np.array(x, copy=True)
    for _ in range(cfg.steps):
        out = langevin_step(net, out, cfg, rng)
    return out


def transform_traced(net, x: np.ndarray, step_grid, cfg: LangevinConfig, rng):
    """Run to max(step_grid) steps, yielding (k, state) at each grid point."""
    grid = sorted(set(int(k) for k in step_grid))
    if grid and grid[0] < 0:
        raise ValueError("step grid must be non-negative")
    out = np.array(x, copy=True)
    snaps = []
    k = 0
    for target in grid:
        while k < target:
            out = langevin_step(net, out, cfg.with_steps(1), rng)
            k += 1
        snaps.append((target, out.copy()))
    return snaps


class ChainBank:
    """Persistent image bank for maximum-likelihood EBM training.

    Initialized as uniform noise on [0, 1]^D; size is constant over
    training and entries are overwritten in place by ``replace``.
    """

    def __init__(self, size: int, image_shape, rng: Rng, dtype=np.float64):
        if size < 1:
            raise ValueError("bank size must be >= 1")
        self.images = rng.uniform((size, *image_shape)).astype(dtype)

    def __len__(self):
        return self.images.shape[0]

    def _check(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= len(self)):
            raise IndexError(f"bank index out of range [0, {len(self)})")
        return indices

    def draw(self, indices) -> np.ndarray:
        return self.images[self._check(indices)].copy()

    def replace(self, indices, images):
        indices = self._check(indices)
        images = np.asarray(images, dtype=self.images.dtype)
        if images.shape != (indices.size, *self.images.shape[1:]):
            raise ValueError("replacement image batch does not match indices")
        self.images[indices] = images


class QuadraticEnergy:
    """U(x) = sum(x^2) / (2 sigma^2): analytic test potential.

    Under a Langevin step this is the AR(1) map
    x' = (1 - tau^2 / (2 sigma^2)) x + eta tau z.
    """

    def __init__(self, sigma: float = 1.0):
        self.sigma = float(sigma)

    def energy(self, x: T.Tensor) -> T.Tensor:
        sq = T.multiply(x, x)
        flat = T.reshape(sq, (x.data.shape[0], x.data.size // x.data.shape[0]))
        return T.scale(T.tsum(flat, axis=1), 0.5 / self.sigma**2)


class FlatEnergy:
    """U(x) = 0: pure-noise dynamics, zero drift."""

    def energy(self, x: T.Tensor) -> T.Tensor:
        return T.scale(T.tsum(T.reshape(x, (x.data.shape[0], x.data.size // x.data.shape[0])), axis=1), 0.0)
