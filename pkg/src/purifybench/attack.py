"""White-box attack suite and the screening/verification evaluation harness.

PGD iterates inside S = (epsilon-ball around the natural image) intersected
with the pixel hypercube [0, 1]^D.  Four gradient estimators are available:

* ``pgd``       - gradient of the loss of the base classifier at x.
* ``eot``       - replicate-averaged gradient with the transform disabled.
* ``bpda``      - forward through the Langevin transform, backward through
                  the identity surrogate, one replicate.
* ``bpda_eot``  - the combined estimator: H purified replicates, loss of
                  the mean logits, identity backward to each replicate.

The evaluation harness screens every iterate with a small replicate count
and verifies candidate breaks with a large one; an image counts as broken
only after a large-sample verification mismatch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .defense import eot_logits_batch
from .rng import Rng, derive_keys
from .sampler import LangevinConfig

REPORT_HEADER = ["image_id", "natural_label", "predicted_natural",
                 "defended", "break_step", "restart_id"]

NORMS = ("linf", "l2")
GRADIENT_KINDS = ("pgd", "eot", "bpda", "bpda_eot")

# upper bound on simultaneously advancing Langevin chains (memory guard)
MAX_CHAINS = 4096


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    attacks: int = 50
    h_adv: int = 15
    h_def: int = 150
    restarts: int = 5
    gradient: str = "bpda_eot"

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.gradient not in GRADIENT_KINDS:
            raise ValueError(f"gradient must be one of {GRADIENT_KINDS}")
        if self.epsilon < 0 or self.alpha <= 0:
            raise ValueError("need epsilon >= 0 and alpha > 0")
        if self.attacks < 1 or self.h_adv < 1 or self.restarts < 1:
            raise ValueError("attacks, h_adv, restarts must be >= 1")
        if self.h_def < self.h_adv:
            raise ValueError("h_def must be >= h_adv")


@dataclass
class DefenseRecord:
    image_id: int
    label: int
    predicted_natural: int
    defended: bool
    break_step: int | None = None
    break_restart: int | None = None
    trace: list = field(default_factory=list)   # (restart, step, screen label, loss)


def attack_loss(logits, y) -> float:
    """Softmax cross entropy of (mean) logits against the true label."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
        y = np.asarray([y])
    with T.Tape():
        loss = T.tmean(T.softmax_cross_entropy(T.Tensor(logits), np.asarray(y)))
    return float(loss.data)


def step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    """Unit-ball maximizer of v . grad for the dual step geometry.

    linf: elementwise sign (sign(0) = 0).  l2: grad normalized to unit
    length per image (leading axis); an all-zero gradient maps to zero.
    """
    grad = np.asarray(grad)
    if norm == "linf":
        return np.sign(grad)
    if norm == "l2":
        flat = grad.reshape(grad.shape[0], -1) if grad.ndim > 1 else grad[None]
        nrm = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
        scale = np.where(nrm > 0, 1.0 / np.maximum(nrm, 1e-300), 0.0)
        out = (flat * scale[:, None].astype(grad.dtype)).reshape(grad.shape)
        return out if grad.ndim > 1 else out[0]
    raise ValueError(f"unknown norm {norm!r}")


def project(x: np.ndarray, center: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project onto the epsilon-ball around center intersected with [0, 1]^D.

    linf is exact (clip then clamp).  l2 rescales the offset to the ball,
    clamps to the hypercube, and re-checks with one extra scale pass.
    """
    x = np.asarray(x)
    center = np.asarray(center, dtype=x.dtype)
    if x.shape != center.shape:
        raise T.ShapeError(f"project: shape mismatch {x.shape} vs {center.shape}")
    eps = x.dtype.type(epsilon)
    if norm == "linf":
        out = np.clip(x, center - eps, center + eps)
        return np.clip(out, 0.0, 1.0)
    if norm == "l2":
        batched = x.ndim > 1
        xs = x if batched else x[None]
        cs = center if batched else center[None]
        out = xs.copy()
        for _ in range(2):
            delta = out - cs
            flat = delta.reshape(delta.shape[0], -1)
            nrm = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
            factor = np.where(nrm > float(eps), float(eps) / np.maximum(nrm, 1e-300), 1.0)
            out = cs + delta * factor.reshape(-1, *([1] * (delta.ndim - 1))).astype(x.dtype)
            out = np.clip(out, 0.0, 1.0)
        return out if batched else out[0]
    raise ValueError(f"unknown norm {norm!r}")


def random_init(center: np.ndarray, epsilon: float, norm: str, rng: Rng) -> np.ndarray:
    """Random start in the epsilon-ball, projected to [0, 1]^D."""
    center = np.asarray(center)
    if norm == "linf":
        u = rng.uniform(center.shape).astype(center.dtype)
        off = (2.0 * u - 1.0).astype(center.dtype) * center.dtype.type(epsilon)
        return np.clip(center + off, 0.0, 1.0)
    if norm == "l2":
        d = center.size
        direction = rng.gaussian(center.shape, dtype=center.dtype)
        nrm = float(np.sqrt((direction.astype(np.float64) ** 2).sum()))
        radius = epsilon * float(rng.uniform()) ** (1.0 / d)
        off = direction * center.dtype.type(radius / max(nrm, 1e-300))
        return np.clip(center + off, 0.0, 1.0)
    raise ValueError(f"unknown norm {norm!r}")


def grad_pgd(clf, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the base-classifier loss at x (no transform)."""
    x = np.asarray(x)
    batched = x.ndim == 4
    xs = x if batched else x[None]
    ys = np.asarray(y).reshape(-1)
    with T.Tape() as tape:
        xt = T.Tensor(xs.astype(clf.dtype, copy=False), requires_grad=True)
        loss = T.tsum(T.softmax_cross_entropy(clf.logits(xt), ys))
        tape.backward(loss)
    g = xt.grad.astype(x.dtype, copy=False)
    return g if batched else g[0]


def grad_bpda_eot(ebm, clf, x: np.ndarray, y: int, h: int, lcfg: LangevinConfig,
                  rng: Rng):
    """Single-image combined attack gradient (identity-surrogate backward).

    Returns (delta, mean logits over the H replicates).  The replicates
    are shared between the gradient and the screening logits.
    """
    x = np.asarray(x)
    xs = x if x.ndim == 4 else x[None]
    keys = np.array([[rng.spawn(hh).key for hh in range(h)]], dtype=np.uint64)
    deltas, means, _ = bpda_eot_gradient_batch(
        ebm, clf, xs, np.asarray([y]), h, lcfg, keys)
    delta = deltas[0] if x.ndim != 4 else deltas
    return delta, means[0]


def bpda_eot_gradient_batch(ebm, clf, xs: np.ndarray, ys: np.ndarray, h: int,
                            lcfg: LangevinConfig, keys: np.ndarray,
                            use_transform: bool = True):
    """Vectorized attack gradient for M images.

    For each image: purify H replicates (identity transform when
    use_transform is false), take the loss of the replicate-mean logits,
    backpropagate to every replicate through the classifier only, and sum
    the replicate gradients.  Returns (deltas (M, ...), mean logits (M, J),
    per-replicate logits (M, H, J)).
    """
    from .defense import transform_batch

    do_transform = use_transform and lcfg.steps > 0
    xs = np.asarray(xs, dtype=ebm.dtype if do_transform else clf.dtype)
    m = xs.shape[0]
    ys = np.asarray(ys).reshape(m)
    tiled = np.repeat(xs, h, axis=0)
    if do_transform:
        purified = transform_batch(ebm, tiled, lcfg, np.asarray(keys, dtype=np.uint64).reshape(-1))
    else:
        purified = tiled
    with T.Tape() as tape:
        xt = T.Tensor(purified.astype(clf.dtype, copy=False), requires_grad=True)
        logits = clf.logits(xt)                       # (M*H, J)
        j = logits.data.shape[1]
        mean_logits = T.tmean(T.reshape(logits, (m, h, j)), axis=1)   # (M, J)
        loss = T.tsum(T.softmax_cross_entropy(mean_logits, ys))
        tape.backward(loss)
    rep_grads = xt.grad.reshape(m, h, *xs.shape[1:])
    deltas = rep_grads.sum(axis=1).astype(xs.dtype, copy=False)
    per_rep = np.asarray(logits.data, dtype=np.float64).reshape(m, h, j)
    return deltas, per_rep.mean(axis=1), per_rep


def _attack_kind_params(cfg: AttackConfig):
    return {
        "pgd": (False, 1),
        "eot": (False, cfg.h_adv),
        "bpda": (True, 1),
        "bpda_eot": (True, cfg.h_adv),
    }[cfg.gradient]


def evaluate_defense(ebm, clf, images, labels, cfg: AttackConfig,
                     defense_langevin: LangevinConfig, master_seed,
                     image_ids=None, progress=None, max_chains=MAX_CHAINS,
                     screen_hook=None, verify_hook=None, keep_traces=False):
    """Full adaptive evaluation: screening, verification, and restarts.

    Returns (records, summary).  Every random stream is keyed by
    (master_seed, purpose, image id, restart, step, replicate), so results
    do not depend on batching.  ``screen_hook`` / ``verify_hook`` may
    remap predicted labels (testing seams for the control-flow contract).
    """
    images = np.asarray(images, dtype=ebm.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    m_total = images.shape[0]
    if image_ids is None:
        image_ids = np.arange(m_total)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    use_transform, h_grad = _attack_kind_params(cfg)

    def _verify_labels(xs, ids, restart, step):
        labels_out = np.empty(xs.shape[0], dtype=np.int64)
        chunk = max(1, max_chains // cfg.h_def)
        for s in range(0, xs.shape[0], chunk):
            part = slice(s, s + chunk)
            keys = derive_keys(master_seed, "verify",
                               ids[part][:, None], int(restart), int(step),
                               np.arange(cfg.h_def)[None, :])
            mean, _, _ = eot_logits_batch(ebm, clf, xs[part], cfg.h_def,
                                          defense_langevin, keys)
            labels_out[part] = mean.argmax(axis=1)
        if verify_hook is not None:
            labels_out = verify_hook(labels_out, ids, restart, step)
        return labels_out

    # natural verification
    natural_pred = _verify_labels(images, image_ids, -1, 0)
    records = {}
    for i in range(m_total):
        ok = natural_pred[i] == labels[i]
        records[int(image_ids[i])] = DefenseRecord(
            image_id=int(image_ids[i]), label=int(labels[i]),
            predicted_natural=int(natural_pred[i]), defended=bool(ok),
            break_step=None if ok else 0, break_restart=None if ok else -1)

    alive_mask = natural_pred == labels
    for restart in range(cfg.restarts):
        sel = np.flatnonzero(alive_mask)
        if sel.size == 0:
            break
        chunk = max(1, max_chains // h_grad)
        for s in range(0, sel.size, chunk):
            idx = sel[s:s + chunk]
            ids = image_ids[idx]
            ys = labels[idx]
            centers = images[idx]
            x = np.stack([
                random_init(centers[i], cfg.epsilon, cfg.norm,
                            Rng(master_seed, "init", int(ids[i]), restart))
                for i in range(idx.size)
            ])
            live = np.ones(idx.size, dtype=bool)
            for n in range(1, cfg.attacks + 2):
                gsel = np.flatnonzero(live)
                if gsel.size == 0:
                    break
                keys = derive_keys(master_seed, "screen",
                                   ids[gsel][:, None], restart, n,
                                   np.arange(h_grad)[None, :])
                deltas, mean_logits, _ = bpda_eot_gradient_batch(
                    ebm, clf, x[gsel], ys[gsel], h_grad, defense_langevin, keys,
                    use_transform=use_transform)
                screened = mean_logits.argmax(axis=1)
                if screen_hook is not None:
                    screened = screen_hook(screened, ids[gsel], restart, n)
                if keep_traces:
                    z = mean_logits - mean_logits.max(axis=1, keepdims=True)
                    losses = np.log(np.exp(z).sum(axis=1)) - z[np.arange(gsel.size), ys[gsel]]
                    for q, ii in enumerate(gsel):
                        records[int(ids[ii])].trace.append(
                            (restart, n, int(screened[q]), float(losses[q])))
                flips = np.flatnonzero(screened != ys[gsel])
                if flips.size:
                    vsel = gsel[flips]
                    vlabels = _verify_labels(x[vsel], ids[vsel], restart, n)
                    broken = np.flatnonzero(vlabels != ys[vsel])
                    for q in broken:
                        ii = int(vsel[q])
                        rec = records[int(ids[ii])]
                        rec.defended = False
                        rec.break_step = n
                        rec.break_restart = restart
                        live[ii] = False
                        alive_mask[idx[ii]] = False
                if n <= cfg.attacks:
                    keep = live[gsel]
                    upd = gsel[keep]
                    if upd.size:
                        dirs = step_direction(deltas[keep], cfg.norm)
                        x[upd] = project(
                            x[upd] + x.dtype.type(cfg.alpha) * dirs,
                            centers[upd], cfg.epsilon, cfg.norm)
            if progress is not None:
                print(f"  attack restart {restart + 1}/{cfg.restarts}: "
                      f"{int(alive_mask.sum())}/{m_total} still defended", flush=True)

    ordered = [records[int(i)] for i in image_ids]
    natural_acc = float(np.mean([r.predicted_natural == r.label for r in ordered]))
    robust_acc = float(np.mean([r.defended for r in ordered]))
    summary = {"natural_acc": natural_acc, "robust_acc": robust_acc,
               "attacks": cfg.attacks, "images": m_total,
               "restarts": cfg.restarts, "gradient": cfg.gradient}
    return ordered, summary


def evaluate_transfer(ebm, clf, images, labels, cfg: AttackConfig,
                      defense_steps, defense_tau: float, h_def: int,
                      master_seed, max_chains=MAX_CHAINS, progress=None):
    """Base-classifier PGD transfer protocol.

    Builds adversarial images with plain PGD against f(x), then measures
    base-classifier accuracy and EOT-defense accuracy on both the natural
    and the adversarial sets for every Langevin step count in
    ``defense_steps``.  Returns (adversarial images, summary dict).
    """
    images = np.asarray(images, dtype=clf.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    m = images.shape[0]
    x = np.stack([
        random_init(images[i], cfg.epsilon, cfg.norm, Rng(master_seed, "tinit", i))
        for i in range(m)
    ])
    for n in range(cfg.attacks):
        delta = grad_pgd(clf, x, labels)
        x = project(x + images.dtype.type(cfg.alpha) * step_direction(delta, cfg.norm),
                    images, cfg.epsilon, cfg.norm)
    adv = x

    def _base_acc(xs):
        logits = clf.logits(T.Tensor(xs.astype(clf.dtype, copy=False))).data
        return float((logits.argmax(axis=1) == labels).mean())

    def _defense_acc(xs, k, tag):
        lcfg = LangevinConfig(tau=defense_tau, steps=int(k))
        preds = np.empty(m, dtype=np.int64)
        chunk = max(1, max_chains // h_def)
        for s in range(0, m, chunk):
            part = slice(s, min(s + chunk, m))
            keys = derive_keys(master_seed, "transfer", tag, int(k),
                               np.arange(part.start, part.stop)[:, None],
                               np.arange(h_def)[None, :])
            mean, _, _ = eot_logits_batch(ebm, clf, xs[part].astype(ebm.dtype),
                                          h_def, lcfg, keys)
            preds[part] = mean.argmax(axis=1)
        return float((preds == labels).mean())

    summary = {
        "base_natural_acc": _base_acc(images),
        "base_adversarial_acc": _base_acc(adv),
        "images": m,
    }
    for k in defense_steps:
        if progress is not None:
            print(f"  transfer: defense sweep K={k}", flush=True)
        summary[f"defense_natural_acc_k{int(k)}"] = _defense_acc(images, k, "nat")
        summary[f"defense_adversarial_acc_k{int(k)}"] = _defense_acc(adv, k, "adv")
    return adv, summary


def write_report_csv(path, records, summary):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in records:
            w.writerow([r.image_id, r.label, r.predicted_natural,
                        int(r.defended),
                        "" if r.break_step is None else r.break_step,
                        "" if r.break_restart is None else r.break_restart])


def format_summary(summary) -> str:
    return "\n".join(f"{k}={v}" for k, v in summary.items())
