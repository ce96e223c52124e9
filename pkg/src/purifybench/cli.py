"""Command-line front end.

Subcommands mirror the library operations one-to-one::

    purifybench train-ebm        --config run.cfg --out runs/ebm
    purifybench train-clf        --config run.cfg --out runs/clf
    purifybench attack           --config run.cfg --out runs/attack
    purifybench transfer-attack  --config run.cfg --out runs/transfer
    purifybench ksweep           --config run.cfg --out runs/ksweep
    purifybench lyapunov         --config run.cfg --out runs/lyap
    purifybench fid-curve        --config run.cfg --out runs/fid
    purifybench energy-stats     --config run.cfg --out runs/energy
    purifybench purify           --config run.cfg --out runs/purify

Every command validates its inputs before any compute or output, writes
its fully-resolved config next to its outputs, and emits plain CSV plus a
key=value summary.  All randomness flows from the single ``seed`` key
(overridable with --seed); re-running with the same resolved config
reproduces every output bit-identically regardless of worker count.
The ``workers`` key / PURIFYBENCH_WORKERS variable bound parallel
fan-out; execution is vectorized, so worker count never affects results.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import diagnostics as diag
from .attack import AttackConfig, evaluate_defense, evaluate_transfer, format_summary, write_report_csv
from .data import generate_glyphs, load_idx
from .defense import EotConfig, eot_label, eot_logits
from .nets import load_checkpoint, make_net, save_checkpoint
from .rng import Rng
from .sampler import LangevinConfig
from .trainer import TrainConfig, classifier_accuracy, train_classifier, train_ebm

COMMANDS = ("train-ebm", "train-clf", "attack", "transfer-attack", "ksweep",
            "lyapunov", "fid-curve", "energy-stats", "purify")


class CliError(ValueError):
    pass


def _resolve(args) -> dict:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.defaults()
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    env_workers = os.environ.get("PURIFYBENCH_WORKERS")
    if env_workers is not None:
        try:
            cfg["run"]["workers"] = int(env_workers)
        except ValueError:
            raise CliError(f"PURIFYBENCH_WORKERS must be an integer, got {env_workers!r}")
    return cfg


def _load_data(cfg):
    d = cfg["data"]
    if d["source"] == "synthetic":
        seed = cfg["run"]["seed"]
        train = generate_glyphs(d["n_per_class"], seed, split="train")
        test = generate_glyphs(d["test_n_per_class"], seed, split="test")
        return train, test
    if d["source"] == "idx":
        for key in ("idx_train_images", "idx_train_labels",
                    "idx_test_images", "idx_test_labels"):
            if not d[key] or not Path(d[key]).exists():
                raise CliError(f"data.{key} missing or not found: {d[key]!r}")
        train = load_idx(d["idx_train_images"], d["idx_train_labels"], "train")
        test = load_idx(d["idx_test_images"], d["idx_test_labels"], "test")
        return train, test
    raise CliError(f"data.source must be 'synthetic' or 'idx', got {d['source']!r}")


def _need_checkpoint(cfg, key, kind, dtype):
    path = cfg["paths"][key]
    if not path:
        raise CliError(f"paths.{key} is required for this command")
    if not Path(path).exists():
        raise CliError(f"paths.{key} not found: {path}")
    net, _, _ = load_checkpoint(path, expect_kind=kind, dtype=dtype)
    return net


def _attack_config(cfg, h_adv=None) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(norm=a["norm"], epsilon=a["epsilon"], alpha=a["alpha"],
                        attacks=a["attacks"], h_adv=h_adv or a["h_adv"],
                        h_def=a["h_def"], restarts=a["restarts"],
                        gradient=a["gradient"])


def _test_slice(cfg, test, count_key="images", section="attack"):
    count = cfg[section][count_key]
    off = cfg["attack"]["image_offset"]
    if count < 1 or off < 0 or off + count > len(test):
        raise CliError(
            f"requested images [{off}, {off + count}) outside test set of {len(test)}")
    return test.images[off:off + count], test.labels[off:off + count]


def _write_outputs(out: Path, cfg, summary: dict | None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfgmod.render(cfg), encoding="utf-8")
    if summary is not None:
        text = format_summary(summary)
        (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
        print(text)


def cmd_train_ebm(cfg, out: Path, progress):
    train, _ = _load_data(cfg)
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    t = cfg["train"]
    tcfg = TrainConfig(total_steps=t["total_steps"], switch_step=t["switch_step"],
                       lr_adam=t["lr_adam"], lr_sgd=t["lr_sgd"],
                       data_noise=t["data_noise"], batch_pos=t["batch_pos"],
                       batch_neg=t["batch_neg"], langevin_steps=t["langevin_steps"],
                       tau=t["tau"])
    net = make_net(cfg["ebm"]["preset"], dtype=dtype)
    seed = cfg["run"]["seed"]
    net.initialize(Rng(seed, "ebm_init"))
    out.mkdir(parents=True, exist_ok=True)
    net, rows = train_ebm(net, train.images, tcfg, Rng(seed, "ebm_train"),
                          log_path=out / "train_log.csv", progress=progress)
    phase = 1 if tcfg.switch_step <= tcfg.total_steps else 0
    save_checkpoint(net.astype(np.float64), out / "ebm.ckpt",
                    step=tcfg.total_steps, phase=phase)
    return {"steps": tcfg.total_steps, "checkpoint": str(out / "ebm.ckpt"),
            "final_pos_energy": rows[-1][2] if rows else float("nan"),
            "final_neg_energy": rows[-1][3] if rows else float("nan")}


def cmd_train_clf(cfg, out: Path, progress):
    train, test = _load_data(cfg)
    c = cfg["classifier"]
    dtype = cfgmod.dtype_of(c["dtype"])
    net = make_net(c["preset"], dtype=dtype)
    seed = cfg["run"]["seed"]
    net.initialize(Rng(seed, "clf_init"))
    net = train_classifier(net, train.images, train.labels, c["epochs"], c["lr"],
                           Rng(seed, "clf_train"), momentum=c["momentum"],
                           batch_size=c["batch_size"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net.astype(np.float64), out / "clf.ckpt", step=c["epochs"])
    return {"epochs": c["epochs"], "checkpoint": str(out / "clf.ckpt"),
            "train_acc": classifier_accuracy(net, train.images, train.labels),
            "test_acc": classifier_accuracy(net, test.images, test.labels)}


def cmd_attack(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    _, test = _load_data(cfg)
    images, labels = _test_slice(cfg, test)
    acfg = _attack_config(cfg)
    lv = cfg["langevin"]
    lcfg = LangevinConfig(tau=lv["tau"], steps=lv["steps"], eta=lv["eta"])
    records, summary = evaluate_defense(
        ebm, clf, images, labels, acfg, lcfg, cfg["run"]["seed"],
        image_ids=np.arange(cfg["attack"]["image_offset"],
                            cfg["attack"]["image_offset"] + images.shape[0]),
        progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "attack_report.csv", records, summary)
    return summary


def cmd_transfer_attack(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    _, test = _load_data(cfg)
    images, labels = _test_slice(cfg, test, count_key="images", section="transfer")
    acfg = _attack_config(cfg)
    _, summary = evaluate_transfer(
        ebm, clf, images, labels, acfg, cfg["transfer"]["defense_grid"],
        cfg["langevin"]["tau"], acfg.h_def, cfg["run"]["seed"], progress=progress)
    return summary


def cmd_ksweep(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    _, test = _load_data(cfg)
    images, labels = _test_slice(cfg, test, count_key="images", section="ksweep")
    acfg = _attack_config(cfg, h_adv=cfg["ksweep"]["h_adv"])
    rows = diag.k_sweep(ebm, clf, images, labels, cfg["ksweep"]["grid"], acfg,
                        cfg["langevin"]["tau"], cfg["run"]["seed"], progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    diag.write_csv(out / "ksweep.csv", diag.KSWEEP_HEADER, rows)
    return {"rows": len(rows), "csv": str(out / "ksweep.csv")}


def cmd_lyapunov(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    _, test = _load_data(cfg)
    ly = cfg["lyapunov"]
    lycfg = diag.LyapunovConfig(
        etas=diag.default_eta_grid(ly["eta_points"], ly["eta_lo"], ly["eta_hi"]),
        t_steps=ly["t_steps"], renorm_interval=ly["renorm_interval"],
        delta0=ly["delta0"], burn_in=ly["burn_in"], tau=cfg["langevin"]["tau"])
    x0 = test.images[cfg["purify"]["image_index"]]
    rows, flags = diag.lyapunov(ebm.astype(np.float64), lycfg, x0,
                                Rng(cfg["run"]["seed"], "lyapunov"))
    out.mkdir(parents=True, exist_ok=True)
    diag.write_csv(out / "lyapunov.csv", diag.LYAPUNOV_HEADER, rows)
    return {"rows": len(rows), "underflow_flags": int(flags.sum()),
            "csv": str(out / "lyapunov.csv")}


def cmd_fid_curve(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    ebm2 = _need_checkpoint(cfg, "ebm_nonconvergent_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    train, test = _load_data(cfg)
    n = cfg["fid"]["samples"]
    if n < 2 or n > len(train) or n > len(test):
        raise CliError(f"fid.samples = {n} outside dataset sizes")
    rows = diag.fid_over_steps(ebm, ebm2, clf, train.images[:n], test.images[:n],
                               cfg["fid"]["grid"], cfg["langevin"]["tau"],
                               cfg["run"]["seed"], progress=progress)
    out.mkdir(parents=True, exist_ok=True)
    diag.write_csv(out / "fid.csv", diag.FID_HEADER, rows)
    return {"rows": len(rows), "csv": str(out / "fid.csv")}


def cmd_energy_stats(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    _, test = _load_data(cfg)
    images, labels = _test_slice(cfg, test)
    acfg = _attack_config(cfg)
    adv, _ = evaluate_transfer(ebm, clf, images, labels, acfg, [],
                               cfg["langevin"]["tau"], acfg.h_def,
                               cfg["run"]["seed"])
    noise = Rng(cfg["run"]["seed"], "noise_set").uniform(images.shape)
    rows, summary = diag.energy_stats(
        ebm, {"natural": images, "adversarial": adv, "noise": noise})
    out.mkdir(parents=True, exist_ok=True)
    diag.write_csv(out / "energies.csv", diag.ENERGY_HEADER, rows)
    flat = {f"{name}_{stat}": val for name, stats in summary.items()
            for stat, val in stats.items()}
    flat["csv"] = str(out / "energies.csv")
    return flat


def cmd_purify(cfg, out: Path, progress):
    dtype = cfgmod.dtype_of(cfg["ebm"]["dtype"])
    ebm = _need_checkpoint(cfg, "ebm_checkpoint", "energy", dtype)
    clf = _need_checkpoint(cfg, "clf_checkpoint", "classifier",
                           cfgmod.dtype_of(cfg["classifier"]["dtype"]))
    _, test = _load_data(cfg)
    idx = cfg["purify"]["image_index"]
    if not 0 <= idx < len(test):
        raise CliError(f"purify.image_index {idx} outside test set of {len(test)}")
    lv = cfg["langevin"]
    ecfg = EotConfig(replicates=cfg["eot"]["replicates"],
                     langevin=LangevinConfig(tau=lv["tau"], steps=lv["steps"],
                                             eta=lv["eta"]))
    est = eot_logits(ebm, clf, test.images[idx], ecfg,
                     Rng(cfg["run"]["seed"], "purify", idx))
    label = eot_label(est)
    summary = {"image_index": idx, "true_label": int(test.labels[idx]),
               "predicted_label": label, "replicates": ecfg.replicates,
               "langevin_steps": lv["steps"]}
    for j, v in enumerate(est.mean_logits):
        summary[f"mean_logit_{j}"] = float(v)
    return summary


_DISPATCH = {
    "train-ebm": cmd_train_ebm,
    "train-clf": cmd_train_clf,
    "attack": cmd_attack,
    "transfer-attack": cmd_transfer_attack,
    "ksweep": cmd_ksweep,
    "lyapunov": cmd_lyapunov,
    "fid-curve": cmd_fid_curve,
    "energy-stats": cmd_energy_stats,
    "purify": cmd_purify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="purifybench",
                                     description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to a sectioned key=value config")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--progress", type=int, default=None,
                       help="print a progress line every N steps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        out = Path(args.out)
        summary = _DISPATCH[args.command](cfg, out, args.progress)
        _write_outputs(out, cfg, summary)
    except (cfgmod.ConfigError, CliError, ValueError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
