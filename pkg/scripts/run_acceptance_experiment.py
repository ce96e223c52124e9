"""End-to-end desk experiment producing the artifacts the acceptance tests read.

Stages are resumable: a stage is skipped when all of its output files are
already present under results/acceptance/, so an interrupted run continues
where it stopped.  Every stage is seeded from the single MASTER_SEED and all
computation is vectorized, so reruns are bit-identical.

Usage:  python3 scripts/run_acceptance_experiment.py [--out results/acceptance]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from purifybench.attack import (AttackConfig, evaluate_defense,
                                evaluate_transfer, format_summary,
                                write_report_csv)
from purifybench.data import generate_glyphs
from purifybench.defense import eot_logits_batch
from purifybench.diagnostics import (ENERGY_HEADER, FID_HEADER,
                                     LYAPUNOV_HEADER, LyapunovConfig,
                                     default_eta_grid, energy_stats,
                                     fid_over_steps, lyapunov, write_csv)
from purifybench.nets import load_checkpoint, make_net, save_checkpoint
from purifybench.rng import Rng, derive_keys
from purifybench.sampler import LangevinConfig
from purifybench.trainer import (TrainConfig, classifier_accuracy,
                                 train_classifier, train_ebm)

MASTER_SEED = 12345
TAU = 0.01
K_DEFENSE = 1500
EBM_PRESET = "energy-global16"
CLF_EPOCHS = 40
N_PER_CLASS, TEST_N_PER_CLASS = 250, 50   # 1000 train / 200 test images

T0 = time.time()


def log(*args):
    print(f"[{time.time() - T0:8.1f}s]", *args, flush=True)


def write_kv(path: Path, summary: dict):
    path.write_text(format_summary(summary) + "\n", encoding="utf-8")


def load_kv(path: Path) -> dict:
    out = {}
    for line in path.read_text().splitlines():
        k, v = line.split("=", 1)
        out[k] = v
    return out


def stage(out: Path, name: str, outputs, fn):
    paths = [out / p for p in outputs]
    if all(p.exists() for p in paths):
        log(f"stage {name}: outputs present, skipping")
        return
    log(f"stage {name}: running")
    fn()
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise RuntimeError(f"stage {name} did not produce {missing}")
    log(f"stage {name}: done")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="results/acceptance")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    train = generate_glyphs(N_PER_CLASS, MASTER_SEED, "train")
    test = generate_glyphs(TEST_N_PER_CLASS, MASTER_SEED, "test")
    images, labels = test.images, test.labels
    log(f"data: {len(train)} train / {len(test)} test images")

    # ------------------------------------------------------------ classifier
    def do_clf():
        net = make_net("clf-desk16").initialize(Rng(MASTER_SEED, "clf_init"))
        net = train_classifier(net, train.images, train.labels, CLF_EPOCHS,
                               0.01, Rng(MASTER_SEED, "clf_train"))
        save_checkpoint(net, out / "clf.ckpt", step=CLF_EPOCHS)
        write_kv(out / "clf_summary.txt", {
            "train_acc": classifier_accuracy(net, train.images, train.labels),
            "test_acc": classifier_accuracy(net, test.images, test.labels),
        })

    stage(out, "classifier", ["clf.ckpt", "clf_summary.txt"], do_clf)
    clf, _, _ = load_checkpoint(out / "clf.ckpt", expect_kind="classifier")
    log("clf test acc:", load_kv(out / "clf_summary.txt")["test_acc"])

    # -------------------------------------------------------------- two EBMs
    def make_ebm_stage(tag, switch_step):
        def do():
            cfg = TrainConfig(total_steps=20000, switch_step=switch_step,
                              langevin_steps=100, tau=TAU)
            net = make_net(EBM_PRESET, dtype=np.float32)
            net.initialize(Rng(MASTER_SEED, "ebm_init"))
            net, _ = train_ebm(net, train.images, cfg,
                               Rng(MASTER_SEED, "ebm_train"),
                               log_path=out / f"ebm_{tag}_train_log.csv",
                               progress=1000)
            phase = 1 if cfg.switch_step <= cfg.total_steps else 0
            save_checkpoint(net.astype(np.float64), out / f"ebm_{tag}.ckpt",
                            step=cfg.total_steps, phase=phase)
        return do

    stage(out, "ebm-convergent",
          ["ebm_convergent.ckpt", "ebm_convergent_train_log.csv"],
          make_ebm_stage("convergent", 8000))
    stage(out, "ebm-adamonly",
          ["ebm_adamonly.ckpt", "ebm_adamonly_train_log.csv"],
          make_ebm_stage("adamonly", 20001))

    ebm, _, _ = load_checkpoint(out / "ebm_convergent.ckpt",
                                expect_kind="energy", dtype=np.float32)
    ebm2, _, _ = load_checkpoint(out / "ebm_adamonly.ckpt",
                                 expect_kind="energy", dtype=np.float32)

    acfg = AttackConfig()           # linf, eps 8/255, alpha 2/255, N=50,
                                    # H_adv=15, H_def=150, 5 restarts

    # ----------------------------------------------------- transfer + energy
    def do_transfer():
        adv, summary = evaluate_transfer(
            ebm, clf, images, labels, acfg, [10, K_DEFENSE], TAU,
            acfg.h_def, MASTER_SEED, progress=1)
        np.save(out / "transfer_adv.npy", adv)
        write_kv(out / "transfer_summary.txt", summary)

    stage(out, "transfer", ["transfer_summary.txt", "transfer_adv.npy"],
          do_transfer)

    def do_energies():
        adv = np.load(out / "transfer_adv.npy")
        noise = Rng(MASTER_SEED, "noise_set").uniform(images.shape)
        rows, summary = energy_stats(
            ebm, {"natural": images, "adversarial": adv, "noise": noise})
        write_csv(out / "energies.csv", ENERGY_HEADER, rows)
        flat = {f"{name}_{stat}": val for name, stats in summary.items()
                for stat, val in stats.items()}
        write_kv(out / "energies_summary.txt", flat)

    stage(out, "energies", ["energies.csv", "energies_summary.txt"], do_energies)

    # ----------------------------------------------------------- fid + chaos
    def do_fid():
        rows = fid_over_steps(ebm, ebm2, clf, train.images[:200],
                              test.images[:200],
                              [0, 10, 100, 500, 1000, 1500, 2000],
                              TAU, MASTER_SEED, progress=1)
        write_csv(out / "fid.csv", FID_HEADER, rows)

    stage(out, "fid", ["fid.csv"], do_fid)

    def do_lyapunov():
        cfg = LyapunovConfig(etas=default_eta_grid(21, 0.05, 5.0),
                             t_steps=5000, burn_in=500, tau=TAU)
        rows, flags = lyapunov(ebm.astype(np.float64), cfg, test.images[0],
                               Rng(MASTER_SEED, "lyapunov"))
        write_csv(out / "lyapunov.csv", LYAPUNOV_HEADER, rows)
        log("lyapunov underflow flags:", int(flags.sum()))

    stage(out, "lyapunov", ["lyapunov.csv"], do_lyapunov)

    # -------------------------------------- natural accuracy of both models
    def natural_defense_acc(net, tag):
        lcfg = LangevinConfig(tau=TAU, steps=K_DEFENSE)
        preds = np.empty(len(test), dtype=np.int64)
        chunk = max(1, 4096 // acfg.h_def)
        for s in range(0, len(test), chunk):
            part = slice(s, min(s + chunk, len(test)))
            keys = derive_keys(MASTER_SEED, "natacc", tag,
                               np.arange(part.start, part.stop)[:, None],
                               np.arange(acfg.h_def)[None, :])
            mean, _, _ = eot_logits_batch(net, clf, images[part], acfg.h_def,
                                          lcfg, keys)
            preds[part] = mean.argmax(axis=1)
        return float((preds == labels).mean())

    def do_ablation():
        conv = natural_defense_acc(ebm, "convergent")
        log("convergent natural acc @K=1500:", conv)
        adam = natural_defense_acc(ebm2, "adamonly")
        log("adam-only natural acc @K=1500:", adam)
        write_kv(out / "ablation_natural.txt", {
            "convergent_natural_acc_k1500": conv,
            "adamonly_natural_acc_k1500": adam,
        })

    stage(out, "ablation-natural", ["ablation_natural.txt"], do_ablation)

    # --------------------------------------------------- adaptive BPDA+EOT
    def make_bpda_stage(k):
        def do():
            lcfg = LangevinConfig(tau=TAU, steps=k)
            records, summary = evaluate_defense(
                ebm, clf, images, labels, acfg, lcfg,
                MASTER_SEED, progress=1)
            write_report_csv(out / f"bpda_k{k}_report.csv", records, summary)
            write_kv(out / f"bpda_k{k}_summary.txt", summary)
        return do

    stage(out, "bpda-k100", ["bpda_k100_report.csv", "bpda_k100_summary.txt"],
          make_bpda_stage(100))
    stage(out, f"bpda-k{K_DEFENSE}",
          [f"bpda_k{K_DEFENSE}_report.csv", f"bpda_k{K_DEFENSE}_summary.txt"],
          make_bpda_stage(K_DEFENSE))

    log("all stages complete")


if __name__ == "__main__":
    main()
