"""Train a small convergent EBM and watch purification undo an attack.

A reduced-scale walkthrough of the core pipeline (runs in a few minutes on
one CPU core):

1. generate the synthetic glyph dataset and train the base classifier;
2. train an energy-based model with the Adam->SGD switch so that long-run
   Langevin samples stay realistic (convergent learning);
3. craft a transfer-PGD adversarial image against the base classifier;
4. purify it with long-run Langevin dynamics and classify with the
   expectation-over-transformation (EOT) defense.

The adversarial image fools the undefended classifier; after purification
the EOT label flips back to the true class for most inputs.
"""

import numpy as np

from purifybench import tensor as T
from purifybench.attack import AttackConfig, grad_pgd, project, random_init, step_direction
from purifybench.data import CLASS_NAMES, generate_glyphs
from purifybench.defense import EotConfig, eot_label, eot_logits
from purifybench.nets import make_net
from purifybench.rng import Rng
from purifybench.sampler import LangevinConfig
from purifybench.trainer import TrainConfig, classifier_accuracy, train_classifier, train_ebm

SEED = 7

train = generate_glyphs(100, SEED, "train")
test = generate_glyphs(20, SEED, "test")

print("== base classifier ==")
clf = make_net("clf-desk16").initialize(Rng(SEED, "clf_init"))
clf = train_classifier(clf, train.images, train.labels, epochs=10, lr=0.01,
                       rng=Rng(SEED, "clf_train"))
print("held-out accuracy:", classifier_accuracy(clf, test.images, test.labels))

print("== convergent EBM (Adam -> SGD switch) ==")
cfg = TrainConfig(total_steps=2000, switch_step=1200, langevin_steps=100)
ebm = make_net("energy-mini16", dtype=np.float32).initialize(Rng(SEED, "ebm_init"))
ebm, rows = train_ebm(ebm, train.images, cfg, Rng(SEED, "ebm_train"), progress=500)
print(f"final energies: positive {rows[-1][2]:.1f}, negative {rows[-1][3]:.1f}")

print("== transfer PGD against the base classifier ==")
acfg = AttackConfig()                       # linf, eps 8/255, alpha 2/255
x0 = test.images[:8]
y0 = test.labels[:8]
x = np.stack([random_init(x0[i], acfg.epsilon, acfg.norm, Rng(SEED, "init", i))
              for i in range(8)])
for _ in range(acfg.attacks):
    g = grad_pgd(clf, x, y0)
    x = project(x + acfg.alpha * step_direction(g, acfg.norm),
                x0, acfg.epsilon, acfg.norm)
base_pred = clf.logits(T.Tensor(x)).data.argmax(axis=1)
print("base classifier on adversarial inputs:",
      f"{(base_pred == y0).mean():.2f} accuracy")

print("== purification + EOT defense ==")
ecfg = EotConfig(replicates=20, langevin=LangevinConfig(tau=0.01, steps=800))
correct = 0
for i in range(8):
    est = eot_logits(ebm, clf, x[i], ecfg, Rng(SEED, "purify", i))
    label = eot_label(est)
    correct += label == y0[i]
    print(f"image {i}: true {CLASS_NAMES[y0[i]]:6s}  "
          f"base says {CLASS_NAMES[base_pred[i]]:6s}  "
          f"defense says {CLASS_NAMES[label]}")
print(f"defended accuracy: {correct}/8")
