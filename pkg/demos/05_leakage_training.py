"""Why the value convolution must be causal.

Two copies of the toy model are trained on the copy task. The leaky one uses
a centred convolution window that can read the next input token, which is
exactly the training target. Its training loss collapses, yet once it has
to generate without a future, its accuracy sits near chance. The causal
model learns to copy for real.

Pass a step count to shorten the run, e.g. ``python 05_leakage_training.py 300``.
"""

import sys

from augla import init_model, train_synthetic
from augla.train import leakage_config

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
for leaky in (True, False):
    model = init_model(leakage_config(leaky))
    res = train_synthetic(model, task="copy", steps=steps, lr=0.3, n_train=96)
    curve = ", ".join(f"{res.losses[s]:.3f}" for s in range(0, steps, max(steps // 5, 1)))
    print(f"{'leaky ' if leaky else 'causal'}: loss {curve} -> {res.losses[-1]:.4f}; "
          f"teacher-forced acc {res.train_accuracy:.3f}; generated acc {res.eval_accuracy:.3f} "
          f"(chance {res.chance:.3f})")
