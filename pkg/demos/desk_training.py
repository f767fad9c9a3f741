# Train the small desk-profile network on synthetic phantoms and score it.
#
#   python3 demos/desk_training.py [max_steps] [out_dir]
#
# The same run through the command line:
#   autofocus gen-phantoms -c phantoms.cfg -n 5 -o data
#   autofocus train -c train.cfg -o run
#   autofocus eval -w run/final.afnw -m data/manifest.txt

import sys
import time
from dataclasses import replace

import numpy as np

from autofocus.data_io import PhantomSpec, generate_phantom, normalize
from autofocus.models import param_count
from autofocus.training import PROFILES, evaluate, train

max_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
out_dir = sys.argv[2] if len(sys.argv) > 2 else "desk_run"

spec = PhantomSpec()
volumes = [normalize(generate_phantom(spec, i)) for i in range(5)]
for v in volumes:
    counts = np.bincount(v.labels.ravel(), minlength=spec.num_classes)
    print(v.id, v.image.shape, "voxels per class:", counts.tolist())

cfg = replace(PROFILES["desk"], out_dir=out_dir)
print(f"\n{cfg.arch}, channels {cfg.channels}, rates {cfg.rates}, "
      f"{param_count(cfg.arch_spec(), 'all')['total']} parameters")
print(f"stop when the mean loss over {cfg.loss_window} steps drops below {cfg.target_loss}")

t0 = time.perf_counter()
trainer = train(cfg, volumes, log=lambda r: print(f"  epoch {r['epoch']:3d} step {r['step']:4d} "
                                                  f"loss {r['loss']:.4f} lr {r['lr']:g}"),
                max_steps=max_steps)
print(f"{trainer.step_count} steps in {time.perf_counter() - t0:.0f}s, "
      f"converged at step {trainer.converged_step}")

result = evaluate(trainer.model, volumes, cfg.segment, cfg.eval_overlap, spec.class_names)
print()
print(result.csv)
print("mean foreground dice:", round(result.mean_dice(), 4))
print("checkpoints in", out_dir)
