# Where does the network look far, and where near?
#
# Phantoms of 64^3 get one very large and one very small copy of the same
# class.  After a short training run, the attention on the widest rate is
# compared inside the two.
#
#   python3 demos/attention_maps.py [steps] [maps_dir]

import sys
from dataclasses import replace

import numpy as np

from autofocus.data_io import PhantomSpec, generate_phantom, normalize, phantom_shapes
from autofocus.training import PROFILES, Trainer, export_attention

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
maps_dir = sys.argv[2] if len(sys.argv) > 2 else "attention_maps"

spec = PhantomSpec(grid=(64, 64, 64), scale_probe=1, seed=21)
cfg = replace(PROFILES["desk"], target_loss=None, seed=1)
trainer = Trainer(cfg, [normalize(generate_phantom(spec, i)) for i in range(4)])
trainer.run(max_steps=steps)
print(f"trained {steps} steps, last loss {trainer.losses[-1]:.4f}")

model = trainer.model
layer = max(model.autofocus_layers())
held_out = normalize(generate_phantom(spec, 100))
paths = export_attention(model, held_out, layer, maps_dir)
print("wrote", *[p.name for p in paths], sep="\n  ")

lam = model.autofocus_layers()[layer].last_attention[0]
zz, yy, xx = np.meshgrid(*[np.arange(n) for n in spec.grid], indexing="ij")
print(f"\nmean attention per rate {cfg.rates} inside each probe-class structure:")
for s in phantom_shapes(spec, 100):
    if s.label != spec.scale_probe:
        continue
    inside = sum(((g - c) / r) ** 2 for g, c, r in zip((zz, yy, xx), s.center, s.radii)) <= 1
    means = lam[:, inside].mean(axis=1)
    print(f"  radius {max(s.radii):5.1f}: {np.round(means, 3)}")
