# A single autofocus layer, poked at from the outside.
#
#   python3 demos/autofocus_layer.py

import numpy as np

from autofocus import autodiff as ad
from autofocus.layers import AutofocusConfig, AutofocusLayer, ConvSpec, conv3d

rng = np.random.default_rng(0)
x = rng.standard_normal((1, 8, 16, 16, 16))

cfg = AutofocusConfig(in_channels=8, out_channels=6, rates=(1, 2, 4, 8))
layer = AutofocusLayer(cfg, "af", rng)
print("rates:", cfg.rates, " attention channels:", cfg.attention_mid_channels)
print("parameters:")
for p in layer.parameters():
    print(f"  {p.name:28s} {p.value.shape}")

out = layer(x)
lam = layer.last_attention
print("\noutput", out.shape, " attention", lam.shape)

# the last attention conv starts at zero, so every scale gets the same weight
print("fresh attention, min/max:", lam.min(), lam.max(), " (1/K =", 1 / cfg.K, ")")
print("per-voxel sum, worst deviation from 1:", np.abs(lam.sum(axis=1) - 1).max())

# forcing the attention to one scale turns the layer into a plain dilated conv
w, b = layer.conv.kernel.value, layer.conv.bias.value
for k, rate in enumerate(cfg.rates):
    one_hot = np.zeros_like(lam)
    one_hot[:, k] = 1
    forced = layer(x, attention=one_hot).value
    plain = conv3d(x, ConvSpec(8, 6, 3, rate), w, b).value
    print(f"one-hot on rate {rate}: max diff vs dilated conv = {np.abs(forced - plain).max():.1e}")

# nudge the attention head so scales start to differ
layer.att2.kernel.value[...] = rng.standard_normal(layer.att2.kernel.value.shape)
layer(x)
lam = layer.last_attention
print("\nafter randomising the head, mean weight per rate:",
      np.round(lam.mean(axis=(0, 2, 3, 4)), 3))

# the shared kernel collects gradient from all four branches at once
loss = ad.mean_all(ad.mul(layer(x), layer(x)))
grads = ad.backward(loss, layer.parameters())
for name, g in grads.grads.items():
    print(f"  |grad {name}| = {np.linalg.norm(g):.4f}")
