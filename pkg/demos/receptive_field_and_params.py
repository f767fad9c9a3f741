# How big is each network, and how far does it see?
#
#   python3 demos/receptive_field_and_params.py

from autofocus.models import (REPORTED_PARAMS, afn, arch_by_name, attention_head_count, basic,
                              param_count, receptive_field)

kw = dict(in_channels=4, num_classes=5)

print("receptive field per hidden layer (voxels per axis)")
print("layer  basic   afn1      afn6")
rb, r1, r6 = receptive_field(basic(**kw)), receptive_field(afn(1, **kw)), receptive_field(afn(6, **kw))
for a, b, c in zip(rb[:8], r1[:8], r6[:8]):
    print(f"{a.layer:5d}  {a.phi[0]:5d}  {b.phi_min[0]:3d}..{b.phi_max[0]:<3d}"
          f"  {c.phi_min[0]:3d}..{c.phi_max[0]:<3d}")

# one autofocus layer covers every rate with one kernel, so the extra cost
# is only the small attention head
print("\nattention head for 50 channels and 4 rates:", attention_head_count(50, 4))

print("\nkernel parameters, ours vs the published table")
for name in ("basic", "afn1", "afn2", "afn3", "afn4", "afn5", "afn6", "aspp-c", "aspp-s"):
    n = param_count(arch_by_name(name, **kw))["total"]
    reported = REPORTED_PARAMS.get(name)
    note = f"{reported:9d}  {(n - reported) / reported:+7.2%}" if reported else ""
    print(f"  {name:7s} {n:9d}  {note}")

base = param_count(basic(**kw))["total"]
for n in range(1, 7):
    extra = param_count(afn(n, **kw))["total"] - base
    heads = sum(attention_head_count(l.in_channels, 4) for l in basic(**kw).hidden[8 - n:])
    print(f"afn{n} - basic = {extra:6d}   sum of {n} attention heads = {heads:6d}")
