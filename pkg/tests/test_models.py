import numpy as np
import pytest

from autofocus.models import (ArchSpec, LayerSpec, Model, WeightFileError, afn, arch_by_name,
                              aspp, attention_head_count, basic, build, load_weights,
                              param_count, receptive_field, save_weights)

SMALL = (4, 4, 6, 6, 6, 6, 8, 8)


def test_arch_shapes():
    b = basic()
    assert [l.kind for l in b.layers] == ["conv"] * 8 + ["classifier"]
    assert [l.dilation for l in b.hidden] == [1, 1, 2, 2, 2, 2, 2, 2]
    assert [l.residual_group for l in b.hidden] == [None, None, 0, 0, 1, 1, 2, 2]
    a4 = afn(4)
    assert [l.kind for l in a4.hidden] == ["conv"] * 4 + ["autofocus"] * 4
    assert a4.hidden[-1].rates == (2, 6, 10, 14)
    assert arch_by_name("aspp-c").layers[-2].fusion == "concat"


def test_arch_validation():
    with pytest.raises(ValueError, match="channels"):
        ArchSpec("x", 1, 2, (LayerSpec("conv", 1, 4), LayerSpec("classifier", 3, 2, kernel=1)))
    with pytest.raises(ValueError, match="classifier"):
        ArchSpec("x", 1, 2, (LayerSpec("conv", 1, 2),))
    with pytest.raises(ValueError):
        afn(7)


def test_build_is_deterministic():
    a, b = build(afn(2, channels=SMALL), seed=3), build(afn(2, channels=SMALL), seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.name == q.name and p.value.tobytes() == q.value.tobytes()
    c = build(afn(2, channels=SMALL), seed=4)
    assert any(p.value.tobytes() != q.value.tobytes() for p, q in zip(a.parameters(), c.parameters()))


def test_afn1_adds_one_attention_head():
    base = {p.name for p in build(basic(channels=SMALL)).parameters()}
    a1 = {p.name for p in build(afn(1, channels=SMALL)).parameters()}
    renamed = {n.replace("layer8.conv.", "layer8.af.conv_shared.") for n in base}
    assert renamed <= a1
    extra = a1 - renamed
    assert extra == {f"model.layer8.af.attention.conv{i}.{k}" for i in (1, 2) for k in ("kernel", "bias")}


def test_fresh_model_attention_is_uniform(rng):
    model = build(afn(3, channels=SMALL, rates=(1, 2, 3)), seed=0)
    model.forward(rng.standard_normal((1, 1, 8, 8, 8)))
    maps = model.attention_maps
    assert sorted(maps) == [6, 7, 8]
    for lam in maps.values():
        assert np.all(lam == 1 / 3)


def test_unbatched_forward_matches_batched(rng):
    model = build(afn(2, channels=SMALL, rates=(1, 2), norm=False))
    x = rng.standard_normal((1, 6, 6, 6))
    assert np.array_equal(model(x).value, model(x[None]).value[0])


def test_valid_padding_shape_flow(rng):
    arch = basic(channels=(2,) * 8, padding="valid", norm=False)
    out = build(arch)(rng.standard_normal((1, 1, 75, 75, 75)))
    assert out.shape == (1, 2, 47, 47, 47)


class TestReceptiveField:
    def test_single_conv(self):
        layers = [LayerSpec("conv", 1, 1), LayerSpec("classifier", 1, 1, kernel=1)]
        assert receptive_field(layers)[0].phi == (3, 3, 3)

    def test_basic(self):
        rf = receptive_field(basic())
        assert rf[1].phi == (5, 5, 5)
        assert rf[7].phi == (29, 29, 29)
        assert rf[8].phi == (29, 29, 29)  # 1x1x1 classifier adds nothing

    def test_autofocus_step(self):
        rf = receptive_field(afn(1))
        assert rf[7].phi_max[0] - rf[6].phi_max[0] == 28
        assert rf[7].phi_min[0] - rf[6].phi_min[0] == 4

    def test_stride_scales_growth(self):
        layers = [LayerSpec("conv", 1, 1, stride=2), LayerSpec("conv", 1, 1, dilation=2),
                  LayerSpec("classifier", 1, 1, kernel=1)]
        rf = receptive_field(layers)
        assert rf[1].eta == (2, 2, 2)
        assert rf[1].phi == (3 + 2 * 2 * 2,) * 3

    def test_empirical_probe(self, rng):
        layers = (LayerSpec("conv", 1, 2, padding="valid", norm=False),
                  LayerSpec("conv", 2, 2, dilation=2, padding="valid", norm=False),
                  LayerSpec("conv", 2, 2, dilation=3, padding="valid", norm=False),
                  LayerSpec("classifier", 2, 1, kernel=1, norm=False))
        model = Model(ArchSpec("probe", 1, 1, layers))
        for p in model.parameters():
            p.value[...] = np.abs(p.value) + 0.1 if p.name.endswith("kernel") else 0.0
        x = rng.uniform(0.5, 1.0, (1, 1, 31, 31, 31))
        base = model(x).value
        x[0, 0, 15, 15, 15] += 1.0
        changed = np.argwhere(model(x).value[0, 0] != base[0, 0])
        extent = changed.max(axis=0) - changed.min(axis=0) + 1
        assert tuple(extent) == receptive_field(layers)[2].phi == (13, 13, 13)


class TestParamCount:
    def test_single_conv_kernel(self):
        layers = (LayerSpec("conv", 40, 40), LayerSpec("classifier", 40, 2, kernel=1))
        table = param_count(ArchSpec("c", 40, 2, layers))
        assert table["model.layer1.conv.kernel"] == 43_200

    @pytest.mark.parametrize("mode", ["kernels_only", "all"])
    @pytest.mark.parametrize("n", range(1, 7))
    def test_afn_minus_basic_is_attention_heads(self, n, mode):
        kw = dict(in_channels=4, num_classes=5)
        delta = param_count(afn(n, **kw), mode)["total"] - param_count(basic(**kw), mode)["total"]
        converted = basic(**kw).hidden[8 - n:]
        heads = sum(attention_head_count(l.in_channels, 4, mode) for l in converted)
        assert delta == heads

    @pytest.mark.parametrize("mode, extra", [("kernels_only", 0), ("all", 2)])
    def test_K_changes_only_conv2(self, mode, extra):
        k2 = param_count(afn(1, channels=SMALL, rates=(2, 6)), mode)
        k4 = param_count(afn(1, channels=SMALL, rates=(2, 6, 10, 14)), mode)
        assert k4["model.layer8.af.conv_shared.kernel"] == k2["model.layer8.af.conv_shared.kernel"]
        mid = SMALL[-2] // 2
        assert k4["total"] - k2["total"] == 2 * mid + extra

    def test_default_plan_totals(self):
        kw = dict(in_channels=4, num_classes=5)
        assert param_count(basic(**kw))["total"] == 311_290
        assert param_count(afn(1, **kw))["total"] - param_count(basic(**kw))["total"] == 33_850

    def test_aspp_sum_counts_every_branch(self):
        kw = dict(in_channels=4, num_classes=5)
        diff = param_count(aspp("sum", **kw))["total"] - param_count(basic(**kw))["total"]
        assert diff == 4 * 27 * 50 * 50


class TestWeights:
    def test_round_trip_bitwise(self, tmp_path, rng):
        arch = afn(2, channels=SMALL, rates=(1, 2))
        model = build(arch, seed=5)
        x = rng.standard_normal((2, 1, 6, 6, 6))
        model(x, "train")
        before = model(x, "eval").value
        path = tmp_path / "w.afnw"
        save_weights(model, path)
        loaded = load_weights(path, arch)
        assert loaded(x, "eval").value.tobytes() == before.tobytes()
        for name, value in model.state().items():
            assert loaded.state()[name].tobytes() == value.tobytes()

    def test_float32_round_trip(self, tmp_path):
        arch = afn(1, channels=SMALL, rates=(1, 2))
        model = build(arch, seed=1, dtype=np.float32)
        save_weights(model, tmp_path / "w.afnw")
        loaded = load_weights(tmp_path / "w.afnw", arch, np.float32)
        for p, q in zip(model.parameters(), loaded.parameters()):
            assert p.value.dtype == q.value.dtype == np.float32
            assert p.value.tobytes() == q.value.tobytes()

    def test_wrong_arch_rejected(self, tmp_path):
        save_weights(build(basic(channels=SMALL, num_classes=3)), tmp_path / "w.afnw")
        with pytest.raises(WeightFileError, match="hash"):
            load_weights(tmp_path / "w.afnw", basic(channels=SMALL, num_classes=4))

    def test_truncated_and_version(self, tmp_path):
        arch = basic(channels=SMALL)
        path = tmp_path / "w.afnw"
        save_weights(build(arch), path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(WeightFileError, match="truncated"):
            load_weights(path, arch)
        path.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
        with pytest.raises(WeightFileError, match="version"):
            load_weights(path, arch)
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(WeightFileError, match="magic"):
            load_weights(path, arch)

    def test_file_size(self, tmp_path):
        model = build(afn(2, channels=SMALL, rates=(1, 2)))
        path = tmp_path / "w.afnw"
        save_weights(model, path)
        state = model.state()
        records = sum(2 + len(n) + 1 + 4 * v.ndim + 8 * v.size for n, v in state.items())
        assert path.stat().st_size == 4 + 4 + 32 + 8 + records
        n_all = param_count(model, "all")["total"]
        buffers = sum(v.size for v in model.buffers().values())
        assert 8 * (n_all + buffers) < path.stat().st_size < 8 * (n_all + buffers) + 100 * len(state)
