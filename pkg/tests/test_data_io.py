import numpy as np
import pytest
from scipy import stats

from autofocus.data_io import (ClassSpec, PhantomError, PhantomSpec, VolumeFormatError,
                               VolumeRecord, generate_phantom, load_phantom_spec, normalize,
                               phantom_shapes, read_manifest, read_volume, sample_segments,
                               write_manifest, write_volume)


@pytest.fixture
def phantom():
    return generate_phantom(PhantomSpec(grid=(40, 40, 40)), 0)


class TestNormalize:
    def test_moments(self, rng):
        vol = VolumeRecord(5 + 0.3 * rng.standard_normal((2, 10, 10, 10)), np.zeros((10, 10, 10)))
        out = normalize(vol).image.astype(np.float64)
        for ch in out:
            assert abs(ch.mean()) <= 1e-6 and abs(ch.var() - 1) <= 1e-6

    def test_idempotent_and_affine_invariant(self, rng):
        vol = VolumeRecord(rng.standard_normal((1, 8, 8, 8)), np.zeros((8, 8, 8)))
        once = normalize(vol)
        assert np.max(np.abs(normalize(once).image - once.image)) <= 1e-6
        shifted = VolumeRecord(3.0 * vol.image + 7.0, vol.labels)
        assert np.max(np.abs(normalize(shifted).image - once.image)) <= 1e-5

    def test_nonzero_mask(self, rng):
        img = np.zeros((1, 8, 8, 8))
        img[:, 2:6, 2:6, 2:6] = 4 + rng.standard_normal((1, 4, 4, 4))
        out = normalize(VolumeRecord(img, np.zeros((8, 8, 8))), "nonzero").image
        inside = out[:, 2:6, 2:6, 2:6].astype(np.float64)
        assert abs(inside.mean()) <= 1e-6 and abs(inside.var() - 1) <= 1e-6
        assert np.count_nonzero(out) == 64

    def test_constant_volume_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            normalize(VolumeRecord(np.ones((1, 4, 4, 4)), np.zeros((4, 4, 4))))


class TestPhantom:
    def test_deterministic(self):
        spec = PhantomSpec(grid=(40, 40, 40), seed=3)
        a, b = generate_phantom(spec, 2), generate_phantom(spec, 2)
        assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
        assert generate_phantom(spec, 3).image.tobytes() != a.image.tobytes()

    def test_all_classes_present_and_centres_labelled(self):
        spec = PhantomSpec(grid=(40, 40, 40))
        vol = generate_phantom(spec, 1)
        assert set(np.unique(vol.labels)) == set(range(spec.num_classes))
        for s in phantom_shapes(spec, 1):
            centre = tuple(int(round(c)) for c in s.center)
            assert vol.labels[centre] == s.label

    def test_class_volumes_match_ellipsoids(self):
        spec = PhantomSpec(grid=(64, 64, 64), classes=(
            ClassSpec("a", (6, 9), 1.0, instances=2), ClassSpec("b", (5, 8), -1.0, instances=2)))
        for index in range(3):
            vol = generate_phantom(spec, index)
            shapes = phantom_shapes(spec, index)
            for label in (1, 2):
                analytic = sum(s.volume for s in shapes if s.label == label)
                counted = int((vol.labels == label).sum())
                assert abs(counted - analytic) <= 0.1 * analytic

    def test_scale_probe_instances(self):
        spec = PhantomSpec(grid=(64, 64, 64), scale_probe=1)
        radii = [max(s.radii) for s in phantom_shapes(spec, 0) if s.label == 1]
        assert min(radii) <= 4 and max(radii) >= 12

    def test_placement_failure_names_class(self):
        spec = PhantomSpec(grid=(16, 16, 16), classes=(ClassSpec("huge", (20, 22)),), max_tries=10)
        with pytest.raises(PhantomError, match="huge"):
            generate_phantom(spec)

    def test_spec_from_text(self, tmp_path):
        path = tmp_path / "p.cfg"
        path.write_text("[phantom]\ngrid = 48\nnoise = 0.3\nseed = 9\nscale_probe = 1\n\n"
                        "[class organ]\nradius = 4 9\nintensity = 2\ntexture_freq = 0.2\n"
                        "texture_amp = 0.5\ninstances = 3\n\n[class bone]\nradius = 3 5\n")
        spec = load_phantom_spec(path)
        assert spec.grid == (48, 48, 48) and spec.noise == 0.3 and spec.seed == 9
        assert spec.class_names == ["background", "organ", "bone"]
        assert spec.classes[0].radius == (4.0, 9.0) and spec.classes[0].instances == 3


class TestSegments:
    def test_shapes_and_content(self, phantom):
        segs = sample_segments(phantom, 16, 7, seed=0)
        assert len(segs) == 7
        for s in segs:
            assert s.image.shape == (1, 16, 16, 16)
            sl = tuple(slice(a, a + 16) for a in s.corner)
            assert np.array_equal(s.image, phantom.image[(slice(None),) + sl])
            assert np.array_equal(s.labels, phantom.labels[sl])
            assert phantom.labels[s.center] == s.center_class

    def test_full_size_batch_shape(self):
        vol = VolumeRecord(np.zeros((1, 128, 128, 128), np.float32), np.zeros((128,) * 3))
        segs = sample_segments(vol, 75, 7, class_balance=False, seed=1)
        assert [s.image.shape for s in segs] == [(1, 75, 75, 75)] * 7

    def test_seed_determinism(self, phantom):
        a = [s.corner for s in sample_segments(phantom, 16, 5, seed=11)]
        b = [s.corner for s in sample_segments(phantom, 16, 5, seed=11)]
        assert a == b

    def test_too_large(self, phantom):
        with pytest.raises(ValueError):
            sample_segments(phantom, 41, 1)

    def test_class_balance_uniform(self, phantom):
        n = 7000
        segs = sample_segments(phantom, 8, n, class_balance=True, seed=5)
        counts = np.bincount([phantom.labels[s.center] for s in segs], minlength=3)
        p = 1 / 3
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)
        assert stats.chisquare(counts).pvalue > 1e-3


class TestVolumeFiles:
    def test_round_trip(self, tmp_path, phantom):
        path = tmp_path / "v.afnv"
        vol = VolumeRecord(phantom.image, phantom.labels, (1.0, 0.5, 3.0), "v")
        write_volume(vol, path)
        back = read_volume(path)
        assert back.image.tobytes() == vol.image.tobytes()
        assert back.labels.tobytes() == vol.labels.tobytes()
        assert back.spacing == vol.spacing and back.id == "v"

    def test_bad_magic(self, tmp_path, phantom):
        path = tmp_path / "v.afnv"
        write_volume(phantom, path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(VolumeFormatError, match="magic"):
            read_volume(path)

    def test_size_mismatch(self, tmp_path, phantom):
        path = tmp_path / "v.afnv"
        write_volume(phantom, path)
        data = path.read_bytes()
        path.write_bytes(data[:-1])
        with pytest.raises(VolumeFormatError, match="truncated"):
            read_volume(path)
        path.write_bytes(data + b"\0")
        with pytest.raises(VolumeFormatError):
            read_volume(path)

    def test_dimension_overflow(self, tmp_path, phantom):
        path = tmp_path / "v.afnv"
        write_volume(phantom, path)
        data = bytearray(path.read_bytes())
        data[8:12] = (2 ** 31).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(VolumeFormatError, match="dimensions"):
            read_volume(path)

    def test_manifest(self, tmp_path):
        write_manifest(["a.afnv", "sub/b.afnv"], tmp_path / "m.txt")
        assert read_manifest(tmp_path / "m.txt") == [tmp_path / "a.afnv", tmp_path / "sub/b.afnv"]
