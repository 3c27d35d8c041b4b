import hashlib
from itertools import combinations

import numpy as np
import pytest

from hysp_lab.data import (DEFAULT_BASE_POSE, AugmentationConfig, SkeletonSequence, SyntheticClassSpec,
                           amplitude_classes, augment_extreme, augment_normal, axis_mask, crop, generate_dataset,
                           load_dataset, make_view_pair, save_dataset, shear, stream, temporal_flip, temporal_resize)
from hysp_lab.errors import CorruptFile, InvalidInput


class TestGenerate:
    def test_constant_sequence(self):
        spec = SyntheticClassSpec(0, 0.0, noise_sigma=0.0)
        (s,) = generate_dataset([spec], 1, 6, seed=3)
        expected = s.actor_scale * DEFAULT_BASE_POSE[:, None, :]
        assert np.allclose(s.coords, np.broadcast_to(expected, (3, 6, 8)), atol=1e-6)
        assert 0.8 <= s.actor_scale <= 1.2

    def test_same_seed_identical(self):
        a = generate_dataset(amplitude_classes(), 5, 10, seed=11)
        b = generate_dataset(amplitude_classes(), 5, 10, seed=11)
        assert all(np.array_equal(x.coords, y.coords) and x.actor_scale == y.actor_scale for x, y in zip(a, b))

    def test_shapes(self):
        ds = generate_dataset(amplitude_classes(), 100, 50, seed=0)
        assert len(ds) == 300
        assert {s.coords.shape for s in ds} == {(3, 50, 8)}
        assert sorted(s.sample_id for s in ds) == list(range(300))

    def test_motion_needs_moving_joint(self):
        spec = SyntheticClassSpec(0, 0.5, moving_joint_mask=(False,) * 8)
        with pytest.raises(InvalidInput):
            generate_dataset([spec], 1, 4, seed=0)

    def test_separability_grows_with_amplitude_gap(self):
        amps = (0.0, 0.05, 0.3, 1.0)
        ds = generate_dataset(amplitude_classes(amps), 40, 20, seed=5)
        # per-sample motion energy (temporal std) as the coordinate summary
        feat = {c: np.array([s.coords.std(axis=1).ravel() for s in ds if s.class_id == c]) for c in range(4)}
        pairs = sorted(combinations(range(4), 2), key=lambda p: abs(amps[p[0]] - amps[p[1]]))
        dist = [np.linalg.norm(feat[i].mean(0) - feat[j].mean(0)) for i, j in pairs]
        gaps = [abs(amps[i] - amps[j]) for i, j in pairs]
        for (g1, d1), (g2, d2) in combinations(zip(gaps, dist), 2):
            if g2 > g1:
                assert d2 > d1

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInput):
            SkeletonSequence(np.full((3, 4, 8), np.nan), 0, 0)


class TestResize:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 7, 8))
        assert np.array_equal(temporal_resize(x, 7), x)

    def test_ramp(self):
        x = np.zeros((3, 2, 1))
        x[:, 1] = 1.0
        assert np.allclose(temporal_resize(x, 5)[0, :, 0], [0, 0.25, 0.5, 0.75, 1.0])

    def test_round_trip_smooth(self):
        t = np.arange(20) / 20
        amp = 0.3
        x = np.broadcast_to(amp * np.sin(2 * np.pi * 1.5 * t)[None, :, None], (3, 20, 8)).copy()
        back = temporal_resize(temporal_resize(x, 50), 20)
        assert np.max(np.abs(back - x)) < 0.05 * amp

    def test_too_short(self):
        with pytest.raises(InvalidInput):
            temporal_resize(np.zeros((3, 5, 8)), 1)


class TestAugment:
    def test_shear_crop_identity(self, rng):
        x = rng.standard_normal((3, 10, 8))
        assert np.allclose(crop(shear(x, 0.0, rng), (1.0, 1.0), rng), x)

    def test_shear_keeps_shape(self, rng):
        assert shear(rng.standard_normal((3, 10, 8)), 0.5, rng).shape == (3, 10, 8)

    def test_same_stream_same_result(self, rng):
        x = rng.standard_normal((3, 10, 8))
        cfg = AugmentationConfig()
        a = augment_extreme(x, cfg, stream(1, 1, 42, 0))
        b = augment_extreme(x, cfg, stream(1, 1, 42, 0))
        assert np.array_equal(a, b)

    def test_identity_config(self, rng):
        x = rng.standard_normal((3, 10, 8))
        cfg = AugmentationConfig.identity()
        assert np.allclose(augment_extreme(x, cfg, rng), x)
        assert np.allclose(augment_normal(x, cfg, rng), x)

    def test_temporal_flip_involution(self, rng):
        x = rng.standard_normal((3, 10, 8))
        assert np.array_equal(temporal_flip(temporal_flip(x, 1.0, rng), 1.0, rng), x)

    def test_axis_mask_zeroes_one_row(self, rng):
        x = rng.standard_normal((3, 10, 8))
        out = axis_mask(x, 1.0, rng)
        assert sum(bool(np.any(row)) for row in out) == 2

    def test_bad_probability(self):
        with pytest.raises(InvalidInput):
            AugmentationConfig(axis_mask_prob=1.5)


class TestViewPair:
    def test_degenerate_config(self):
        (s,) = generate_dataset(amplitude_classes((0.3,)), 1, 10, seed=0)
        on, tg = make_view_pair(s, AugmentationConfig.identity(), 0, 0)
        assert np.allclose(on, s.coords) and np.allclose(tg, s.coords)

    def test_views_differ(self):
        ds = generate_dataset(amplitude_classes(), 34, 10, seed=0)[:100]
        cfg = AugmentationConfig()
        digest = lambda a: hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()  # noqa: E731
        pairs = [make_view_pair(s, cfg, 0, 0) for s in ds]
        assert all(digest(a) != digest(b) for a, b in pairs)

    def test_deterministic_per_key(self):
        (s,) = generate_dataset(amplitude_classes((0.3,)), 1, 10, seed=0)
        cfg = AugmentationConfig()
        a, b = make_view_pair(s, cfg, 4, 2), make_view_pair(s, cfg, 4, 2)
        c = make_view_pair(s, cfg, 4, 3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])


class TestCache:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(amplitude_classes(), 3, 6, seed=2)
        save_dataset(tmp_path / "d.bin", ds, 2)
        back, header = load_dataset(tmp_path / "d.bin")
        assert header["seed"] == 2 and header["classes"] == 3
        assert all(np.array_equal(a.coords, b.coords) and a.class_id == b.class_id for a, b in zip(ds, back))

    def test_corrupt(self, tmp_path):
        p = tmp_path / "d.bin"
        p.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(CorruptFile):
            load_dataset(p)

    def test_truncated(self, tmp_path):
        ds = generate_dataset(amplitude_classes(), 2, 6, seed=2)
        p = tmp_path / "d.bin"
        save_dataset(p, ds, 2)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(CorruptFile):
            load_dataset(p)
