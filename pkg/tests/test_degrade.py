"""Synthetic scene generator and degradation operator tests.

Spectral assertions measure band energy through the package's own FFT
module, which the degradation code never touches, so they are independent
checks of each operator's frequency signature.
"""

import hashlib
import os

import numpy as np
import pytest

from omnirestore.degrade import (
    ALL_KINDS,
    Kind,
    apply_blood,
    apply_low_light,
    apply_smoke,
    gen_clean,
    load_manifest,
    make_dataset,
)
from omnirestore.engine import fft
from omnirestore.errors import ConfigError, ShapeError


def luminance(image: np.ndarray) -> np.ndarray:
    return image.mean(axis=0).astype(np.float64)


def dc_magnitude(image: np.ndarray) -> float:
    pair = fft.fft2(luminance(image))
    return float(np.hypot(pair.real[0, 0], pair.imag[0, 0]))


def band_fraction(image: np.ndarray, lo: float, hi: float,
                  base_lo: float = 0.0) -> float:
    plane = luminance(image)
    return float(fft.band_energy(plane, lo, hi)) / float(
        fft.band_energy(plane, base_lo, 1.0))


class TestGenClean:
    def test_fixed_seed_bitwise_reproducible(self):
        assert np.array_equal(gen_clean(42, 32, 32), gen_clean(42, 32, 32))

    def test_range_in_unit_interval(self):
        img = gen_clean(7, 32, 64)
        assert img.shape == (3, 32, 64)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_two_seeds_differ_meaningfully(self):
        mad = np.abs(gen_clean(0, 32, 32) - gen_clean(1, 32, 32)).mean()
        assert mad > 0.01

    def test_non_power_of_two_rejected_with_padding_hint(self):
        with pytest.raises(ConfigError, match="pad to 128"):
            gen_clean(0, 100, 64)


class TestLowLight:
    def test_identity_parameters(self):
        clean = gen_clean(3, 32, 32)
        sample = apply_low_light(clean, gain=1.0, gamma_curve=1.0, noise_sigma=0.0)
        assert np.array_equal(sample.degraded, clean)
        assert sample.kind is Kind.LOW_LIGHT

    def test_constant_image_arithmetic(self):
        clean = np.full((3, 16, 16), 0.5, dtype=np.float32)
        sample = apply_low_light(clean, gain=0.3, gamma_curve=1.4, noise_sigma=0.0)
        expected = (0.3 * 0.5) ** 1.4
        np.testing.assert_allclose(sample.degraded, expected, rtol=1e-6)

    def test_default_parameters_suppress_dc_bin(self):
        for seed in range(3):
            clean = gen_clean(seed, 64, 64)
            sample = apply_low_light(clean, seed=seed)
            assert dc_magnitude(sample.degraded) < dc_magnitude(clean)

    def test_mean_luminance_strictly_below_clean(self):
        clean = gen_clean(11, 64, 64)
        sample = apply_low_light(clean, seed=11)
        assert luminance(sample.degraded).mean() < luminance(clean).mean()

    @pytest.mark.parametrize("kwargs", [
        dict(gain=0.0), dict(gain=1.2), dict(gamma_curve=0.0),
        dict(noise_sigma=-0.1),
    ])
    def test_parameter_validation(self, kwargs):
        with pytest.raises(ConfigError):
            apply_low_light(gen_clean(0, 16, 16), **kwargs)


class TestSmoke:
    def test_full_transmission_is_identity(self):
        clean = gen_clean(4, 32, 32)
        sample = apply_smoke(clean, transmission=np.ones((32, 32)))
        assert np.array_equal(sample.degraded, clean)

    def test_zero_transmission_is_constant_veil(self):
        clean = gen_clean(4, 32, 32)
        sample = apply_smoke(clean, veil=0.7, transmission=np.zeros((32, 32)))
        assert np.all(sample.degraded == np.float32(0.7))

    def test_default_parameters_reduce_high_band_share(self):
        for seed in range(3):
            clean = gen_clean(seed, 64, 64)
            sample = apply_smoke(clean, seed=seed)
            assert band_fraction(sample.degraded, 0.15, 1.0) < \
                band_fraction(clean, 0.15, 1.0)

    def test_transmission_validation(self):
        clean = gen_clean(0, 16, 16)
        with pytest.raises(ConfigError):
            apply_smoke(clean, transmission=np.full((16, 16), 1.5))
        with pytest.raises(ShapeError):
            apply_smoke(clean, transmission=np.ones((8, 8)))
        with pytest.raises(ConfigError):
            apply_smoke(clean, veil=1.3)


class TestBlood:
    def test_zero_opacity_is_identity(self):
        clean = gen_clean(5, 32, 32)
        sample = apply_blood(clean, opacity=0.0)
        assert np.array_equal(sample.degraded, clean)

    def test_full_mask_full_opacity_is_constant_color(self):
        clean = gen_clean(5, 32, 32)
        sample = apply_blood(clean, opacity=1.0, mask=np.ones((32, 32)))
        assert np.all(np.ptp(sample.degraded, axis=(1, 2)) == 0.0)
        assert sample.degraded[0, 0, 0] > sample.degraded[1, 0, 0]

    def test_default_parameters_boost_low_band_share(self):
        # The DC bin is excluded so the veil of dominant brightness cannot
        # mask the redistribution toward low spatial frequencies.
        for seed in range(3):
            clean = gen_clean(seed, 64, 64)
            sample = apply_blood(clean, seed=seed)
            deg = band_fraction(sample.degraded, 0.01, 0.12, base_lo=0.01)
            ref = band_fraction(clean, 0.01, 0.12, base_lo=0.01)
            assert deg > ref

    def test_covered_fraction_recorded(self):
        sample = apply_blood(gen_clean(6, 32, 32), seed=6)
        assert 0.0 < sample.params["covered_fraction"] <= 1.0

    def test_validation(self):
        clean = gen_clean(0, 16, 16)
        with pytest.raises(ConfigError):
            apply_blood(clean, blob_count=0)
        with pytest.raises(ConfigError):
            apply_blood(clean, opacity=-0.2)


class TestNeutralIdentity:
    def test_all_operators_identity_at_neutral_parameters(self):
        clean = gen_clean(8, 32, 32)
        h, w = clean.shape[1:]
        neutral = [
            apply_low_light(clean, gain=1.0, gamma_curve=1.0, noise_sigma=0.0),
            apply_smoke(clean, transmission=np.ones((h, w))),
            apply_blood(clean, opacity=0.0),
        ]
        for sample in neutral:
            assert np.array_equal(sample.degraded, clean), sample.kind


class TestMakeDataset:
    def test_split_counts_and_balance(self, tmp_path):
        manifest = make_dataset(4, (3, 1), seed=7, out_dir=str(tmp_path), size=32)
        rows = load_manifest(manifest)
        assert len(rows) == 12
        train = [r for r in rows if r.split == "train"]
        test = [r for r in rows if r.split == "test"]
        assert len(train) == 9 and len(test) == 3
        for kind in ALL_KINDS:
            assert sum(r.kind is kind for r in train) == 3
            assert sum(r.kind is kind for r in test) == 1

    def test_same_seed_identical_artifacts(self, tmp_path):
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        m1 = make_dataset(2, (1, 1), seed=3, out_dir=d1, size=32)
        m2 = make_dataset(2, (1, 1), seed=3, out_dir=d2, size=32)

        def digest(root, rel):
            with open(os.path.join(root, rel), "rb") as fh:
                return hashlib.sha256(fh.read()).hexdigest()

        assert open(m1).read() == open(m2).read()
        for row in load_manifest(m1):
            assert digest(d1, row.clean_path) == digest(d2, row.clean_path)
            assert digest(d1, row.degraded_path) == digest(d2, row.degraded_path)

    def test_manifest_roundtrip_parses_params(self, tmp_path):
        manifest = make_dataset(1, (1, 0), seed=1, out_dir=str(tmp_path), size=32)
        rows = load_manifest(manifest)
        low_light = next(r for r in rows if r.kind is Kind.LOW_LIGHT)
        assert 0.25 <= low_light.params["gain"] <= 0.45
        blood = next(r for r in rows if r.kind is Kind.BLOOD)
        assert "covered_fraction" in blood.params

    def test_images_on_disk_match_shapes(self, tmp_path):
        from omnirestore.pngio import load_png

        manifest = make_dataset(1, (1, 0), seed=2, out_dir=str(tmp_path), size=32)
        for row in load_manifest(manifest):
            clean = load_png(os.path.join(str(tmp_path), row.clean_path))
            degraded = load_png(os.path.join(str(tmp_path), row.degraded_path))
            assert clean.shape == (3, 32, 32) == degraded.shape

    def test_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            make_dataset(0, (3, 1), seed=0, out_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            make_dataset(2, (0, 0), seed=0, out_dir=str(tmp_path))
