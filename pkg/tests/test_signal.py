import math

import numpy as np
import pytest

from scatter_sbi.forward import DetectorImage, ExperimentGeometry
from scatter_sbi.signal import (BeamstopMask, PAPER_BEAMSTOP, PAPER_CROPS,
                                clamp_count, extract_inplane, map_params_unit,
                                read_background_curve, reset_clamp_count)


def full_geometry():
    """The full-detector experimental setup: 512 x 1024 pixels of 50 um."""
    return ExperimentGeometry(
        wavelength=0.14073, incident_angle=math.radians(0.64), pixel_size=50.0,
        n_pixels_y=512, n_pixels_z=1024, detector_distance=1277.0,
        specular_y=10.75, specular_z=20.65, beam_intensity=1e13,
        constant_background=60.0)


def small_geometry():
    return ExperimentGeometry(
        wavelength=0.14073, incident_angle=math.radians(0.64), pixel_size=50.0,
        n_pixels_y=16, n_pixels_z=32, detector_distance=1277.0,
        specular_y=0.4, specular_z=0.8, beam_intensity=1e13,
        constant_background=60.0)


SMALL_MASK = BeamstopMask(z_lo=12, z_hi=15, lateral_halfwidth=4)


class TestExtractInplane:
    def test_full_geometry_length_359(self):
        geom = full_geometry()
        image = DetectorImage(np.full((1024, 512), 5.0), geom)
        sig = extract_inplane(image, PAPER_BEAMSTOP,
                              crop_low=PAPER_CROPS[0], crop_high=PAPER_CROPS[1])
        assert len(sig) == 359
        assert sig.part_boundary == PAPER_BEAMSTOP.z_lo - PAPER_CROPS[0]

    def test_constant_image_gives_ones(self):
        geom = small_geometry()
        image = DetectorImage(np.full((32, 16), 7.5), geom)
        sig = extract_inplane(image, SMALL_MASK, crop_low=2, crop_high=3)
        np.testing.assert_allclose(sig.values, 1.0)
        assert len(sig) == 32 - 4 - 2 - 3

    def test_single_bright_pixel_oracle(self):
        geom = small_geometry()
        arr = np.zeros((32, 16))
        arr[5, 8] = 1000.0  # inside part 1 and the center cut
        arr[20, 9] = 400.0  # inside part 2 and the center cut
        image = DetectorImage(arr, geom)
        sig = extract_inplane(image, SMALL_MASK, crop_low=2, crop_high=3)

        # scalar recomputation: the cut spans columns 4..11 (8 columns)
        width = 2 * SMALL_MASK.lateral_halfwidth
        prof1 = math.log10(1.0 + 1000.0) / width
        prof2 = math.log10(1.0 + 400.0) / width
        part1_rows = list(range(2, 12))
        part2_rows = list(range(16, 29))
        expected = np.zeros(len(part1_rows) + len(part2_rows))
        expected[part1_rows.index(5)] = 1.0  # prof1 / prof1
        expected[len(part1_rows) + part2_rows.index(20)] = 1.0
        np.testing.assert_allclose(sig.values, expected, atol=1e-15)
        assert sig.values[part1_rows.index(5)] == 1.0
        # unnormalized magnitudes differ but normalize to the same shape
        assert prof1 != prof2

    def test_scaling_keeps_argmax(self):
        geom = small_geometry()
        rng = np.random.default_rng(0)
        base = rng.uniform(0.0, 500.0, size=(32, 16))
        sig1 = extract_inplane(DetectorImage(base, geom), SMALL_MASK,
                               crop_low=2, crop_high=3)
        sig2 = extract_inplane(DetectorImage(base * 37.5, geom), SMALL_MASK,
                               crop_low=2, crop_high=3)
        b = sig1.part_boundary
        for lo, hi in ((0, b), (b, len(sig1))):
            assert (np.argmax(sig1.values[lo:hi])
                    == np.argmax(sig2.values[lo:hi]))

    def test_length_independent_of_intensity(self):
        geom = small_geometry()
        rng = np.random.default_rng(1)
        lengths = set()
        for _ in range(5):
            arr = rng.uniform(0.0, 1e5, size=(32, 16))
            sig = extract_inplane(DetectorImage(arr, geom), SMALL_MASK,
                                  crop_low=2, crop_high=3)
            lengths.add(len(sig))
        assert lengths == {32 - 4 - 2 - 3}

    def test_zero_image_stays_finite(self):
        geom = small_geometry()
        sig = extract_inplane(DetectorImage(np.zeros((32, 16)), geom),
                              SMALL_MASK, crop_low=2, crop_high=3)
        assert np.all(sig.values == 0.0)

    def test_background_subtraction_clamps(self):
        geom = small_geometry()
        image = DetectorImage(np.full((32, 16), 9.0), geom)
        bg = np.zeros(32)
        bg[2] = 10.0  # larger than log10(10) = 1.0 -> clamps to zero
        bg[3] = 0.5
        sig = extract_inplane(image, SMALL_MASK, background=bg,
                              crop_low=2, crop_high=3)
        assert sig.values[0] == 0.0
        assert sig.values[1] == pytest.approx(0.5 / 1.0)
        assert sig.values[2] == 1.0

    def test_identity_transform_and_sum_normalization(self):
        geom = small_geometry()
        image = DetectorImage(np.full((32, 16), 3.0), geom)
        sig = extract_inplane(image, SMALL_MASK, crop_low=2, crop_high=3,
                              transform="identity", normalization="sum")
        b = sig.part_boundary
        assert sig.values[:b].sum() == pytest.approx(1.0)
        assert sig.values[b:].sum() == pytest.approx(1.0)

    def test_empty_signal_error(self):
        geom = small_geometry()
        image = DetectorImage(np.ones((32, 16)), geom)
        with pytest.raises(ValueError):
            extract_inplane(image, BeamstopMask(0, 31, 4))

    def test_mask_outside_detector(self):
        geom = small_geometry()
        image = DetectorImage(np.ones((32, 16)), geom)
        with pytest.raises(ValueError):
            extract_inplane(image, BeamstopMask(10, 40, 4))

    def test_geometry_tag_recorded(self):
        geom = small_geometry()
        image = DetectorImage(np.ones((32, 16)), geom)
        sig = extract_inplane(image, SMALL_MASK, crop_low=2, crop_high=3)
        assert sig.geometry_tag == geom.tag()


class TestBeamstopMask:
    def test_validation(self):
        with pytest.raises(ValueError):
            BeamstopMask(5, 5, 4)
        with pytest.raises(ValueError):
            BeamstopMask(-1, 5, 4)
        with pytest.raises(ValueError):
            BeamstopMask(1, 5, 0)


class TestBackgroundFile:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "bg.txt"
        path.write_text("# parasitic curve\n0 1.5\n3 0.25\n", encoding="utf-8")
        curve = read_background_curve(path, 8)
        assert curve[0] == 1.5 and curve[3] == 0.25 and curve.sum() == 1.75

    def test_bad_rows(self, tmp_path):
        path = tmp_path / "bg.txt"
        path.write_text("0 1.0 extra\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_background_curve(path, 8)
        path.write_text("99 1.0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_background_curve(path, 8)


class TestMapParamsUnit:
    RANGES = np.array([[0.0, 10.0], [2.0, 4.0], [-1.0, 1.0]])

    def test_bounds_map_to_corners(self):
        lo = self.RANGES[:, 0]
        hi = self.RANGES[:, 1]
        np.testing.assert_allclose(map_params_unit(lo, self.RANGES, "to-unit"), 0.0)
        np.testing.assert_allclose(map_params_unit(hi, self.RANGES, "to-unit"), 1.0)
        mid = (lo + hi) / 2
        np.testing.assert_allclose(map_params_unit(mid, self.RANGES, "to-unit"), 0.5)

    def test_roundtrip_random(self):
        rng = np.random.default_rng(2)
        lo = self.RANGES[:, 0]
        hi = self.RANGES[:, 1]
        for _ in range(1000):
            y = rng.uniform(lo, hi)
            u = map_params_unit(y, self.RANGES, "to-unit")
            back = map_params_unit(u, self.RANGES, "from-unit")
            assert np.max(np.abs(back - y)) < 1e-12

    def test_clamp_counter(self):
        reset_clamp_count()
        out = map_params_unit(np.array([20.0, 3.0, 0.0]), self.RANGES, "to-unit")
        assert out[0] == 1.0
        assert clamp_count() == 1
        map_params_unit(np.array([-5.0, 5.0, 0.0]), self.RANGES, "to-unit")
        assert clamp_count() == 3
        reset_clamp_count()
        assert clamp_count() == 0

    def test_from_unit_requires_unit_cube(self):
        with pytest.raises(ValueError):
            map_params_unit(np.array([1.2, 0.5, 0.5]), self.RANGES, "from-unit")

    def test_degenerate_range_rejected(self):
        with pytest.raises(ValueError):
            map_params_unit(np.zeros(1), np.array([[1.0, 1.0]]), "to-unit")

    def test_unknown_direction(self):
        with pytest.raises(ValueError):
            map_params_unit(np.zeros(3), self.RANGES, "sideways")

    def test_batched_input(self):
        rng = np.random.default_rng(3)
        y = rng.uniform(self.RANGES[:, 0], self.RANGES[:, 1], size=(50, 3))
        u = map_params_unit(y, self.RANGES, "to-unit")
        assert u.shape == (50, 3)
        assert np.all((u >= 0) & (u <= 1))
