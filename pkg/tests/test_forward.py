import math

import numpy as np
import pytest

from scatter_sbi.forward import (DetectorImage, ExperimentGeometry, Layer,
                                 MultilayerSample, Substrate, critical_angle,
                                 parratt_amplitudes, psd_selfaffine,
                                 simulate_image)

from oracles import psd_variance_quadrature, transfer_matrix_amplitudes

WAVELENGTH = 0.14073
TINY = 1e-30  # stands in for exactly-zero absorption/roughness


def desk_geometry(**overrides):
    kw = dict(wavelength=WAVELENGTH, incident_angle=math.radians(0.64),
              pixel_size=200.0, n_pixels_y=128, n_pixels_z=256,
              detector_distance=1277.0, specular_y=12.8, specular_z=20.65,
              beam_intensity=1e13, constant_background=60.0)
    kw.update(overrides)
    return ExperimentGeometry(**kw)


def single_interface_sample(delta, beta=TINY):
    """A layer optically identical to the substrate: one real interface."""
    layer = Layer(delta, beta, 5.0, 1e-12, 0.5, 10.0)
    return MultilayerSample(layers=(layer,),
                            substrate=Substrate(delta, beta, roughness=1e-12))


class TestCriticalAngle:
    def test_vacuum(self):
        assert critical_angle(0.0) == 0.0

    @pytest.mark.parametrize("delta,expected", [
        (2e-5, 6.3246e-3),
        (1e-5, 4.4721e-3),
    ])
    def test_values(self, delta, expected):
        assert critical_angle(delta) == pytest.approx(expected, rel=1e-4)

    def test_monotone(self):
        deltas = np.linspace(1e-6, 5e-5, 20)
        angles = [critical_angle(d) for d in deltas]
        assert np.all(np.diff(angles) > 0)

    def test_negative_raises(self):
        with pytest.raises(ValueError):
            critical_angle(-1e-6)


class TestTypes:
    def test_layer_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            Layer(2e-5, 2e-7, 0.0, 1.0, 0.5, 10.0)
        with pytest.raises(ValueError):
            Layer(2e-5, 2e-7, 3.0, 1.0, 1.5, 10.0)

    def test_empty_stack_rejected(self):
        with pytest.raises(ValueError):
            MultilayerSample(layers=())

    def test_specular_outside_detector(self):
        with pytest.raises(ValueError):
            desk_geometry(specular_y=100.0)

    def test_image_shape_and_sign(self):
        geom = desk_geometry()
        with pytest.raises(ValueError):
            DetectorImage(np.zeros((4, 4)), geom)
        bad = np.zeros((geom.n_pixels_z, geom.n_pixels_y))
        bad[0, 0] = -1.0
        with pytest.raises(ValueError):
            DetectorImage(bad, geom)


class TestParratt:
    def test_vacuum_stack(self):
        vac = MultilayerSample(
            layers=(Layer(TINY, TINY, 3.0, 2.0, 0.5, 10.0),),
            substrate=Substrate(0.0, 0.0))
        T, R = parratt_amplitudes(vac, 0.01, WAVELENGTH)
        assert np.max(np.abs(R)) < 1e-12
        assert np.max(np.abs(T - 1.0)) < 1e-12

    def test_total_external_reflection(self):
        delta = 2e-5
        sample = single_interface_sample(delta)
        for frac in np.linspace(0.1, 0.99, 15):
            _, R = parratt_amplitudes(sample, frac * critical_angle(delta),
                                      WAVELENGTH)
            assert abs(abs(R[0]) - 1.0) < 1e-10

    def test_energy_conservation_single_interface(self):
        delta = 2e-5
        sample = single_interface_sample(delta)
        k = 2 * math.pi / WAVELENGTH
        for mult in np.linspace(1.05, 5.0, 20):
            angle = mult * critical_angle(delta)
            T, R = parratt_amplitudes(sample, angle, WAVELENGTH)
            kz0 = k * math.sin(angle)
            kzs = k * np.sqrt(complex(math.sin(angle) ** 2 - 2 * delta))
            flux = abs(R[0]) ** 2 + (kzs.real / kz0) * abs(T[-1]) ** 2
            assert abs(flux - 1.0) < 1e-10

    def test_two_layer_lossy_vs_transfer_matrix(self):
        sample = MultilayerSample(
            layers=(Layer(3e-5, 4e-6, 2.5, 1.2, 0.4, 8.0),
                    Layer(1.5e-5, 8e-6, 7.0, 2.1, 0.6, 14.0)),
            substrate=Substrate(6.21e-6, 1.28e-7, roughness=0.4))
        T, R = parratt_amplitudes(sample, 0.012, WAVELENGTH)
        T_ref, R_ref = transfer_matrix_amplitudes(sample, 0.012, WAVELENGTH)
        for a, b in ((T, T_ref), (R, R_ref)):
            rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-12)
            assert rel.max() < 1e-10

    def test_random_stacks_vs_transfer_matrix(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            n_layers = int(rng.integers(1, 5))
            layers = tuple(
                Layer(rng.uniform(0.8e-5, 4e-5), rng.uniform(1e-8, 9e-6),
                      rng.uniform(0.3, 12.0), rng.uniform(0.3, 5.0),
                      rng.uniform(0.1, 0.9), rng.uniform(3.0, 30.0))
                for _ in range(n_layers))
            sample = MultilayerSample(
                layers=layers,
                substrate=Substrate(6.21e-6, 1.28e-7,
                                    roughness=rng.uniform(0.1, 2.0)))
            angle = rng.uniform(0.004, 0.03)
            T, R = parratt_amplitudes(sample, angle, WAVELENGTH)
            T_ref, R_ref = transfer_matrix_amplitudes(sample, angle, WAVELENGTH)
            rel_t = np.abs(T - T_ref) / np.maximum(np.abs(T_ref), 1e-12)
            rel_r = np.abs(R - R_ref) / np.maximum(np.abs(R_ref), 1e-12)
            worst = max(worst, rel_t.max(), rel_r.max())
        assert worst < 1e-8

    def test_rejects_bad_inputs(self):
        sample = single_interface_sample(2e-5)
        with pytest.raises(ValueError):
            parratt_amplitudes(sample, -0.01, WAVELENGTH)
        with pytest.raises(ValueError):
            parratt_amplitudes(sample, 0.01, -1.0)


class TestPsd:
    def test_value_at_q0(self):
        assert psd_selfaffine(0.0, 1.0, 10.0, 0.5) == pytest.approx(
            4 * math.pi * 0.5 * 100.0, rel=1e-12)

    def test_hurst_half_closed_form(self):
        q = np.linspace(0.0, 2.0, 50)
        got = psd_selfaffine(q, 1.5, 12.0, 0.5)
        expected = 2 * math.pi * 1.5 ** 2 * 12.0 ** 2 \
            / (1 + (q * 12.0) ** 2) ** 1.5
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_variance_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            sigma = rng.uniform(0.3, 5.0)
            xi = rng.uniform(3.0, 30.0)
            hurst = rng.uniform(0.1, 0.9)
            var = psd_variance_quadrature(psd_selfaffine, sigma, xi, hurst)
            assert abs(var - sigma ** 2) / sigma ** 2 < 1e-6

    def test_positive_and_monotone(self):
        q = np.linspace(0.0, 5.0, 200)
        vals = psd_selfaffine(q, 2.0, 8.0, 0.3)
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) <= 0)

    def test_domain_errors(self):
        for bad_h in (0.0, 1.0, -0.2, 1.3):
            with pytest.raises(ValueError):
                psd_selfaffine(0.1, 1.0, 10.0, bad_h)
        with pytest.raises(ValueError):
            psd_selfaffine(0.1, -1.0, 10.0, 0.5)


def three_layer_sample():
    return MultilayerSample(layers=(
        Layer(3e-5, 2e-7, 3.0, 2.5, 0.5, 10.0),
        Layer(2e-5, 4e-6, 2.0, 1.5, 0.4, 8.0),
        Layer(1.5e-5, 1e-6, 6.0, 2.0, 0.6, 15.0)))


class TestSimulateImage:
    def test_smooth_interfaces_give_background(self):
        geom = desk_geometry()
        sample = MultilayerSample(
            layers=(Layer(3e-5, 2e-7, 3.0, 1e-9, 0.5, 10.0),),
            substrate=Substrate(6.21e-6, 1.28e-7, roughness=1e-9))
        img = simulate_image(sample, geom)
        assert np.max(np.abs(img.intensities - 60.0)) < 1e-3

    def test_mirror_symmetry(self):
        # specular_y on a column boundary pairs every column with its mirror;
        # equality up to float cancellation in the pixel coordinates
        img = simulate_image(three_layer_sample(), desk_geometry())
        np.testing.assert_allclose(img.intensities, img.intensities[:, ::-1],
                                   rtol=1e-12, atol=0.0)

    def test_yoneda_peak_single_layer(self):
        geom = desk_geometry()
        delta_top = 3e-5
        sample = MultilayerSample(
            layers=(Layer(delta_top, 2e-7, 3.0, 2.5, 0.5, 10.0),),
            substrate=Substrate(6.21e-6, 1.28e-7, roughness=0.05))
        img = simulate_image(sample, geom)
        profile = np.log10(1 + img.intensities).mean(axis=1)
        alpha = geom.exit_angles()
        expected_row = int(np.argmin(np.abs(alpha - critical_angle(delta_top))))
        window = profile[expected_row - 2:expected_row + 3]
        peak_row = expected_row - 2 + int(np.argmax(window))
        # local maximum: higher than both neighbours outside the window
        assert profile[peak_row] > profile[peak_row - 2]
        assert profile[peak_row] > profile[peak_row + 2]
        assert abs(peak_row - expected_row) <= 1

    def test_pure_function(self):
        geom = desk_geometry()
        sample = three_layer_sample()
        a = simulate_image(sample, geom).intensities
        b = simulate_image(sample, geom).intensities
        np.testing.assert_array_equal(a, b)
        na = simulate_image(sample, geom, noise=True,
                            rng=np.random.default_rng(11)).intensities
        nb = simulate_image(sample, geom, noise=True,
                            rng=np.random.default_rng(11)).intensities
        np.testing.assert_array_equal(na, nb)

    def test_poisson_noise_statistics(self):
        geom = desk_geometry()
        sample = three_layer_sample()
        clean = simulate_image(sample, geom).intensities
        noisy = simulate_image(sample, geom, noise=True,
                               rng=np.random.default_rng(5)).intensities
        assert not np.array_equal(clean, noisy)
        assert np.all(noisy >= 0)
        assert np.all(noisy == np.round(noisy))
        bright = clean > 1e3
        ratio = noisy[bright].mean() / clean[bright].mean()
        assert abs(ratio - 1.0) < 0.01

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            simulate_image(three_layer_sample(), desk_geometry(), noise=True)

    def test_beam_intensity_monotone(self):
        sample = three_layer_sample()
        lo = simulate_image(sample, desk_geometry()).intensities - 60.0
        hi = simulate_image(sample,
                            desk_geometry(beam_intensity=2e13)).intensities - 60.0
        above = desk_geometry().exit_angles() > 0
        assert np.all(hi[above] > lo[above])

    def test_background_only_below_horizon(self):
        geom = desk_geometry()
        img = simulate_image(three_layer_sample(), geom)
        below = geom.exit_angles() <= 0
        assert np.all(img.intensities[below] == 60.0)
