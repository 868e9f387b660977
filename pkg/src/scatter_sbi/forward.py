"""Multilayer grazing-incidence scattering forward model.

Computes diffuse GISAXS detector images for rough multilayer stacks:
Parratt recursion for the reference wavefields (with Nevot-Croce roughness
damping), first-order DWBA diffuse cross-section per interface, and a
self-affine k-correlation roughness power spectrum.

Conventions: refractive index n = 1 - delta + i*beta; depth z increases
downward; fields carry exp(+i k_z z) so Im(k_z) >= 0 decays into the stack.
Each layer's roughness/hurst/lateral_correlation describe its top interface;
the substrate's top interface is parameterized on `Substrate`.
All lengths in nm unless a field name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Layer",
    "Substrate",
    "MultilayerSample",
    "ExperimentGeometry",
    "DetectorImage",
    "SILICON",
    "critical_angle",
    "psd_selfaffine",
    "parratt_amplitudes",
    "simulate_image",
]


def _require_positive(name: str, value: float) -> None:
    if not math.isfinite(value) or value <= 0.0:
        raise ValueError(f"{name} must be finite and > 0, got {value!r}")


@dataclass(frozen=True)
class Layer:
    """One slab of the stack; roughness parameters refer to its top interface."""

    dispersion: float  # delta, ~1e-5
    absorption: float  # beta, ~1e-7
    thickness: float  # nm
    roughness: float  # rms height sigma, nm
    hurst: float  # in (0, 1)
    lateral_correlation: float  # xi, nm

    def __post_init__(self) -> None:
        for name in ("dispersion", "absorption", "thickness", "roughness",
                     "hurst", "lateral_correlation"):
            _require_positive(name, getattr(self, name))
        if not 0.0 < self.hurst < 1.0:
            raise ValueError(f"hurst must lie in (0, 1), got {self.hurst!r}")


@dataclass(frozen=True)
class Substrate:
    """Semi-infinite substrate; roughness fields describe its top interface."""

    dispersion: float
    absorption: float
    roughness: float = 0.3
    hurst: float = 0.3
    lateral_correlation: float = 5.0


# Silicon optical constants at 8.8 keV (lambda = 0.14073 nm), from the
# standard delta = r_e lambda^2 n_e / 2pi and beta = mu lambda / 4pi relations.
SILICON = Substrate(dispersion=6.21e-6, absorption=1.28e-7)


@dataclass(frozen=True)
class MultilayerSample:
    layers: tuple[Layer, ...]
    substrate: Substrate = SILICON

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.layers) == 0:
            raise ValueError("a sample needs at least one layer")


@dataclass(frozen=True)
class ExperimentGeometry:
    wavelength: float  # nm
    incident_angle: float  # rad
    pixel_size: float  # um
    n_pixels_y: int
    n_pixels_z: int
    detector_distance: float  # mm
    specular_y: float  # mm, position of the specular reflection on the detector
    specular_z: float  # mm
    beam_intensity: float
    constant_background: float

    def __post_init__(self) -> None:
        for name in ("wavelength", "incident_angle", "pixel_size",
                     "detector_distance", "beam_intensity"):
            _require_positive(name, getattr(self, name))
        if self.n_pixels_y < 1 or self.n_pixels_z < 1:
            raise ValueError("detector needs at least one pixel per axis")
        if self.constant_background < 0:
            raise ValueError("constant_background must be >= 0")
        pix_mm = self.pixel_size / 1000.0
        if not (0.0 <= self.specular_y <= self.n_pixels_y * pix_mm):
            raise ValueError("specular_y outside detector bounds")
        if not (0.0 <= self.specular_z <= self.n_pixels_z * pix_mm):
            raise ValueError("specular_z outside detector bounds")

    @property
    def pixel_mm(self) -> float:
        return self.pixel_size / 1000.0

    @property
    def wavenumber(self) -> float:
        """Vacuum wavenumber 2*pi/lambda in 1/nm."""
        return 2.0 * math.pi / self.wavelength

    @property
    def horizon_z(self) -> float:
        """Detector z position (mm) of the sample horizon (exit angle zero)."""
        return self.specular_z - self.detector_distance * math.tan(self.incident_angle)

    def exit_angles(self) -> np.ndarray:
        """Exit angle alpha_f (rad) of every detector row, at pixel centers."""
        z_mm = (np.arange(self.n_pixels_z) + 0.5) * self.pixel_mm
        return np.arctan((z_mm - self.horizon_z) / self.detector_distance)

    def azimuth_angles(self) -> np.ndarray:
        """Out-of-plane angle phi_f (rad) of every detector column."""
        y_mm = (np.arange(self.n_pixels_y) + 0.5) * self.pixel_mm - self.specular_y
        return np.arctan(y_mm / self.detector_distance)

    def tag(self) -> str:
        return (f"{self.n_pixels_z}x{self.n_pixels_y}"
                f"@{self.detector_distance:g}mm/{self.wavelength:g}nm")


@dataclass(frozen=True)
class DetectorImage:
    intensities: np.ndarray  # (n_pixels_z, n_pixels_y), counts
    geometry: ExperimentGeometry = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.intensities, dtype=np.float64)
        expected = (self.geometry.n_pixels_z, self.geometry.n_pixels_y)
        if arr.shape != expected:
            raise ValueError(f"image shape {arr.shape} != geometry {expected}")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("pixel intensities must be finite and >= 0")
        object.__setattr__(self, "intensities", arr)


def critical_angle(dispersion: float) -> float:
    """Critical angle sqrt(2*delta) in rad for total external reflection."""
    if dispersion < 0:
        raise ValueError(f"dispersion must be >= 0, got {dispersion!r}")
    return math.sqrt(2.0 * dispersion)


def psd_selfaffine(q_par, sigma: float, xi: float, hurst: float):
    """k-correlation power spectral density of a self-affine interface.

    PSD(q) = 4*pi*sigma^2*h*xi^2 / (1 + q^2 xi^2)^(1+h), in nm^4, normalized
    so that (1/2pi) * integral PSD(q) q dq over [0, inf) equals sigma^2.
    """
    _require_positive("sigma", sigma)
    _require_positive("xi", xi)
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"hurst must lie in (0, 1), got {hurst!r}")
    q = np.asarray(q_par, dtype=np.float64)
    out = 4.0 * math.pi * sigma * sigma * hurst * xi * xi \
        / np.power(1.0 + (q * xi) ** 2, 1.0 + hurst)
    if np.ndim(q_par) == 0:
        return float(out)
    return out


def _stack_arrays(sample: MultilayerSample):
    """Per-medium optical constants and geometry, ambient first."""
    layers = sample.layers
    delta = np.array([0.0] + [ly.dispersion for ly in layers] + [sample.substrate.dispersion])
    beta = np.array([0.0] + [ly.absorption for ly in layers] + [sample.substrate.absorption])
    thick = np.array([0.0] + [ly.thickness for ly in layers] + [0.0])
    # roughness of interface i (top of medium i+1), i = 0..n_layers
    sigma = np.array([ly.roughness for ly in layers] + [sample.substrate.roughness])
    return delta, beta, thick, sigma


def _stack_amplitudes(delta, beta, thick, sigma, angles, k):
    """Wavefield amplitudes (T, R) per medium for a vector of glancing angles.

    Amplitudes are referenced at the top of each medium (the ambient at the
    first interface). Parratt recursion with Nevot-Croce damped reflection
    and the matching Croce-corrected transmission coefficients, so the result
    is identical to a transfer-matrix solution of the same damped interfaces.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
    n_media = delta.size
    sin2 = np.sin(angles) ** 2
    kz = k * np.sqrt(sin2[None, :] - 2.0 * delta[:, None] + 2.0j * beta[:, None])

    n_int = n_media - 1
    r = np.empty((n_int, angles.size), dtype=np.complex128)
    t = np.empty_like(r)
    for i in range(n_int):
        ka, kb = kz[i], kz[i + 1]
        s2 = sigma[i] ** 2
        r[i] = (ka - kb) / (ka + kb) * np.exp(-2.0 * ka * kb * s2)
        t[i] = 2.0 * ka / (ka + kb) * np.exp((ka - kb) ** 2 * s2 / 2.0)

    # reflectance ratio just above each interface, built bottom-up
    rho = np.empty_like(r)
    rho[n_int - 1] = r[n_int - 1]
    for i in range(n_int - 2, -1, -1):
        ph2 = np.exp(2.0j * kz[i + 1] * thick[i + 1])
        rr = rho[i + 1] * ph2
        rho[i] = (r[i] + rr) / (1.0 + r[i] * rr)

    T = np.empty((n_media, angles.size), dtype=np.complex128)
    R = np.empty_like(T)
    T[0] = 1.0
    R[0] = rho[0]
    for i in range(n_int):
        below = i + 1
        if below < n_int:
            x_top = rho[below] * np.exp(2.0j * kz[below] * thick[below])
        else:
            x_top = np.zeros(angles.size, dtype=np.complex128)
        t_at_interface = T[i] * np.exp(1.0j * kz[i] * thick[i])
        T[below] = t[i] * t_at_interface / (1.0 + r[i] * x_top)
        R[below] = x_top * T[below]
    # factor out the vacuum-propagated incident phase at each medium's top,
    # so zero index contrast gives T = 1 exactly; |T + R| is unaffected
    depth = np.concatenate([[0.0], np.cumsum(thick[:-1])])
    phase = np.exp(-1.0j * kz[0][None, :] * depth[:, None])
    return T * phase, R * phase


def parratt_amplitudes(sample: MultilayerSample, angle: float, wavelength: float):
    """Per-medium complex (transmitted, reflected) amplitudes at one angle.

    Returns two complex arrays of length n_layers + 2 ordered ambient, layers
    top to bottom, substrate; each referenced at the top of its medium.
    """
    if angle <= 0:
        raise ValueError("angle must be > 0")
    _require_positive("wavelength", wavelength)
    delta, beta, thick, sigma = _stack_arrays(sample)
    k = 2.0 * math.pi / wavelength
    T, R = _stack_amplitudes(delta, beta, thick, sigma, np.array([angle]), k)
    return T[:, 0].copy(), R[:, 0].copy()


def simulate_image(
    sample: MultilayerSample,
    geometry: ExperimentGeometry,
    noise: bool = False,
    rng: np.random.Generator | None = None,
) -> DetectorImage:
    """Simulate one detector image for a sample under the given geometry.

    The diffuse cross-section sums, incoherently over interfaces, the squared
    DWBA amplitude combination (Ti + Ri)*(Tf + Rf) weighted by the interface
    contrast and its self-affine PSD at the pixel's lateral momentum transfer,
    scaled by beam intensity and pixel solid angle, on top of the constant
    background. Rows below the sample horizon stay at background. With
    `noise=True` each pixel is drawn Poisson with the noiseless value as mean.
    """
    if noise and rng is None:
        raise ValueError("noise=True requires an rng")
    delta, beta, thick, sigma = _stack_arrays(sample)
    hurst = np.array([ly.hurst for ly in sample.layers] + [sample.substrate.hurst])
    xi = np.array([ly.lateral_correlation for ly in sample.layers]
                  + [sample.substrate.lateral_correlation])

    k = geometry.wavenumber
    alpha_i = geometry.incident_angle
    alpha_f = geometry.exit_angles()
    phi_f = geometry.azimuth_angles()
    nz, ny = geometry.n_pixels_z, geometry.n_pixels_y

    image = np.full((nz, ny), float(geometry.constant_background))
    valid = alpha_f > 0.0
    if np.any(valid):
        af = alpha_f[valid]
        Ti, Ri = _stack_amplitudes(delta, beta, thick, sigma, np.array([alpha_i]), k)
        Tf, Rf = _stack_amplitudes(delta, beta, thick, sigma, af, k)
        # field intensity at each interface: in the medium below, at its top
        f_in = np.abs(Ti[1:, 0] + Ri[1:, 0]) ** 2  # (n_interfaces,)
        f_out = np.abs(Tf[1:, :] + Rf[1:, :]) ** 2  # (n_interfaces, n_valid_rows)

        n2 = (1.0 - delta + 1.0j * beta) ** 2
        contrast = np.abs(n2[:-1] - n2[1:]) ** 2  # (n_interfaces,)

        caf, saf = np.cos(af), np.sin(af)
        qx = k * (caf[:, None] * np.cos(phi_f)[None, :] - math.cos(alpha_i))
        qy = k * (caf[:, None] * np.sin(phi_f)[None, :])
        q_par = np.hypot(qx, qy)  # (n_valid_rows, ny)

        scale = (geometry.beam_intensity
                 * (geometry.pixel_mm / geometry.detector_distance) ** 2
                 * k ** 4 / (16.0 * math.pi ** 2))
        diffuse = np.zeros_like(q_par)
        for j in range(contrast.size):
            w = contrast[j] * f_in[j] * f_out[j]  # per valid row
            diffuse += w[:, None] * psd_selfaffine(q_par, float(sigma[j]),
                                                   float(xi[j]), float(hurst[j]))
        image[valid, :] += scale * diffuse

    if noise:
        image = rng.poisson(image).astype(np.float64)
    return DetectorImage(intensities=image, geometry=geometry)
