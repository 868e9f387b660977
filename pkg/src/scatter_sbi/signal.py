"""Detector image to in-plane signal conversion and unit-cube parameter maps."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .forward import DetectorImage

__all__ = [
    "InPlaneSignal",
    "BeamstopMask",
    "extract_inplane",
    "map_params_unit",
    "clamp_count",
    "reset_clamp_count",
    "read_background_curve",
    "PAPER_BEAMSTOP",
    "PAPER_CROPS",
]

# Defaults calibrated for the full 1024-row detector geometry: beamstop band
# centered on the specular row plus edge crops, leaving 359 usable rows.
PAPER_BEAMSTOP: "BeamstopMask"
PAPER_CROPS = (200, 418)


@dataclass(frozen=True)
class BeamstopMask:
    """Blocked vertical band [z_lo, z_hi] plus the lateral half-width of the
    center cut used for averaging."""

    z_lo: int
    z_hi: int
    lateral_halfwidth: int = 15

    def __post_init__(self) -> None:
        if not 0 <= self.z_lo < self.z_hi:
            raise ValueError("need 0 <= z_lo < z_hi")
        if self.lateral_halfwidth < 1:
            raise ValueError("lateral_halfwidth must be >= 1")


PAPER_BEAMSTOP = BeamstopMask(z_lo=390, z_hi=436, lateral_halfwidth=15)


@dataclass(frozen=True)
class InPlaneSignal:
    """Normalized 1D scattering profile split around the beamstop."""

    values: np.ndarray
    part_boundary: int  # rows before the beamstop band
    geometry_tag: str

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("signal must be a non-empty 1D array")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("signal values must lie in [0, 1]")
        if not 0 <= self.part_boundary <= v.size:
            raise ValueError("part_boundary outside signal")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


_clamp_lock = threading.Lock()
_clamp_count = 0


def clamp_count() -> int:
    """Number of components clamped so far by to-unit mapping."""
    return _clamp_count


def reset_clamp_count() -> None:
    global _clamp_count
    with _clamp_lock:
        _clamp_count = 0


def _normalize_part(part: np.ndarray, mode: str) -> np.ndarray:
    if part.size == 0:
        return part
    if mode == "peak":
        m = part.max()
    elif mode == "sum":
        m = part.sum()
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return part / m if m > 0 else part


def extract_inplane(
    image: DetectorImage,
    mask: BeamstopMask,
    background: np.ndarray | None = None,
    *,
    crop_low: int = 0,
    crop_high: int = 0,
    transform: str = "log10",
    normalization: str = "peak",
) -> InPlaneSignal:
    """Average the center cut, split at the beamstop, normalize both parts.

    Pipeline: select the 2*halfwidth-column band around the specular column,
    apply log10(1+I) (or identity) per pixel, average laterally, subtract the
    optional background curve (clamped at zero), discard the blocked rows and
    the configured edge crops, normalize each remaining part to its peak (or
    sum) and concatenate. Output length is n_pixels_z minus blocked rows
    minus crops, independent of intensity values.
    """
    geom = image.geometry
    nz, ny = geom.n_pixels_z, geom.n_pixels_y
    if mask.z_hi >= nz:
        raise ValueError("beamstop band outside the detector")
    if crop_low < 0 or crop_high < 0:
        raise ValueError("crops must be >= 0")

    j_spec = int(geom.specular_y / geom.pixel_mm)
    c0 = max(j_spec - mask.lateral_halfwidth, 0)
    c1 = min(j_spec + mask.lateral_halfwidth, ny)
    if c1 <= c0:
        raise ValueError("center cut outside the detector")
    band = image.intensities[:, c0:c1]

    if transform == "log10":
        band = np.log10(1.0 + band)
    elif transform != "identity":
        raise ValueError(f"unknown transform {transform!r}")
    profile = band.mean(axis=1)

    if background is not None:
        bg = np.asarray(background, dtype=np.float64)
        if bg.shape != (nz,):
            raise ValueError(f"background curve must have shape ({nz},)")
        profile = np.clip(profile - bg, 0.0, None)

    lo, hi = crop_low, nz - crop_high
    p1 = profile[lo:min(mask.z_lo, hi)]
    p2 = profile[max(mask.z_hi + 1, lo):hi]
    if p1.size + p2.size == 0:
        raise ValueError("beamstop and crops leave an empty signal")
    values = np.concatenate([_normalize_part(p1, normalization),
                             _normalize_part(p2, normalization)])
    return InPlaneSignal(values=values, part_boundary=p1.size,
                         geometry_tag=geom.tag())


def read_background_curve(path, n_rows: int) -> np.ndarray:
    """Read a two-column (row index, value) text file into a full row vector."""
    curve = np.zeros(n_rows)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ValueError(f"{path}:{line_no}: expected two columns")
            idx, val = int(fields[0]), float(fields[1])
            if not 0 <= idx < n_rows:
                raise ValueError(f"{path}:{line_no}: row {idx} out of range")
            curve[idx] = val
    return curve


def map_params_unit(y, ranges, direction: str):
    """Affine map between physical parameter values and the unit cube.

    `ranges` is a (d, 2) array of per-dimension (lo, hi). Direction
    "to-unit" scales into [0, 1] (out-of-range values are clamped and the
    module clamp counter incremented); "from-unit" requires input in [0, 1]
    and maps back. The round trip is an identity to 1e-12.
    """
    global _clamp_count
    r = np.asarray(ranges, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != 2:
        raise ValueError("ranges must be (d, 2)")
    lo, hi = r[:, 0], r[:, 1]
    if np.any(hi <= lo):
        raise ValueError("each range needs lo < hi")
    arr = np.asarray(y, dtype=np.float64)
    if arr.shape[-1] != r.shape[0]:
        raise ValueError(f"parameter dimension {arr.shape[-1]} != {r.shape[0]}")

    if direction == "to-unit":
        u = (arr - lo) / (hi - lo)
        n_out = int(np.count_nonzero((u < 0.0) | (u > 1.0)))
        if n_out:
            with _clamp_lock:
                _clamp_count += n_out
            u = np.clip(u, 0.0, 1.0)
        return u
    if direction == "from-unit":
        if np.any(arr < -1e-12) or np.any(arr > 1.0 + 1e-12):
            raise ValueError("from-unit input must lie in [0, 1]")
        return lo + arr * (hi - lo)
    raise ValueError(f"direction must be 'to-unit' or 'from-unit', got {direction!r}")
