"""Prior sampling, deterministic parallel dataset generation, persistence.

Datasets live in a directory with a `manifest.json` plus raw little-endian
float32 blobs (`params.bin`, `signals.bin`, optional `images.bin`), row
major. Record i depends only on (seed, i, prior, geometry): every record
gets its own RNG stream derived from the dataset seed and the record index,
so generation is bit-identical for any worker count or execution order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import (ExperimentGeometry, Layer, MultilayerSample, SILICON,
                      Substrate, simulate_image)
from .signal import BeamstopMask, extract_inplane

__all__ = [
    "PARAM_ORDER",
    "TA_RANGES",
    "CU3N_RANGES",
    "PriorSpec",
    "ThicknessOnlySpec",
    "DatasetManifest",
    "DatasetError",
    "DatasetCorruptionError",
    "sample_prior",
    "generate_dataset",
    "dataset_roundtrip",
    "split_indices",
    "write_sample_set",
    "read_sample_set",
]

PARAM_ORDER = ("dispersion", "absorption", "thickness", "roughness",
               "hurst", "lateral_correlation")

TA_RANGES = {
    "dispersion": (1.0e-5, 4.0e-5),
    "absorption": (0.1e-7, 90.0e-7),
    "thickness": (0.3, 4.7),
    "roughness": (0.3, 5.0),
    "hurst": (0.1, 0.9),
    "lateral_correlation": (3.0, 30.0),
}
CU3N_RANGES = {
    "dispersion": (0.8e-5, 3.0e-5),
    "absorption": (0.1e-7, 90.0e-7),
    "thickness": (0.3, 12.0),
    "roughness": (0.3, 5.0),
    "hurst": (0.1, 0.9),
    "lateral_correlation": (3.0, 30.0),
}
_DEFAULT_CLASSES = {"ta": TA_RANGES, "cu3n": CU3N_RANGES}


class DatasetError(RuntimeError):
    pass


class DatasetCorruptionError(DatasetError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform prior over the per-layer physical parameters.

    `materials` names the material class of each layer, top first; classes
    map to per-parameter (lo, hi) ranges. The oxidized capping layer uses
    the tantalum ranges.
    """

    materials: tuple[str, ...]
    class_ranges: dict = field(default_factory=lambda: dict(_DEFAULT_CLASSES))

    def __post_init__(self) -> None:
        object.__setattr__(self, "materials", tuple(self.materials))
        if not self.materials:
            raise ValueError("need at least one layer")
        for mat in self.materials:
            if mat not in self.class_ranges:
                raise ValueError(f"unknown material class {mat!r}")
        for cls, ranges in self.class_ranges.items():
            for name in PARAM_ORDER:
                lo, hi = ranges[name]
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise ValueError(f"{cls}.{name}: need finite lo < hi")

    @property
    def dim(self) -> int:
        return 6 * len(self.materials)

    @property
    def param_names(self) -> list[str]:
        return [f"layer{i + 1}_{name}"
                for i in range(len(self.materials)) for name in PARAM_ORDER]

    def ranges(self) -> np.ndarray:
        rows = [self.class_ranges[mat][name]
                for mat in self.materials for name in PARAM_ORDER]
        return np.asarray(rows, dtype=np.float64)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        r = self.ranges()
        return rng.uniform(r[:, 0], r[:, 1])

    def to_sample(self, theta: np.ndarray,
                  substrate: Substrate = SILICON) -> MultilayerSample:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters")
        layers = tuple(Layer(*theta[6 * i: 6 * i + 6])
                       for i in range(len(self.materials)))
        return MultilayerSample(layers=layers, substrate=substrate)


@dataclass(frozen=True)
class ThicknessOnlySpec:
    """One-parameter toy prior: a single layer whose thickness varies."""

    template: Layer
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    @property
    def dim(self) -> int:
        return 1

    @property
    def param_names(self) -> list[str]:
        return ["layer1_thickness"]

    def ranges(self) -> np.ndarray:
        return np.array([[self.lo, self.hi]])

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(self.lo, self.hi)])

    def to_sample(self, theta: np.ndarray,
                  substrate: Substrate = SILICON) -> MultilayerSample:
        t = self.template
        layer = Layer(t.dispersion, t.absorption, float(np.asarray(theta).ravel()[0]),
                      t.roughness, t.hurst, t.lateral_correlation)
        return MultilayerSample(layers=(layer,), substrate=substrate)


def sample_prior(spec, rng: np.random.Generator) -> np.ndarray:
    """Draw one physical parameter vector, components independent uniform."""
    return spec.sample(rng)


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    n_samples: int
    signal_len: int
    param_names: tuple[str, ...]
    param_ranges: tuple[tuple[float, float], ...]
    seed: int
    dtype: str = "f32le"
    image_shape: tuple[int, int] | None = None

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "n_samples": self.n_samples,
            "signal_len": self.signal_len,
            "param_names": list(self.param_names),
            "param_ranges": [list(r) for r in self.param_ranges],
            "seed": self.seed,
            "dtype": self.dtype,
        }
        if self.image_shape is not None:
            doc["image_shape"] = list(self.image_shape)
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        shape = doc.get("image_shape")
        return cls(
            version=doc["version"],
            n_samples=doc["n_samples"],
            signal_len=doc["signal_len"],
            param_names=tuple(doc["param_names"]),
            param_ranges=tuple((float(lo), float(hi))
                               for lo, hi in doc["param_ranges"]),
            seed=doc["seed"],
            dtype=doc["dtype"],
            image_shape=tuple(shape) if shape is not None else None,
        )


def item_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-record stream; depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(index,)))


@dataclass(frozen=True)
class _GenJob:
    spec: object
    geometry: ExperimentGeometry
    substrate: Substrate
    mask: BeamstopMask
    crop_low: int
    crop_high: int
    transform: str
    normalization: str
    noise: bool
    store_images: bool
    seed: int

    def record(self, index: int):
        rng = item_rng(self.seed, index)
        theta = self.spec.sample(rng)
        sample = self.spec.to_sample(theta, self.substrate)
        image = simulate_image(sample, self.geometry, noise=self.noise,
                               rng=rng if self.noise else None)
        sig = extract_inplane(image, self.mask, crop_low=self.crop_low,
                              crop_high=self.crop_high, transform=self.transform,
                              normalization=self.normalization)
        img32 = image.intensities.astype(np.float32) if self.store_images else None
        return theta.astype(np.float32), sig.values.astype(np.float32), img32


def _run_chunk(args):
    job, start, stop = args
    return [job.record(i) for i in range(start, stop)]


def generate_dataset(
    spec,
    geometry: ExperimentGeometry,
    n: int,
    seed: int,
    out_dir,
    *,
    substrate: Substrate = SILICON,
    mask: BeamstopMask,
    crop_low: int = 0,
    crop_high: int = 0,
    transform: str = "log10",
    normalization: str = "peak",
    noise: bool = False,
    store_images: bool = False,
    workers: int = 1,
) -> Path:
    """Simulate n labelled records into `out_dir`; returns the directory.

    Deterministic for fixed (spec, geometry, n, seed) regardless of
    `workers`; records are written in index order.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    job = _GenJob(spec=spec, geometry=geometry, substrate=substrate, mask=mask,
                  crop_low=crop_low, crop_high=crop_high, transform=transform,
                  normalization=normalization, noise=noise,
                  store_images=store_images, seed=seed)

    chunk = max(1, min(64, math.ceil(n / max(workers, 1) / 4)))
    spans = [(job, s, min(s + chunk, n)) for s in range(0, n, chunk)]

    signal_len = None
    try:
        with open(out / "params.bin", "wb") as fp, \
                open(out / "signals.bin", "wb") as fs, \
                (open(out / "images.bin", "wb") if store_images
                 else _NullFile()) as fi:
            def write_records(records, base):
                nonlocal signal_len
                for off, (theta, sig, img) in enumerate(records):
                    if signal_len is None:
                        signal_len = sig.size
                    elif sig.size != signal_len:
                        raise DatasetError(
                            f"record {base + off}: signal length {sig.size} "
                            f"!= {signal_len}")
                    fp.write(theta.tobytes())
                    fs.write(sig.tobytes())
                    if img is not None:
                        fi.write(img.tobytes())

            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    for (_, s, _), records in zip(spans, pool.map(_run_chunk, spans)):
                        write_records(records, s)
            else:
                for span in spans:
                    write_records(_run_chunk(span), span[1])
    except OSError as exc:
        raise DatasetError(f"writing dataset to {out} failed: {exc}") from exc

    ranges = spec.ranges()
    manifest = DatasetManifest(
        version=1,
        n_samples=n,
        signal_len=int(signal_len),
        param_names=tuple(spec.param_names),
        param_ranges=tuple((float(lo), float(hi)) for lo, hi in ranges),
        seed=seed,
        image_shape=(geometry.n_pixels_z, geometry.n_pixels_y)
        if store_images else None,
    )
    (out / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return out


class _NullFile:
    def write(self, _):
        raise DatasetError("image write without store_images")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _read_blob(path: Path, n: int, record_shape: tuple[int, ...]) -> np.ndarray:
    per_record = int(np.prod(record_shape)) * 4
    expected = n * per_record
    actual = path.stat().st_size
    if actual != expected:
        raise DatasetCorruptionError(
            f"{path.name}: {actual} bytes on disk, manifest implies {expected}")
    data = np.fromfile(path, dtype="<f4")
    return data.reshape((n,) + record_shape)


def split_indices(n: int, seed: int, n_test: int = 1000,
                  val_fraction: float = 0.2) -> dict[str, np.ndarray]:
    """Deterministic disjoint exhaustive split: the last n_test records are
    the test set; a seeded shuffle of the remainder yields validation."""
    if n <= n_test:
        raise DatasetError(f"need more than {n_test} records to split, have {n}")
    test = np.arange(n - n_test, n)
    rest = np.arange(n - n_test)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(0x5917,)))
    order = rng.permutation(rest.size)
    n_val = int(round(val_fraction * rest.size))
    val = np.sort(rest[order[:n_val]])
    train = np.sort(rest[order[n_val:]])
    return {"train": train, "val": val, "test": test}


def dataset_roundtrip(dataset_dir, n_test: int = 1000):
    """Read a dataset directory back: (params, signals, images_or_None, splits).

    Arrays come back bit-identical to what was written; a size mismatch
    between the manifest and any blob raises DatasetCorruptionError naming
    the blob instead of returning partial data.
    """
    d = Path(dataset_dir)
    manifest = DatasetManifest.from_json((d / "manifest.json").read_text("utf-8"))
    if manifest.dtype != "f32le":
        raise DatasetCorruptionError(f"unsupported dtype {manifest.dtype!r}")
    n = manifest.n_samples
    params = _read_blob(d / "params.bin", n, (len(manifest.param_names),))
    signals = _read_blob(d / "signals.bin", n, (manifest.signal_len,))
    images = None
    if manifest.image_shape is not None:
        images = _read_blob(d / "images.bin", n, tuple(manifest.image_shape))
    splits = split_indices(n, manifest.seed, n_test=n_test)
    return params, signals, images, splits


def write_sample_set(out_dir, samples: np.ndarray, log_probs: np.ndarray,
                     param_names=None) -> Path:
    """Persist a posterior sample set as manifest + f32le blobs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = np.asarray(samples, dtype=np.float32)
    lp = np.asarray(log_probs, dtype=np.float32)
    if s.ndim != 2 or lp.shape != (s.shape[0],):
        raise ValueError("need samples (n, d) and log_probs (n,)")
    doc = {"version": 1, "n_samples": int(s.shape[0]), "dim": int(s.shape[1]),
           "dtype": "f32le"}
    if param_names is not None:
        doc["param_names"] = list(param_names)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1), "utf-8")
    s.tofile(out / "samples.bin")
    lp.tofile(out / "log_probs.bin")
    return out


def read_sample_set(in_dir):
    d = Path(in_dir)
    doc = json.loads((d / "manifest.json").read_text("utf-8"))
    n, dim = doc["n_samples"], doc["dim"]
    samples = _read_blob(d / "samples.bin", n, (dim,))
    log_probs = _read_blob(d / "log_probs.bin", n, ()).reshape(n)
    return samples, log_probs
