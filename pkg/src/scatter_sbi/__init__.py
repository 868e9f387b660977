"""Amortized simulation-based inference for multilayer GISAXS.

A self-contained pipeline: physics forward simulator, in-plane signal
extraction, deterministic dataset generation, conditional masked
autoregressive flow and conditional VAE estimators, a rejection-ABC + KDE
baseline, and the metric/benchmark suite that compares them.
"""

from .forward import (DetectorImage, ExperimentGeometry, Layer,
                      MultilayerSample, SILICON, Substrate, critical_angle,
                      parratt_amplitudes, psd_selfaffine, simulate_image)
from .signal import (BeamstopMask, InPlaneSignal, extract_inplane,
                     map_params_unit)
from .dataset import (PriorSpec, ThicknessOnlySpec, DatasetManifest,
                      dataset_roundtrip, generate_dataset, sample_prior)
from .flow import (FlowConfig, FlowModel, PosteriorSampleSet, maf_log_prob,
                   maf_sample, nf_loss)
from .cvae import (CvaeConfig, CvaeModel, cvae_loss, decode, encode,
                   reconstruct_from_signal)
from .training import (TrainConfig, OptimizerState, adamw_step, grad_check,
                       train_model)
from .rejection import AbcConfig, abc_posterior, kde_log_prob, kde_map
from .metrics import (benchmark_speedup, normalized_mae, sbc_calibration,
                      test_log_prob, wasserstein_marginals)

__version__ = "0.1.0"
