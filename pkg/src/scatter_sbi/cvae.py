"""Conditional VAE over detector images given the in-plane signal.

Encoder and decoder are mirrored stacks of stride-2 convolution blocks
(kernel 3, batch norm, SiLU); a 2-layer MLP embeds the conditioning signal.
Both q(z|X, zeta) and p(X|zeta, z) are diagonal Gaussians with learned mean
and log-variance. Images enter in log10(1+I) space; the decoder likelihood
lives in that space and reconstructions are mapped back to counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .flow import TrainingError
from .forward import DetectorImage, ExperimentGeometry

__all__ = [
    "CvaeConfig",
    "CvaeModel",
    "encode",
    "decode",
    "cvae_loss",
    "reconstruct_from_signal",
    "kl_standard_normal",
    "gaussian_log_prob",
    "image_to_log",
    "log_to_counts",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CvaeConfig:
    image_shape: tuple[int, int]  # (H, W) = (n_pixels_z, n_pixels_y)
    signal_len: int
    latent_dim: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128, 128, 128)
    cond_hidden: int = 128
    cond_dim: int = 128
    logvar_clamp: float = 7.0

    def __post_init__(self) -> None:
        h, w = self.image_shape
        f = 2 ** len(self.widths)
        if h % f or w % f:
            raise ValueError(f"image shape {self.image_shape} must be "
                             f"divisible by {f} for {len(self.widths)} blocks")
        if self.signal_len < 1 or self.latent_dim < 1:
            raise ValueError("signal_len and latent_dim must be >= 1")

    @property
    def bottom_shape(self) -> tuple[int, int]:
        f = 2 ** len(self.widths)
        return self.image_shape[0] // f, self.image_shape[1] // f


def image_to_log(counts) -> np.ndarray:
    return np.log10(1.0 + np.asarray(counts, dtype=np.float64))


def log_to_counts(log_image) -> np.ndarray:
    return np.clip(np.power(10.0, np.asarray(log_image, dtype=np.float64)) - 1.0,
                   0.0, None)


class CvaeModel(nn.Module):
    def __init__(self, config: CvaeConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.trained = False
        widths = config.widths
        enc = []
        prev = 1
        for w in widths:
            enc += [nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1),
                    nn.BatchNorm2d(w), nn.SiLU()]
            prev = w
        self.encoder = nn.Sequential(*enc)
        bh, bw = config.bottom_shape
        feat = widths[-1] * bh * bw

        self.cond = nn.Sequential(
            nn.Linear(config.signal_len, config.cond_hidden), nn.SiLU(),
            nn.Linear(config.cond_hidden, config.cond_dim),
        )
        self.q_head = nn.Linear(feat + config.cond_dim, 2 * config.latent_dim)
        nn.init.zeros_(self.q_head.weight)
        nn.init.zeros_(self.q_head.bias)

        self.dec_fc = nn.Linear(config.latent_dim + config.cond_dim, feat)
        dec = []
        rev = list(widths[::-1])
        for i, w in enumerate(rev):
            out_w = rev[i + 1] if i + 1 < len(rev) else widths[0]
            dec += [nn.ConvTranspose2d(w, out_w, kernel_size=3, stride=2,
                                       padding=1, output_padding=1),
                    nn.BatchNorm2d(out_w), nn.SiLU()]
        self.decoder = nn.Sequential(*dec)
        self.out_conv = nn.Conv2d(widths[0], 2, kernel_size=3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.to(dtype)

    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _check_signal(self, zeta: torch.Tensor) -> None:
        if zeta.shape[-1] != self.config.signal_len:
            raise ValueError(f"signal length {zeta.shape[-1]} != "
                             f"{self.config.signal_len}")

    def encode_batch(self, log_images: torch.Tensor, zeta: torch.Tensor):
        """q(z|X, zeta) moments for a batch of log-space images."""
        if log_images.shape[-2:] != self.config.image_shape:
            raise ValueError(f"image shape {tuple(log_images.shape[-2:])} != "
                             f"{self.config.image_shape}")
        self._check_signal(zeta)
        feat = self.encoder(log_images.unsqueeze(1)).flatten(1)
        c = self.cond(zeta)
        raw = self.q_head(torch.cat([feat, c], dim=1))
        zd = self.config.latent_dim
        return raw[:, :zd], raw[:, zd:]

    def decode_batch(self, z: torch.Tensor, zeta: torch.Tensor):
        """p(X|zeta, z) per-pixel Gaussian moments in log-image space."""
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent dimension {z.shape[-1]} != "
                             f"{self.config.latent_dim}")
        self._check_signal(zeta)
        c = self.cond(zeta)
        bh, bw = self.config.bottom_shape
        h = self.dec_fc(torch.cat([z, c], dim=1))
        h = nn.functional.silu(h).view(-1, self.config.widths[-1], bh, bw)
        out = self.out_conv(self.decoder(h))
        cl = self.config.logvar_clamp
        return out[:, 0], torch.clamp(out[:, 1], -cl, cl)


def _to_log_batch(model: CvaeModel, images) -> tuple[torch.Tensor, bool]:
    """Counts-space image(s) (or DetectorImage) to a log-space float batch."""
    if isinstance(images, DetectorImage):
        images = images.intensities
    arr = np.asarray(images, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    return torch.as_tensor(np.log10(1.0 + arr), dtype=model.dtype()), squeeze


def _zeta_batch(model: CvaeModel, zeta, batch: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(zeta, dtype=np.float64), dtype=model.dtype())
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if t.shape[0] == 1 and batch > 1:
        t = t.expand(batch, -1)
    if t.shape[0] != batch:
        raise ValueError(f"{t.shape[0]} signals for a batch of {batch}")
    return t


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag e^logvar) || N(0, I)) summed over dimensions."""
    return 0.5 * (mu ** 2 + torch.exp(logvar) - 1.0 - logvar).sum(dim=-1)


def gaussian_log_prob(x: torch.Tensor, mu: torch.Tensor,
                      logvar: torch.Tensor) -> torch.Tensor:
    """Diagonal-Gaussian log density summed over all non-batch dimensions."""
    term = (x - mu) ** 2 * torch.exp(-logvar) + logvar + _LOG_2PI
    return -0.5 * term.flatten(1).sum(dim=1)


def encode(model: CvaeModel, image, zeta):
    """Posterior moments (mu_z, logvar_z) for one image; pure, eval mode."""
    log_img, squeeze = _to_log_batch(model, image)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mu, lv = model.encode_batch(log_img, _zeta_batch(model, zeta,
                                                             log_img.shape[0]))
    finally:
        model.train(was_training)
    return (mu[0], lv[0]) if squeeze else (mu, lv)


def decode(model: CvaeModel, z, zeta):
    """Decoder moments (mu_X, logvar_X) in log-image space; pure, eval mode."""
    zt = torch.as_tensor(np.asarray(z, dtype=np.float64), dtype=model.dtype())
    squeeze = zt.ndim == 1
    if squeeze:
        zt = zt.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            mu, lv = model.decode_batch(zt, _zeta_batch(model, zeta, zt.shape[0]))
    finally:
        model.train(was_training)
    return (mu[0], lv[0]) if squeeze else (mu, lv)


def cvae_loss(model: CvaeModel, images, zetas,
              generator: torch.Generator | None = None,
              batch_index: int | None = None) -> torch.Tensor:
    """Negative ELBO: KL(q(z|X,zeta) || N(0,I)) - E_q[log p(X|zeta,z)],
    averaged over the batch with one reparameterized z draw per item."""
    log_img, _ = _to_log_batch(model, images)
    if log_img.shape[0] < 1:
        raise ValueError("empty batch")
    zeta = _zeta_batch(model, zetas, log_img.shape[0])
    mu_z, lv_z = model.encode_batch(log_img, zeta)
    eps = torch.randn(mu_z.shape, generator=generator, dtype=mu_z.dtype)
    z = mu_z + torch.exp(0.5 * lv_z) * eps
    mu_x, lv_x = model.decode_batch(z, zeta)
    kl = kl_standard_normal(mu_z, lv_z)
    rec = gaussian_log_prob(log_img, mu_x, lv_x)
    loss = (kl - rec).mean()
    if not torch.isfinite(loss):
        raise TrainingError("non-finite CVAE loss", batch_index=batch_index)
    return loss


def reconstruct_from_signal(model: CvaeModel, zeta,
                            rng: np.random.Generator,
                            geometry: ExperimentGeometry | None = None):
    """Sample z ~ N(0, I) and return the decoder mean as a counts image.

    With a geometry the result is wrapped in a DetectorImage; otherwise the
    raw counts array is returned.
    """
    z = rng.standard_normal(model.config.latent_dim)
    mu, _ = decode(model, z, zeta)
    counts = log_to_counts(mu.cpu().numpy())
    if geometry is None:
        return counts
    if (geometry.n_pixels_z, geometry.n_pixels_y) != model.config.image_shape:
        raise ValueError("geometry does not match the model's image shape")
    return DetectorImage(intensities=counts, geometry=geometry)
