"""Conditional masked autoregressive flow over unit-cube parameters.

The flow stacks affine autoregressive transforms whose shift/log-scale come
from single-hidden-layer masked MLPs (MADE-style masks), with a fixed
reversal permutation before each transform and a diagonal-Gaussian base
whose mean/log-variance are produced from the conditioning context. The
context is an embedding of the in-plane signal concatenated with the CVAE
latent. Parameters live in the unit cube; a logit pre-transform keeps the
modeled density supported on it.

Density evaluation is a single parallel pass; sampling inverts the
autoregressive maps dimension by dimension and runs on a numpy snapshot of
the weights (float64) so carried log-probabilities match recomputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

__all__ = [
    "FlowConfig",
    "FlowModel",
    "PosteriorSampleSet",
    "MaskedConditioner",
    "maf_log_prob",
    "maf_sample",
    "nf_loss",
]

_LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    """Non-finite value hit during a training forward pass."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class PosteriorSampleSet:
    """Parameter draws (unit cube) with their exact log densities in nats."""

    samples: np.ndarray  # (n, d)
    log_probs: np.ndarray  # (n,)

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("samples must be a non-empty (n, d) array")
        if lp.shape != (s.shape[0],):
            raise ValueError("log_probs must be (n,)")
        if not np.all(np.isfinite(lp)):
            raise ValueError("log_probs must be finite")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "log_probs", lp)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    signal_len: int = 0
    latent_dim: int = 16
    n_transforms: int = 8
    hidden: int = 128
    context_dim: int = 128
    embed_hidden: int = 128
    bounded: bool = True
    logit_eps: float = 1e-6
    log_scale_clamp: float = 5.0
    base_logvar_clamp: float = 7.0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.signal_len < 0 or self.latent_dim < 0:
            raise ValueError("signal_len and latent_dim must be >= 0")
        if self.n_transforms < 1 or self.hidden < 1:
            raise ValueError("need at least one transform and one hidden unit")

    @property
    def context_in(self) -> int:
        return self.signal_len + self.latent_dim

    @property
    def conditional(self) -> bool:
        return self.context_in > 0


def _made_masks(dim: int, hidden: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Input->hidden and hidden->output masks enforcing out_i <- inputs < i."""
    in_deg = torch.arange(1, dim + 1)
    hid_deg = torch.arange(hidden) % max(dim - 1, 1) + 1
    mask_in = (hid_deg[:, None] >= in_deg[None, :]).to(torch.get_default_dtype())
    out_deg = torch.arange(1, dim + 1).repeat(2)  # shift block then log-scale block
    mask_out = (out_deg[:, None] > hid_deg[None, :]).to(torch.get_default_dtype())
    return mask_in, mask_out


class MaskedConditioner(nn.Module):
    """Single-hidden-layer masked MLP emitting per-dimension shift/log-scale.

    The context enters unmasked at both layers so conditioning reaches every
    output even for dim == 1, where the masked path is fully blocked.
    """

    def __init__(self, dim: int, hidden: int, context_dim: int,
                 log_scale_clamp: float):
        super().__init__()
        self.dim = dim
        self.log_scale_clamp = log_scale_clamp
        mask_in, mask_out = _made_masks(dim, hidden)
        self.register_buffer("mask_in", mask_in)
        self.register_buffer("mask_out", mask_out)
        self.lin_in = nn.Linear(dim, hidden)
        self.lin_out = nn.Linear(hidden, 2 * dim)
        if context_dim > 0:
            self.ctx_in = nn.Linear(context_dim, hidden, bias=False)
            self.ctx_out = nn.Linear(context_dim, 2 * dim, bias=False)
        else:
            self.ctx_in = None
            self.ctx_out = None
        # identity at initialization: zero shift and zero log-scale
        nn.init.zeros_(self.lin_out.weight)
        nn.init.zeros_(self.lin_out.bias)
        if self.ctx_out is not None:
            nn.init.zeros_(self.ctx_out.weight)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None):
        h = nn.functional.linear(x, self.lin_in.weight * self.mask_in,
                                 self.lin_in.bias)
        if context is not None and self.ctx_in is not None:
            h = h + self.ctx_in(context)
        h = nn.functional.silu(h)
        raw = nn.functional.linear(h, self.lin_out.weight * self.mask_out,
                                   self.lin_out.bias)
        if context is not None and self.ctx_out is not None:
            raw = raw + self.ctx_out(context)
        shift, log_scale_raw = raw[:, :self.dim], raw[:, self.dim:]
        s = self.log_scale_clamp
        log_scale = s * torch.tanh(log_scale_raw / s)
        return shift, log_scale


class FlowModel(nn.Module):
    def __init__(self, config: FlowConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.trained = False
        d, k = config.dim, config.n_transforms
        self.transforms = nn.ModuleList(
            MaskedConditioner(d, config.hidden,
                              config.context_dim if config.conditional else 0,
                              config.log_scale_clamp)
            for _ in range(k)
        )
        perm = torch.arange(d - 1, -1, -1)
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))
        if config.conditional:
            self.embed = nn.Sequential(
                nn.Linear(config.context_in, config.embed_hidden),
                nn.SiLU(),
                nn.Linear(config.embed_hidden, config.context_dim),
            )
            self.base_head = nn.Linear(config.context_dim, 2 * d)
            nn.init.zeros_(self.base_head.weight)
            nn.init.zeros_(self.base_head.bias)
        else:
            self.embed = None
            self.base_head = None
        self.to(dtype)

    def context(self, zeta: torch.Tensor | None, z: torch.Tensor | None,
                batch: int) -> torch.Tensor | None:
        if not self.config.conditional:
            return None
        parts = []
        for v, width, name in ((zeta, self.config.signal_len, "zeta"),
                               (z, self.config.latent_dim, "z")):
            if width == 0:
                continue
            if v is None:
                raise ValueError(f"model is conditional on {name}")
            t = torch.as_tensor(v, dtype=self.dtype())
            if t.ndim == 1:
                t = t.unsqueeze(0).expand(batch, -1)
            if t.shape != (batch, width):
                raise ValueError(f"{name} has shape {tuple(t.shape)}, "
                                 f"expected ({batch}, {width})")
            parts.append(t)
        return self.embed(torch.cat(parts, dim=1))

    def base_params(self, context: torch.Tensor | None, batch: int):
        d = self.config.dim
        if context is None:
            zeros = torch.zeros(batch, d, dtype=self.dtype())
            return zeros, zeros.clone()
        raw = self.base_head(context)
        mu, lv_raw = raw[:, :d], raw[:, d:]
        b = self.config.base_logvar_clamp
        return mu, b * torch.tanh(lv_raw / b)

    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def _as_batch(model: FlowModel, y) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(y, dtype=model.dtype())
    squeeze = t.ndim == 1
    if squeeze:
        t = t.unsqueeze(0)
    if t.ndim != 2 or t.shape[1] != model.config.dim:
        raise ValueError(f"parameter batch has shape {tuple(t.shape)}, "
                         f"expected (*, {model.config.dim})")
    return t, squeeze


def maf_log_prob(model: FlowModel, y, zeta=None, z=None) -> torch.Tensor:
    """Exact log density (nats) of y under the flow conditioned on (zeta, z).

    Accepts a single vector or a batch; differentiable in the model weights.
    """
    yb, squeeze = _as_batch(model, y)
    c = model.context(zeta, z, yb.shape[0])
    log_det = torch.zeros(yb.shape[0], dtype=model.dtype())
    x = yb
    if model.config.bounded:
        eps = model.config.logit_eps
        x = torch.clamp(x, eps, 1.0 - eps)
        log_det = log_det - torch.log(x * (1.0 - x)).sum(dim=1)
        x = torch.log(x) - torch.log1p(-x)
    for tr in model.transforms:
        x = x[:, model.perm]
        shift, log_scale = tr(x, c)
        x = (x - shift) * torch.exp(-log_scale)
        log_det = log_det - log_scale.sum(dim=1)
    mu, lv = model.base_params(c, yb.shape[0])
    base = -0.5 * ((x - mu) ** 2 * torch.exp(-lv) + lv + _LOG_2PI).sum(dim=1)
    out = base + log_det
    return out[0] if squeeze else out


def nf_loss(model: FlowModel, y, zeta=None, z=None,
            batch_index: int | None = None) -> torch.Tensor:
    """Mean negative log density over a batch of (y, zeta, z)."""
    yb, _ = _as_batch(model, y)
    if yb.shape[0] < 1:
        raise ValueError("empty batch")
    loss = -maf_log_prob(model, yb, zeta, z).mean()
    if not torch.isfinite(loss):
        raise TrainingError("non-finite flow loss", batch_index=batch_index)
    return loss


# --- numpy sampling path ---------------------------------------------------

def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _np64(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64)


def _snapshot(model: FlowModel) -> dict:
    cfg = model.config
    snap: dict = {"transforms": []}
    for tr in model.transforms:
        w = {
            "w_in": _np64(tr.lin_in.weight * tr.mask_in),
            "b_in": _np64(tr.lin_in.bias),
            "w_out": _np64(tr.lin_out.weight * tr.mask_out),
            "b_out": _np64(tr.lin_out.bias),
            "wc_in": _np64(tr.ctx_in.weight) if tr.ctx_in is not None else None,
            "wc_out": _np64(tr.ctx_out.weight) if tr.ctx_out is not None else None,
        }
        snap["transforms"].append(w)
    if cfg.conditional:
        snap["embed"] = [(_np64(m.weight), _np64(m.bias))
                         for m in model.embed if isinstance(m, nn.Linear)]
        snap["base"] = (_np64(model.base_head.weight), _np64(model.base_head.bias))
    snap["inv_perm"] = model.inv_perm.cpu().numpy()
    return snap


def _affine_forward_np(w: dict, v: np.ndarray, c: np.ndarray | None,
                       clamp: float) -> tuple[np.ndarray, np.ndarray]:
    """Invert one autoregressive transform dimension by dimension.

    Maintains the hidden pre-activation incrementally: fixing dimension i
    adds a rank-one update, so each step costs one activation plus one
    hidden-to-output product for the current dimension only.
    """
    n, d = v.shape
    hidden = w["b_in"].size
    h_pre = np.tile(w["b_in"], (n, 1))
    if c is not None and w["wc_in"] is not None:
        h_pre += c @ w["wc_in"].T
    ctx_out = c @ w["wc_out"].T if (c is not None and w["wc_out"] is not None) else None
    x = np.empty_like(v)
    sum_ls = np.zeros(n)
    w_out_t = w["w_out"].T  # (hidden, 2d)
    for i in range(d):
        h = _silu(h_pre)
        cols = h @ w_out_t[:, [i, d + i]]  # (n, 2): shift, raw log-scale
        shift = cols[:, 0] + w["b_out"][i]
        ls_raw = cols[:, 1] + w["b_out"][d + i]
        if ctx_out is not None:
            shift = shift + ctx_out[:, i]
            ls_raw = ls_raw + ctx_out[:, d + i]
        ls = clamp * np.tanh(ls_raw / clamp)
        x[:, i] = shift + np.exp(ls) * v[:, i]
        sum_ls += ls
        if i + 1 < d:
            h_pre += np.outer(x[:, i], w["w_in"][:, i])
    return x, sum_ls


def maf_sample(model: FlowModel, zeta=None, z=None, n: int = 1,
               rng: np.random.Generator | None = None) -> PosteriorSampleSet:
    """Draw n samples from the flow conditioned on (zeta, z).

    `zeta` is one signal; `z` may be a single latent (shared) or an (n, zdim)
    batch of per-draw latents. Every sample carries its exact log density,
    equal to `maf_log_prob` recomputed on the same weights in float64.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        raise ValueError("maf_sample requires an rng")
    cfg = model.config
    snap = _snapshot(model)

    c = None
    if cfg.conditional:
        parts = []
        for v, width, name in ((zeta, cfg.signal_len, "zeta"),
                               (z, cfg.latent_dim, "z")):
            if width == 0:
                continue
            if v is None:
                raise ValueError(f"model is conditional on {name}")
            arr = np.asarray(v, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.shape[1] != width or arr.shape[0] not in (1, n):
                raise ValueError(f"{name} has shape {arr.shape}, expected "
                                 f"({{1,{n}}}, {width})")
            parts.append(arr)
        rows = max(p.shape[0] for p in parts)
        ctx = np.concatenate([np.broadcast_to(p, (rows, p.shape[1])) for p in parts],
                             axis=1)
        (w1, b1), (w2, b2) = snap["embed"]
        c = _silu(ctx @ w1.T + b1) @ w2.T + b2

    d = cfg.dim
    if c is None:
        mu = np.zeros((1, d))
        lv = np.zeros((1, d))
    else:
        bw, bb = snap["base"]
        raw = c @ bw.T + bb
        mu, lv_raw = raw[:, :d], raw[:, d:]
        bcl = cfg.base_logvar_clamp
        lv = bcl * np.tanh(lv_raw / bcl)

    eps = rng.standard_normal((n, d))
    x = mu + np.exp(0.5 * lv) * eps
    log_p = -0.5 * (eps ** 2 + lv + _LOG_2PI).sum(axis=1)

    c_rows = None
    if c is not None:
        c_rows = np.broadcast_to(c, (n, c.shape[1])) if c.shape[0] == 1 else c
    for t in range(cfg.n_transforms - 1, -1, -1):
        x, sum_ls = _affine_forward_np(snap["transforms"][t], x, c_rows,
                                       cfg.log_scale_clamp)
        log_p = log_p - sum_ls
        x = x[:, snap["inv_perm"]]
    if cfg.bounded:
        y = 1.0 / (1.0 + np.exp(-x))
        eps_b = cfg.logit_eps
        y = np.clip(y, eps_b, 1.0 - eps_b)
        log_p = log_p - np.log(y * (1.0 - y)).sum(axis=1)
    else:
        y = x
    return PosteriorSampleSet(samples=y, log_probs=log_p)
