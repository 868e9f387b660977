"""AdamW, step learning-rate schedule, early stopping and the two trainers.

The optimizer applies decoupled weight decay:
m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2; with bias correction
theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.

Both trainers iterate seeded-shuffled mini-batches, decay the learning rate
by a fixed factor on a fixed epoch period, stop early on stalled validation
loss and return the best-validation checkpoint plus a per-epoch log. Two
runs with identical seeds produce identical logs.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import cvae as cvae_mod
from . import flow as flow_mod
from .flow import TrainingError

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "adamw_step",
    "lr_at_epoch",
    "FlowData",
    "CvaeData",
    "TrainResult",
    "train_model",
    "write_training_log",
    "grad_check",
]


@dataclass
class TrainConfig:
    phase: str  # "flow" | "cvae"
    epochs: int = 0  # 0 resolves to the per-phase default
    lr: float = 1e-3
    weight_decay: float = 1e-2
    decay_factor: float = 0.1
    decay_period: int = 0  # 0 resolves to the per-phase default
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.phase not in ("flow", "cvae"):
            raise ValueError(f"phase must be 'flow' or 'cvae', got {self.phase!r}")
        if self.epochs == 0:
            self.epochs = 100 if self.phase == "flow" else 30
        if self.decay_period == 0:
            self.decay_period = 30 if self.phase == "flow" else 10
        for name in ("epochs", "decay_period", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step schedule lr0 * factor^(epoch // period); non-increasing in epoch."""
    return config.lr * config.decay_factor ** (epoch // config.decay_period)


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """One decoupled-weight-decay Adam update; returns the new parameters.

    `params` and `grads` are name -> tensor maps with matching shapes. The
    moment accumulators inside `state` are updated in place and lazily
    created as zeros on first use.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {tuple(g.shape)} != "
                             f"param shape {tuple(p.shape)}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m = state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v = state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = (p - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
                            - state.lr * state.weight_decay * p)
    return new_params


@dataclass(frozen=True)
class FlowData:
    """Flow-phase training items: unit-cube parameters, signals and the
    latent source ("prior" draws, precomputed encoder moments, or given)."""

    y: np.ndarray  # (n, d) unit cube
    zeta: np.ndarray  # (n, L)
    z_mode: str = "prior"  # "prior" | "encoder" | "given"
    z: np.ndarray | None = None  # (n, zdim) for "given"
    z_moments: tuple | None = None  # (mu, logvar), each (n, zdim), for "encoder"

    def __post_init__(self) -> None:
        if self.y.shape[0] != self.zeta.shape[0]:
            raise ValueError("y and zeta record counts differ")
        if self.z_mode not in ("prior", "encoder", "given"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")
        if self.z_mode == "given" and self.z is None:
            raise ValueError("z_mode 'given' needs z")
        if self.z_mode == "encoder" and self.z_moments is None:
            raise ValueError("z_mode 'encoder' needs z_moments")

    def __len__(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class CvaeData:
    images: np.ndarray  # (n, H, W) counts
    zeta: np.ndarray  # (n, L)

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.zeta.shape[0]:
            raise ValueError("images and zeta record counts differ")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class TrainResult:
    best_state: dict  # state_dict at the best validation loss
    log: list  # rows of (epoch, train_loss, val_loss, lr)
    best_val_loss: float
    best_epoch: int
    aborted: bool = False


def _epoch_generator(seed: int, epoch: int, purpose: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + epoch) * 8 + purpose)
    return g


def _flow_batch_loss(model, data: FlowData, idx, gen, batch_index):
    cfg = model.config
    y = torch.as_tensor(data.y[idx], dtype=model.dtype())
    zeta = torch.as_tensor(data.zeta[idx], dtype=model.dtype())
    z = None
    if cfg.latent_dim > 0:
        if data.z_mode == "prior":
            z = torch.randn((len(idx), cfg.latent_dim), generator=gen,
                            dtype=model.dtype())
        elif data.z_mode == "encoder":
            mu, lv = data.z_moments
            mu_b = torch.as_tensor(mu[idx], dtype=model.dtype())
            lv_b = torch.as_tensor(lv[idx], dtype=model.dtype())
            eps = torch.randn(mu_b.shape, generator=gen, dtype=model.dtype())
            z = mu_b + torch.exp(0.5 * lv_b) * eps
        else:
            z = torch.as_tensor(data.z[idx], dtype=model.dtype())
    return flow_mod.nf_loss(model, y, zeta, z, batch_index=batch_index)


def _cvae_batch_loss(model, data: CvaeData, idx, gen, batch_index):
    return cvae_mod.cvae_loss(model, data.images[idx], data.zeta[idx],
                              generator=gen, batch_index=batch_index)


def train_model(model, train_data, val_data, config: TrainConfig,
                log_path=None) -> TrainResult:
    """Train a flow or CVAE; the model ends loaded with the best-val weights.

    On divergence (non-finite loss) training aborts and the last good
    checkpoint is kept. The returned log has one row per completed epoch.
    """
    if len(train_data) < 1 or len(val_data) < 1:
        raise ValueError("need non-empty train and validation splits")
    batch_loss = _flow_batch_loss if config.phase == "flow" else _cvae_batch_loss

    params = dict(model.named_parameters())
    state = OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                           beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    n = len(train_data)
    best_val = math.inf
    best_epoch = -1
    best_state = copy.deepcopy(model.state_dict())
    log: list[tuple[int, float, float, float]] = []
    aborted = False

    for epoch in range(config.epochs):
        state.lr = lr_at_epoch(config, epoch)
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(epoch,))
        ).permutation(n)
        gen = _epoch_generator(config.seed, epoch, purpose=0)
        model.train()
        total = 0.0
        try:
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                loss = batch_loss(model, train_data, idx, gen, b)
                for p in params.values():
                    if p.grad is not None:
                        p.grad = None
                loss.backward()
                grads = {k: (p.grad if p.grad is not None
                             else torch.zeros_like(p)) for k, p in params.items()}
                with torch.no_grad():
                    new = adamw_step(params, grads, state)
                    for k, p in params.items():
                        p.copy_(new[k])
                total += float(loss.detach()) * len(idx)
        except TrainingError:
            aborted = True
            break

        train_loss = total / n
        model.eval()
        vgen = _epoch_generator(config.seed, epoch, purpose=1)
        vtotal = 0.0
        with torch.no_grad():
            for start in range(0, len(val_data), config.batch_size):
                idx = np.arange(start, min(start + config.batch_size,
                                           len(val_data)))
                vloss = batch_loss(model, val_data, idx, vgen, None)
                vtotal += float(vloss) * len(idx)
        val_loss = vtotal / len(val_data)
        log.append((epoch, train_loss, val_loss, state.lr))

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break

    model.load_state_dict(best_state)
    model.trained = best_epoch >= 0
    if log_path is not None:
        write_training_log(log_path, log)
    return TrainResult(best_state=best_state, log=log,
                       best_val_loss=best_val, best_epoch=best_epoch,
                       aborted=aborted)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in rows:
            writer.writerow(list(row))


def grad_check(loss_fn, params: dict, n_probes: int = 30, h: float = 1e-5,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error of autograd gradients vs central finite differences.

    `loss_fn` re-evaluates the loss from the current parameter values; run
    it on float64 parameters, since h=1e-5 probes assume 64-bit headroom.
    """
    rng = rng or np.random.default_rng(0)
    names = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [params[k] for k in names],
                                allow_unused=True)
    analytic = {k: (g if g is not None else torch.zeros_like(params[k]))
                for k, g in zip(names, grads)}

    worst = 0.0
    sizes = np.array([params[k].numel() for k in names])
    flat_total = sizes.sum()
    for _ in range(n_probes):
        pick = int(rng.integers(flat_total))
        ti = int(np.searchsorted(np.cumsum(sizes), pick, side="right"))
        offset = pick - int(np.concatenate([[0], np.cumsum(sizes)])[ti])
        p = params[names[ti]]
        with torch.no_grad():
            flat = p.view(-1)
            orig = float(flat[offset])
            flat[offset] = orig + h
            up = float(loss_fn())
            flat[offset] = orig - h
            down = float(loss_fn())
            flat[offset] = orig
        fd = (up - down) / (2.0 * h)
        ga = float(analytic[names[ti]].view(-1)[offset])
        denom = max(abs(ga), abs(fd), 1e-8)
        worst = max(worst, abs(ga - fd) / denom)
    return worst
