"""Noise-prediction network and its training loop.

The network is a residual MLP over the flattened (H, d + 1) trajectory.
Timestep and condition embeddings are summed and injected into every
block; the null condition is a learned vector selected by a boolean mask.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import OfflineDataset, normalize_designs
from .diffusion import NoiseSchedule, cfg_loss
from .trajectories import TrajectoryDataset

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-4
    train_steps: int = 50_000
    dropout_p: float = 0.25
    seed: int = 0
    ema_decay: float | None = None
    log_every: int = 100

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        # lr == 0 is accepted as an explicit no-op update.
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.train_steps < 0:
            raise ValueError(f"train_steps must be >= 0, got {self.train_steps}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0, 1], got {self.dropout_p}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in (0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class DenoiserArch:
    horizon: int
    channels: int
    hidden: int = 256
    n_blocks: int = 3
    time_dim: int = 64
    cond_scale: float | None = None  # defaults to horizon
    zero_head: bool = True

    @property
    def scale(self) -> float:
        return float(self.cond_scale if self.cond_scale is not None else self.horizon)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class ResidualBlock(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.inner = nn.Linear(hidden, hidden)
        self.emb = nn.Linear(hidden, hidden)
        self.outer = nn.Linear(hidden, hidden)
        self.act = nn.SiLU()

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        z = self.inner(self.act(h)) + self.emb(emb)
        return h + self.outer(self.act(z))


class DenoiserNet(nn.Module):
    def __init__(self, arch: DenoiserArch):
        super().__init__()
        self.arch = arch
        width = arch.horizon * arch.channels
        self.inp = nn.Linear(width, arch.hidden)
        self.time_mlp = nn.Sequential(
            nn.Linear(arch.time_dim, arch.hidden), nn.SiLU(), nn.Linear(arch.hidden, arch.hidden)
        )
        self.cond_mlp = nn.Sequential(
            nn.Linear(1, arch.hidden), nn.SiLU(), nn.Linear(arch.hidden, arch.hidden)
        )
        self.null_embedding = nn.Parameter(torch.randn(arch.hidden) * 0.1)
        self.blocks = nn.ModuleList(ResidualBlock(arch.hidden) for _ in range(arch.n_blocks))
        self.head = nn.Sequential(nn.SiLU(), nn.Linear(arch.hidden, width))
        # At high noise the target is close to the input itself; a linear
        # path keeps the reverse chain from drifting.
        self.skip = nn.Linear(width, width, bias=False)
        if arch.zero_head:
            nn.init.zeros_(self.head[1].weight)
            nn.init.zeros_(self.head[1].bias)
            nn.init.zeros_(self.skip.weight)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, null: torch.Tensor,
                t: torch.Tensor) -> torch.Tensor:
        batch = x_t.shape[0]
        expected = (self.arch.horizon, self.arch.channels)
        if tuple(x_t.shape[1:]) != expected:
            raise ValueError(f"expected trajectory shape {expected}, got {tuple(x_t.shape[1:])}")
        dtype = x_t.dtype
        emb = self.time_mlp(timestep_embedding(t, self.arch.time_dim).to(dtype))
        c = self.cond_mlp((cond.to(dtype) / self.arch.scale).reshape(batch, 1))
        c = torch.where(null.reshape(batch, 1), self.null_embedding.to(dtype).expand_as(c), c)
        emb = emb + c
        flat = x_t.reshape(batch, -1)
        h = self.inp(flat)
        for block in self.blocks:
            h = block(h, emb)
        return (self.head(h) + self.skip(flat)).reshape(x_t.shape)


def init_network(arch: DenoiserArch, seed: int, dtype=torch.float32) -> DenoiserNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DenoiserNet(arch)
    return net.to(dtype)


@dataclass
class DenoiserModel:
    """Network plus the schedule length it was built for and training metadata."""

    net: DenoiserNet
    T: int
    metadata: dict = field(default_factory=dict)

    @property
    def arch(self) -> DenoiserArch:
        return self.net.arch

    def __call__(self, x_t, cond, null, t):
        return self.net(x_t, cond, null, t)

    def forward(self, x_t, cond, t: int):
        """Noise prediction for numpy or torch input; ``cond=None`` is the null token."""
        if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > self.T):
            raise ValueError(f"timestep out of [1, {self.T}]: {t}")
        param = next(self.net.parameters())
        x = torch.as_tensor(x_t, dtype=param.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        batch = x.shape[0]
        t_vec = torch.as_tensor(np.broadcast_to(np.asarray(t), (batch,)).copy(), dtype=torch.long)
        if cond is None:
            c = torch.zeros(batch, dtype=param.dtype)
            null = torch.ones(batch, dtype=torch.bool)
        else:
            c = torch.as_tensor(np.broadcast_to(np.asarray(cond, dtype=np.float64), (batch,)).copy(),
                                dtype=param.dtype)
            null = torch.zeros(batch, dtype=torch.bool)
        out = self.net(x, c, null, t_vec)
        return out[0] if squeeze else out

    def predict(self, x_t, cond, t: int) -> np.ndarray:
        with torch.no_grad():
            return self.forward(x_t, cond, t).numpy().astype(np.float64)

    def save(self, path, schedule: NoiseSchedule | None = None) -> None:
        header = {
            "kind": "denoiser",
            "arch": asdict(self.arch),
            "T": self.T,
            "schedule": schedule.to_json() if schedule is not None else None,
            "metadata": self.metadata,
        }
        arrays = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> "DenoiserModel":
        header, arrays = load_checkpoint(path)
        if header.get("kind") != "denoiser":
            raise ValueError(f"{path}: not a denoiser checkpoint")
        arch = DenoiserArch(**header["arch"])
        dtype = torch.float64 if header["dtype"] == ["float64"] else torch.float32
        net = DenoiserNet(arch).to(dtype)
        net.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        return cls(net=net, T=int(header["T"]), metadata=header.get("metadata", {}))


def new_model(arch: DenoiserArch, T: int, seed: int = 0, dtype=torch.float32) -> DenoiserModel:
    return DenoiserModel(net=init_network(arch, seed, dtype), T=T)


def trajectory_arrays(traj_ds: TrajectoryDataset, ds: OfflineDataset) -> tuple[np.ndarray, np.ndarray]:
    """Model-space trajectories (N, H, d + 1) and their summed-score conditions."""
    designs = normalize_designs(ds, traj_ds.designs())
    scores = traj_ds.normalized_scores()
    x0 = np.concatenate([designs, scores[..., None]], axis=-1)
    return x0, scores.sum(axis=1)


def train(model: DenoiserModel, x0: np.ndarray, cond: np.ndarray, sched: NoiseSchedule,
          cfg: TrainConfig) -> tuple[DenoiserModel, list[tuple[int, float]]]:
    """Adam on the CFG loss; returns the trained model and (step, mean loss) rows.

    ``x0`` holds model-space trajectories (N, H, d + 1) and ``cond`` one
    condition value per trajectory. Each logged loss is the mean over the
    preceding ``log_every`` steps.
    """
    cfg.validate()
    if x0.shape[0] == 0:
        raise ValueError("empty trajectory dataset")
    if sched.T != model.T:
        raise ValueError(f"schedule has T={sched.T} but model expects T={model.T}")
    net = model.net
    dtype = next(net.parameters()).dtype
    data = torch.as_tensor(x0, dtype=dtype)
    conds = torch.as_tensor(cond, dtype=dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    ema = copy.deepcopy(net) if cfg.ema_decay is not None else None
    curve: list[tuple[int, float]] = []
    running = 0.0
    count = 0
    net.train()
    for step in range(1, cfg.train_steps + 1):
        rows = torch.randint(0, data.shape[0], (cfg.batch_size,), generator=gen)
        try:
            loss = cfg_loss(model, data[rows], conds[rows], sched, cfg.dropout_p, gen)
        except FloatingPointError as exc:
            raise TrainingError(step, str(exc)) from exc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for p_ema, p in zip(ema.parameters(), net.parameters()):
                    p_ema.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)
        running += loss.item()
        count += 1
        if step % cfg.log_every == 0 or step == cfg.train_steps:
            curve.append((step, running / count))
            logger.debug("denoiser step %d loss %.5f", step, running / count)
            running, count = 0.0, 0
    net.eval()
    if ema is not None:
        model.net = ema.eval()
    model.metadata = {**model.metadata, "train": asdict(cfg), "steps": cfg.train_steps}
    return model, curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in curve:
            writer.writerow([step, repr(float(loss))])
