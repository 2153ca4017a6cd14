"""DDPM noise schedule, classifier-free guidance and context-conditioned sampling.

Timesteps are 1-based throughout (t in [1, T]); schedule arrays are stored
0-based, so ``beta[t - 1]`` is beta_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

SCHEDULE_KINDS = ("cosine", "linear")
GUIDANCE_MODES = ("cfg", "inpaint")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a nonempty 1-D array")
        if not (np.all(beta > 0) and np.all(beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (alpha, alpha_bar):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def check_t(self, t) -> None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of [1, {self.T}]: {t}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "NoiseSchedule":
        return cls(beta=np.asarray(payload["beta"], dtype=np.float64), kind=payload["kind"])


def cosine_betas(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    return np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-12, max_beta)


def make_schedule(
    T: int,
    kind: str = "linear",
    beta_start: float | None = None,
    beta_end: float | None = None,
) -> NoiseSchedule:
    """Linear betas default to (1e-4, 0.02) rescaled by 1000 / T."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "cosine":
        beta = cosine_betas(T)
    elif kind == "linear":
        scale = 1000.0 / T
        lo = min(1e-4 * scale, 0.5) if beta_start is None else beta_start
        hi = min(2e-2 * scale, 0.999) if beta_end is None else beta_end
        beta = np.linspace(lo, hi, T, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(beta=beta, kind=kind)


def _coef(values: np.ndarray, t, like):
    """Gather 1-based schedule entries, shaped to broadcast over ``like``."""
    picked = values[np.asarray(t) - 1]
    if np.ndim(picked) == 0:
        return float(picked)
    shape = (-1,) + (1,) * (like.ndim - 1)
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(picked, dtype=like.dtype, device=like.device).reshape(shape)
    return picked.reshape(shape)


def forward_noise(sched: NoiseSchedule, tau0, t, noise):
    """Closed-form marginal sample sqrt(abar_t) * tau0 + sqrt(1 - abar_t) * noise.

    ``t`` is an int or one timestep per leading-axis element. Works on numpy
    arrays and torch tensors alike.
    """
    if tuple(tau0.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: {tuple(tau0.shape)} vs {tuple(noise.shape)}")
    sched.check_t(t)
    a = _coef(np.sqrt(sched.alpha_bar), t, tau0)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar), t, tau0)
    return a * tau0 + b * noise


def forward_noise_step(sched: NoiseSchedule, x_prev, t, noise):
    """One Markov step q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, beta_t I)."""
    sched.check_t(t)
    return math.sqrt(sched.alpha[t - 1]) * x_prev + math.sqrt(sched.beta[t - 1]) * noise


@dataclass(frozen=True)
class GuidanceConfig:
    """Sampling-time guidance settings.

    ``y_star`` is the per-step normalized optimum; the trajectory-level
    target is ``alpha_level * horizon * y_star``.
    """

    omega: float = 1.2
    alpha_level: float = 0.8
    y_star: float = 1.0
    mode: str = "cfg"
    x0_clip: float | None = None  # bound on predicted clean design channels

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError(f"omega must be >= 0, got {self.omega}")
        if self.x0_clip is not None and not self.x0_clip > 0:
            raise ValueError(f"x0_clip must be > 0, got {self.x0_clip}")
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")

    def target(self, horizon: int) -> float:
        return self.alpha_level * (horizon * self.y_star)


def cfg_loss(model, x0: torch.Tensor, cond: torch.Tensor, sched: NoiseSchedule,
             dropout_p: float, generator: torch.Generator) -> torch.Tensor:
    """Classifier-free-guidance noise-prediction loss for one batch.

    Draws t ~ U{1..T}, eps ~ N(0, I) and a Bernoulli(dropout_p) null mask
    per element; returns the batch mean of ||eps - eps_theta||^2. Call
    ``backward()`` on the result for parameter gradients.
    """
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError(f"dropout_p must be in [0, 1], got {dropout_p}")
    batch = x0.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    null = torch.rand(batch, generator=generator) < dropout_p
    x_t = forward_noise(sched, x0, t.numpy(), eps)
    pred = model(x_t, cond, null, t)
    per_elem = ((eps - pred) ** 2).reshape(batch, -1).sum(dim=1)
    loss = per_elem.mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite CFG loss {loss.item()} (max |x_t|={x_t.abs().max().item():.3g}, "
            f"max |pred|={pred.abs().max().item():.3g})"
        )
    return loss


def guided_epsilon(model, x_t: np.ndarray, t: int, cond, omega: float) -> np.ndarray:
    """Blend of unconditional and conditional noise predictions.

    Written as (1 - omega) * uncond + omega * cond, which is algebraically
    uncond + omega * (cond - uncond) and reduces exactly at omega in {0, 1}.
    """
    eps_uncond = model.predict(x_t, None, t)
    if omega == 0:
        return eps_uncond
    eps_cond = model.predict(x_t, cond, t)
    return (1.0 - omega) * eps_uncond + omega * eps_cond


def denoise_step(sched: NoiseSchedule, x_t, t: int, eps_hat, noise=None, x0_clip=None):
    """Ancestral DDPM update with fixed variance sigma_t^2 = beta_t.

    With ``x0_clip`` the implied clean sample is formed, its design channels
    (all but the last) clipped to [-x0_clip, x0_clip], and the mean taken
    from the Gaussian posterior q(x_{t-1} | x_t, x0). Without clipping both
    routes give the same mean.
    """
    sched.check_t(t)
    if tuple(np.shape(x_t)) != tuple(np.shape(eps_hat)):
        raise ValueError(f"shape mismatch: {np.shape(x_t)} vs {np.shape(eps_hat)}")
    alpha_t = sched.alpha[t - 1]
    beta_t = sched.beta[t - 1]
    abar_t = sched.alpha_bar[t - 1]
    if x0_clip is None:
        mean = (x_t - beta_t / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(alpha_t)
    else:
        abar_prev = sched.alpha_bar[t - 2] if t > 1 else 1.0
        x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
        x0_hat[..., :-1] = np.clip(x0_hat[..., :-1], -x0_clip, x0_clip)
        mean = (math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)) * x0_hat + (
            math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
        ) * x_t
    if t == 1 or noise is None:
        return mean
    if tuple(np.shape(noise)) != tuple(np.shape(x_t)):
        raise ValueError("noise shape must match x_t")
    return mean + math.sqrt(beta_t) * noise


def sample_with_context(
    model,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    ctx: np.ndarray,
    horizon: int,
    rngs: list[np.random.Generator],
) -> np.ndarray:
    """Reverse diffusion with the first C positions pinned to ``ctx``.

    ``ctx`` has shape (B, C, channels) and holds model-space values
    (scaled designs and normalized scores); one generator per trajectory
    in ``rngs``. Returns the clean trajectories, shape (B, horizon, channels).
    In ``"inpaint"`` mode guidance comes from overwriting the score channel
    of the free positions with ``y_star`` instead of the conditional branch.
    """
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.ndim != 3:
        raise ValueError(f"ctx must be (B, C, channels), got {ctx.shape}")
    batch, n_ctx, channels = ctx.shape
    if len(rngs) != batch:
        raise ValueError(f"need one generator per trajectory ({batch}), got {len(rngs)}")
    if not 0 <= n_ctx < horizon:
        raise ValueError(f"context length must be in [0, {horizon}), got {n_ctx}")

    def draw():
        return np.stack([rng.standard_normal((horizon, channels)) for rng in rngs])

    target = np.full(batch, guidance.target(horizon))
    x = draw()
    x[:, :n_ctx] = ctx
    for t in range(sched.T, 0, -1):
        if guidance.mode == "cfg":
            eps_hat = guided_epsilon(model, x, t, target, guidance.omega)
        else:
            x[:, n_ctx:, -1] = guidance.y_star
            eps_hat = model.predict(x, None, t)
        noise = draw() if t > 1 else None
        x = denoise_step(sched, x, t, eps_hat, noise, guidance.x0_clip)
        x[:, :n_ctx] = ctx
    if guidance.mode == "inpaint":
        x[:, n_ctx:, -1] = guidance.y_star
    return x
