"""Noise schedule, denoising losses, DDIM sampling/inversion and guidance."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInput, DomainError, ShapeError

EpsModel = Callable[[np.ndarray, int, object], np.ndarray]


class KeyedRng:
    """Counter-based randomness keyed by ``(seed, purpose, step)``.

    Each key gets its own Philox stream, so the values drawn for one step
    never depend on what was drawn before it.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)

    def stream(self, purpose: str, step: int = 0) -> np.random.Generator:
        key = [self.seed, zlib.crc32(purpose.encode("utf-8")), int(step)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def normal(self, shape, purpose: str, step: int = 0) -> np.ndarray:
        return self.stream(purpose, step).standard_normal(shape)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise DomainError("schedule needs at least one diffusion step")
        if abs(ab[0] - 1.0) > 1e-12:
            raise DomainError("alpha_bar[0] must be 1")
        if not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise DomainError("alpha_bar must be strictly decreasing and positive")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02,
               rescale: bool = True) -> "NoiseSchedule":
        """Linear betas. With ``rescale`` the endpoints are multiplied by ``1000 / T``
        so a short schedule ends as noisy as the usual 1000-step one."""
        scale = 1000.0 / T if rescale else 1.0
        betas = np.linspace(beta_start * scale, beta_end * scale, T)
        return cls(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    def check_step(self, t: int) -> int:
        if not 1 <= int(t) <= self.T:
            raise DomainError(f"step {t} outside [1, {self.T}]")
        return int(t)


def step_grid(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Increasing timesteps ``0 = t_0 < t_1 < ... < t_steps = T``."""
    if not 1 <= steps <= sched.T:
        raise DomainError(f"steps must be in [1, {sched.T}], got {steps}")
    grid = np.round(np.linspace(0, sched.T, steps + 1)).astype(int)
    return grid


@dataclass(frozen=True)
class GuidanceSpec:
    cfg_scale: float = 1.0
    beta: float = 1.0
    negatives: tuple = ()

    def __post_init__(self):
        if not self.cfg_scale >= 0:
            raise DomainError("cfg_scale must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError("beta must be in [0, 1]")


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    prompts: Sequence

    def __len__(self) -> int:
        return 0 if self.images is None else len(self.images)


@dataclass
class DenoiseLoss:
    loss: float
    grad: np.ndarray
    eps: np.ndarray
    eps_hat: np.ndarray
    t: np.ndarray
    tape: object = None
    attn: object = None
    extras: dict = field(default_factory=dict)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise DomainError(f"step {t} outside [0, {sched.T}]")
    if np.shape(z0) != np.shape(eps):
        raise ShapeError("z0 and eps must have the same shape")
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (np.ndim(z0) - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def sample_noise_and_steps(shape, sched: NoiseSchedule, rng: KeyedRng, step: int, purpose: str):
    t = rng.stream(purpose + "/t", step).integers(1, sched.T + 1, size=shape[0])
    eps = rng.normal(shape, purpose + "/eps", step)
    return t, eps


def denoise_loss(model, z0: np.ndarray, prompt, sched: NoiseSchedule, rng: KeyedRng,
                 step: int = 0, purpose: str = "loss") -> DenoiseLoss:
    """Mean squared noise-prediction error for a batch ``z0`` of shape ``(B,3,H,W)``.

    ``t ~ Uniform{1..T}`` (one per item) and ``eps ~ N(0, I)`` are drawn from
    ``rng`` under the key ``(purpose, step)``. ``grad`` is ``dL/d eps_hat``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    t, eps = sample_noise_and_steps(z0.shape, sched, rng, step, purpose)
    return denoise_loss_at(model, z0, prompt, t, eps, sched)


def denoise_loss_at(model, z0, prompt, t, eps, sched: NoiseSchedule) -> DenoiseLoss:
    z_t = forward_diffuse(z0, t, eps, sched)
    eps_hat, attn, tape = model.forward(z_t, t, prompt)
    diff = eps_hat - eps
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return DenoiseLoss(loss, grad, eps, eps_hat, np.asarray(t), tape, attn)


def combined_loss(model, target: Batch, prior: Batch | None, lam: float,
                  sched: NoiseSchedule, rng: KeyedRng, step: int = 0) -> float:
    """``L_target + lam * L_prior``."""
    if lam < 0:
        raise ConfigError("prior weight must be >= 0")
    has_prior = prior is not None and len(prior) > 0
    if lam > 0 and not has_prior:
        raise ConfigError("prior weight > 0 needs a non-empty prior batch")
    total = denoise_loss(model, target.images, list(target.prompts), sched, rng, step, "target").loss
    if lam > 0:
        total += lam * denoise_loss(model, prior.images, list(prior.prompts), sched, rng, step, "prior").loss
    return total


def predict_x0(z_t, eps_hat, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar[t]
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab_t, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
    return float(eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, eta: float,
              sched: NoiseSchedule, rng: np.random.Generator | None = None) -> np.ndarray:
    """One DDIM update from ``t`` to ``t_prev``; ``eta = 0`` is deterministic."""
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must be in [0, 1], got {eta}")
    if not (0 <= t_prev < t <= sched.T):
        raise DomainError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ab_prev = sched.alpha_bar[t_prev]
    x0 = predict_x0(z_t, eps_hat, t, sched)
    sigma = ddim_sigma(t, t_prev, eta, sched)
    direction = np.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    z_prev = np.sqrt(ab_prev) * x0 + direction * eps_hat
    if sigma > 0:
        if rng is None:
            raise DomainError("eta > 0 needs a random generator")
        z_prev = z_prev + sigma * rng.standard_normal(np.shape(z_t))
    return z_prev


def guided_score(eps_c: np.ndarray, eps_null: np.ndarray, spec: GuidanceSpec) -> np.ndarray:
    if np.shape(eps_c) != np.shape(eps_null):
        raise ShapeError("score fields differ in shape")
    s = spec.cfg_scale
    return s * eps_c + (1.0 - s) * eps_null


def guided_score_negative(eps_c: np.ndarray, eps_null: np.ndarray, eps_neg, spec: GuidanceSpec) -> np.ndarray:
    """Classifier-free guidance with the null score replaced by
    ``beta * eps_null + (1 - beta) * mean(eps_neg)``."""
    if isinstance(eps_neg, np.ndarray) and np.shape(eps_neg) == np.shape(eps_c):
        eps_neg = [eps_neg]
    eps_neg = list(eps_neg)
    if not eps_neg:
        return guided_score(eps_c, eps_null, spec)
    for e in eps_neg:
        if np.shape(e) != np.shape(eps_c):
            raise ShapeError("score fields differ in shape")
    neg = eps_neg[0] if len(eps_neg) == 1 else np.mean(eps_neg, axis=0)
    b = spec.beta
    return guided_score(eps_c, b * eps_null + (1.0 - b) * neg, spec)


def _guided_eps(model, z, t, prompt, guidance: GuidanceSpec, null_prompt) -> np.ndarray:
    eps_c = model(z, t, prompt)
    if guidance.cfg_scale == 1.0:
        return eps_c
    eps_null = model(z, t, null_prompt)
    if guidance.negatives and guidance.beta < 1.0:
        eps_neg = [model(z, t, neg) for neg in guidance.negatives]
        return guided_score_negative(eps_c, eps_null, eps_neg, guidance)
    return guided_score(eps_c, eps_null, guidance)


def ddim_sample(model, zT: np.ndarray, prompt, guidance: GuidanceSpec | None = None, steps: int = 50,
                eta: float = 0.0, sched: NoiseSchedule | None = None, rng: KeyedRng | None = None,
                null_prompt=None) -> np.ndarray:
    """Run DDIM from ``z_T`` down to ``z_0`` on the grid from :func:`step_grid`."""
    from .model import NULL_PROMPT

    sched = sched or NoiseSchedule.linear()
    guidance = guidance or GuidanceSpec()
    null_prompt = NULL_PROMPT if null_prompt is None else null_prompt
    if eta > 0 and rng is None:
        raise DomainError("eta > 0 needs a random generator")
    grid = step_grid(sched, steps)
    z = np.asarray(zT, dtype=np.float64)
    for i in range(len(grid) - 1, 0, -1):
        t, t_prev = int(grid[i]), int(grid[i - 1])
        eps_hat = _guided_eps(model, z, t, prompt, guidance, null_prompt)
        gen = rng.stream("ddim-eta", t) if eta > 0 else None
        z = ddim_step(z, eps_hat, t, t_prev, eta, sched, gen)
    return z


def ddim_invert(model, z0: np.ndarray, prompt, steps: int = 50, sched: NoiseSchedule | None = None) -> np.ndarray:
    """Deterministic DDIM run backwards (guidance scale 1): ``z_0 -> z_T``.

    Going from ``t_prev`` to ``t`` uses the prediction at ``(z_{t_prev}, t)``.
    """
    sched = sched or NoiseSchedule.linear()
    grid = step_grid(sched, steps)
    z = np.asarray(z0, dtype=np.float64)
    ab = sched.alpha_bar
    for i in range(1, len(grid)):
        t_prev, t = int(grid[i - 1]), int(grid[i])
        eps_hat = model(z, t, prompt)
        x0 = (z - np.sqrt(1.0 - ab[t_prev]) * eps_hat) / np.sqrt(ab[t_prev])
        z = np.sqrt(ab[t]) * x0 + np.sqrt(1.0 - ab[t]) * eps_hat
    return z


def slerp_noise(zT: np.ndarray, eps: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation from ``zT`` (alpha=0) to ``eps`` (alpha=1)."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must be in [0, 1], got {alpha}")
    zT = np.asarray(zT, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if zT.shape != eps.shape:
        raise ShapeError("slerp endpoints differ in shape")
    na, nb = np.linalg.norm(zT), np.linalg.norm(eps)
    if na == 0 or nb == 0:
        raise DegenerateInput("slerp endpoint has zero norm")
    if alpha == 0.0:
        return zT.copy()
    if alpha == 1.0:
        return eps.copy()
    cos = np.clip(np.vdot(zT, eps) / (na * nb), -1.0, 1.0)
    phi = float(np.arccos(cos))
    if phi < 1e-6:
        return (1.0 - alpha) * zT + alpha * eps
    return (np.sin((1.0 - alpha) * phi) * zT + np.sin(alpha * phi) * eps) / np.sin(phi)
