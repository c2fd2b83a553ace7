"""Training procedures: base pretraining, personalization in three parameter
spaces, single-image editing, and Cut-Mix-Unmix multi-subject training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import pretrain_corpus
from .diffusion import (
    GuidanceSpec,
    KeyedRng,
    NoiseSchedule,
    ddim_invert,
    ddim_sample,
    denoise_loss,
    denoise_loss_at,
    slerp_noise,
)
from .errors import ConfigError, NumericError, ShapeError
from .linalg import unreshape_kernel
from .model import (
    IMAGE_CHANNELS,
    IMAGE_SIZE,
    NULL_PROMPT,
    PLACEHOLDERS,
    TOKEN_ID,
    PromptTokens,
    ToyDenoiser,
)
from .spectral import (
    DeltaCheckpoint,
    LoraFactor,
    SpectralShift,
    add_shifts,
    apply_checkpoint,
    apply_to_params,
    gradient_wrt_shift,
    interp_shifts,
    lora_gradient,
    scale_shifts,
)

log = logging.getLogger(__name__)

MODES = ("svdiff", "full", "lora")
GRID_SHAPE = (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "svdiff"
    steps: int = 500
    lr_spectral: float = 1e-3
    lr_1d: float = 1e-6
    lr_full: float = 5e-6
    lr_lora_2d: float = 1e-4
    lam: float = 1.0
    cutmix_prob: float = 0.6
    unmix_weight: float = 0.1
    batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("lr_spectral", "lr_1d", "lr_full", "lr_lora_2d"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0.0 <= self.cutmix_prob <= 1.0:
            raise ConfigError("cutmix_prob must be in [0, 1]")
        if self.lam < 0 or self.unmix_weight < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @classmethod
    def preset(cls, name: str = "toy", **overrides) -> "TrainConfig":
        """``"reference"`` keeps the dataclass defaults; ``"toy"`` uses learning
        rates calibrated for plain SGD on the 16x16 toy denoiser."""
        if name == "reference":
            return cls(**overrides)
        if name != "toy":
            raise ConfigError(f"unknown preset {name!r}")
        return cls(**{**TOY_PRESET, **overrides})

    def summary(self) -> str:
        return ",".join(f"{k}={v}" for k, v in asdict(self).items())


# Calibrated for plain SGD on the bundled base model (see README).
TOY_PRESET = dict(lr_spectral=0.5, lr_1d=0.5, lr_full=0.002, lr_lora_2d=0.1, batch_size=8, unmix_weight=10.0)


@dataclass(frozen=True)
class SubjectDataset:
    images: np.ndarray
    prompt: PromptTokens
    prior_images: np.ndarray
    prior_prompt: PromptTokens
    placeholder: str | None = "V1"
    cls: str = ""

    def __post_init__(self):
        if any(TOKEN_ID[p] in self.prior_prompt.ids for p in PLACEHOLDERS):
            raise ConfigError("the prior prompt must not contain a placeholder token")
        if self.placeholder is not None and TOKEN_ID[self.placeholder] not in self.prompt.ids:
            raise ConfigError(f"training prompt lacks placeholder {self.placeholder}")


@dataclass
class MetricsRow:
    step: int
    loss_target: float
    loss_prior: float
    loss_unmix: float
    step_type: str


# --------------------------------------------------------------------- pretraining

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    cond_drop: float = 0.1
    width: int = 32
    seed: int = 0


def pretrain(cfg: PretrainConfig = PretrainConfig(), sched: NoiseSchedule | None = None,
             metrics: list | None = None) -> ToyDenoiser:
    """Fit the base denoiser on the procedural corpus with Adam.

    Prompts are replaced by the null prompt with probability ``cond_drop`` so
    the model also learns the unconditional score. The returned weights are
    rounded to float32, the precision the checkpoint file stores.
    """
    sched = sched or NoiseSchedule.linear()
    corpus = pretrain_corpus(cfg.seed)
    model = ToyDenoiser.init(cfg.seed, cfg.width)
    rng = KeyedRng(cfg.seed)
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2 = 0.9, 0.999
    for step in range(1, cfg.steps + 1):
        gen = rng.stream("pretrain/batch", step)
        idx = gen.choice(len(corpus), cfg.batch_size, replace=False)
        drop = gen.random(cfg.batch_size) < cfg.cond_drop
        prompts = [NULL_PROMPT if d else corpus.prompts[i] for i, d in zip(idx, drop)]
        res = denoise_loss(model, corpus.images[idx], prompts, sched, rng, step, "pretrain")
        grads = model.backward(res.tape, res.grad)
        lr = cfg.lr * min(1.0, step / cfg.warmup) * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        new = {}
        for name, p in model.params.items():
            g = grads[name].reshape(p.shape)
            m1[name] = b1 * m1[name] + (1 - b1) * g
            m2[name] = b2 * m2[name] + (1 - b2) * g * g
            mhat = m1[name] / (1 - b1 ** step)
            vhat = m2[name] / (1 - b2 ** step)
            new[name] = p - lr * mhat / (np.sqrt(vhat) + 1e-8)
        model.set_params(new)
        if metrics is not None:
            metrics.append(MetricsRow(step, res.loss, 0.0, 0.0, "pretrain"))
        if step % 500 == 0:
            log.info("pretrain step %d loss %.4f", step, res.loss)
    return ToyDenoiser({k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()},
                       cfg.width)


# ------------------------------------------------------------- parameterizations

class _Spectral:
    """Trainable spectral shifts for matrix layers plus dense 1-D deltas."""

    def __init__(self, base: ToyDenoiser, cfg: TrainConfig):
        self.base, self.cfg = base, cfg
        self.factors = base.svd_factors()
        self.delta = {n: np.zeros(f.rank) for n, f in self.factors.items()}
        self.dense = {n: np.zeros_like(base.params[n]) for n in base.vector_layers()}

    def checkpoint(self, config: str = "") -> DeltaCheckpoint:
        shifts = {n: SpectralShift(n, d) for n, d in self.delta.items()}
        return DeltaCheckpoint(self.base.fingerprint(), shifts=shifts, dense=dict(self.dense), config=config)

    def params(self) -> dict:
        return apply_to_params(self.base, self.checkpoint(), self.factors)

    def update(self, grads: dict) -> None:
        ckpt = self.checkpoint()
        for n, f in self.factors.items():
            g = gradient_wrt_shift(grads[n], f, ckpt.shifts[n])
            self.delta[n] = self.delta[n] - self.cfg.lr_spectral * g
        for n in self.dense:
            self.dense[n] = self.dense[n] - self.cfg.lr_1d * grads[n]

    def result(self, config: str):
        ckpt = self.checkpoint(config)
        return _round_f32(ckpt)


class _Lora:
    """Rank-1 factors ``b a^T`` per matrix layer (``b`` starts at zero)."""

    def __init__(self, base: ToyDenoiser, cfg: TrainConfig):
        self.base, self.cfg = base, cfg
        gen = KeyedRng(cfg.seed).stream("lora/init")
        self.factors = {}
        for n in base.matrix_layers():
            m, k = base.matrix(n).shape
            self.factors[n] = LoraFactor(np.zeros(m), gen.standard_normal(k) / math.sqrt(k))
        self.dense = {n: np.zeros_like(base.params[n]) for n in base.vector_layers()}

    def checkpoint(self, config: str = "") -> DeltaCheckpoint:
        return DeltaCheckpoint(self.base.fingerprint(), dense=dict(self.dense),
                               lora=dict(self.factors), config=config)

    def params(self) -> dict:
        return apply_to_params(self.base, self.checkpoint())

    def update(self, grads: dict) -> None:
        lr = self.cfg.lr_lora_2d
        for n, f in self.factors.items():
            gb, ga = lora_gradient(grads[n], f)
            self.factors[n] = LoraFactor(f.b - lr * gb, f.a - lr * ga)
        for n in self.dense:
            self.dense[n] = self.dense[n] - self.cfg.lr_1d * grads[n]

    def result(self, config: str):
        return _round_f32(self.checkpoint(config))


class _Full:
    def __init__(self, base: ToyDenoiser, cfg: TrainConfig):
        self.base, self.cfg = base, cfg
        self.weights = {n: p.copy() for n, p in base.params.items()}

    def params(self) -> dict:
        return self.weights

    def update(self, grads: dict) -> None:
        new = {}
        for n, p in self.weights.items():
            lr = self.cfg.lr_1d if p.ndim == 1 else self.cfg.lr_full
            new[n] = p - lr * grads[n].reshape(p.shape)
        self.weights = new

    def result(self, config: str) -> ToyDenoiser:
        return ToyDenoiser({n: p.copy() for n, p in self.weights.items()}, self.base.width, self.base.groups)


_PARAMETERIZATIONS = {"svdiff": _Spectral, "lora": _Lora, "full": _Full}


def _round_f32(ckpt: DeltaCheckpoint) -> DeltaCheckpoint:
    f32 = lambda x: np.asarray(x, dtype=np.float32).astype(np.float64)  # noqa: E731
    return DeltaCheckpoint(
        ckpt.fingerprint,
        shifts={n: SpectralShift(n, f32(s.delta), s.rank_mask) for n, s in ckpt.shifts.items()},
        dense={n: f32(d) for n, d in ckpt.dense.items()},
        lora={n: LoraFactor(f32(f.b), f32(f.a)) for n, f in ckpt.lora.items()},
        config=ckpt.config,
    )


# ----------------------------------------------------------------- training loop

@dataclass
class _Objective:
    """One step's batches; ``unmix`` holds (layouts, token groups) when active."""

    target_images: np.ndarray
    target_prompts: list
    prior_images: np.ndarray | None
    prior_prompts: list | None
    step_type: str
    unmix: tuple | None = None


def _accumulate(total: dict | None, grads: dict, weight: float) -> dict:
    if total is None:
        return {n: weight * g for n, g in grads.items()}
    for n, g in grads.items():
        total[n] = total[n] + weight * g
    return total


_DIVERGED = 1e6


def _train(model: ToyDenoiser, cfg: TrainConfig, objective_for_step, sched: NoiseSchedule,
           metrics: list | None):
    space = _PARAMETERIZATIONS[cfg.mode](model, cfg)
    work = model.copy()
    rng = KeyedRng(cfg.seed)
    for step in range(1, cfg.steps + 1):
        obj = objective_for_step(step)
        work.set_params(space.params())
        res = denoise_loss(work, obj.target_images, obj.target_prompts, sched, rng, step, "target")
        if not math.isfinite(res.loss) or res.loss > _DIVERGED:
            raise NumericError(f"training diverged at step {step} (loss {res.loss:.3g}); lower the learning rates")
        grad_attn, loss_unmix = None, 0.0
        if obj.unmix is not None:
            layouts, groups = obj.unmix
            loss_unmix, g_attn = unmix_loss(res.attn, layouts, groups)
            grad_attn = cfg.unmix_weight * g_attn
        grads = _accumulate(None, work.backward(res.tape, res.grad, grad_attn), 1.0)
        loss_prior = 0.0
        if cfg.lam > 0 and obj.prior_images is not None:
            pres = denoise_loss(work, obj.prior_images, obj.prior_prompts, sched, rng, step, "prior")
            grads = _accumulate(grads, work.backward(pres.tape, pres.grad), cfg.lam)
            loss_prior = pres.loss
        space.update(grads)
        if metrics is not None:
            metrics.append(MetricsRow(step, res.loss, loss_prior, loss_unmix, obj.step_type))
    return space.result(cfg.summary())


def _single_objective(data: SubjectDataset, cfg: TrainConfig, step: int, index: int = 0) -> _Objective:
    gen = KeyedRng(cfg.seed).stream(f"batch/{index}", step)
    ti = gen.integers(0, len(data.images), size=cfg.batch_size)
    target = data.images[ti]
    prior_images = prior_prompts = None
    if cfg.lam > 0:
        pi = gen.integers(0, len(data.prior_images), size=cfg.batch_size)
        prior_images = data.prior_images[pi]
        prior_prompts = [data.prior_prompt] * cfg.batch_size
    return _Objective(target, [data.prompt] * cfg.batch_size, prior_images, prior_prompts, "single")


def _check_priors(datasets: Sequence[SubjectDataset], cfg: TrainConfig) -> None:
    if cfg.lam > 0 and any(d.prior_images is None or len(d.prior_images) == 0 for d in datasets):
        raise ConfigError("prior weight > 0 but a dataset has no prior images")


def finetune(model: ToyDenoiser, data: SubjectDataset | Sequence[SubjectDataset], cfg: TrainConfig,
             sched: NoiseSchedule | None = None, metrics: list | None = None):
    """Personalize ``model`` on one subject, or on several taken in turn.

    Returns a :class:`DeltaCheckpoint` for ``svdiff``/``lora`` and a new
    :class:`ToyDenoiser` for ``full``. Each step takes an SGD step on
    ``L_target + lam * L_prior`` with one target and one prior batch.
    """
    sched = sched or NoiseSchedule.linear()
    datasets = [data] if isinstance(data, SubjectDataset) else list(data)
    if not datasets:
        raise ConfigError("no training data")
    _check_priors(datasets, cfg)

    def objective(step: int) -> _Objective:
        k = (step - 1) % len(datasets)
        return _single_objective(datasets[k], cfg, step, k)

    return _train(model, cfg, objective, sched, metrics)


# ------------------------------------------------------------------ evaluation

def eval_denoise_loss(model: ToyDenoiser, images: np.ndarray, prompt, sched: NoiseSchedule | None = None,
                      draws: int = 64, seed: int = 1234) -> float:
    """Denoising loss over a fixed set of ``draws`` (image, t, eps) triples."""
    sched = sched or NoiseSchedule.linear()
    gen = np.random.default_rng(seed)
    idx = np.arange(draws) % len(images)
    t = gen.integers(1, sched.T + 1, size=draws)
    eps = gen.standard_normal((draws,) + images.shape[1:])
    total = 0.0
    for lo in range(0, draws, 32):
        sl = slice(lo, lo + 32)
        r = denoise_loss_at(model, images[idx[sl]], prompt, t[sl], eps[sl], sched)
        total += r.loss * len(idx[sl])
    return total / draws


# ------------------------------------------------------------ subject datasets

def generate_priors(model: ToyDenoiser, prompt: PromptTokens, n: int, seed: int = 0,
                    steps: int = 25, sched: NoiseSchedule | None = None, cfg_scale: float = 1.0) -> np.ndarray:
    """Sample ``n`` images from the base model (deterministic DDIM)."""
    sched = sched or NoiseSchedule.linear()
    rng = KeyedRng(seed)
    zT = rng.normal((n,) + GRID_SHAPE, "prior/zT")
    out = ddim_sample(model, zT, prompt, GuidanceSpec(cfg_scale), steps, 0.0, sched)
    return np.clip(out, -1.0, 1.0)


def make_subject_dataset(model: ToyDenoiser, images: np.ndarray, cls: str, placeholder: str = "V1",
                         n_priors: int = 8, seed: int = 0, sched: NoiseSchedule | None = None) -> SubjectDataset:
    prompt = PromptTokens.encode(f"photo of a {placeholder} {cls}")
    prior_prompt = PromptTokens.encode(f"photo of a {cls}")
    priors = generate_priors(model, prior_prompt, n_priors, seed, sched=sched) if n_priors else None
    return SubjectDataset(np.asarray(images, dtype=np.float64), prompt, priors, prior_prompt, placeholder, cls)


# ------------------------------------------------------------ single-image edit

@dataclass(frozen=True)
class EditOptions:
    invert: bool = True
    eta: float = 0.5
    slerp_alpha: float = 0.0
    cfg: float = 1.0
    steps: int = 50
    seed: int = 0

    @classmethod
    def non_structural(cls, **kw) -> "EditOptions":
        return cls(**{"eta": 0.5, "slerp_alpha": 0.0, **kw})

    @classmethod
    def structural(cls, **kw) -> "EditOptions":
        return cls(**{"eta": 0.9, "slerp_alpha": 0.9, **kw})


@dataclass
class EditResult:
    image: np.ndarray
    checkpoint: DeltaCheckpoint
    z_T: np.ndarray


def cosine_edit(model: ToyDenoiser, image: np.ndarray, caption: PromptTokens, target_prompt: PromptTokens,
                opts: EditOptions = EditOptions(), cfg: TrainConfig | None = None,
                sched: NoiseSchedule | None = None, checkpoint: DeltaCheckpoint | None = None) -> EditResult:
    """Fine-tune spectral shifts on one (image, caption) pair without a prior
    term, then sample with ``target_prompt``.

    With ``opts.invert`` the start latent is the DDIM inversion of ``image``
    under the fine-tuned model and ``target_prompt``, optionally pushed
    towards fresh noise by ``slerp(opts.slerp_alpha)``; otherwise it is pure
    noise. ``checkpoint`` skips the fine-tuning step.
    """
    sched = sched or NoiseSchedule.linear()
    image = np.asarray(image, dtype=np.float64)
    if image.shape != GRID_SHAPE:
        raise ShapeError(f"expected a {GRID_SHAPE} image, got {image.shape}")
    if checkpoint is None:
        cfg = replace(cfg or TrainConfig.preset("toy"), mode="svdiff", lam=0.0, seed=opts.seed)
        data = SubjectDataset(image[None], caption, None, NULL_PROMPT, None)
        checkpoint = _train(model, cfg, lambda step: _single_objective(data, cfg, step), sched, None)
    tuned = apply_checkpoint(model, checkpoint)
    rng = KeyedRng(opts.seed)
    noise = rng.normal(GRID_SHAPE, "edit/noise")
    if opts.invert:
        z_T = ddim_invert(tuned, image, target_prompt, opts.steps, sched)
        if opts.slerp_alpha > 0:
            z_T = slerp_noise(z_T, noise, opts.slerp_alpha)
    else:
        z_T = noise
    out = ddim_sample(tuned, z_T, target_prompt, GuidanceSpec(opts.cfg), opts.steps, opts.eta, sched,
                      KeyedRng(opts.seed + 1))
    return EditResult(out, checkpoint, z_T)


# ------------------------------------------------------------------- Cut-Mix

@dataclass(frozen=True)
class CutMixSource:
    image: np.ndarray
    placeholder: str | None
    cls: str


@dataclass(frozen=True)
class CutMixSample:
    image: np.ndarray
    prompt: PromptTokens
    layout: np.ndarray
    split: int
    swapped: bool
    token_groups: tuple[tuple[int, ...], tuple[int, ...]]


def _mention(src: CutMixSource) -> list[str]:
    return (["a", src.placeholder] if src.placeholder else ["a"]) + [src.cls]


def compose_cutmix(a: CutMixSource, b: CutMixSource, rng: np.random.Generator,
                   split: int | None = None, swapped: bool | None = None) -> CutMixSample:
    """Left/right composite of two subjects.

    The split column is uniform on ``[W/4, 3W/4]`` and the side each subject
    lands on is random. ``layout`` is 0 where the pixels come from ``a`` and 1
    where they come from ``b``; ``token_groups`` are the prompt indices of
    ``a``'s and ``b``'s placeholder and class word.
    """
    ia, ib = np.asarray(a.image), np.asarray(b.image)
    if ia.shape != ib.shape or ia.ndim != 3:
        raise ShapeError(f"cut-mix sources must share a (C,H,W) shape, got {ia.shape} and {ib.shape}")
    width = ia.shape[2]
    draw_split = rng.integers(width // 4, 3 * width // 4 + 1)
    draw_swap = bool(rng.random() < 0.5)
    split = int(draw_split if split is None else split)
    swapped = draw_swap if swapped is None else bool(swapped)
    if not 0 < split < width:
        raise ShapeError(f"split column {split} leaves an empty region")
    left, right = (b, a) if swapped else (a, b)
    image = np.concatenate([left.image[:, :, :split], right.image[:, :, split:]], axis=2)
    layout = np.zeros(ia.shape[1:], dtype=np.int8)
    layout[:, split:] = 1
    if swapped:
        layout = 1 - layout
    words = ["photo", "of"] + _mention(left) + ["on", "the", "left", "and"] + _mention(right) + ["on", "the", "right"]
    prompt = PromptTokens.encode(" ".join(words))
    n_left = len(_mention(left))
    left_group = tuple(range(3, 2 + n_left))
    right_start = 2 + n_left + 4
    right_group = tuple(range(right_start + 1, right_start + len(_mention(right))))
    groups = (right_group, left_group) if swapped else (left_group, right_group)
    return CutMixSample(image, prompt, layout, split, swapped, groups)


def unmix_loss(attn, layout: np.ndarray, token_groups) -> tuple[float, np.ndarray]:
    """Mean squared attention of each subject's tokens outside its region.

    ``attn`` is an :class:`~specshift.model.AttentionMaps` or an array of shape
    ``(B, L, H, W)`` (or ``(L, H, W)``); ``layout`` is ``(B, H, W)`` (or
    ``(H, W)``) with 0 for the first subject and 1 for the second;
    ``token_groups`` is one ``(group_a, group_b)`` pair, or a list of pairs per
    batch item. Returns the loss and its gradient with the shape of ``attn``.
    """
    weights = attn.weights if hasattr(attn, "weights") else np.asarray(attn, dtype=np.float64)
    single = weights.ndim == 3
    w = weights[None] if single else weights
    lay = np.asarray(layout)
    lay = np.broadcast_to(lay, (w.shape[0],) + lay.shape[-2:]) if lay.ndim == 2 else lay
    if lay.shape != (w.shape[0],) + w.shape[2:]:
        raise ShapeError(f"layout {lay.shape} does not match attention maps {w.shape}")
    groups = token_groups
    if len(groups) == 2 and all(isinstance(i, (int, np.integer)) for g in groups for i in g):
        groups = [groups] * w.shape[0]
    if len(groups) != w.shape[0]:
        raise ShapeError("need one pair of token groups per batch item")
    sel = np.zeros(w.shape, dtype=bool)
    for bi, (ga, gb) in enumerate(groups):
        if len(ga) == 0 or len(gb) == 0:
            raise ConfigError("unmix token groups must be non-empty")
        sel[bi, list(ga)] |= lay[bi] == 1
        sel[bi, list(gb)] |= lay[bi] == 0
    count = int(sel.sum())
    if count == 0:
        raise ConfigError("no non-corresponding (token, pixel) pairs")
    masked = np.where(sel, w, 0.0)
    loss = float((masked * masked).sum() / count)
    grad = 2.0 * masked / count
    return loss, grad[0] if single else grad


def train_multi_subject(model: ToyDenoiser, subjects: Sequence[SubjectDataset], cfg: TrainConfig,
                        sched: NoiseSchedule | None = None, metrics: list | None = None):
    """Joint training on several subjects with Cut-Mix-Unmix augmentation.

    Each step is a Cut-Mix step with probability ``cfg.cutmix_prob`` (two
    subjects drawn without replacement, composite target and prior batches,
    plus ``unmix_weight * unmix_loss``); otherwise it is the same
    single-subject step that :func:`finetune` would take.
    """
    sched = sched or NoiseSchedule.linear()
    subjects = list(subjects)
    if cfg.cutmix_prob > 0 and len(subjects) < 2:
        raise ConfigError("Cut-Mix needs at least two subjects")
    if not subjects:
        raise ConfigError("no training data")
    _check_priors(subjects, cfg)
    rng = KeyedRng(cfg.seed)

    def objective(step: int) -> _Objective:
        gate = rng.stream("cutmix/gate", step).random()
        if gate >= cfg.cutmix_prob:
            k = (step - 1) % len(subjects)
            return _single_objective(subjects[k], cfg, step, k)
        gen = rng.stream("cutmix/batch", step)
        ia, ib = gen.choice(len(subjects), size=2, replace=False)
        sa, sb = subjects[ia], subjects[ib]
        targets, prompts, layouts, groups = [], [], [], []
        priors, prior_prompts = [], []
        for _ in range(cfg.batch_size):
            xa = sa.images[gen.integers(len(sa.images))]
            xb = sb.images[gen.integers(len(sb.images))]
            s = compose_cutmix(CutMixSource(xa, sa.placeholder, sa.cls),
                               CutMixSource(xb, sb.placeholder, sb.cls), gen)
            targets.append(s.image)
            prompts.append(s.prompt)
            layouts.append(s.layout)
            groups.append(s.token_groups)
            if cfg.lam > 0:
                pa = sa.prior_images[gen.integers(len(sa.prior_images))]
                pb = sb.prior_images[gen.integers(len(sb.prior_images))]
                p = compose_cutmix(CutMixSource(pa, None, sa.cls), CutMixSource(pb, None, sb.cls), gen,
                                   split=s.split, swapped=s.swapped)
                priors.append(p.image)
                prior_prompts.append(p.prompt)
        unmix = (np.stack(layouts), groups) if cfg.unmix_weight > 0 else None
        return _Objective(np.stack(targets), prompts, np.stack(priors) if priors else None,
                          prior_prompts or None, "cutmix", unmix)

    return _train(model, cfg, objective, sched, metrics)


def wrong_region_mass(model: ToyDenoiser, samples: Sequence[CutMixSample], sched: NoiseSchedule | None = None,
                      seed: int = 99, t_values: Sequence[int] = (10, 30, 50, 70)) -> dict[str, float]:
    """Mean attention of each placeholder token on the other subject's region.

    Averaged over the held-out ``samples`` and a few noise levels.
    """
    sched = sched or NoiseSchedule.linear()
    rng = np.random.default_rng(seed)
    images = np.stack([s.image for s in samples])
    prompts = [s.prompt for s in samples]
    totals: dict[str, list] = {}
    for t in t_values:
        eps = rng.standard_normal(images.shape)
        ab = sched.alpha_bar[t]
        z = math.sqrt(ab) * images + math.sqrt(1 - ab) * eps
        _, maps, _ = model.forward(z, t, prompts)
        for b, s in enumerate(samples):
            for g, region in ((0, 1), (1, 0)):
                for idx in s.token_groups[g]:
                    word = s.prompt.words[idx]
                    if word not in PLACEHOLDERS:
                        continue
                    wrong = s.layout == region
                    totals.setdefault(word, []).append(float(maps.weights[b, idx][wrong].mean()))
    return {k: float(np.mean(v)) for k, v in sorted(totals.items())}


# ------------------------------------------------------------------ rendering

def render(model: ToyDenoiser, prompt: PromptTokens, seed: int = 0, steps: int = 50, eta: float = 0.0,
           guidance: GuidanceSpec | None = None, sched: NoiseSchedule | None = None, n: int = 1) -> np.ndarray:
    """Sample ``n`` images from seeded noise."""
    sched = sched or NoiseSchedule.linear()
    rng = KeyedRng(seed)
    zT = rng.normal((n,) + GRID_SHAPE, "render/zT")
    return ddim_sample(model, zT, prompt, guidance or GuidanceSpec(), steps, eta, sched, rng)


def combine_and_render(model: ToyDenoiser, checkpoints: Sequence[DeltaCheckpoint], method: str = "add",
                       prompt: PromptTokens | None = None, seed: int = 0, value: float | None = None,
                       steps: int = 50, guidance: GuidanceSpec | None = None,
                       sched: NoiseSchedule | None = None) -> np.ndarray:
    """Combine checkpoints (``add`` all, ``interp`` two with ``value=alpha``,
    ``scale`` one by ``value=s``), apply to ``model`` and render with eta=0."""
    ckpts = list(checkpoints)
    if not ckpts:
        raise ConfigError("no checkpoints to combine")
    if method == "add":
        combined = ckpts[0]
        for c in ckpts[1:]:
            combined = add_shifts(combined, c)
    elif method == "interp":
        if len(ckpts) != 2 or value is None:
            raise ConfigError("interp needs two checkpoints and alpha")
        combined = interp_shifts(ckpts[0], ckpts[1], value)
    elif method == "scale":
        if len(ckpts) != 1 or value is None:
            raise ConfigError("scale needs one checkpoint and s")
        combined = scale_shifts(ckpts[0], value)
    else:
        raise ConfigError(f"unknown combination method {method!r}")
    tuned = apply_checkpoint(model, combined)
    return render(tuned, prompt or NULL_PROMPT, seed, steps, 0.0, guidance, sched)[0]
