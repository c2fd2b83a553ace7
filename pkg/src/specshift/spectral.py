"""Spectral-shift parameter space.

A 2-D/4-D layer with cached SVD ``W = U diag(sigma) V^T`` is fine-tuned
through a shift vector ``delta`` only::

    W_delta = U diag(relu(sigma + delta)) V^T

1-D layers (biases, gains) carry plain additive deltas. Checkpoints built
against one base model are tied to it by a 64-bit weight fingerprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BaseModelMismatch, ConfigError, DegenerateInput, DomainError, ShapeError
from .linalg import SvdFactors, reshape_kernel, unreshape_kernel


@dataclass(frozen=True)
class SpectralShift:
    layer_name: str
    delta: np.ndarray
    rank_mask: int | None = None

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        if delta.ndim != 1:
            raise ShapeError("a spectral shift is a vector")
        if self.rank_mask is not None and np.any(delta[self.rank_mask:] != 0):
            raise ShapeError(f"{self.layer_name}: nonzero shift beyond rank mask {self.rank_mask}")
        object.__setattr__(self, "delta", delta)

    @property
    def rank(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True)
class LoraFactor:
    """Rank-1 update ``b a^T`` for an ``M x N`` layer matrix."""

    b: np.ndarray
    a: np.ndarray

    def update(self) -> np.ndarray:
        return np.outer(self.b, self.a)


@dataclass(frozen=True)
class DeltaCheckpoint:
    """Per-layer spectral shifts, rank-1 LoRA factors and dense 1-D deltas."""

    fingerprint: int
    shifts: dict[str, SpectralShift] = field(default_factory=dict)
    dense: dict[str, np.ndarray] = field(default_factory=dict)
    lora: dict[str, LoraFactor] = field(default_factory=dict)
    config: str = ""

    @property
    def mode(self) -> str:
        if self.lora and not self.shifts:
            return "lora"
        if self.shifts and not self.lora:
            return "svdiff"
        return "mixed" if self.lora else "dense"

    def num_params(self) -> int:
        """Number of stored floats."""
        return (
            sum(s.rank for s in self.shifts.values())
            + sum(d.size for d in self.dense.values())
            + sum(f.b.size + f.a.size for f in self.lora.values())
        )

    def layer_names(self) -> list[str]:
        return sorted(set(self.shifts) | set(self.dense) | set(self.lora))

    def equals(self, other: "DeltaCheckpoint") -> bool:
        """Structural equality (values compared exactly)."""
        if self.fingerprint != other.fingerprint:
            return False
        if set(self.shifts) != set(other.shifts) or set(self.dense) != set(other.dense):
            return False
        if set(self.lora) != set(other.lora):
            return False
        for n, s in self.shifts.items():
            o = other.shifts[n]
            if s.rank_mask != o.rank_mask or not np.array_equal(s.delta, o.delta):
                return False
        for n, d in self.dense.items():
            if not np.array_equal(d, other.dense[n]):
                return False
        for n, f in self.lora.items():
            o = other.lora[n]
            if not (np.array_equal(f.b, o.b) and np.array_equal(f.a, o.a)):
                return False
        return True


LoraDelta = DeltaCheckpoint


def zero_checkpoint(model, mode: str = "svdiff", config: str = "") -> DeltaCheckpoint:
    """All-zero checkpoint covering every layer of ``model``.

    For ``mode="lora"`` the ``a`` factors start at zero as well; trainers that
    need a non-zero ``a`` initialise it themselves.
    """
    dense = {n: np.zeros_like(model.params[n]) for n in model.vector_layers()}
    if mode == "svdiff":
        factors = model.svd_factors()
        shifts = {n: SpectralShift(n, np.zeros(f.rank)) for n, f in factors.items()}
        return DeltaCheckpoint(model.fingerprint(), shifts=shifts, dense=dense, config=config)
    if mode == "lora":
        lora = {}
        for n in model.matrix_layers():
            m, k = model.matrix(n).shape
            lora[n] = LoraFactor(np.zeros(m), np.zeros(k))
        return DeltaCheckpoint(model.fingerprint(), dense=dense, lora=lora, config=config)
    raise ConfigError(f"no delta checkpoint for mode {mode!r}")


def effective_sigma(f: SvdFactors, s: SpectralShift) -> np.ndarray:
    if s.rank != f.rank:
        raise ShapeError(f"{s.layer_name}: shift has {s.rank} entries, layer rank is {f.rank}")
    return np.maximum(f.sigma + s.delta, 0.0)


def reassemble_weight(f: SvdFactors, s: SpectralShift) -> np.ndarray:
    """``U diag(relu(sigma + delta)) V^T``."""
    return (f.U * effective_sigma(f, s)) @ f.V.T


def shifted_matrix(w: np.ndarray, f: SvdFactors, s: SpectralShift) -> np.ndarray:
    """Reassembled weight written as ``W + U diag(relu(sigma+delta) - sigma) V^T``.

    Equal to :func:`reassemble_weight` up to the SVD reconstruction error, but
    a zero shift returns ``W`` bit for bit.
    """
    change = effective_sigma(f, s) - f.sigma
    return w + (f.U * change) @ f.V.T


def gradient_wrt_shift(G: np.ndarray, f: SvdFactors, s: SpectralShift) -> np.ndarray:
    """Chain rule through the reassembly: ``g_i = (U^T G V)_ii * [sigma_i + delta_i > 0]``."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape != f.shape:
        raise ShapeError(f"{s.layer_name}: gradient {G.shape} vs layer {f.shape}")
    if s.rank != f.rank:
        raise ShapeError(f"{s.layer_name}: shift has {s.rank} entries, layer rank is {f.rank}")
    g = np.einsum("ir,ir->r", f.U, G @ f.V)
    g = np.where(f.sigma + s.delta > 0, g, 0.0)
    if s.rank_mask is not None:
        g[s.rank_mask:] = 0.0
    return g


# ------------------------------------------------------------------ arithmetic

def _check_compatible(a: DeltaCheckpoint, b: DeltaCheckpoint) -> None:
    if a.fingerprint != b.fingerprint:
        raise BaseModelMismatch(
            f"checkpoints were trained on different base models "
            f"({a.fingerprint:016x} vs {b.fingerprint:016x})"
        )
    if a.lora or b.lora:
        raise ConfigError("rank-1 LoRA factors cannot be added or interpolated")


def _combine(a: DeltaCheckpoint, b: DeltaCheckpoint, wa: float, wb: float, config: str) -> DeltaCheckpoint:
    _check_compatible(a, b)
    shifts = {}
    for name in sorted(set(a.shifts) | set(b.shifts)):
        sa, sb = a.shifts.get(name), b.shifts.get(name)
        if sa is not None and sb is not None and sa.rank != sb.rank:
            raise ShapeError(f"{name}: shift lengths differ ({sa.rank} vs {sb.rank})")
        ref = sa if sa is not None else sb
        da = sa.delta if sa is not None else np.zeros(ref.rank)
        db = sb.delta if sb is not None else np.zeros(ref.rank)
        masks = [x.rank_mask for x in (sa, sb) if x is not None]
        mask = max(masks) if masks and None not in masks else None
        shifts[name] = SpectralShift(name, wa * da + wb * db, mask)
    dense = {}
    for name in sorted(set(a.dense) | set(b.dense)):
        da, db = a.dense.get(name), b.dense.get(name)
        if da is not None and db is not None and da.shape != db.shape:
            raise ShapeError(f"{name}: dense delta shapes differ")
        ref = da if da is not None else db
        da = da if da is not None else np.zeros_like(ref)
        db = db if db is not None else np.zeros_like(ref)
        dense[name] = wa * da + wb * db
    return DeltaCheckpoint(a.fingerprint, shifts=shifts, dense=dense, config=config)


def add_shifts(a: DeltaCheckpoint, b: DeltaCheckpoint) -> DeltaCheckpoint:
    """``delta' = delta_a + delta_b`` per layer; 1-D deltas add too."""
    return _combine(a, b, 1.0, 1.0, "add")


def interp_shifts(a: DeltaCheckpoint, b: DeltaCheckpoint, alpha: float) -> DeltaCheckpoint:
    """``alpha * delta_a + (1 - alpha) * delta_b`` with ``0 <= alpha <= 1``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"interpolation weight must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        _check_compatible(a, b)
        return replace(a, config=f"interp alpha={alpha!r}")
    if alpha == 0.0:
        _check_compatible(a, b)
        return replace(b, config=f"interp alpha={alpha!r}")
    return _combine(a, b, alpha, 1.0 - alpha, f"interp alpha={alpha!r}")


def scale_shifts(a: DeltaCheckpoint, s: float) -> DeltaCheckpoint:
    """``delta' = s * delta`` and ``dW' = s * dW`` (LoRA: ``b' = s * b``)."""
    if not math.isfinite(s):
        raise DomainError(f"scale must be finite, got {s}")
    shifts = {n: SpectralShift(n, s * x.delta, x.rank_mask) for n, x in a.shifts.items()}
    dense = {n: s * d for n, d in a.dense.items()}
    lora = {n: LoraFactor(s * f.b, f.a.copy()) for n, f in a.lora.items()}
    return DeltaCheckpoint(a.fingerprint, shifts=shifts, dense=dense, lora=lora, config=f"scale s={s!r}")


def limit_rank(a: DeltaCheckpoint, k: int) -> DeltaCheckpoint:
    """Keep shifts on the ``k`` leading singular directions only."""
    if k < 0:
        raise DomainError(f"rank must be non-negative, got {k}")
    shifts = {}
    for n, x in a.shifts.items():
        if k >= x.rank:
            shifts[n] = x
            continue
        delta = x.delta.copy()
        delta[k:] = 0.0
        mask = k if x.rank_mask is None else min(k, x.rank_mask)
        shifts[n] = SpectralShift(n, delta, mask)
    return DeltaCheckpoint(
        a.fingerprint, shifts=shifts, dense=dict(a.dense), lora=dict(a.lora), config=f"rank k={k}"
    )


def shift_correlation(checkpoints: list[DeltaCheckpoint]) -> np.ndarray:
    """Mean over layers of the cosine similarity between spectral shifts.

    Layers where either shift is all zero are skipped for that pair.
    """
    if len(checkpoints) < 2:
        raise DomainError("correlation needs at least two checkpoints")
    fp = checkpoints[0].fingerprint
    for c in checkpoints[1:]:
        if c.fingerprint != fp:
            raise BaseModelMismatch("checkpoints were trained on different base models")
    n = len(checkpoints)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            sims = []
            a, b = checkpoints[i].shifts, checkpoints[j].shifts
            for name in sorted(set(a) & set(b)):
                x, y = a[name].delta, b[name].delta
                nx, ny = np.linalg.norm(x), np.linalg.norm(y)
                if nx == 0 or ny == 0:
                    continue
                sims.append(1.0 if i == j else float(np.clip(x @ y / (nx * ny), -1.0, 1.0)))
            if not sims:
                raise DegenerateInput(f"no comparable non-zero layers between checkpoints {i} and {j}")
            out[i, j] = out[j, i] = float(np.mean(sims))
    return out


# ------------------------------------------------------------------ application

def apply_checkpoint(model, d: DeltaCheckpoint, factors: dict[str, SvdFactors] | None = None):
    """New model with the checkpoint applied; layers absent from ``d`` are kept."""
    if model.fingerprint() != d.fingerprint:
        raise BaseModelMismatch(
            f"checkpoint expects base {d.fingerprint:016x}, model is {model.fingerprint():016x}"
        )
    return model.__class__(apply_to_params(model, d, factors), model.width, model.groups)


def apply_to_params(model, d: DeltaCheckpoint, factors: dict[str, SvdFactors] | None = None) -> dict:
    params = {n: p.copy() for n, p in model.params.items()}
    if d.shifts:
        factors = factors if factors is not None else model.svd_factors()
    for name, s in d.shifts.items():
        if name not in params or model.kinds[name] not in ("conv4d", "linear2d", "embed2d"):
            raise ShapeError(f"{name!r} is not a decomposed layer of the model")
        if not np.any(s.delta):
            continue
        w = reshape_kernel(params[name])
        params[name] = unreshape_kernel(shifted_matrix(w, factors[name], s), params[name].shape)
    for name, f in d.lora.items():
        params[name] = lora_apply(params[name], f)
    for name, dw in d.dense.items():
        if name not in params or params[name].ndim != 1:
            raise ShapeError(f"{name!r} is not a 1-D layer of the model")
        if dw.shape != params[name].shape:
            raise ShapeError(f"{name}: dense delta shape {dw.shape} vs {params[name].shape}")
        params[name] = params[name] + dw
    return params


def lora_apply(w: np.ndarray, f: LoraFactor) -> np.ndarray:
    """``W + b a^T`` for a 2-D or 4-D weight in its native shape."""
    m = reshape_kernel(w)
    if f.b.shape != (m.shape[0],) or f.a.shape != (m.shape[1],):
        raise ShapeError(f"LoRA factors {f.b.shape}/{f.a.shape} do not fit a {m.shape} matrix")
    return unreshape_kernel(m + np.outer(f.b, f.a), w.shape)


def lora_gradient(G: np.ndarray, f: LoraFactor) -> tuple[np.ndarray, np.ndarray]:
    """``(dL/db, dL/da) = (G a, G^T b)`` for ``G = dL/dW``."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (f.b.size, f.a.size):
        raise ShapeError(f"gradient {G.shape} does not fit LoRA factors {f.b.size}x{f.a.size}")
    return G @ f.a, G.T @ f.b


def parameter_counts(model) -> dict[str, int]:
    """Trainable floats per fine-tuning mode, from the layer registry."""
    one_d = sum(model.params[n].size for n in model.vector_layers())
    shapes = [model.matrix(n).shape for n in model.matrix_layers()]
    return {
        "svdiff": sum(min(m, n) for m, n in shapes) + one_d,
        "lora": sum(m + n for m, n in shapes) + one_d,
        "full": model.num_params(),
    }
