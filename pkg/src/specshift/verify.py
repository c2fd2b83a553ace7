"""Fast invariant checks over a model, run by ``specshift verify``."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .diffusion import GuidanceSpec, KeyedRng, NoiseSchedule, ddim_sample, guided_score, guided_score_negative
from .io import decode_delta, decode_svd_cache, encode_delta, encode_svd_cache
from .model import PromptTokens, ToyDenoiser
from .spectral import (
    DeltaCheckpoint,
    SpectralShift,
    add_shifts,
    apply_checkpoint,
    gradient_wrt_shift,
    interp_shifts,
    limit_rank,
    reassemble_weight,
    scale_shifts,
    zero_checkpoint,
)


class CheckFailed(Exception):
    pass


def _expect(ok, message: str) -> None:
    if not ok:
        raise CheckFailed(message)


def _random_checkpoint(model: ToyDenoiser, seed: int) -> DeltaCheckpoint:
    rng = np.random.default_rng(seed)
    shifts = {n: SpectralShift(n, 0.05 * rng.standard_normal(f.rank)) for n, f in model.svd_factors().items()}
    dense = {n: 0.01 * rng.standard_normal(model.params[n].shape) for n in model.vector_layers()}
    return DeltaCheckpoint(model.fingerprint(), shifts, dense)


def check_svd(model: ToyDenoiser) -> str:
    worst = 0.0
    for name, f in model.svd_factors().items():
        w = model.matrix(name)
        rel = np.linalg.norm(f.reconstruct() - w) / np.linalg.norm(w)
        orth = max(np.abs(f.U.T @ f.U - np.eye(f.rank)).max(), np.abs(f.V.T @ f.V - np.eye(f.rank)).max())
        _expect(np.all(np.diff(f.sigma) <= 0), f"{name}: singular values not descending")
        worst = max(worst, rel, orth)
    _expect(worst <= 1e-9, f"worst reconstruction/orthonormality error {worst:.2e}")
    return f"max error {worst:.1e}"


def check_zero_shift(model: ToyDenoiser) -> str:
    tuned = apply_checkpoint(model, zero_checkpoint(model))
    sched = NoiseSchedule.linear()
    zT = KeyedRng(0).normal((1, 3, 16, 16), "verify")
    prompt = PromptTokens.encode("photo of a circle")
    a = ddim_sample(model, zT, prompt, GuidanceSpec(), 10, 0.0, sched)
    b = ddim_sample(tuned, zT, prompt, GuidanceSpec(), 10, 0.0, sched)
    _expect(np.array_equal(a, b), "zero-shift sampling differs from the base model")
    return "bitwise equal"


def check_arithmetic(model: ToyDenoiser) -> str:
    a, b = _random_checkpoint(model, 1), _random_checkpoint(model, 2)
    zero = zero_checkpoint(model)
    _expect(add_shifts(a, zero).equals(a), "adding a zero checkpoint changed the shifts")
    _expect(interp_shifts(a, b, 1.0).equals(a) and interp_shifts(a, b, 0.0).equals(b), "interpolation endpoints are not exact")
    _expect(scale_shifts(a, 1.0).equals(a), "scaling by 1 changed the shifts")
    r = limit_rank(a, 2)
    _expect(limit_rank(r, 2).equals(r), "rank limiting is not idempotent")
    neg = scale_shifts(a, -1.0)
    mid = interp_shifts(a, neg, 0.5)
    _expect(all(not np.any(s.delta) for s in mid.shifts.values()), "interp(a, -a, 0.5) is not zero")
    return "identities hold"


def check_gradient(model: ToyDenoiser) -> str:
    rng = np.random.default_rng(3)
    name = model.matrix_layers()[0]
    f = model.svd_factors()[name]
    s = SpectralShift(name, 0.1 * rng.standard_normal(f.rank))
    target = rng.standard_normal(f.shape)
    loss = lambda d: 0.5 * np.sum((reassemble_weight(f, SpectralShift(name, d)) - target) ** 2)  # noqa: E731
    g = gradient_wrt_shift(reassemble_weight(f, s) - target, f, s)
    h, worst = 1e-5, 0.0
    for i in range(min(5, f.rank)):
        e = np.zeros(f.rank)
        e[i] = h
        fd = (loss(s.delta + e) - loss(s.delta - e)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), 1e-12))
    _expect(worst <= 1e-6, f"relative error {worst:.2e}")
    return f"max relative error {worst:.1e}"


def check_guidance(model: ToyDenoiser) -> str:
    rng = np.random.default_rng(4)
    ec, en, eg = (rng.standard_normal((3, 16, 16)) for _ in range(3))
    _expect(np.array_equal(guided_score(ec, en, GuidanceSpec(1.0)), ec), "guidance scale 1 is not the conditional score")
    spec = GuidanceSpec(3.0, 1.0, ("x",))
    _expect(np.array_equal(guided_score_negative(ec, en, [eg], spec), guided_score(ec, en, spec)), "beta = 1 does not reduce to plain guidance")
    return "reductions exact"


def check_files(model: ToyDenoiser) -> str:
    a = _random_checkpoint(model, 5)
    rt = decode_delta(encode_delta(a))
    f32 = lambda x: x.astype(np.float32).astype(np.float64)  # noqa: E731
    _expect(all(np.array_equal(rt.shifts[n].delta, f32(s.delta)) for n, s in a.shifts.items()), "delta checkpoint round trip changed values")
    cache = decode_svd_cache(encode_svd_cache(model.svd_factors()))
    _expect(set(cache) == set(model.svd_factors()), "SVD cache round trip lost layers")
    return "round trips ok"


CHECKS: dict[str, Callable[[ToyDenoiser], str]] = {
    "svd-fidelity": check_svd,
    "zero-shift-identity": check_zero_shift,
    "shift-arithmetic": check_arithmetic,
    "shift-gradient": check_gradient,
    "guidance-reductions": check_guidance,
    "file-round-trip": check_files,
}


def run_checks(model: ToyDenoiser) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, True, fn(model)))
        except CheckFailed as exc:
            results.append((name, False, str(exc)))
    return results
