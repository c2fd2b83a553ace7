"""CSV and image exports for checkpoint analysis."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .io import read_csv, save_ppm, tile, write_csv
from .model import PromptTokens, ToyDenoiser
from .spectral import DeltaCheckpoint, apply_checkpoint, limit_rank, scale_shifts, shift_correlation
from .trainers import render

KINDS = ("corr-matrix", "scale-sweep", "rank-sweep", "metrics")


def export_corr_matrix(checkpoints: Sequence[DeltaCheckpoint], names: Sequence[str], out_dir) -> Path:
    out = Path(out_dir) / "corr_matrix.csv"
    ckpts = list(checkpoints)
    corr = shift_correlation(ckpts if len(ckpts) > 1 else ckpts * 2)[:len(ckpts), :len(ckpts)]
    write_csv(out, ["checkpoint", *names], ([n, *map(float, row)] for n, row in zip(names, corr)))
    return out


def _sweep(model: ToyDenoiser, variants, prompt: PromptTokens, seeds: Sequence[int], out_dir, label: str,
           steps: int) -> Path:
    out_dir = Path(out_dir)
    rows, images = [], []
    for value, ckpt in variants:
        tuned = apply_checkpoint(model, ckpt)
        for seed in seeds:
            img = render(tuned, prompt, seed, steps)[0]
            name = f"{label}_{value}_seed{seed}.ppm"
            save_ppm(out_dir / name, img)
            rows.append([value, seed, name])
            images.append(img)
    save_ppm(out_dir / f"{label}_grid.ppm", tile(images, cols=len(seeds)))
    index = out_dir / f"{label}_index.csv"
    write_csv(index, [label, "seed", "file"], rows)
    return index


def export_scale_sweep(model: ToyDenoiser, ckpt: DeltaCheckpoint, prompt: PromptTokens, values: Sequence[float],
                       seeds: Sequence[int], out_dir, steps: int = 50) -> Path:
    """One render per (s, seed) of ``scale_shifts(ckpt, s)``."""
    variants = [(float(s), scale_shifts(ckpt, float(s))) for s in values]
    return _sweep(model, variants, prompt, seeds, out_dir, "scale", steps)


def export_rank_sweep(model: ToyDenoiser, ckpt: DeltaCheckpoint, prompt: PromptTokens, values: Sequence,
                      seeds: Sequence[int], out_dir, steps: int = 50) -> Path:
    """One render per (k, seed); ``"full"`` keeps every direction."""
    full = max((s.rank for s in ckpt.shifts.values()), default=0)
    variants = []
    for k in values:
        kk = full if k == "full" else int(k)
        variants.append((k, limit_rank(ckpt, kk)))
    return _sweep(model, variants, prompt, seeds, out_dir, "rank", steps)


def export_metrics(metrics_csv, out_dir) -> Path:
    """Per step-type summary (count, first, last, mean) of a training log."""
    header, rows = read_csv(metrics_csv)
    expected = ["step", "loss_target", "loss_prior", "loss_unmix", "step_type"]
    if header != expected:
        raise ConfigError(f"{metrics_csv}: not a training log (header {header})")
    by_type: dict[str, list[list[float]]] = {}
    for r in rows:
        by_type.setdefault(r[4], []).append([float(x) for x in r[1:4]])
    out = Path(out_dir) / "metrics_summary.csv"
    summary = []
    for kind, vals in sorted(by_type.items()):
        v = np.asarray(vals)
        for col, name in enumerate(expected[1:4]):
            summary.append([kind, name, len(v), float(v[0, col]), float(v[-1, col]), float(v[:, col].mean())])
    write_csv(out, ["step_type", "quantity", "count", "first", "last", "mean"], summary)
    return out
