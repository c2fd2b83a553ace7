"""``specshift`` command-line interface.

Every command resolves its configuration as CLI flag > ``--manifest`` file >
built-in default, writes its outputs, and stores a ``<output>.manifest.json``
sidecar that ``specshift replay`` turns back into the same run.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import export_corr_matrix, export_metrics, export_rank_sweep, export_scale_sweep
from .corpus import SUBJECTS
from .diffusion import GuidanceSpec, NoiseSchedule
from .errors import ConfigError, SpecShiftError
from .io import (
    RunManifest,
    load_delta,
    load_model,
    load_ppm,
    manifest_path,
    save_delta,
    save_model,
    save_ppm,
    save_svd_cache,
    tile,
    write_csv,
    write_metrics,
)
from .model import NULL_PROMPT, PromptTokens
from .spectral import add_shifts, apply_checkpoint, interp_shifts, limit_rank, scale_shifts, shift_correlation
from .trainers import (
    EditOptions,
    PretrainConfig,
    TrainConfig,
    cosine_edit,
    finetune,
    make_subject_dataset,
    pretrain,
    render,
    train_multi_subject,
)

log = logging.getLogger("specshift")


def default_base() -> str:
    return str(resources.files("specshift") / "data" / "base.ckpt")


def default_seed() -> int:
    raw = os.environ.get("SVDIFF_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"SVDIFF_SEED must be an integer, got {raw!r}") from None


# Each command: (help, [(flags, dest, argparse kwargs, default)]).
_BASE = (("--base",), "base", {"help": "base model .ckpt (default: bundled)"}, None)
_OUT = (("-o", "--output"), "output", {"required": False}, None)
_STEPS = (("--steps",), "steps", {"type": int, "help": "DDIM steps"}, 50)
_TRAIN = [
    (("--mode",), "mode", {"choices": ("svdiff", "full", "lora")}, "svdiff"),
    (("--preset",), "preset", {"choices": ("toy", "reference")}, "toy"),
    (("--lambda",), "lam", {"type": float}, 1.0),
    (("--train-steps",), "train_steps", {"type": int}, 500),
    (("--batch-size",), "batch_size", {"type": int}, None),
    (("--lr-spectral",), "lr_spectral", {"type": float}, None),
    (("--lr-1d",), "lr_1d", {"type": float}, None),
    (("--lr-full",), "lr_full", {"type": float}, None),
    (("--lr-lora-2d",), "lr_lora_2d", {"type": float}, None),
    (("--priors",), "priors", {"type": int, "help": "prior images sampled from the base"}, 8),
    (("--metrics",), "metrics", {"help": "CSV training log"}, None),
]
_SUBJECT = [
    (("--subject",), "subject", {"choices": sorted(SUBJECTS)}, None),
    (("--images",), "images", {"nargs": "+", "help": "PPM training images"}, None),
    (("--class",), "cls", {"help": "class word for --images"}, None),
    (("--placeholder",), "placeholder", {}, "V1"),
]
_SAMPLE = [
    (("--prompt",), "prompt", {}, ""),
    (("--negative",), "negative", {"action": "append"}, None),
    (("--beta",), "beta", {"type": float}, 1.0),
    (("--cfg",), "cfg", {"type": float}, 1.0),
    (("--eta",), "eta", {"type": float}, 0.0),
    (("--n",), "n", {"type": int, "help": "number of images"}, 1),
    (("--delta",), "delta", {"help": ".svdd to apply before sampling"}, None),
]

COMMANDS = {
    "pretrain": ("train the base denoiser", [
        (("--train-steps",), "train_steps", {"type": int}, PretrainConfig.steps),
        (("--batch-size",), "batch_size", {"type": int}, PretrainConfig.batch_size),
        (("--lr",), "lr", {"type": float}, PretrainConfig.lr),
        (("--width",), "width", {"type": int}, PretrainConfig.width),
        (("--metrics",), "metrics", {}, None), _OUT]),
    "svd-cache": ("write the SVD factors of every matrix layer", [_BASE, _OUT]),
    "finetune": ("personalize on one subject", [_BASE, *_SUBJECT, *_TRAIN, _OUT]),
    "edit": ("single-image editing", [
        _BASE, (("--image",), "image", {}, None), (("--caption",), "caption", {}, None),
        (("--prompt",), "prompt", {}, None),
        (("--invert",), "invert", {"action": argparse.BooleanOptionalAction}, True),
        (("--eta",), "eta", {"type": float}, 0.5), (("--slerp-alpha",), "slerp_alpha", {"type": float}, 0.0),
        (("--cfg",), "cfg", {"type": float}, 1.0), _STEPS,
        (("--train-steps",), "train_steps", {"type": int}, 200),
        (("--delta-out",), "delta_out", {}, None), _OUT]),
    "sample": ("render images", [_BASE, *_SAMPLE, _STEPS, _OUT]),
    "combine": ("add delta checkpoints", [(("inputs",), "inputs", {}, None), _OUT]),
    "interp": ("interpolate two delta checkpoints", [
        (("inputs",), "inputs", {}, None), (("--alpha",), "alpha", {"type": float}, None), _OUT]),
    "scale": ("scale a delta checkpoint", [
        (("inputs",), "inputs", {}, None), (("--s",), "s", {"type": float}, None), _OUT]),
    "rank": ("keep the k leading spectral directions", [
        (("inputs",), "inputs", {}, None), (("--k",), "k", {"type": int}, None),
        (("--drop-1d",), "drop_1d", {"action": "store_true", "help": "also discard the 1-D deltas"}, False),
        _OUT]),
    "corr": ("cosine-correlation matrix of spectral shifts", [(("inputs",), "inputs", {}, None), _OUT]),
    "cutmix-train": ("multi-subject training with Cut-Mix-Unmix", [
        _BASE, (("--subjects",), "subjects", {"nargs": "+", "choices": sorted(SUBJECTS)}, None),
        (("--prob",), "prob", {"type": float}, 0.6),
        (("--unmix-weight",), "unmix_weight", {"type": float}, None),
        *_TRAIN, _OUT]),
    "verify": ("run the invariant checks on a model", [_BASE]),
    "export": ("analysis exports", [
        _BASE, (("--kind",), "kind", {"choices": ("corr-matrix", "scale-sweep", "rank-sweep", "metrics")}, None),
        (("inputs",), "inputs", {}, None), (("--prompt",), "prompt", {}, ""),
        (("--values",), "values", {"nargs": "+"}, None), (("--seeds",), "seeds", {"nargs": "+", "type": int}, [0]),
        _STEPS, (("-o", "--out-dir"), "output", {}, None)]),
}
PATH_KEYS = ("base", "image", "images", "inputs", "delta")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specshift", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"specshift {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (help_text, options, *_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        for flags, dest, kwargs, _default in options:
            if flags[0].startswith("-"):
                p.add_argument(*flags, dest=dest, default=argparse.SUPPRESS, **kwargs)
            else:
                # Positionals may come from a manifest, so the count is checked later.
                p.add_argument(dest, default=argparse.SUPPRESS, nargs="*", help=kwargs.get("help"))
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--manifest", default=argparse.SUPPRESS, help="take unset options from this manifest")
    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("-o", "--output", default=argparse.SUPPRESS, help="write here instead")
    return parser


def resolve(command: str, given: dict, manifest: RunManifest | None) -> dict:
    """Merge defaults, manifest config and explicit flags (in that order)."""
    cfg = {dest: default for _, dest, _, default in COMMANDS[command][1]}
    cfg["seed"] = default_seed()
    if manifest is not None:
        if manifest.command != command:
            raise ConfigError(f"manifest is for {manifest.command!r}, not {command!r}")
        cfg.update({k: v for k, v in manifest.config.items() if k in cfg})
        cfg["seed"] = manifest.seed
    cfg.update(given)
    return cfg


def _need(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required option: {k.replace('_', '-')}")


def _base(cfg: dict):
    return load_model(cfg["base"] or default_base())


def _train_config(cfg: dict, **extra) -> TrainConfig:
    overrides = {k: cfg[k] for k in ("lr_spectral", "lr_1d", "lr_full", "lr_lora_2d") if cfg.get(k) is not None}
    if cfg.get("batch_size") is not None:
        overrides["batch_size"] = cfg["batch_size"]
    return TrainConfig.preset(cfg["preset"], mode=cfg["mode"], lam=cfg["lam"], steps=cfg["train_steps"],
                              seed=cfg["seed"], **overrides, **extra)


def _dataset(base, cfg: dict, sched):
    if cfg.get("subject"):
        subj = SUBJECTS[cfg["subject"]]
        images, cls = subj.images(seed=cfg["seed"]), subj.cls
    else:
        _need(cfg, "images", "cls")
        images, cls = np.stack([load_ppm(p) for p in cfg["images"]]), cfg["cls"]
    return make_subject_dataset(base, images, cls, cfg["placeholder"], cfg["priors"] if cfg["lam"] > 0 else 0,
                                cfg["seed"], sched)


def _save_trained(result, cfg: dict, metrics) -> dict:
    outputs = {"output": cfg["output"]}
    if cfg["mode"] == "full":
        save_model(cfg["output"], result)
    else:
        save_delta(cfg["output"], result)
    if cfg.get("metrics"):
        write_metrics(cfg["metrics"], metrics)
        outputs["metrics"] = cfg["metrics"]
    return outputs


def cmd_pretrain(cfg):
    _need(cfg, "output")
    pc = PretrainConfig(steps=cfg["train_steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                        width=cfg["width"], seed=cfg["seed"])
    metrics = []
    model = pretrain(pc, metrics=metrics)
    save_model(cfg["output"], model)
    if cfg.get("metrics"):
        write_metrics(cfg["metrics"], metrics)
    return model.fingerprint()


def cmd_svd_cache(cfg):
    _need(cfg, "output")
    base = _base(cfg)
    save_svd_cache(cfg["output"], base.svd_factors())
    return base.fingerprint()


def cmd_finetune(cfg):
    _need(cfg, "output")
    base, sched = _base(cfg), NoiseSchedule.linear()
    if cfg.get("subject") is None and cfg.get("images") is None:
        raise ConfigError("give --subject or --images")
    data = _dataset(base, cfg, sched)
    metrics = []
    result = finetune(base, data, _train_config(cfg), sched, metrics)
    _save_trained(result, cfg, metrics)
    return base.fingerprint()


def cmd_cutmix_train(cfg):
    _need(cfg, "output", "subjects")
    base, sched = _base(cfg), NoiseSchedule.linear()
    placeholders = ("V1", "V2", "V3")
    if len(cfg["subjects"]) > len(placeholders):
        raise ConfigError(f"at most {len(placeholders)} subjects")
    datasets = []
    for k, name in enumerate(cfg["subjects"]):
        subj = SUBJECTS[name]
        datasets.append(make_subject_dataset(base, subj.images(seed=cfg["seed"] + k), subj.cls, placeholders[k],
                                             cfg["priors"] if cfg["lam"] > 0 else 0, cfg["seed"] + k, sched))
    extra = {"cutmix_prob": cfg["prob"]}
    if cfg.get("unmix_weight") is not None:
        extra["unmix_weight"] = cfg["unmix_weight"]
    tc = _train_config(cfg, **extra)
    if tc.mode != "svdiff":
        raise ConfigError("cutmix-train supports --mode svdiff only")
    metrics = []
    result = train_multi_subject(base, datasets, tc, sched, metrics)
    _save_trained(result, cfg, metrics)
    return base.fingerprint()


def cmd_edit(cfg):
    _need(cfg, "output", "image", "caption", "prompt")
    base = _base(cfg)
    opts = EditOptions(cfg["invert"], cfg["eta"], cfg["slerp_alpha"], cfg["cfg"], cfg["steps"], cfg["seed"])
    tc = TrainConfig.preset("toy", steps=cfg["train_steps"])
    res = cosine_edit(base, load_ppm(cfg["image"]), PromptTokens.encode(cfg["caption"]),
                      PromptTokens.encode(cfg["prompt"]), opts, tc)
    save_ppm(cfg["output"], res.image)
    if cfg.get("delta_out"):
        save_delta(cfg["delta_out"], res.checkpoint)
    return base.fingerprint()


def cmd_sample(cfg):
    _need(cfg, "output")
    base = _base(cfg)
    model = apply_checkpoint(base, load_delta(cfg["delta"])) if cfg.get("delta") else base
    negatives = tuple(PromptTokens.encode(p) for p in cfg.get("negative") or ())
    guidance = GuidanceSpec(cfg["cfg"], cfg["beta"], negatives)
    prompt = PromptTokens.encode(cfg["prompt"]) if cfg["prompt"] else NULL_PROMPT
    images = render(model, prompt, cfg["seed"], cfg["steps"], cfg["eta"], guidance, n=cfg["n"])
    save_ppm(cfg["output"], images[0] if len(images) == 1 else tile(list(images)))
    return base.fingerprint()


_ARITY = {"interp": 2, "scale": 1, "rank": 1}


def _deltas(cfg, command: str = ""):
    _need(cfg, "inputs", "output")
    want = _ARITY.get(command)
    if not cfg["inputs"] or (want is not None and len(cfg["inputs"]) != want):
        raise ConfigError(f"{command or 'this command'} needs {want or 'at least one'} input checkpoint(s)")
    return [load_delta(p) for p in cfg["inputs"]]


def cmd_combine(cfg):
    ds = _deltas(cfg)
    out = ds[0]
    for d in ds[1:]:
        out = add_shifts(out, d)
    save_delta(cfg["output"], out)
    return out.fingerprint


def cmd_interp(cfg):
    _need(cfg, "alpha")
    a, b = _deltas(cfg, "interp")
    out = interp_shifts(a, b, cfg["alpha"])
    save_delta(cfg["output"], out)
    return out.fingerprint


def cmd_scale(cfg):
    _need(cfg, "s")
    (a,) = _deltas(cfg, "scale")
    out = scale_shifts(a, cfg["s"])
    save_delta(cfg["output"], out)
    return out.fingerprint


def cmd_rank(cfg):
    _need(cfg, "k")
    (a,) = _deltas(cfg, "rank")
    out = limit_rank(a, cfg["k"])
    if cfg["drop_1d"]:
        out = replace(out, dense={})
    save_delta(cfg["output"], out)
    return out.fingerprint


def cmd_corr(cfg):
    ds = _deltas(cfg)
    corr = shift_correlation(ds if len(ds) > 1 else ds * 2)[:len(ds), :len(ds)]
    names = [Path(p).name for p in cfg["inputs"]]
    write_csv(cfg["output"], ["checkpoint", *names], ([n, *map(float, r)] for n, r in zip(names, corr)))
    return ds[0].fingerprint


def cmd_verify(cfg):
    from .verify import run_checks

    base = _base(cfg)
    failed = 0
    for name, ok, detail in run_checks(base):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    if failed:
        raise VerificationFailed(f"{failed} check(s) failed")
    return base.fingerprint()


class VerificationFailed(SpecShiftError):
    pass


def cmd_export(cfg):
    _need(cfg, "kind", "output")
    out_dir = Path(cfg["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = cfg["kind"]
    if kind == "metrics":
        _need(cfg, "inputs")
        export_metrics(cfg["inputs"][0], out_dir)
        return 0
    _need(cfg, "inputs")
    ds = [load_delta(p) for p in cfg["inputs"]]
    if kind == "corr-matrix":
        export_corr_matrix(ds, [Path(p).name for p in cfg["inputs"]], out_dir)
        return ds[0].fingerprint
    base = _base(cfg)
    prompt = PromptTokens.encode(cfg["prompt"]) if cfg["prompt"] else NULL_PROMPT
    if kind == "scale-sweep":
        values = [float(v) for v in cfg.get("values") or ("0", "0.5", "1", "1.5")]
        export_scale_sweep(base, ds[0], prompt, values, cfg["seeds"], out_dir, cfg["steps"])
    else:
        values = [v if v == "full" else int(v) for v in cfg.get("values") or ("0", "1", "4", "full")]
        export_rank_sweep(base, ds[0], prompt, values, cfg["seeds"], out_dir, cfg["steps"])
    return base.fingerprint()


HANDLERS = {
    "pretrain": cmd_pretrain, "svd-cache": cmd_svd_cache, "finetune": cmd_finetune, "edit": cmd_edit,
    "sample": cmd_sample, "combine": cmd_combine, "interp": cmd_interp, "scale": cmd_scale, "rank": cmd_rank,
    "corr": cmd_corr, "cutmix-train": cmd_cutmix_train, "verify": cmd_verify, "export": cmd_export,
}


def run(command: str, cfg: dict) -> None:
    fingerprint = HANDLERS[command](cfg)
    if cfg.get("output") is None:
        return
    inputs = {k: cfg[k] for k in PATH_KEYS if cfg.get(k) is not None}
    outputs = {k: cfg[k] for k in ("output", "metrics", "delta_out") if cfg.get(k)}
    config = {k: v for k, v in cfg.items() if k != "seed"}
    manifest = RunManifest(command, config, cfg["seed"], inputs, outputs, f"{int(fingerprint or 0):016x}",
                           __version__)
    target = Path(cfg["output"])
    manifest.save(manifest_path(target / "run" if target.is_dir() else target))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.pop("verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.pop("command")
    try:
        if command == "replay":
            manifest = RunManifest.load(ns["manifest"])
            command, given = manifest.command, {k: v for k, v in ns.items() if k == "output"}
        else:
            manifest = RunManifest.load(ns.pop("manifest")) if "manifest" in ns else None
            given = ns
        if command not in HANDLERS:
            raise ConfigError(f"unknown command in manifest: {command!r}")
        run(command, resolve(command, given, manifest))
    except SpecShiftError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
