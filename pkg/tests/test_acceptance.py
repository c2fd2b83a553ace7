"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``conftest.py``) and immediately with ``-s``.
"""

import time
from contextlib import redirect_stdout
from dataclasses import replace
from io import StringIO

import numpy as np
import pytest

from specshift.cli import main
from specshift.corpus import SUBJECTS, pretrain_corpus
from specshift.diffusion import (
    GuidanceSpec,
    KeyedRng,
    NoiseSchedule,
    ddim_invert,
    ddim_sample,
    guided_score,
    guided_score_negative,
)
from specshift.errors import CorruptFile, FormatError
from specshift.io import (
    decode_delta,
    decode_model,
    decode_ppm,
    decode_svd_cache,
    encode_delta,
    encode_model,
    encode_ppm,
    encode_svd_cache,
    save_ppm,
)
from specshift.linalg import reshape_kernel, svd_decompose
from specshift.model import PromptTokens
from specshift.spectral import (
    DeltaCheckpoint,
    LoraFactor,
    SpectralShift,
    add_shifts,
    apply_checkpoint,
    gradient_wrt_shift,
    interp_shifts,
    limit_rank,
    lora_gradient,
    parameter_counts,
    reassemble_weight,
    scale_shifts,
    zero_checkpoint,
)
from specshift.trainers import (
    CutMixSource,
    TrainConfig,
    compose_cutmix,
    eval_denoise_loss,
    finetune,
    make_subject_dataset,
    render,
    train_multi_subject,
    unmix_loss,
    wrong_region_mass,
)

RESULTS: list[str] = []

# Criterion 5 reference run (seed 0), recorded when the toy preset was calibrated.
REFERENCE_TARGET_RATIO = 0.4802
REFERENCE_PRIOR_INFLATION = 1.1348


def report(number: int, title: str, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    in_time = elapsed < budget
    line = (f"ACCEPTANCE {number:2d} {'PASS' if ok and in_time else 'FAIL'} {title}: {detail} "
            f"[{elapsed:.1f}s / {budget:g}s]")
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_ckpt(model, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    shifts = {n: SpectralShift(n, scale * rng.standard_normal(f.rank)) for n, f in model.svd_factors().items()}
    dense = {n: 0.01 * rng.standard_normal(model.params[n].shape) for n in model.vector_layers()}
    return DeltaCheckpoint(model.fingerprint(), shifts, dense)


# ----------------------------------------------------------------------- 1

def test_01_svd_fidelity(base_model):
    t0 = time.perf_counter()
    worst_rec = worst_orth = 0.0
    descending = True
    for name in base_model.matrix_layers():
        w = reshape_kernel(base_model.params[name])
        f = svd_decompose(w)
        worst_rec = max(worst_rec, np.linalg.norm(f.reconstruct() - w) / np.linalg.norm(w))
        eye = np.eye(f.rank)
        worst_orth = max(worst_orth, np.abs(f.U.T @ f.U - eye).max(), np.abs(f.V.T @ f.V - eye).max())
        descending &= bool(np.all(np.diff(f.sigma) <= 0))
    ok = worst_rec <= 1e-9 and worst_orth <= 1e-9 and descending
    report(1, "SVD fidelity", ok, f"rel. reconstruction {worst_rec:.1e}, orthonormality {worst_orth:.1e}, "
           f"descending={descending}", time.perf_counter() - t0, 5)


# ----------------------------------------------------------------------- 2

def test_02_zero_shift_identity(base_model):
    t0 = time.perf_counter()
    tuned = apply_checkpoint(base_model, zero_checkpoint(base_model))
    prompt = PromptTokens.encode("photo of a circle")
    a = render(base_model, prompt, seed=11, steps=50, n=4)
    b = render(tuned, prompt, seed=11, steps=50, n=4)
    ok = np.array_equal(a, b)
    report(2, "zero-shift identity", ok, f"bitwise equal={ok} over 4 samples x 50 steps",
           time.perf_counter() - t0, 10)


# ----------------------------------------------------------------------- 3

def test_03_gradient_correctness(base_model):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    h = 1e-5

    # Closed-form spectral projection, 5 probes per layer, tolerance 1e-6.
    spec_worst = 0.0
    for name, f in base_model.svd_factors().items():
        s = SpectralShift(name, 0.1 * rng.standard_normal(f.rank))
        target = rng.standard_normal(f.shape)
        loss = lambda d: 0.5 * np.sum((reassemble_weight(f, SpectralShift(name, d)) - target) ** 2)  # noqa: E731
        g = gradient_wrt_shift(reassemble_weight(f, s) - target, f, s)
        for i in rng.choice(f.rank, size=min(5, f.rank), replace=False):
            e = np.zeros(f.rank)
            e[i] = h
            fd = (loss(s.delta + e) - loss(s.delta - e)) / (2 * h)
            spec_worst = max(spec_worst, rel_err(fd, g[i], 1e-8))

    # LoRA factors, 5 probes per factor per layer.
    lora_worst = 0.0
    for name in base_model.matrix_layers():
        w = base_model.matrix(name)
        f = LoraFactor(rng.standard_normal(w.shape[0]), rng.standard_normal(w.shape[1]))
        target = rng.standard_normal(w.shape)
        loss = lambda b, a: 0.5 * np.sum((w + np.outer(b, a) - target) ** 2)  # noqa: E731
        gb, ga = lora_gradient(w + f.update() - target, f)
        for vec, grad, first in ((f.b, gb, True), (f.a, ga, False)):
            for i in rng.choice(vec.size, size=min(5, vec.size), replace=False):
                e = np.zeros(vec.size)
                e[i] = h
                if first:
                    fd = (loss(f.b + e, f.a) - loss(f.b - e, f.a)) / (2 * h)
                else:
                    fd = (loss(f.b, f.a + e) - loss(f.b, f.a - e)) / (2 * h)
                lora_worst = max(lora_worst, rel_err(fd, grad[i], 1e-8))

    # Unmix penalty with respect to attention weights.
    attn = rng.uniform(0, 1, (2, 16, 16, 16))
    layout = (np.arange(16)[None, None, :] >= np.array([6, 10])[:, None, None]).repeat(16, axis=1).astype(int)
    groups = [((3, 4), (9, 10)), ((4,), (10,))]
    _, ga = unmix_loss(attn, layout, groups)
    unmix_worst = 0.0
    for _ in range(5 * 2):
        idx = (int(rng.integers(2)), int(rng.choice([3, 4, 9, 10])), int(rng.integers(16)), int(rng.integers(16)))
        e = np.zeros_like(attn)
        e[idx] = h
        fd = (unmix_loss(attn + e, layout, groups)[0] - unmix_loss(attn - e, layout, groups)[0]) / (2 * h)
        unmix_worst = max(unmix_worst, rel_err(fd, ga[idx], 1e-8))

    # Full-model backward: every layer, 5 probes, loss touching eps and attention.
    model = base_model.copy()
    z = rng.standard_normal((1, 3, 16, 16))
    prompt = [PromptTokens.encode("photo of a V1 square on the left")]
    r_eps = rng.standard_normal((1, 3, 16, 16))
    r_att = rng.standard_normal((1, 16, 16, 16))

    def model_loss(m):
        eps, maps, _ = m.forward(z, [37], prompt)
        return np.sum(r_eps * eps) + np.sum(r_att * maps.weights)

    _, _, tape = model.forward(z, [37], prompt)
    grads = model.backward(tape, r_eps, r_att)
    used = np.unique(prompt[0].ids)
    model_worst, probes = 0.0, 0
    for name, p in model.params.items():
        g = grads[name].reshape(p.shape)
        if name == "token_embed":
            picks = [(int(rng.choice(used)), int(rng.integers(p.shape[1]))) for _ in range(5)]
        else:
            picks = [np.unravel_index(i, p.shape) for i in rng.choice(p.size, size=min(5, p.size), replace=False)]
        for idx in picks:
            vals = []
            for sign in (1, -1):
                q = dict(model.params)
                q[name] = p.copy()
                q[name][idx] += sign * h
                m = model.copy()
                m.set_params(q)
                vals.append(model_loss(m))
            fd = (vals[0] - vals[1]) / (2 * h)
            model_worst = max(model_worst, rel_err(fd, g[idx], 1e-6))
            probes += 1

    ok = spec_worst <= 1e-6 and lora_worst <= 1e-5 and unmix_worst <= 1e-5 and model_worst <= 1e-5
    report(3, "gradient correctness", ok,
           f"spectral {spec_worst:.1e}, lora {lora_worst:.1e}, unmix {unmix_worst:.1e}, "
           f"model {model_worst:.1e} over {probes} probes", time.perf_counter() - t0, 60)


# ----------------------------------------------------------------------- 4

def test_04_compactness(base_model):
    t0 = time.perf_counter()
    counts = parameter_counts(base_model)
    shapes = [reshape_kernel(base_model.params[n]).shape for n in base_model.matrix_layers()]
    one_d = sum(base_model.params[n].size for n in base_model.vector_layers())
    svdiff = zero_checkpoint(base_model)
    lora = zero_checkpoint(base_model, "lora")
    # Floats actually stored in the serialized files.
    stored = {
        "svdiff": decode_delta(encode_delta(svdiff)).num_params(),
        "lora": decode_delta(encode_delta(lora)).num_params(),
        "full": sum(p.size for p in decode_model(encode_model(base_model)).params.values()),
    }
    expected = {
        "svdiff": sum(min(s) for s in shapes) + one_d,
        "lora": sum(m + n for m, n in shapes) + one_d,
        "full": sum(p.size for p in base_model.params.values()),
    }
    ratio = expected["full"] / expected["svdiff"]
    ok = stored == expected == counts and all(isinstance(v, int) for v in stored.values()) and ratio > 10
    report(4, "compactness arithmetic", ok,
           f"svdiff {stored['svdiff']}, lora {stored['lora']}, full {stored['full']} floats; "
           f"full/svdiff = {ratio:.1f}x", time.perf_counter() - t0, 1)


# ----------------------------------------------------------------------- 5

@pytest.mark.slow
def test_05_personalization(base_model):
    t0 = time.perf_counter()
    subject = SUBJECTS["checkered-circle-bright"]
    data = make_subject_dataset(base_model, subject.images(seed=0), subject.cls, "V1", 8, 0)
    target0 = eval_denoise_loss(base_model, data.images, data.prompt)
    prior0 = eval_denoise_loss(base_model, data.prior_images, data.prior_prompt)
    ckpt = finetune(base_model, data, TrainConfig.preset("toy", steps=500, seed=0))
    tuned = apply_checkpoint(base_model, ckpt)
    ratio = eval_denoise_loss(tuned, data.images, data.prompt) / target0
    inflation = eval_denoise_loss(tuned, data.prior_images, data.prior_prompt) / prior0
    locked = abs(ratio - REFERENCE_TARGET_RATIO) <= 0.01 and abs(inflation - REFERENCE_PRIOR_INFLATION) <= 0.01
    ok = ratio <= 0.5 and inflation <= 1.2 and locked
    report(5, "personalization efficacy", ok,
           f"target loss ratio {ratio:.4f} (<= 0.5), prior inflation {100 * (inflation - 1):.1f}% (<= 20%), "
           f"matches reference run={locked}", time.perf_counter() - t0, 300)


# ----------------------------------------------------------------------- 6

def test_06_shift_arithmetic(base_model):
    t0 = time.perf_counter()
    a, b = random_ckpt(base_model, 1), random_ckpt(base_model, 2)
    zero = zero_checkpoint(base_model)
    neg = scale_shifts(a, -1.0)
    mid = interp_shifts(a, neg, 0.5)
    checks = {
        "add zero": add_shifts(a, zero).equals(a),
        "interp alpha=1": interp_shifts(a, b, 1.0).equals(a),
        "interp alpha=0": interp_shifts(a, b, 0.0).equals(b),
        "interp(a,-a,0.5)=0": mid.equals(zero),
        "scale 0": scale_shifts(a, 0.0).equals(zero),
        "scale 1": scale_shifts(a, 1.0).equals(a),
        "rank idempotent": all(limit_rank(limit_rank(a, k), k).equals(limit_rank(a, k)) for k in (0, 1, 3, 64)),
    }
    prompt = PromptTokens.encode("photo of a square")

    def img(ckpt):
        return render(apply_checkpoint(base_model, ckpt), prompt, seed=5, steps=25)

    base_img, a_img = render(base_model, prompt, seed=5, steps=25), img(a)
    checks["render add zero"] = np.array_equal(img(add_shifts(a, zero)), a_img)
    checks["render interp endpoint"] = np.array_equal(img(interp_shifts(a, b, 1.0)), a_img)
    checks["render interp(a,-a,0.5)=base"] = np.array_equal(img(mid), base_img)
    checks["render scale 0 = base"] = np.array_equal(img(scale_shifts(a, 0.0)), base_img)
    checks["render scale 1"] = np.array_equal(img(scale_shifts(a, 1.0)), a_img)
    r = limit_rank(a, 2)
    checks["render rank idempotent"] = np.array_equal(img(limit_rank(r, 2)), img(r))
    failed = [k for k, v in checks.items() if not v]
    report(6, "shift-arithmetic identities", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} identities exact" + (f", failed {failed}" if failed else ""),
           time.perf_counter() - t0, 30)


# ----------------------------------------------------------------------- 7

def test_07_inversion_quality(base_model):
    t0 = time.perf_counter()
    sched = NoiseSchedule.linear()
    corpus = pretrain_corpus(99)
    x, prompts = corpus.images[:10], list(corpus.prompts[:10])
    z_rand = KeyedRng(5).normal(x.shape, "baseline")
    baseline = float(np.mean((ddim_sample(base_model, z_rand, prompts, GuidanceSpec(1.0), 50, 0.0, sched) - x) ** 2))
    errors = {}
    for steps in (10, 25, 50):
        z_T = ddim_invert(base_model, x, prompts, steps, sched)
        rec = ddim_sample(base_model, z_T, prompts, GuidanceSpec(1.0), steps, 0.0, sched)
        errors[steps] = float(np.mean((rec - x) ** 2))
    monotone = errors[10] >= errors[25] >= errors[50]
    ok = errors[50] <= 0.1 * baseline and monotone
    report(7, "inversion quality", ok,
           f"MSE 10/25/50 steps = {errors[10]:.2e}/{errors[25]:.2e}/{errors[50]:.2e}, baseline {baseline:.3f}, "
           f"ratio {errors[50] / baseline:.4f} (<= 0.1), non-increasing={monotone}", time.perf_counter() - t0, 120)


# ----------------------------------------------------------------------- 8

def test_08_guidance_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    field = lambda: rng.standard_normal((3, 16, 16))  # noqa: E731
    ec, en, eg = field(), field(), field()
    neg = (PromptTokens.encode("photo of a cross"),)
    reductions = (np.array_equal(guided_score(ec, en, GuidanceSpec(1.0)), ec)
                  and np.array_equal(guided_score_negative(ec, en, [eg], GuidanceSpec(1.0, 0.5, neg)), ec)
                  and np.array_equal(guided_score_negative(ec, en, [eg], GuidanceSpec(4.0, 1.0, neg)),
                                     guided_score(ec, en, GuidanceSpec(4.0))))
    worst = 0.0
    spec = GuidanceSpec(3.5, 0.3, neg)
    f = lambda c, n, g: guided_score_negative(c, n, [g], spec)  # noqa: E731
    args = [ec, en, eg]
    for pos in range(3):
        # Affine in each argument: f(.., a x + (1-a) y, ..) = a f(.., x, ..) + (1-a) f(.., y, ..).
        x, y, a = field(), field(), 0.37
        mix = list(args)
        mix[pos] = a * x + (1 - a) * y
        fx, fy = list(args), list(args)
        fx[pos], fy[pos] = x, y
        worst = max(worst, np.abs(f(*mix) - (a * f(*fx) + (1 - a) * f(*fy))).max())
    # Jointly linear: scaling every score scales the output.
    worst = max(worst, np.abs(f(2.5 * ec, 2.5 * en, 2.5 * eg) - 2.5 * f(ec, en, eg)).max())
    ok = reductions and worst <= 1e-12
    report(8, "guidance algebra", ok, f"reductions exact={reductions}, linearity error {worst:.1e} (<= 1e-12)",
           time.perf_counter() - t0, 1)


# ----------------------------------------------------------------------- 9

@pytest.mark.slow
def test_09_cut_mix_unmix(base_model):
    t0 = time.perf_counter()
    names, placeholders = ("striped-square", "checkered-circle"), ("V1", "V2")
    subjects = [make_subject_dataset(base_model, SUBJECTS[n].images(seed=k), SUBJECTS[n].cls, p, 8, k)
                for k, (n, p) in enumerate(zip(names, placeholders))]

    # Pixel exactness of the composites on real subject images.
    gen = np.random.default_rng(777)
    held, exact = [], True
    for i in range(8):
        xa = SUBJECTS[names[0]].images(n=1, seed=100 + i)[0]
        xb = SUBJECTS[names[1]].images(n=1, seed=200 + i)[0]
        s = compose_cutmix(CutMixSource(xa, "V1", "square"), CutMixSource(xb, "V2", "circle"), gen)
        own = s.layout == 0
        exact &= np.array_equal(s.image[:, own], xa[:, own]) and np.array_equal(s.image[:, ~own], xb[:, ~own])
        held.append(s)

    cfg = TrainConfig.preset("toy", steps=300, seed=0)
    init = wrong_region_mass(base_model, held)
    with_unmix = wrong_region_mass(apply_checkpoint(base_model, train_multi_subject(base_model, subjects, cfg)), held)
    without = wrong_region_mass(
        apply_checkpoint(base_model, train_multi_subject(base_model, subjects, replace(cfg, unmix_weight=0.0))), held)
    ok = exact and all(with_unmix[p] <= init[p] and with_unmix[p] < without[p] for p in placeholders)
    detail = ", ".join(f"{p}: init {init[p]:.4f}, unmix {with_unmix[p]:.4f}, no-unmix {without[p]:.4f}"
                       for p in placeholders)
    report(9, "Cut-Mix-Unmix", ok, f"pixel-exact={exact}; unmix_weight={cfg.unmix_weight:g}; {detail}",
           time.perf_counter() - t0, 600)


# ----------------------------------------------------------------------- 10

def _cli(*args) -> tuple[int, str]:
    buf = StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in args])
    return code, buf.getvalue()


def test_10_determinism_and_io(base_model, tmp_path):
    t0 = time.perf_counter()
    failures = []
    train = ["--train-steps", 2, "--batch-size", 2, "--priors", 2]
    assert _cli("finetune", "--subject", "striped-square", *train, "-o", tmp_path / "a.svdd")[0] == 0
    assert _cli("finetune", "--subject", "dotted-cross", "--seed", 1, *train, "-o", tmp_path / "b.svdd")[0] == 0
    a, b = tmp_path / "a.svdd", tmp_path / "b.svdd"
    save_ppm(tmp_path / "img.ppm", SUBJECTS["striped-circle"].images(1)[0])
    commands = {
        "pretrain": ["pretrain", "--train-steps", 2, "--batch-size", 4, "--width", 8],
        "svd-cache": ["svd-cache"],
        "finetune": ["finetune", "--subject", "checkered-circle", *train],
        "cutmix-train": ["cutmix-train", "--subjects", "striped-square", "dotted-cross", *train],
        "edit": ["edit", "--image", tmp_path / "img.ppm", "--caption", "photo of a circle",
                 "--prompt", "photo of a red circle", "--train-steps", 2, "--steps", 5],
        "sample": ["sample", "--prompt", "photo of a cross", "--steps", 5, "--cfg", 2, "--negative",
                   "photo of a square", "--beta", 0.5],
        "combine": ["combine", a, b],
        "interp": ["interp", a, b, "--alpha", 0.3],
        "scale": ["scale", a, "--s", 1.5],
        "rank": ["rank", a, "--k", 1],
        "corr": ["corr", a, b],
    }
    for name, args in commands.items():
        first, second = tmp_path / f"{name}.1", tmp_path / f"{name}.2"
        if _cli(*args, "-o", first)[0] != 0 or _cli("replay", f"{first}.manifest.json", "-o", second)[0] != 0:
            failures.append(f"{name} failed to run")
        elif first.read_bytes() != second.read_bytes():
            failures.append(f"{name} not byte-identical")
    for kind, extra in (("corr-matrix", []), ("scale-sweep", ["--values", "0", "1"]),
                        ("rank-sweep", ["--values", "1", "full"])):
        first, second = tmp_path / f"{kind}.1", tmp_path / f"{kind}.2"
        _cli("export", "--kind", kind, a, *extra, "--steps", 5, "-o", first)
        _cli("replay", first / "run.manifest.json", "-o", second)
        for f in first.iterdir():
            if not f.name.endswith(".json") and f.read_bytes() != (second / f.name).read_bytes():
                failures.append(f"export {kind}: {f.name} differs")
    v1, v2 = _cli("verify"), _cli("verify")
    if v1 != v2 or v1[0] != 0:
        failures.append("verify not reproducible")

    # Round trips of every binary format.
    d = decode_delta(a.read_bytes())
    trips = {
        "svdd": encode_delta(decode_delta(encode_delta(d))) == encode_delta(d),
        "ckpt": encode_model(decode_model(encode_model(base_model))) == encode_model(base_model),
        "svd": encode_svd_cache(decode_svd_cache(encode_svd_cache(base_model.svd_factors())))
        == encode_svd_cache(base_model.svd_factors()),
        "ppm": encode_ppm(decode_ppm((tmp_path / "img.ppm").read_bytes())) == (tmp_path / "img.ppm").read_bytes(),
    }
    failures += [f"{k} round trip" for k, v in trips.items() if not v]

    # Corrupt files yield named errors.
    raw = a.read_bytes()
    flipped = bytearray(raw)
    flipped[30] ^= 0xFF
    cases = [(decode_delta, raw[:-9], CorruptFile), (decode_delta, bytes(flipped), CorruptFile),
             (decode_delta, b"ABCD" + raw[4:], FormatError),
             (decode_model, encode_model(base_model)[:100], CorruptFile),
             (decode_svd_cache, encode_svd_cache(base_model.svd_factors())[:-5], CorruptFile),
             (decode_ppm, b"P6\n16 16\n255\n" + bytes(10), CorruptFile)]
    for fn, data, err in cases:
        try:
            fn(data)
            failures.append(f"{fn.__name__} accepted corrupt input")
        except err:
            pass
    code, _ = _cli("scale", tmp_path / "nope.svdd", "--s", 1, "-o", tmp_path / "x.svdd")
    if code != 1:
        failures.append("missing input did not exit 1")
    report(10, "determinism and I/O", not failures,
           f"{len(commands) + 4} subcommand runs replayed, {len(trips)} formats round-tripped, "
           f"{len(cases)} corruptions named" + (f"; failures: {failures}" if failures else ""),
           time.perf_counter() - t0, 30)
