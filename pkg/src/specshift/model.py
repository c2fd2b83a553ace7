"""A small text-conditioned denoiser with hand-written backpropagation.

Architecture (activations are kept channels-last, ``(batch, pixels, channels)``)::

    x -> conv_in(3x3) + time embedding -> group norm (gain/bias) -> SiLU
      -> conv_mid(3x3) -> + cross-attention over token embeddings
      -> SiLU -> conv_out(3x3) -> eps_hat

Every trainable scalar lives in exactly one named layer; each layer has a kind
(``conv4d``, ``linear2d``, ``embed2d``, ``bias1d``, ``gain1d``) that decides
how it is fine-tuned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError, TapeError
from .fingerprint import weights_fingerprint
from .linalg import SvdFactors, reshape_kernel, svd_decompose

IMAGE_SIZE = 16
IMAGE_CHANNELS = 3
MAX_TOKENS = 16
NORM_EPS = 1e-5

VOCAB = (
    "<pad>", "<null>", "photo", "of", "a", "the", "on", "and", "left", "right",
    "in", "style", "sitting", "beside", "with", "next", "to",
    "circle", "square", "cross", "thing", "dog", "sculpture",
    "V1", "V2", "V3",
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
    "striped", "dotted", "checkered", "small", "large",
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, NULL = 0, 1
PLACEHOLDERS = ("V1", "V2", "V3")
CLASS_WORDS = ("circle", "square", "cross")

MATRIX_KINDS = ("conv4d", "linear2d", "embed2d")
VECTOR_KINDS = ("bias1d", "gain1d")


@dataclass(frozen=True)
class PromptTokens:
    """Token ids of one prompt (without padding)."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) > MAX_TOKENS:
            raise ShapeError(f"prompt has {len(self.ids)} tokens, limit is {MAX_TOKENS}")
        for i in self.ids:
            if not 0 <= i < len(VOCAB):
                raise DomainError(f"token id {i} outside vocabulary")

    @classmethod
    def encode(cls, text: str) -> "PromptTokens":
        words = text.replace("[", " ").replace("]", " ").split()
        unknown = [w for w in words if w not in TOKEN_ID]
        if unknown:
            raise DomainError(f"unknown words in prompt: {unknown}")
        if not words:
            return NULL_PROMPT
        return cls(tuple(TOKEN_ID[w] for w in words))

    @property
    def words(self) -> list[str]:
        return [VOCAB[i] for i in self.ids]

    def __str__(self) -> str:
        return " ".join(self.words)

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, word: str) -> int:
        return self.ids.index(TOKEN_ID[word])

    def padded(self, pad_id: int = PAD) -> np.ndarray:
        out = np.full(MAX_TOKENS, pad_id, dtype=np.intp)
        out[: len(self.ids)] = self.ids
        return out


NULL_PROMPT = PromptTokens((NULL,))


def layer_specs(width: int = 32) -> list[tuple[str, str, tuple[int, ...]]]:
    c = width
    return [
        ("conv_in.weight", "conv4d", (c, IMAGE_CHANNELS, 3, 3)),
        ("conv_in.bias", "bias1d", (c,)),
        ("time.proj", "linear2d", (c, c)),
        ("time.bias", "bias1d", (c,)),
        ("norm.gain", "gain1d", (c,)),
        ("norm.bias", "bias1d", (c,)),
        ("conv_mid.weight", "conv4d", (c, c, 3, 3)),
        ("conv_mid.bias", "bias1d", (c,)),
        ("token_embed", "embed2d", (len(VOCAB), c)),
        ("attn.q", "linear2d", (c, c)),
        ("attn.k", "linear2d", (c, c)),
        ("attn.v", "linear2d", (c, c)),
        ("attn.o", "linear2d", (c, c)),
        ("conv_out.weight", "conv4d", (IMAGE_CHANNELS, c, 3, 3)),
        ("conv_out.bias", "bias1d", (IMAGE_CHANNELS,)),
    ]


@dataclass
class AttentionMaps:
    """Cross-attention weights, shape ``(batch, MAX_TOKENS, H, W)``.

    Only the first ``lengths[b]`` tokens of item ``b`` carry mass.
    """

    weights: np.ndarray
    lengths: np.ndarray

    def token_map(self, b: int, token: int) -> np.ndarray:
        return self.weights[b, token]


@dataclass
class Tape:
    version: int
    model_id: int
    t: np.ndarray
    ids: np.ndarray
    mask: np.ndarray
    temb_raw: np.ndarray
    cols0: np.ndarray
    a1: np.ndarray
    n1: np.ndarray
    inv_std: np.ndarray
    y1: np.ndarray
    s1: np.ndarray
    cols1: np.ndarray
    h2: np.ndarray
    emb: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    o: np.ndarray
    h3: np.ndarray
    cols3: np.ndarray
    squeeze: bool = False
    extras: dict = field(default_factory=dict)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _im2col(x: np.ndarray) -> np.ndarray:
    # x: (B, H, W, C) -> (B, H*W, C*9), column order (c, kh, kw) matching reshape_kernel
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.reshape(b, h * w, c * 9)


def _col2im(g: np.ndarray, h: int, w: int) -> np.ndarray:
    b = g.shape[0]
    c = g.shape[2] // 9
    g = g.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, h + 2, w + 2, c))
    for kh in range(3):
        for kw in range(3):
            out[:, kh:kh + h, kw:kw + w, :] += g[..., kh, kw]
    return out[:, 1:-1, 1:-1, :]


def _outer_sum(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    # sum over batch and position of g[..., o] * x[..., i]
    return g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ToyDenoiser:
    """Named-layer registry plus the forward/backward passes.

    ``params`` maps layer name to a float64 array in its native shape.
    ``version`` increments whenever the weights change; tapes from an older
    version are rejected by :meth:`backward`.
    """

    _next_id = 0

    def __init__(self, params: dict[str, np.ndarray], width: int | None = None, groups: int = 4):
        if width is None:
            width = params["conv_in.bias"].shape[0]
        self.width = width
        self.groups = groups
        self.specs = layer_specs(width)
        self.kinds = {name: kind for name, kind, _ in self.specs}
        self.params: dict[str, np.ndarray] = {}
        self.version = 0
        ToyDenoiser._next_id += 1
        self._id = ToyDenoiser._next_id
        self.set_params(params)

    @classmethod
    def init(cls, seed: int = 0, width: int = 32) -> "ToyDenoiser":
        rng = np.random.default_rng(seed)
        params = {}
        for name, kind, shape in layer_specs(width):
            if kind == "gain1d":
                params[name] = np.ones(shape)
            elif kind == "bias1d":
                params[name] = np.zeros(shape)
            elif kind == "embed2d":
                params[name] = rng.standard_normal(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.standard_normal(shape) / math.sqrt(fan_in)
        params["conv_out.weight"] *= 0.1
        return cls(params, width)

    def copy(self) -> "ToyDenoiser":
        return ToyDenoiser({k: v.copy() for k, v in self.params.items()}, self.width, self.groups)

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            if name not in self.kinds:
                raise ShapeError(f"unknown layer {name!r}")
            expected = dict((n, s) for n, _, s in self.specs)[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != expected:
                raise ShapeError(f"layer {name!r} expects {expected}, got {value.shape}")
            self.params[name] = np.array(value)
        missing = set(self.kinds) - set(self.params)
        if missing:
            raise ShapeError(f"missing layers: {sorted(missing)}")
        self.version += 1

    def matrix_layers(self) -> list[str]:
        return [n for n, k, _ in self.specs if k in MATRIX_KINDS]

    def vector_layers(self) -> list[str]:
        return [n for n, k, _ in self.specs if k in VECTOR_KINDS]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def fingerprint(self) -> int:
        cached = getattr(self, "_fingerprint", None)
        if cached is None or cached[0] != self.version:
            self._fingerprint = (self.version, weights_fingerprint(self.params))
        return self._fingerprint[1]

    def svd_factors(self) -> dict[str, SvdFactors]:
        """SVD of every matrix-kind layer, computed once per weight version."""
        cached = getattr(self, "_svd", None)
        if cached is None or cached[0] != self.version:
            self._svd = (self.version, {n: svd_decompose(self.matrix(n)) for n in self.matrix_layers()})
        return self._svd[1]

    def matrix(self, name: str) -> np.ndarray:
        return reshape_kernel(self.params[name])

    def __call__(self, z: np.ndarray, t, prompt) -> np.ndarray:
        return self.forward(z, t, prompt)[0]

    # ------------------------------------------------------------------ forward
    def _prepare(self, z, t, prompts):
        z = np.asarray(z, dtype=np.float64)
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        if z.ndim != 4 or z.shape[1:] != (IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(
                f"expected (B, {IMAGE_CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}) input, got {z.shape}"
            )
        bsz = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (bsz,)).copy()
        if isinstance(prompts, PromptTokens):
            prompts = [prompts] * bsz
        if len(prompts) != bsz:
            raise ShapeError(f"{len(prompts)} prompts for a batch of {bsz}")
        ids = np.stack([p.padded() for p in prompts])
        lengths = np.array([len(p) for p in prompts])
        mask = np.arange(MAX_TOKENS)[None, :] < lengths[:, None]
        return z, t, ids, mask, squeeze

    def forward(self, z: np.ndarray, t, prompt: PromptTokens | Sequence[PromptTokens]):
        """Predict the noise for ``z`` (``(3,H,W)`` or ``(B,3,H,W)``) at step ``t``.

        Returns ``(eps_hat, attention_maps, tape)``.
        """
        p = self.params
        z, t, ids, mask, squeeze = self._prepare(z, t, prompt)
        bsz, _, hgt, wid = z.shape
        c, g = self.width, self.groups
        npix = hgt * wid

        x = z.transpose(0, 2, 3, 1)
        cols0 = _im2col(x)
        h1 = cols0 @ reshape_kernel(p["conv_in.weight"]).T + p["conv_in.bias"]
        temb_raw = time_features(t, c)
        temb = temb_raw @ p["time.proj"].T + p["time.bias"]
        a1 = h1 + temb[:, None, :]

        grouped = a1.reshape(bsz, npix, g, c // g)
        mean = grouped.mean(axis=(1, 3), keepdims=True)
        var = grouped.var(axis=(1, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        n1 = ((grouped - mean) * inv_std).reshape(bsz, npix, c)
        y1 = n1 * p["norm.gain"] + p["norm.bias"]
        s1 = y1 * _sigmoid(y1)

        cols1 = _im2col(s1.reshape(bsz, hgt, wid, c))
        h2 = cols1 @ reshape_kernel(p["conv_mid.weight"]).T + p["conv_mid.bias"]

        emb = p["token_embed"][ids]
        q = h2 @ p["attn.q"].T
        k = emb @ p["attn.k"].T
        v = emb @ p["attn.v"].T
        logits = (q @ k.transpose(0, 2, 1)) / math.sqrt(c)
        logits = np.where(mask[:, None, :], logits, -np.inf)
        logits -= logits.max(axis=2, keepdims=True)
        e = np.exp(logits)
        attn = e / e.sum(axis=2, keepdims=True)
        o = attn @ v
        h3 = h2 + o @ p["attn.o"].T

        s3 = h3 * _sigmoid(h3)
        cols3 = _im2col(s3.reshape(bsz, hgt, wid, c))
        out = cols3 @ reshape_kernel(p["conv_out.weight"]).T + p["conv_out.bias"]
        eps_hat = out.reshape(bsz, hgt, wid, IMAGE_CHANNELS).transpose(0, 3, 1, 2)

        maps = AttentionMaps(
            weights=attn.transpose(0, 2, 1).reshape(bsz, MAX_TOKENS, hgt, wid),
            lengths=mask.sum(axis=1),
        )
        tape = Tape(
            version=self.version, model_id=self._id, t=t, ids=ids, mask=mask,
            temb_raw=temb_raw, cols0=cols0, a1=a1, n1=n1, inv_std=inv_std, y1=y1,
            s1=s1, cols1=cols1, h2=h2, emb=emb, q=q, k=k, v=v, attn=attn, o=o,
            h3=h3, cols3=cols3, squeeze=squeeze,
        )
        if squeeze:
            eps_hat = eps_hat[0]
        return np.ascontiguousarray(eps_hat), maps, tape

    # ----------------------------------------------------------------- backward
    def backward(self, tape: Tape, grad_eps: np.ndarray, grad_attn: np.ndarray | None = None):
        """Gradients of every named layer given ``dL/d eps_hat``.

        ``grad_attn`` optionally adds ``dL/d attention`` in the
        :class:`AttentionMaps` layout. Matrix-kind layers get their gradient
        in matrix form (see :func:`~specshift.linalg.reshape_kernel`).
        """
        if tape.model_id != self._id or tape.version != self.version:
            raise TapeError("tape was recorded against different weights")
        p = self.params
        c, g = self.width, self.groups
        grad_eps = np.asarray(grad_eps, dtype=np.float64)
        if tape.squeeze:
            grad_eps = grad_eps[None]
        bsz = tape.cols0.shape[0]
        if grad_eps.shape != (bsz, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"gradient shape {grad_eps.shape} does not match the tape")
        hgt = wid = IMAGE_SIZE
        npix = hgt * wid
        grads: dict[str, np.ndarray] = {}

        geps = grad_eps.transpose(0, 2, 3, 1).reshape(bsz, npix, IMAGE_CHANNELS)
        grads["conv_out.weight"] = _outer_sum(geps, tape.cols3)
        grads["conv_out.bias"] = geps.sum(axis=(0, 1))
        g_s3 = _col2im(geps @ reshape_kernel(p["conv_out.weight"]), hgt, wid).reshape(bsz, npix, c)
        g_h3 = g_s3 * _silu_grad(tape.h3)

        grads["attn.o"] = _outer_sum(g_h3, tape.o)
        g_o = g_h3 @ p["attn.o"]
        g_attn = g_o @ tape.v.transpose(0, 2, 1)
        if grad_attn is not None:
            grad_attn = np.asarray(grad_attn, dtype=np.float64)
            if tape.squeeze and grad_attn.ndim == 3:
                grad_attn = grad_attn[None]
            g_attn = g_attn + grad_attn.reshape(bsz, MAX_TOKENS, npix).transpose(0, 2, 1)
        g_v = tape.attn.transpose(0, 2, 1) @ g_o
        a = tape.attn
        g_logits = a * (g_attn - (a * g_attn).sum(axis=2, keepdims=True))
        g_logits /= math.sqrt(c)
        g_q = g_logits @ tape.k
        g_k = g_logits.transpose(0, 2, 1) @ tape.q

        grads["attn.q"] = _outer_sum(g_q, tape.h2)
        grads["attn.k"] = _outer_sum(g_k, tape.emb)
        grads["attn.v"] = _outer_sum(g_v, tape.emb)
        g_emb = g_k @ p["attn.k"] + g_v @ p["attn.v"]
        g_table = np.zeros_like(p["token_embed"])
        np.add.at(g_table, tape.ids[tape.mask], g_emb[tape.mask])
        grads["token_embed"] = g_table

        g_h2 = g_h3 + g_q @ p["attn.q"]
        grads["conv_mid.weight"] = _outer_sum(g_h2, tape.cols1)
        grads["conv_mid.bias"] = g_h2.sum(axis=(0, 1))
        g_s1 = _col2im(g_h2 @ reshape_kernel(p["conv_mid.weight"]), hgt, wid).reshape(bsz, npix, c)

        g_y1 = g_s1 * _silu_grad(tape.y1)
        grads["norm.gain"] = (g_y1 * tape.n1).sum(axis=(0, 1))
        grads["norm.bias"] = g_y1.sum(axis=(0, 1))
        g_n = (g_y1 * p["norm.gain"]).reshape(bsz, npix, g, c // g)
        n = tape.n1.reshape(bsz, npix, g, c // g)
        g_a1 = tape.inv_std * (
            g_n - g_n.mean(axis=(1, 3), keepdims=True)
            - n * (g_n * n).mean(axis=(1, 3), keepdims=True)
        )
        g_a1 = g_a1.reshape(bsz, npix, c)

        g_temb = g_a1.sum(axis=1)
        grads["time.proj"] = g_temb.T @ tape.temb_raw
        grads["time.bias"] = g_temb.sum(axis=0)
        grads["conv_in.weight"] = _outer_sum(g_a1, tape.cols0)
        grads["conv_in.bias"] = g_a1.sum(axis=(0, 1))
        return {name: grads[name] for name, _, _ in self.specs}


def forward(model: ToyDenoiser, z_t, t, prompt):
    return model.forward(z_t, t, prompt)


def backward(model: ToyDenoiser, tape: Tape, grad_eps_hat, grad_attn=None):
    return model.backward(tape, grad_eps_hat, grad_attn)
