"""Procedural 16x16 RGB images: the pretraining corpus and textured subjects."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CLASS_WORDS, IMAGE_SIZE, PromptTokens

COLORS = {
    "red": (0.9, -0.8, -0.8),
    "green": (-0.8, 0.8, -0.8),
    "blue": (-0.8, -0.6, 0.9),
    "yellow": (0.9, 0.8, -0.8),
    "cyan": (-0.8, 0.8, 0.9),
    "magenta": (0.9, -0.8, 0.9),
    "white": (0.9, 0.9, 0.9),
    "orange": (0.9, 0.1, -0.8),
}
BACKGROUND = -0.7
SIZES = {"small": 3, "large": 5}
CENTERS = range(4, 12)


def shape_mask(cls: str, center: tuple[int, int], size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    cy, cx = center
    dy, dx = np.abs(yy - cy + 0.5), np.abs(xx - cx + 0.5)
    if cls == "circle":
        return dy * dy + dx * dx <= size * size
    if cls == "square":
        return (dy <= size - 0.5) & (dx <= size - 0.5)
    if cls == "cross":
        arm = max(size // 2, 1)
        return ((dy <= size) & (dx <= arm - 0.5)) | ((dx <= size) & (dy <= arm - 0.5))
    raise ValueError(f"unknown shape class {cls!r}")


def render(cls: str, color, center, size: int, background: float = BACKGROUND,
           texture: str | None = None, color2=None) -> np.ndarray:
    """Render one shape as a ``(3, 16, 16)`` array in ``[-1, 1]``."""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), background, dtype=np.float64)
    mask = shape_mask(cls, center, size)
    fill = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    fill[:] = np.asarray(color, dtype=np.float64)[:, None, None]
    if texture is not None:
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
        if texture == "striped":
            alt = (yy // 2) % 2 == 1
        elif texture == "checkered":
            alt = ((yy // 2) + (xx // 2)) % 2 == 1
        elif texture == "dotted":
            alt = (yy % 3 == 1) & (xx % 3 == 1)
        else:
            raise ValueError(f"unknown texture {texture!r}")
        fill[:, alt] = np.asarray(color2, dtype=np.float64)[:, None]
    img[:, mask] = fill[:, mask]
    return img


@dataclass(frozen=True)
class Corpus:
    images: np.ndarray
    prompts: tuple[PromptTokens, ...]
    labels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.prompts)


def pretrain_corpus(seed: int = 0) -> Corpus:
    """Every (class, color, center, size) combination, shuffled by ``seed``.

    3 classes x 8 colors x 64 centers x 2 sizes = 3072 images captioned
    ``"photo of a <class>"``. The seed also jitters the background level.
    """
    rng = np.random.default_rng(seed)
    items = [
        (cls, color, (cy, cx), size)
        for cls in CLASS_WORDS
        for color in COLORS
        for cy in CENTERS
        for cx in CENTERS
        for size in SIZES.values()
    ]
    order = rng.permutation(len(items))
    backgrounds = BACKGROUND + rng.uniform(-0.1, 0.1, size=len(items))
    images = np.empty((len(items), 3, IMAGE_SIZE, IMAGE_SIZE))
    prompts, labels = [], []
    captions = {cls: PromptTokens.encode(f"photo of a {cls}") for cls in CLASS_WORDS}
    for k, idx in enumerate(order):
        cls, color, center, size = items[idx]
        images[k] = render(cls, COLORS[color], center, size, background=backgrounds[k])
        prompts.append(captions[cls])
        labels.append(cls)
    return Corpus(np.clip(images, -1.0, 1.0), tuple(prompts), tuple(labels))


@dataclass(frozen=True)
class Subject:
    """A textured object absent from the pretraining corpus."""

    name: str
    cls: str
    texture: str
    color: str
    color2: str
    background: float = BACKGROUND

    def images(self, n: int = 4, size: int = 5, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            cy, cx = rng.integers(6, 10, size=2)
            out.append(render(self.cls, COLORS[self.color], (int(cy), int(cx)), size,
                              texture=self.texture, color2=COLORS[self.color2],
                              background=self.background))
        return np.stack(out)


SUBJECTS = {
    "striped-square": Subject("striped-square", "square", "striped", "red", "white"),
    "checkered-circle": Subject("checkered-circle", "circle", "checkered", "blue", "yellow"),
    "dotted-cross": Subject("dotted-cross", "cross", "dotted", "green", "magenta"),
    "striped-circle": Subject("striped-circle", "circle", "striped", "orange", "cyan"),
    # Held out for the personalization check: novel texture on a novel backdrop.
    "checkered-circle-bright": Subject("checkered-circle-bright", "circle", "checkered", "blue", "yellow", 0.3),
}
