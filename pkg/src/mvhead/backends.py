"""Pluggable image-scoring backends: embedders and front-face classifiers.

The pruning and metric layers only see two tiny interfaces, so heavyweight
learned models (CLIP-style classifiers, face-recognition embedders) can be
dropped in from outside. The built-ins are deterministic, dependency-free
stand-ins good enough for desk-scale corpora:

  * RandomConvEmbedder: a frozen random conv feature extractor. Distances in
    its space are valid Frechet/cosine inputs even though absolute values are
    not comparable to published numbers.
  * DarkBlobFrontScore: scores "does this look like a front face" by the
    fraction of dark feature-blob pixels, matching the synthetic renderer's
    eye/mouth palette.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np


@runtime_checkable
class Embedder(Protocol):
    name: str

    def embed(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) image -> unit-norm (D,) float64 vector."""
        ...


@runtime_checkable
class BackViewClassifier(Protocol):
    name: str

    def score(self, image: np.ndarray) -> float:
        """(H, W, 3) image -> front-face score in [0, 1]."""
        ...


def _as_float01(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """(H, W, C) -> (size, size, C), pixel-center aligned."""
    h, w = img.shape[:2]
    if h == size and w == size:
        return img

    def axis_coords(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = (np.arange(size) + 0.5) * n_in / size - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.clip(np.floor(x).astype(int), 0, max(n_in - 2, 0))
        return lo, np.minimum(lo + 1, n_in - 1), x - lo

    r0, r1, fr = axis_coords(h)
    c0, c1, fc = axis_coords(w)
    top = img[r0][:, c0] * (1 - fc)[None, :, None] + img[r0][:, c1] * fc[None, :, None]
    bot = img[r1][:, c0] * (1 - fc)[None, :, None] + img[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


class RandomConvEmbedder:
    """Frozen two-layer random convolutional projector.

    Weights come from a fixed-seed generator at construction and never change;
    the embedding is a fixed random linear projection of the flattened second
    conv map (flattening, not pooling, keeps the embedding sensitive to
    spatial layout, so unstructured noise images spread out instead of
    collapsing onto a shared statistics vector), unit-normalized.
    """

    def __init__(self, seed: int = 711, dim: int = 32, input_size: int = 32):
        self.name = f"random-conv-{seed}-{dim}"
        self.dim = dim
        self.input_size = input_size
        rng = np.random.default_rng(seed)
        c_mid, c_out = 8, 16
        self._w1 = rng.standard_normal((c_mid, 3, 3, 3)) / np.sqrt(27.0)
        self._b1 = np.zeros(c_mid)
        self._w2 = rng.standard_normal((c_out, c_mid, 3, 3)) / np.sqrt(9.0 * c_mid)
        self._b2 = np.zeros(c_out)
        map_side = (((input_size - 3) // 2 + 1) - 3) // 2 + 1
        flat = c_out * map_side * map_side
        self._proj = rng.standard_normal((dim, flat)) / np.sqrt(flat)

    @staticmethod
    def _conv_stride2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        """x (C_in, H, W), w (C_out, C_in, 3, 3) -> (C_out, H', W'), stride 2, valid."""
        c_in, h, wi = x.shape
        hh = (h - 3) // 2 + 1
        ww = (wi - 3) // 2 + 1
        s0, s1 = x.strides[1], x.strides[2]
        patches = np.lib.stride_tricks.as_strided(
            x,
            shape=(c_in, hh, ww, 3, 3),
            strides=(x.strides[0], 2 * s0, 2 * s1, s0, s1),
            writeable=False,
        )
        out = np.einsum("cijpq,ocpq->oij", patches, w, optimize=True)
        return out + b[:, None, None]

    def embed(self, image: np.ndarray) -> np.ndarray:
        img = _resize_bilinear(_as_float01(image), self.input_size)
        x = np.moveaxis(img, 2, 0) - 0.5  # (3, S, S), centered
        h1 = np.tanh(self._conv_stride2(x, self._w1, self._b1))
        h2 = np.tanh(self._conv_stride2(h1, self._w2, self._b2))
        feat = self._proj @ h2.ravel()
        norm = np.linalg.norm(feat)
        if norm < 1e-12:
            feat = np.zeros(self.dim)
            feat[0] = 1.0
            return feat
        return feat / norm


class DarkBlobFrontScore:
    """Front-face score from the dark eye/mouth pixel fraction.

    The synthetic heads render facial feature blobs far darker than skin or
    background, and those blobs only face the camera from frontal-ish
    viewpoints, so the dark-pixel fraction separates genuine back views
    (near 0) from frontal content, including blurred frontal content pasted
    over a back view. The fraction saturates to 1.0 at `saturation`.
    """

    def __init__(self, luminance_cut: float = 0.20, saturation: float = 0.0045):
        self.name = f"dark-blob-{luminance_cut:g}"
        self.luminance_cut = luminance_cut
        self.saturation = saturation

    def score(self, image: np.ndarray) -> float:
        img = _as_float01(image)
        lum = img @ np.array([0.2126, 0.7152, 0.0722])
        frac = float((lum < self.luminance_cut).mean())
        return min(1.0, frac / self.saturation)


DEFAULT_EMBEDDER = "random-conv"
DEFAULT_CLASSIFIER = "dark-blob"


def make_embedder(name: str = DEFAULT_EMBEDDER, seed: int = 711) -> Embedder:
    if name == "random-conv":
        return RandomConvEmbedder(seed=seed)
    raise ValueError(f"unknown embedder backend {name!r}")


def make_classifier(name: str = DEFAULT_CLASSIFIER) -> BackViewClassifier:
    if name == "dark-blob":
        return DarkBlobFrontScore()
    raise ValueError(f"unknown classifier backend {name!r}")
