"""Evaluation metrics over sets of generated and reference views.

The feature-space metrics (Frechet distance, cosine similarities, re-ID) are
computed against pluggable embedding backends, so the same code runs with the
desk-scale frozen random projector or an externally supplied learned model.
Absolute values with the desk backend are not comparable to published
numbers; relative comparisons are meaningful and that is what the tests pin.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backends import Embedder


@dataclass(frozen=True)
class FeatureStats:
    """Gaussian moments of an embedded sample set."""

    mean: np.ndarray        # (D,)
    covariance: np.ndarray  # (D, D), symmetric PSD
    count: int

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        X = np.asarray(features, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"features must be (n, D), got {X.shape}")
        n = X.shape[0]
        if n < 2:
            raise ValueError(f"need >= 2 samples for covariance, got {n}")
        mean = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        sym_err = np.abs(cov - cov.T).max()
        if sym_err > 1e-9:
            raise ValueError(f"covariance asymmetry {sym_err} beyond 1e-9")
        w = np.linalg.eigvalsh((cov + cov.T) / 2)
        if w.min() < -1e-9:
            raise ValueError(f"covariance eigenvalue {w.min()} below -1e-9")
        return cls(mean=mean, covariance=(cov + cov.T) / 2, count=n)


def _psd_sqrt(m: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -tol:
        raise ValueError(f"matrix eigenvalue {w.min()} below -{tol}; not PSD")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussians.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the square-root
    trace is evaluated through the symmetric form
    tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, whose eigenvalues are clipped to zero
    within -1e-6 (beyond that the inputs are rejected as non-PSD).
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(
            f"feature dimension mismatch: {a.mean.shape} vs {b.mean.shape}"
        )
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    root_a = _psd_sqrt(a.covariance, 1e-9)
    inner = root_a @ b.covariance @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -1e-6:
        raise ValueError(f"covariance product eigenvalue {w.min()} below -1e-6")
    tr_cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    return mean_term + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * tr_cross


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("zero-norm embedding in cosine similarity")
    return float(u @ v / (nu * nv))


def embed_similarity(input_image: np.ndarray, views: Sequence[np.ndarray], emb: Embedder) -> float:
    """Mean cosine between the input image and each view, in emb's space."""
    if len(views) == 0:
        raise ValueError("need at least one view")
    e0 = emb.embed(input_image)
    return float(np.mean([_cosine(e0, emb.embed(v)) for v in views]))


def i2oid(input_image: np.ndarray, views: Sequence[np.ndarray], face_emb: Embedder) -> float:
    """Input-to-output identity similarity (face-embedding backend)."""
    return embed_similarity(input_image, views, face_emb)


def o2oid(views: Sequence[np.ndarray], face_emb: Embedder) -> float:
    """Output-to-output identity similarity over all unordered view pairs."""
    n = len(views)
    if n < 2:
        raise ValueError(f"need >= 2 views for pairwise similarity, got {n}")
    embs = [face_emb.embed(v) for v in views]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += _cosine(embs[i], embs[j])
    return total / (n * (n - 1) / 2)


def reid(
    generated: Sequence[np.ndarray],
    reference: Sequence[np.ndarray],
    face_emb: Embedder,
    threshold: float = 0.6,
) -> tuple[float, float]:
    """Re-identification over aligned image pairs.

    A pair matches iff the Euclidean embedding distance is strictly below the
    threshold. Returns (match fraction, mean distance over all pairs).
    """
    if len(generated) != len(reference):
        raise ValueError(
            f"aligned lists required: {len(generated)} generated vs {len(reference)} reference"
        )
    if len(generated) == 0:
        raise ValueError("need at least one pair")
    dists = [
        float(np.linalg.norm(face_emb.embed(g) - face_emb.embed(r)))
        for g, r in zip(generated, reference)
    ]
    matches = sum(1 for d in dists if d < threshold)
    return matches / len(dists), float(np.mean(dists))


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> float:
    """Mean local structural similarity over sliding window x window patches.

    Inputs are float images in [0, data_range], (H, W) or (H, W, C); windows
    slide with stride 1 (valid positions only) and channels are averaged.
    Variances/covariances use the unbiased (n-1) estimator. Constant images
    need no special casing: zero variances make the contrast/structure factor
    C2/C2 = 1.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C), got {np.asarray(a).shape}")
    h, w = x.shape[:2]
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} smaller than {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n = window * window
    vals = []
    for ch in range(x.shape[2]):
        wx = np.lib.stride_tricks.sliding_window_view(x[:, :, ch], (window, window))
        wy = np.lib.stride_tricks.sliding_window_view(y[:, :, ch], (window, window))
        mx = wx.mean(axis=(-1, -2))
        my = wy.mean(axis=(-1, -2))
        dx = wx - mx[..., None, None]
        dy = wy - my[..., None, None]
        vx = (dx * dx).sum(axis=(-1, -2)) / (n - 1)
        vy = (dy * dy).sum(axis=(-1, -2)) / (n - 1)
        cxy = (dx * dy).sum(axis=(-1, -2)) / (n - 1)
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class MetricReport:
    fid: float
    clip_sim: float
    i2oid: float
    o2oid: float
    reid_match: float
    reid_dist: float
    ssim_mean: float
    per_identity: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _to_float01(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def compute_report(
    generated: Sequence,
    reference: Sequence,
    feature_emb: Embedder,
    face_emb: Embedder,
    config: dict | None = None,
) -> MetricReport:
    """Full metric suite over two aligned record sets (same ids, same azimuths).

    `generated` / `reference` are IdentityRecord sequences. Per identity, the
    reference view closest to azimuth 0 acts as the conditioning input for the
    input-to-output similarities; aligned azimuths give the paired metrics
    (re-ID, structural similarity); the Frechet distance pools every view of
    every identity per side.
    """
    ref_by_id = {r.identity_id: r for r in reference}
    gen_feats, ref_feats = [], []
    per_identity: dict[str, dict] = {}
    sims, iids, oids, matches, dists, ssims = [], [], [], [], [], []
    for gen in generated:
        if gen.identity_id not in ref_by_id:
            raise ValueError(f"no reference record for {gen.identity_id}")
        ref = ref_by_id[gen.identity_id]
        input_view = min(ref.views, key=lambda v: abs(v.azimuth))
        gen_images = [v.image for v in gen.views]
        ref_az = {v.azimuth: v for v in ref.views}
        paired_gen, paired_ref = [], []
        for v in gen.views:
            if v.azimuth in ref_az:
                paired_gen.append(v.image)
                paired_ref.append(ref_az[v.azimuth].image)
        gen_feats.extend(feature_emb.embed(im) for im in gen_images)
        ref_feats.extend(feature_emb.embed(v.image) for v in ref.views)
        row = {
            "clip_sim": embed_similarity(input_view.image, gen_images, feature_emb),
            "i2oid": i2oid(input_view.image, gen_images, face_emb),
        }
        if len(gen_images) >= 2:
            row["o2oid"] = o2oid(gen_images, face_emb)
            oids.append(row["o2oid"])
        if paired_gen:
            m, d = reid(paired_gen, paired_ref, face_emb)
            row["reid_match"], row["reid_dist"] = m, d
            matches.append(m)
            dists.append(d)
            row["ssim"] = float(
                np.mean(
                    [
                        ssim(_to_float01(g), _to_float01(r))
                        for g, r in zip(paired_gen, paired_ref)
                    ]
                )
            )
            ssims.append(row["ssim"])
        sims.append(row["clip_sim"])
        iids.append(row["i2oid"])
        per_identity[gen.identity_id] = row
    if len(gen_feats) < 2 or len(ref_feats) < 2:
        raise ValueError("need >= 2 views per side for Frechet statistics")
    fid_val = fid(
        FeatureStats.from_features(np.stack(gen_feats)),
        FeatureStats.from_features(np.stack(ref_feats)),
    )
    return MetricReport(
        fid=fid_val,
        clip_sim=float(np.mean(sims)),
        i2oid=float(np.mean(iids)),
        o2oid=float(np.mean(oids)) if oids else math.nan,
        reid_match=float(np.mean(matches)) if matches else math.nan,
        reid_dist=float(np.mean(dists)) if dists else math.nan,
        ssim_mean=float(np.mean(ssims)) if ssims else math.nan,
        per_identity=per_identity,
        config=dict(config or {}),
    )
