"""Procedural multi-view identity corpus and the two-stage pruning pipeline.

Each synthetic identity is a shaded parametric head (ellipsoid skull plus
dark eye/mouth blobs, Lambertian shading) rendered by a small numpy ray
caster at 24 azimuths on a fixed-elevation circle. All shape and palette
parameters are drawn once from the identity seed, so records are bit-exact
reproducible. Two corruption modes can be planted per record and are written
into the record so filter tests have ground truth:

  * "janus": a back view replaced by a blurred frontal render;
  * "swap": a view rendered with a different identity's parameters.

Pruning mirrors the two-stage recipe the corpus exists to exercise: a
front-face classifier removes back views whose score strictly exceeds
tau_bv, then identities are ranked by mean pairwise embedding similarity and
only the top ceil(tau_ii * M) are kept. Both filters stamp what they did into
record metadata, which is also what makes re-running them a no-op.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageFilter

from .backends import BackViewClassifier, Embedder
from .cameras import pose_from_angles


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_views: int = 24
    elevation: float = 10.0
    radius: float = 2.6
    focal: Optional[float] = None  # None -> image_size
    domain: str = "synthetic-proxy"

    def __post_init__(self) -> None:
        if self.n_views < 1 or 360 % self.n_views:
            raise ValueError(f"n_views must divide 360, got {self.n_views}")
        if self.domain not in ("synthetic-proxy", "real-proxy"):
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def focal_px(self) -> float:
        return float(self.image_size if self.focal is None else self.focal)


def view_azimuths(n_views: int = 24) -> list[int]:
    """Azimuth ladder -180, -180+360/n, ... spanning [-180, 180)."""
    step = 360 // n_views
    return [-180 + i * step for i in range(n_views)]


def is_back_view(azimuth: float) -> bool:
    """Strictly more than 90 degrees away from frontal; +-90 itself is frontal."""
    return abs(azimuth) > 90.0


@dataclass
class SynthView:
    azimuth: float
    elevation: float
    radius: float
    focal: float
    image: np.ndarray  # (S, S, 3) uint8


@dataclass
class IdentityRecord:
    identity_id: str
    seed: int
    domain: str
    views: list[SynthView]
    planted: dict = field(default_factory=dict)
    prune: dict = field(default_factory=dict)

    def view_by_azimuth(self, azimuth: float) -> SynthView:
        for v in self.views:
            if v.azimuth == azimuth:
                return v
        raise KeyError(f"no view at azimuth {azimuth} in {self.identity_id}")


# ---------------------------------------------------------------------------
# Renderer
# ---------------------------------------------------------------------------

def identity_params(seed: int) -> dict:
    """Draw one identity's shape/palette parameters (fixed draw order)."""
    rng = np.random.default_rng(seed)

    def hsv(h: float, s: float, v: float) -> np.ndarray:
        return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))

    p = {
        "scale": rng.uniform(0.45, 0.68),
        "width": rng.uniform(0.72, 0.82),
        "depth": rng.uniform(0.82, 0.92),
        "skin": hsv(rng.uniform(0, 1), rng.uniform(0.2, 0.4), rng.uniform(0.7, 0.9)),
        "eye": hsv(rng.uniform(0, 1), rng.uniform(0.5, 0.9), rng.uniform(0.03, 0.08)),
        "mouth": hsv(rng.uniform(-0.03, 0.05), rng.uniform(0.7, 0.95), rng.uniform(0.06, 0.12)),
        "background": hsv(rng.uniform(0, 1), rng.uniform(0.1, 0.35), rng.uniform(0.55, 0.85)),
        "eye_height": rng.uniform(0.24, 0.34),
        "eye_spread": rng.uniform(0.34, 0.44),
        "eye_radius": rng.uniform(0.14, 0.18),
        "mouth_radius": rng.uniform(0.18, 0.24),
    }
    return p


_LIGHT = np.array([0.35, 0.75, 0.55]) / np.linalg.norm([0.35, 0.75, 0.55])


def _surface_point(direction: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Point where the ray from the origin along `direction` exits the ellipsoid."""
    d = direction / np.linalg.norm(direction)
    return d / np.linalg.norm(d / radii)


def _bodies(p: dict) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(center, radii, color) list: skull ellipsoid plus eye/mouth blobs."""
    s = p["scale"]
    skull_r = s * np.array([p["width"], 1.0, p["depth"]])
    er = s * p["eye_radius"]
    mr = s * p["mouth_radius"]
    eye_l = _surface_point(np.array([-p["eye_spread"], p["eye_height"], 0.9]), skull_r)
    eye_r = _surface_point(np.array([+p["eye_spread"], p["eye_height"], 0.9]), skull_r)
    mouth = _surface_point(np.array([0.0, -0.42, 0.95]), skull_r)

    def embed(center: np.ndarray, r: float) -> np.ndarray:
        # sink blobs half a radius into the skull so they stop peeking past
        # the silhouette at side-back azimuths
        return center * (1.0 - 0.5 * r / np.linalg.norm(center))

    return [
        (np.zeros(3), skull_r, p["skin"]),
        (embed(eye_l, er), np.full(3, er), p["eye"]),
        (embed(eye_r, er), np.full(3, er), p["eye"]),
        (embed(mouth, mr), np.full(3, mr), p["mouth"]),
    ]


def render_head(params: dict, azimuth: float, config: SynthConfig) -> np.ndarray:
    """Ray-cast one view; returns (S, S, 3) uint8."""
    S = config.image_size
    pose = pose_from_angles(azimuth, config.elevation, config.radius)
    f = config.focal_px
    c = (S - 1) / 2.0
    u, v = np.meshgrid(np.arange(S), np.arange(S), indexing="xy")
    dirs_cam = np.stack([(u - c) / f, (v - c) / f, np.ones_like(u, dtype=np.float64)], axis=-1)
    dirs = dirs_cam @ pose.rotation  # R^T per row
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = pose.camera_center

    best_t = np.full((S, S), np.inf)
    color = np.empty((S, S, 3))
    if config.domain == "real-proxy":
        grade = (0.85 + 0.2 * (v / max(S - 1, 1)))[..., None]
        color[:] = params["background"] * grade
        ambient, diffuse = 0.75, 0.25
    else:
        color[:] = params["background"]
        ambient, diffuse = 0.65, 0.35

    for center, radii, body_color in _bodies(params):
        o = (origin - center) / radii
        d = dirs / radii
        a = (d * d).sum(-1)
        b = 2.0 * (d @ o)
        cc = float(o @ o) - 1.0
        disc = b * b - 4 * a * cc
        hit = disc > 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = np.where(hit, (-b - sq) / (2 * a), np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        closer = t < best_t
        if not closer.any():
            continue
        pts = origin + np.where(closer, t, 0.0)[..., None] * dirs
        n = (pts - center) / (radii**2)
        n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        shade = ambient + diffuse * np.maximum(0.0, n @ _LIGHT)
        lit = body_color * shade[..., None]
        color = np.where(closer[..., None], lit, color)
        best_t = np.where(closer, t, best_t)

    return np.clip(np.round(color * 255.0), 0, 255).astype(np.uint8)


def _blur(image: np.ndarray, radius: float = 0.6) -> np.ndarray:
    im = Image.fromarray(image, mode="RGB").filter(ImageFilter.GaussianBlur(radius))
    return np.asarray(im, dtype=np.uint8)


def generate_identity(
    seed: int,
    config: SynthConfig = SynthConfig(),
    janus_views: Sequence[int] = (),
    swap_views: Sequence[int] = (),
    swap_seed: Optional[int] = None,
) -> IdentityRecord:
    """Render one identity at all configured azimuths, planting corruptions.

    janus_views / swap_views are view indices (into the azimuth ladder).
    Janus indices must be strictly back views; swap indices must be frontal
    ones (so the two planted defect sets cannot collide) and need swap_seed.
    """
    azs = view_azimuths(config.n_views)
    for i in janus_views:
        if not is_back_view(azs[i]):
            raise ValueError(f"janus view index {i} (azimuth {azs[i]}) is not a back view")
    for i in swap_views:
        if is_back_view(azs[i]):
            raise ValueError(f"swap view index {i} (azimuth {azs[i]}) must be a frontal view")
    if swap_views and swap_seed is None:
        raise ValueError("swap_views given without swap_seed")
    if set(janus_views) & set(swap_views):
        raise ValueError("a view cannot be both janus- and swap-planted")

    params = identity_params(seed)
    frontal_blurred: Optional[np.ndarray] = None
    swap_params = identity_params(swap_seed) if swap_seed is not None else None

    views = []
    for i, az in enumerate(azs):
        if i in janus_views:
            if frontal_blurred is None:
                frontal_blurred = _blur(render_head(params, 0.0, config))
            img = frontal_blurred
        elif i in swap_views:
            img = render_head(swap_params, az, config)
        else:
            img = render_head(params, az, config)
        views.append(
            SynthView(
                azimuth=float(az),
                elevation=config.elevation,
                radius=config.radius,
                focal=config.focal_px,
                image=img,
            )
        )
    planted: dict = {}
    if janus_views:
        planted["janus_azimuths"] = [azs[i] for i in sorted(janus_views)]
    if swap_views:
        planted["swap_azimuths"] = [azs[i] for i in sorted(swap_views)]
        planted["swap_seed"] = int(swap_seed)
    return IdentityRecord(
        identity_id=f"id{seed:08d}",
        seed=int(seed),
        domain=config.domain,
        views=views,
        planted=planted,
    )


def generate_corpus(
    n_identities: int,
    base_seed: int = 0,
    config: SynthConfig = SynthConfig(),
    plant: Optional[dict[int, dict]] = None,
) -> list[IdentityRecord]:
    """Identities with seeds base_seed..base_seed+n-1.

    plant maps identity index -> {"janus": [view indices]} and/or
    {"swap": [view indices], "swap_seed": other_seed}.
    """
    plant = plant or {}
    records = []
    for i in range(n_identities):
        spec = plant.get(i, {})
        records.append(
            generate_identity(
                base_seed + i,
                config,
                janus_views=spec.get("janus", ()),
                swap_views=spec.get("swap", ()),
                swap_seed=spec.get("swap_seed"),
            )
        )
    return records


def random_plant(
    n_identities: int,
    janus_fraction: float,
    swap_fraction: float,
    seed: int,
    n_views: int = 24,
) -> dict[int, dict]:
    """Random, non-overlapping corruption assignment for a corpus."""
    rng = np.random.default_rng(seed)
    azs = view_azimuths(n_views)
    back = [i for i, a in enumerate(azs) if is_back_view(a)]
    front = [i for i, a in enumerate(azs) if not is_back_view(a)]
    order = rng.permutation(n_identities)
    n_janus = int(round(janus_fraction * n_identities))
    n_swap = int(round(swap_fraction * n_identities))
    plant: dict[int, dict] = {}
    for idx in order[:n_janus]:
        plant[int(idx)] = {"janus": sorted(rng.choice(back, size=2, replace=False).tolist())}
    for idx in order[n_janus:n_janus + n_swap]:
        spec = plant.setdefault(int(idx), {})
        spec["swap"] = sorted(rng.choice(front, size=max(2, len(front) // 3), replace=False).tolist())
        spec["swap_seed"] = int(rng.integers(10**6, 10**7))
    return plant


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneReport:
    stage: str
    backend: str
    thresholds: dict
    removed_views: list[dict] = field(default_factory=list)
    removed_identities: list[dict] = field(default_factory=list)
    excluded: list[dict] = field(default_factory=list)
    scores: dict = field(default_factory=dict)
    kept_identities: list[str] = field(default_factory=list)
    reused_stamps: bool = False

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def janus_filter(
    records: Sequence[IdentityRecord],
    classifier: BackViewClassifier,
    tau_bv: float = 0.93,
) -> tuple[list[IdentityRecord], PruneReport]:
    """Drop back views whose front-face score strictly exceeds tau_bv.

    Frontal views (|azimuth| <= 90) are never scored or removed. Scores for
    every scored view are stamped into record.prune["back_view_scores"].
    """
    if not (0.0 < tau_bv < 1.0):
        raise ValueError(f"tau_bv must be in (0,1), got {tau_bv}")
    report = PruneReport(
        stage="janus", backend=classifier.name, thresholds={"tau_bv": tau_bv}
    )
    out = []
    for rec in records:
        kept_views = []
        scores: dict[str, float] = {}
        for view in rec.views:
            if not is_back_view(view.azimuth):
                kept_views.append(view)
                continue
            s = float(classifier.score(view.image))
            scores[f"{int(round(view.azimuth)):+d}"] = s
            if s > tau_bv:
                report.removed_views.append(
                    {"identity_id": rec.identity_id, "azimuth": view.azimuth, "score": s}
                )
            else:
                kept_views.append(view)
        prune = dict(rec.prune)
        prune["back_view_scores"] = scores
        prune["janus"] = {"classifier": classifier.name, "tau_bv": tau_bv}
        out.append(dataclasses.replace(rec, views=kept_views, prune=prune))
        report.kept_identities.append(rec.identity_id)
        report.scores[rec.identity_id] = scores
    return out, report


def identity_consistency_filter(
    records: Sequence[IdentityRecord],
    embedder: Embedder,
    tau_ii: float = 0.70,
) -> tuple[list[IdentityRecord], PruneReport]:
    """Keep the ceil(tau_ii * M) identities with the highest view coherence.

    Coherence = mean cosine similarity over all unordered view pairs of the
    identity's surviving views. M counts only identities with >= 2 views;
    the rest are excluded and reported. Ties rank by ascending identity id.
    Records already stamped with identical (embedder, tau_ii, view count)
    pass through unchanged, which makes the filter idempotent.
    """
    if not (0.0 < tau_ii <= 1.0):
        raise ValueError(f"tau_ii must be in (0,1], got {tau_ii}")
    report = PruneReport(
        stage="consistency", backend=embedder.name, thresholds={"tau_ii": tau_ii}
    )
    eligible = []
    for rec in records:
        if len(rec.views) < 2:
            report.excluded.append(
                {"identity_id": rec.identity_id, "reason": f"{len(rec.views)} views < 2"}
            )
        else:
            eligible.append(rec)

    def stamp_matches(rec: IdentityRecord) -> bool:
        st = rec.prune.get("consistency")
        return (
            isinstance(st, dict)
            and st.get("embedder") == embedder.name
            and st.get("tau_ii") == tau_ii
            and st.get("n_views") == len(rec.views)
            and st.get("kept") is True
        )

    if eligible and all(stamp_matches(r) for r in eligible):
        for rec in eligible:
            report.scores[rec.identity_id] = rec.prune["consistency"]["score"]
            report.kept_identities.append(rec.identity_id)
        report.reused_stamps = True
        return list(eligible), report

    scored = []
    for rec in eligible:
        embs = np.stack([embedder.embed(v.image) for v in rec.views])
        n = embs.shape[0]
        gram = embs @ embs.T
        iu = np.triu_indices(n, 1)
        score = float(gram[iu].mean())
        scored.append((rec, score))
        report.scores[rec.identity_id] = score

    keep_count = math.ceil(tau_ii * len(scored))
    ranked = sorted(scored, key=lambda rs: (-rs[1], rs[0].identity_id))
    kept, dropped = ranked[:keep_count], ranked[keep_count:]

    out = []
    for rec, score in kept:
        prune = dict(rec.prune)
        prune["consistency"] = {
            "embedder": embedder.name,
            "tau_ii": tau_ii,
            "score": score,
            "n_views": len(rec.views),
            "kept": True,
        }
        out.append(dataclasses.replace(rec, prune=prune))
        report.kept_identities.append(rec.identity_id)
    for rec, score in dropped:
        report.removed_identities.append(
            {"identity_id": rec.identity_id, "score": score}
        )
    return out, report


def prune_pipeline(
    records: Sequence[IdentityRecord],
    classifier: BackViewClassifier,
    embedder: Embedder,
    tau_bv: float = 0.93,
    tau_ii: float = 0.70,
) -> tuple[list[IdentityRecord], dict]:
    """Janus filter first, then identity-consistency filter."""
    after_janus, rep_j = janus_filter(records, classifier, tau_bv)
    after_cons, rep_c = identity_consistency_filter(after_janus, embedder, tau_ii)
    return after_cons, {"janus": rep_j.to_dict(), "consistency": rep_c.to_dict()}


# ---------------------------------------------------------------------------
# Dataset IO
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _view_filename(identity_id: str, azimuth: float) -> str:
    return f"{identity_id}/view_{int(round(azimuth)):+04d}.png"


def save_dataset(records: Sequence[IdentityRecord], path: Path | str) -> Path:
    """Write manifest.json plus per-identity PNG subdirectories."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": "mvhead-dataset", "version": 1, "identities": []}
    for rec in records:
        entry = {
            "id": rec.identity_id,
            "seed": rec.seed,
            "domain": rec.domain,
            "planted": rec.planted,
            "prune": rec.prune,
            "views": [],
        }
        for view in rec.views:
            rel = _view_filename(rec.identity_id, view.azimuth)
            file = root / rel
            file.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(view.image, mode="RGB").save(file, format="PNG")
            entry["views"].append(
                {
                    "azimuth": view.azimuth,
                    "elevation": view.elevation,
                    "radius": view.radius,
                    "focal": view.focal,
                    "width": int(view.image.shape[1]),
                    "height": int(view.image.shape[0]),
                    "file": rel,
                }
            )
        manifest["identities"].append(entry)
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(path: Path | str) -> list[IdentityRecord]:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "mvhead-dataset":
        raise ValueError(f"{manifest_path} is not a dataset manifest")
    records = []
    for entry in manifest["identities"]:
        views = []
        for vm in entry["views"]:
            file = root / vm["file"]
            if not file.exists():
                raise FileNotFoundError(f"manifest references missing image {file}")
            img = np.asarray(Image.open(file).convert("RGB"), dtype=np.uint8)
            if img.shape[0] != vm["height"] or img.shape[1] != vm["width"]:
                raise ValueError(
                    f"{file}: image is {img.shape[1]}x{img.shape[0]}, "
                    f"manifest says {vm['width']}x{vm['height']}"
                )
            views.append(
                SynthView(
                    azimuth=vm["azimuth"],
                    elevation=vm["elevation"],
                    radius=vm["radius"],
                    focal=vm["focal"],
                    image=img,
                )
            )
        records.append(
            IdentityRecord(
                identity_id=entry["id"],
                seed=entry["seed"],
                domain=entry["domain"],
                views=views,
                planted=entry.get("planted", {}),
                prune=entry.get("prune", {}),
            )
        )
    return records
