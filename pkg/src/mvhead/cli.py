"""Command-line orchestration: synth, prune, train, sample, eval, report.

Every run resolves relative paths against $MVHEAD_DATA_ROOT (when set),
derives all randomness from one --seed, and writes a run manifest with the
resolved settings and sha256 checksums of its artifacts. Exit codes: 0
success, 1 validation error (bad flags, missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt_mod
from . import configio, metrics, synthdata, training
from .backends import make_classifier, make_embedder
from .cameras import pose_from_angles

DATA_ROOT_ENV = "MVHEAD_DATA_ROOT"
RUN_MANIFEST_NAME = "run_manifest.json"
FEATURE_EMBEDDER_SEED = 711
FACE_EMBEDDER_SEED = 902


class CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of 2."""

    def error(self, message):
        raise CliValidationError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def resolve_path(raw: str) -> Path:
    path = Path(raw)
    if path.is_absolute():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) / path if root else path


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(
    out_dir: Path,
    command: str,
    settings: dict,
    inputs: dict,
    outputs: dict,
    seed,
    started_at: str,
    artifacts: list,
    config_path=None,
    config_hash=None,
) -> Path:
    manifest = {
        "command": command,
        "settings": settings,
        "config_path": str(config_path) if config_path else None,
        "config_hash": config_hash,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": seed,
        "started_at": started_at,
        "finished_at": _utc_now(),
        "checksums": {
            str(p.relative_to(out_dir) if p.is_relative_to(out_dir) else p): _sha256(p)
            for p in artifacts
        },
    }
    path = out_dir / RUN_MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _dataset_artifacts(root: Path) -> list:
    return sorted(p for p in root.rglob("*") if p.is_file() and p.name != RUN_MANIFEST_NAME)


def _cmd_synth(args) -> int:
    out = resolve_path(args.out)
    started = _utc_now()
    cfg = synthdata.SynthConfig(
        image_size=args.size, n_views=args.views, domain=args.domain
    )
    plant = None
    if args.plant_janus > 0 or args.plant_swap > 0:
        plant = synthdata.random_plant(
            args.identities, args.plant_janus, args.plant_swap, args.seed, args.views
        )
    records = synthdata.generate_corpus(
        args.identities, base_seed=args.seed, config=cfg, plant=plant
    )
    synthdata.save_dataset(records, out)
    write_run_manifest(
        out, "synth",
        settings={"identities": args.identities, "views": args.views,
                  "size": args.size, "domain": args.domain,
                  "plant_janus": args.plant_janus, "plant_swap": args.plant_swap},
        inputs={}, outputs={"dataset": out}, seed=args.seed,
        started_at=started, artifacts=_dataset_artifacts(out),
    )
    print(f"wrote {len(records)} identities x {args.views} views to {out}")
    return 0


def _cmd_prune(args) -> int:
    src = resolve_path(getattr(args, "in"))
    out = resolve_path(args.out)
    started = _utc_now()
    records = synthdata.load_dataset(src)
    classifier = make_classifier()
    embedder = make_embedder()
    kept, report = synthdata.prune_pipeline(
        records, classifier, embedder, tau_bv=args.tau_bv, tau_ii=args.tau_ii
    )
    synthdata.save_dataset(kept, out)
    report_path = out / "prune_report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    write_run_manifest(
        out, "prune",
        settings={"tau_bv": args.tau_bv, "tau_ii": args.tau_ii},
        inputs={"dataset": src}, outputs={"dataset": out, "report": report_path},
        seed=args.seed, started_at=started, artifacts=_dataset_artifacts(out),
    )
    print(f"kept {len(kept)}/{len(records)} identities; report at {report_path}")
    return 0


def _train_config(args) -> tuple:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliValidationError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    if args.config:
        config = configio.load_config(resolve_path(args.config), overrides)
    else:
        config = configio.apply_overrides(training.TrainConfig(), overrides)
    if args.seed is not None:
        config = configio.apply_overrides(config, {"seed": str(args.seed)})
    return config, (resolve_path(args.config) if args.config else None)


def _cmd_train(args) -> int:
    out = resolve_path(args.out)
    data = resolve_path(args.data)
    started = _utc_now()
    config, config_path = _train_config(args)
    records = synthdata.load_dataset(data)
    allowed = set()
    if config.use_real_proxy:
        allowed.add("real-proxy")
    if config.use_synthetic_proxy:
        allowed.add("synthetic-proxy")
    records = [r for r in records if r.domain in allowed]
    if config.pruning_enabled:
        records, _ = synthdata.prune_pipeline(records, make_classifier(), make_embedder())
    if not records:
        raise ValueError(f"no usable identities in {data} for domains {sorted(allowed)}")
    result = training.fit(
        config, records, out,
        resume_from=resolve_path(args.resume) if args.resume else None,
    )
    out.mkdir(parents=True, exist_ok=True)
    resolved_path = out / "config_resolved.cfg"
    resolved_path.write_text(configio.config_to_text(config))
    write_run_manifest(
        out, "train",
        settings={"data": str(data), "total_steps": config.total_steps},
        inputs={"dataset": data}, outputs={"checkpoint": result.checkpoint_path},
        seed=config.seed, started_at=started,
        artifacts=[result.checkpoint_path, resolved_path],
        config_path=config_path, config_hash=ckpt_mod.config_hash(config.to_dict()),
    )
    print(
        f"trained {config.total_steps} steps, final loss {result.losses[-1]:.4f}, "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def _load_input_image(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def tile_grid(images: list, cols: int) -> np.ndarray:
    """Row-major tiling of equally sized uint8 images into one canvas."""
    if not images:
        raise ValueError("no images to tile")
    if cols < 1:
        raise ValueError(f"cols must be >= 1, got {cols}")
    h, w = images[0].shape[:2]
    rows = math.ceil(len(images) / cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return canvas


def _cmd_sample(args) -> int:
    ckpt_path = resolve_path(args.ckpt)
    input_path = resolve_path(args.input)
    out_path = resolve_path(args.out)
    started = _utc_now()
    if args.views < 1:
        raise ValueError(f"--views must be >= 1, got {args.views}")
    pipeline, schedule, config, _, _ = training.load_checkpoint(ckpt_path)
    y_img = _load_input_image(input_path, config.image_size)
    azimuths = [-180.0 + i * (360.0 / args.views) for i in range(args.views)]
    defaults = synthdata.SynthConfig()
    poses = [
        pose_from_angles(az, defaults.elevation, defaults.radius) for az in azimuths
    ]
    generator = torch.Generator().manual_seed(args.seed)
    images = training.sample_images(
        pipeline, schedule, config, y_img, poses,
        steps=args.steps, generator=generator,
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cols = math.ceil(math.sqrt(len(images)))
    Image.fromarray(tile_grid(images, cols)).save(out_path)
    view_dir = out_path.parent / f"{out_path.stem}_views"
    view_dir.mkdir(exist_ok=True)
    view_paths = []
    for az, img in zip(azimuths, images):
        p = view_dir / f"view_{int(round(az)):+04d}.png"
        Image.fromarray(img).save(p)
        view_paths.append(p)
    write_run_manifest(
        out_path.parent, "sample",
        settings={"views": args.views, "steps": args.steps},
        inputs={"checkpoint": ckpt_path, "input": input_path},
        outputs={"grid": out_path, "views": view_dir},
        seed=args.seed, started_at=started, artifacts=[out_path, *view_paths],
    )
    print(f"wrote {len(images)}-view grid to {out_path}")
    return 0


def _cmd_eval(args) -> int:
    gen_dir = resolve_path(args.generated)
    ref_dir = resolve_path(args.reference)
    out_path = resolve_path(args.out)
    started = _utc_now()
    generated = synthdata.load_dataset(gen_dir)
    reference = synthdata.load_dataset(ref_dir)
    feature_emb = make_embedder(seed=FEATURE_EMBEDDER_SEED)
    face_emb = make_embedder(seed=FACE_EMBEDDER_SEED)
    report = metrics.compute_report(
        generated, reference, feature_emb, face_emb,
        config={
            "feature_embedder": feature_emb.name,
            "face_embedder": face_emb.name,
            "generated": str(gen_dir),
            "reference": str(ref_dir),
        },
    )
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.to_json())
    write_run_manifest(
        out_path.parent, "eval",
        settings={},
        inputs={"generated": gen_dir, "reference": ref_dir},
        outputs={"report": out_path},
        seed=args.seed, started_at=started, artifacts=[out_path],
    )
    print(f"wrote metric report to {out_path}")
    return 0


_REPORT_FIELDS = ("fid", "clip_sim", "i2oid", "o2oid", "reid_match", "reid_dist", "ssim_mean")


def format_report(report: dict) -> str:
    lines = ["metric            value", "-" * 24]
    for key in _REPORT_FIELDS:
        val = report.get(key)
        txt = "n/a" if val is None else f"{val:.6f}"
        lines.append(f"{key:<17} {txt}")
    per_id = report.get("per_identity") or {}
    if per_id:
        lines.append("")
        lines.append("identity          clip_sim  i2oid")
        for ident in sorted(per_id):
            row = per_id[ident]
            lines.append(
                f"{ident:<17} {row.get('clip_sim', float('nan')):.4f}    "
                f"{row.get('i2oid', float('nan')):.4f}"
            )
    return "\n".join(lines)


def _cmd_report(args) -> int:
    src = resolve_path(getattr(args, "in"))
    started = _utc_now()
    report = json.loads(Path(src).read_text())
    text = format_report(report)
    print(text)
    if args.out:
        out_path = resolve_path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text + "\n")
        write_run_manifest(
            out_path.parent, "report", settings={}, inputs={"report": src},
            outputs={"summary": out_path}, seed=args.seed,
            started_at=started, artifacts=[out_path],
        )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="mvhead", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic head dataset")
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--domain", choices=["synthetic-proxy", "real-proxy"],
                   default="real-proxy")
    p.add_argument("--plant-janus", type=float, default=0.0)
    p.add_argument("--plant-swap", type=float, default=0.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("prune", help="filter a dataset with the quality backends")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau-bv", type=float, default=0.93)
    p.add_argument("--tau-ii", type=float, default=0.70)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("train", help="train the multi-view diffusion model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="sample novel views from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="compute metrics between two datasets")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="render a metric report as text")
    p.add_argument("--in", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_report)
    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except CliValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
