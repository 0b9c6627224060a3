"""Acceptance criteria, one test per criterion, at the stated tolerances.

Each test prints a single `ACCEPTANCE <n> <name>: PASS|FAIL` line (visible
with -s or in captured output) and enforces its own runtime budget. The
training smoke test is the long pole; everything else finishes in seconds.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from conftest import tiny_train_config
from mvhead.backends import make_embedder
from mvhead.cameras import (
    Intrinsics,
    build_voxel_grid,
    frustum_ray_points,
    pose_from_angles,
    project,
    sample_view_features,
    trilinear_sample_volume,
    world_to_grid,
)
from mvhead.checkpoint import load_arrays
from mvhead.conditioning import FrustumVolume, HybridVolume, sample_frustum
from mvhead.denoiser import DenoiserConfig, JointAttention, JointDenoiser, predict_noise
from mvhead.diffusion import (
    MultiViewState,
    build_schedule,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    posterior_mean,
)
from mvhead.metrics import FeatureStats, compute_report, fid, o2oid, reid, ssim
from mvhead.synthdata import (
    SynthConfig,
    generate_corpus,
    identity_consistency_filter,
    is_back_view,
    janus_filter,
    prune_pipeline,
)
from mvhead.training import (
    ViewBatch,
    batch_from_record,
    build_pipeline,
    desk_train_config,
    diffusion_loss,
    fit,
    load_checkpoint,
    lr_at,
    sample_images,
    sample_view_subset,
)


@contextmanager
def criterion(num, name, limit_s=None):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        dt = time.perf_counter() - t0
        if limit_s is not None and dt >= limit_s:
            raise AssertionError(f"criterion {num} took {dt:.1f}s, budget {limit_s}s")
        ok = True
    finally:
        dt = time.perf_counter() - t0
        print(f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} ({dt:.1f}s)")


class FnEmbedder:
    name = "mock-emb"

    def __init__(self, fn):
        self.fn = fn

    def embed(self, image):
        return np.asarray(self.fn(image), dtype=np.float64)


def test_criterion_1_schedule_and_ddim_oracles():
    with criterion(1, "schedule-ddim-oracles", limit_s=10):
        # closed-form schedule anchors
        sched = build_schedule(3, 0.1, 0.3)
        np.testing.assert_allclose(sched.betas, [0.1, 0.2, 0.3], atol=1e-15)
        assert sched.alpha_bar(3) == pytest.approx(0.9 * 0.8 * 0.7, abs=1e-15)
        assert sched.alpha_bar(0) == 1.0
        assert sched.sigma(1) == pytest.approx(math.sqrt(0.1), abs=1e-15)

        # forward closed form: 0.8 * 0.5 + 0.6 * 1.0 = 1.0
        s2 = build_schedule(5, 0.01, 0.02)
        t_star = 3
        abar = s2.alpha_bar(t_star)
        x = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
        eps = torch.ones_like(x)
        state = MultiViewState(views=x, poses=(pose_from_angles(0, 0, 2),), t=0)
        noisy = forward_diffuse(state, t_star, eps, s2)
        expect = math.sqrt(abar) * 0.5 + math.sqrt(1 - abar) * 1.0
        torch.testing.assert_close(
            noisy.views, torch.full_like(x, expect), rtol=0, atol=1e-14
        )

        # posterior mean: at t=1 an exact-eps prediction recovers x0 exactly
        x0 = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        e = torch.randn_like(x0)
        st1 = forward_diffuse(MultiViewState(views=x0, poses=state.poses, t=0), 1, e, s2)
        mu = posterior_mean(st1.views, e, 1, s2)
        torch.testing.assert_close(mu, x0, rtol=0, atol=1e-12)

        # plant-and-recover DDIM, full T=100 ladder, eta=0
        schedule = build_schedule(100, 0.002, 0.12)
        target = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 1.6 - 0.8
        eps0 = torch.randn_like(target)
        poses = tuple(pose_from_angles(a, 0.0, 2.0) for a in (-30.0, 30.0))
        st = forward_diffuse(
            MultiViewState(views=target, poses=poses, t=0), 100, eps0, schedule
        )
        ladder = ddim_timesteps(100, 100)
        assert ladder[0] == 100 and ladder[-1] == 0
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            abar_t = schedule.alpha_bar(t)
            eps_hat = (st.views - math.sqrt(abar_t) * target) / math.sqrt(1 - abar_t)
            st = ddim_step(st, eps_hat, t_prev, schedule, eta=0.0)
        assert float((st.views - target).abs().max()) < 1e-5


def test_criterion_2_loss_and_gradient():
    with criterion(2, "loss-oracles-and-fd-gradient", limit_s=120):
        config = tiny_train_config(
            image_size=8, grid_size=4, n_views=4, subset_k=2, t_steps=10,
        )
        records = generate_corpus(
            1, base_seed=2, config=SynthConfig(image_size=8, n_views=4)
        )
        pipeline, schedule = build_pipeline(config)
        batch = batch_from_record(records[0], config, pipeline.grid)

        # perfect predictor: loss vanishes to float64 dust
        views64 = batch.views.double()
        batch64 = ViewBatch(
            y=batch.y.double(), views=views64, poses=batch.poses,
            occupancy=batch.occupancy,
        )

        class OracleReplay:
            def predict_eps(self, views, t, poses, y, occupancy=None):
                abar = schedule.alpha_bar(t)
                return (views - math.sqrt(abar) * views64) / math.sqrt(1 - abar)

        loss = diffusion_loss(
            batch64, OracleReplay(), schedule, torch.Generator().manual_seed(3)
        )
        assert float(loss) <= 1e-10

        # zero predictor: Monte Carlo mean matches the chi expectation
        class Zero:
            def predict_eps(self, views, t, poses, y, occupancy=None):
                return torch.zeros_like(views)

        g = torch.Generator().manual_seed(0)
        vals = [float(diffusion_loss(batch, Zero(), schedule, g)) for _ in range(200)]
        d = batch.views[0].numel()
        chi_mean = math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
        sem = float(np.std(vals, ddof=1)) / math.sqrt(len(vals))
        assert abs(float(np.mean(vals)) - chi_mean) <= 3 * sem

        # finite differences through conditioning chain + denoiser, float64
        pipeline = pipeline.double()
        jitter = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for p in pipeline.parameters():
                p.add_(0.01 * torch.randn(p.shape, generator=jitter, dtype=p.dtype))

        def loss_at():
            return diffusion_loss(
                batch64, pipeline, schedule, torch.Generator().manual_seed(17)
            )

        pipeline.zero_grad()
        loss_at().backward()
        named = dict(pipeline.named_parameters())
        picked = []
        wanted = ("context.", "fusion.", "frustum.", "backbone.")
        for tag in wanted:
            for name, p in named.items():
                if name.startswith(tag) and p.grad is not None and p.numel() > 0:
                    picked.append((name, p))
                    break
        assert len(picked) == len(wanted), [n for n, _ in picked]
        h = 1e-4
        with torch.no_grad():
            for name, p in picked:
                flat = p.view(-1)
                idx = flat.numel() // 2
                analytic = float(p.grad.view(-1)[idx])
                keep = float(flat[idx])
                flat[idx] = keep + h
                up = float(loss_at())
                flat[idx] = keep - h
                down = float(loss_at())
                flat[idx] = keep
                fd = (up - down) / (2 * h)
                rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
                assert rel < 1e-3, f"{name}[{idx}]: fd={fd} analytic={analytic}"


def test_criterion_3_joint_equivariance():
    with criterion(3, "joint-attention-equivariance", limit_s=30):
        cfg = DenoiserConfig(
            in_channels=3, base_channels=8, channel_mults=(1, 2), heads=2,
            emb_dim=8, cond_channels=4, attn_max_size=16,
        )
        model = JointDenoiser(cfg).double()
        k = 4
        g = torch.Generator().manual_seed(0)
        views = torch.randn(k, 3, 8, 8, generator=g, dtype=torch.float64)
        y = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
        poses = [pose_from_angles(az, 5.0, 2.0) for az in (-90.0, -30.0, 30.0, 90.0)]
        vols = []
        for _ in range(k):
            levels = tuple(
                torch.randn(4, 3, 8 >> i, 8 >> i, generator=g, dtype=torch.float64)
                for i in range(2)
            )
            vols.append(FrustumVolume(
                levels=levels, depths=torch.linspace(1, 3, 3, dtype=torch.float64),
                near=1.0, far=3.0,
            ))
        with torch.no_grad():
            base = predict_noise(model, views, y, vols, 5, poses)
            perm = [2, 0, 3, 1]
            out_p = predict_noise(
                model, views[perm], y, [vols[i] for i in perm],
                5, [poses[i] for i in perm],
            )
        assert float((out_p - base[perm]).abs().max()) <= 1e-6

        # attention rows are proper distributions
        attn = JointAttention(16, heads=4).double()
        with torch.no_grad():
            w = attn.weights(torch.randn(37, 16, dtype=torch.float64, generator=g))
        assert float((w.sum(dim=-1) - 1.0).abs().max()) <= 1e-6

        # ablated attention: no cross-view talk, bit-exact
        cfg_off = DenoiserConfig(
            in_channels=3, base_channels=8, channel_mults=(1, 2), heads=2,
            emb_dim=8, cond_channels=4, attn_max_size=16, attention_enabled=False,
        )
        off = JointDenoiser(cfg_off)
        v32 = views.float()
        y32 = y.float()
        g32 = torch.Generator().manual_seed(3)
        vols32 = []
        for _ in range(k):
            levels = tuple(
                torch.randn(4, 3, 8 >> i, 8 >> i, generator=g32) for i in range(2)
            )
            vols32.append(FrustumVolume(
                levels=levels, depths=torch.linspace(1, 3, 3), near=1.0, far=3.0,
            ))
        with torch.no_grad():
            out_a = predict_noise(off, v32, y32, vols32, 5, poses)
            poked = v32.clone()
            poked[0] += 1.0
            out_b = predict_noise(off, poked, y32, vols32, 5, poses)
        assert torch.equal(out_a[1:], out_b[1:])
        assert not torch.equal(out_a[0], out_b[0])


def test_criterion_4_geometry_oracles():
    with criterion(4, "conditioning-geometry-oracles", limit_s=30):
        # bilinear voxel projection against a plain-python oracle
        grid = build_voxel_grid(5, 0.8)
        pose = pose_from_angles(25.0, -10.0, 2.2)
        intr = Intrinsics(focal=12.0, cx=5.5, cy=5.5, width=12, height=12)
        g = torch.Generator().manual_seed(1)
        features = torch.randn(3, 12, 12, generator=g, dtype=torch.float64)
        volume, validity = sample_view_features(features, pose, intr, grid)
        feats_np = features.numpy()
        for n, vertex in enumerate(grid.vertices):
            prj = project(vertex, pose, intr)
            i, j, kk = np.unravel_index(n, (5, 5, 5))
            if not prj.in_frustum or not (
                0 <= prj.u <= 11 and 0 <= prj.v <= 11
            ):
                continue
            j0 = min(int(math.floor(prj.u)), 10)
            i0 = min(int(math.floor(prj.v)), 10)
            fu, fv = prj.u - j0, prj.v - i0
            expect = (
                (1 - fu) * (1 - fv) * feats_np[:, i0, j0]
                + fu * (1 - fv) * feats_np[:, i0, j0 + 1]
                + (1 - fu) * fv * feats_np[:, i0 + 1, j0]
                + fu * fv * feats_np[:, i0 + 1, j0 + 1]
            )
            got = volume[:, i, j, kk].numpy()
            assert np.abs(got - expect).max() <= 1e-6

        # frustum resampling: depths bounded, values match trilinear oracle
        vol_feats = torch.randn(4, 5, 5, 5, generator=g, dtype=torch.float64)
        hybrid = HybridVolume(features=vol_feats)
        near, far = 1.4, 3.0
        samples, depths = sample_frustum(
            hybrid, pose, intr, grid, depth_samples=6, near=near, far=far, out_size=8
        )
        assert float(depths.min()) >= near and float(depths.max()) <= far
        pts, _ = frustum_ray_points(
            pose, intr, 6, near, far, 8, 8, dtype=torch.float64
        )
        oracle = trilinear_sample_volume(vol_feats, pts, grid)
        assert float((samples.permute(1, 2, 3, 0) - oracle).abs().max()) <= 1e-6
        # spot-check the trilinear oracle itself at an exact vertex
        v_pt = torch.tensor(grid.vertices[31], dtype=torch.float64).view(1, 1, 1, 3)
        at_vertex = trilinear_sample_volume(vol_feats, v_pt, grid)
        i, j, kk = np.unravel_index(31, (5, 5, 5))
        torch.testing.assert_close(
            at_vertex[0, 0, 0], vol_feats[:, i, j, kk], rtol=0, atol=1e-12
        )
        assert world_to_grid(v_pt, grid).abs().max() <= 4.0


def test_criterion_5_pruning_precision_recall():
    with criterion(5, "pruning-planted-corpus", limit_s=30):
        cfg = SynthConfig(image_size=16, n_views=8)
        azs = [float(a) for a in range(-180, 180, 45)]
        back_idx = [i for i, a in enumerate(azs) if is_back_view(a)]
        janus_ids = list(range(10))
        plant = {i: {"janus": back_idx[:2]} for i in janus_ids}
        records = generate_corpus(50, base_seed=100, config=cfg, plant=plant)

        truth_views = set()
        table = {}
        for rec in records:
            planted_azs = set(rec.planted.get("janus_azimuths", []))
            for view in rec.views:
                if not is_back_view(view.azimuth):
                    continue
                if view.azimuth in planted_azs:
                    table[view.image.tobytes()] = 0.95
                    truth_views.add((rec.identity_id, view.azimuth))
                else:
                    table.setdefault(view.image.tobytes(), 0.10)

        class TableClassifier:
            name = "mock-table"

            def score(self, image):
                return table[image.tobytes()]

        # consistency defects planted in 15 identities the janus plant skipped
        bad_ids = {rec.identity_id for rec in records[10:25]}
        e1 = np.array([1.0, 0.0])
        e2 = np.array([0.0, 1.0])
        emb_table = {}
        for rec in records:
            for n, view in enumerate(rec.views):
                split = rec.identity_id in bad_ids and n >= len(rec.views) // 2
                emb_table[view.image.tobytes()] = e2 if split else e1

        emb = FnEmbedder(lambda img: emb_table[img.tobytes()])
        kept, report = prune_pipeline(records, TableClassifier(), emb)

        removed = {
            (r["identity_id"], r["azimuth"])
            for r in report["janus"]["removed_views"]
        }
        assert removed == truth_views  # precision = recall = 1.0 on views
        dropped_ids = {
            d["identity_id"] for d in report["consistency"]["removed_identities"]
        }
        assert dropped_ids == bad_ids  # precision = recall = 1.0 on identities
        assert len(kept) == math.ceil(0.7 * 50)

        # boundary: a back-view score of exactly tau survives the strict rule
        solo = generate_corpus(1, base_seed=999, config=cfg)
        at_tau = {
            v.image.tobytes(): 0.93 for v in solo[0].views if is_back_view(v.azimuth)
        }

        class AtTau:
            name = "mock-tau"

            def score(self, image):
                return at_tau[image.tobytes()]

        kept_solo, rep_solo = janus_filter(solo, AtTau(), tau_bv=0.93)
        assert rep_solo.removed_views == []
        assert len(kept_solo[0].views) == 8


def test_criterion_6_metric_oracles():
    with criterion(6, "metric-closed-forms", limit_s=30):
        emb = make_embedder("random-conv", seed=711)
        rng = np.random.default_rng(0)
        feats = np.stack([
            emb.embed(rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8))
            for _ in range(40)
        ])
        stats = FeatureStats.from_features(feats)
        assert abs(fid(stats, stats)) <= 1e-8

        one_d = fid(
            FeatureStats(mean=np.array([0.0]), covariance=np.array([[1.0]]), count=8),
            FeatureStats(mean=np.array([1.0]), covariance=np.array([[1.0]]), count=8),
        )
        assert one_d == 1.0

        vecs = {m: rng.normal(size=5) for m in range(4)}
        imgs = []
        for m in range(4):
            im = np.zeros((8, 8, 3), dtype=np.uint8)
            im[0, 0, 0] = m
            imgs.append(im)
        mock = FnEmbedder(lambda img: vecs[int(img[0, 0, 0])])
        got = o2oid(imgs, mock)
        brute = np.mean([
            vecs[i] @ vecs[j] / (np.linalg.norm(vecs[i]) * np.linalg.norm(vecs[j]))
            for i in range(4) for j in range(i + 1, 4)
        ])
        assert abs(got - brute) <= 1e-12

        dist_table = {
            0: np.array([0.0, 0.0]),
            1: np.array([0.5, 0.0]),
            2: np.array([0.7, 0.0]),
        }
        demb = FnEmbedder(lambda img: dist_table[int(img[0, 0, 0])])
        match, dist = reid([imgs[1], imgs[2]], [imgs[0], imgs[0]], demb, threshold=0.6)
        assert match == 0.5 and dist == pytest.approx(0.6, abs=1e-12)

        x = rng.uniform(size=(16, 16, 3))
        assert abs(ssim(x, x) - 1.0) <= 1e-9


@pytest.fixture(scope="module")
def smoke_artifacts(tmp_path_factory):
    """Criterion 7's full training run, shared with the sampling half."""
    out = tmp_path_factory.mktemp("smoke")
    config = desk_train_config()
    records = generate_corpus(
        2, base_seed=0, config=SynthConfig(image_size=32, n_views=8)
    )
    t0 = time.perf_counter()
    result = fit(config, records, out)
    wall = time.perf_counter() - t0
    return {
        "config": config,
        "records": records,
        "out": out,
        "losses": result.losses,
        "wall_s": wall,
    }


def test_criterion_7_training_smoke(smoke_artifacts):
    with criterion(7, "training-smoke-end-to-end", limit_s=90 * 60):
        losses = smoke_artifacts["losses"]
        assert len(losses) <= 2000
        early = float(np.mean(losses[:50]))
        late = float(np.mean(losses[-50:]))
        assert late <= 0.5 * early, f"early MA {early:.2f} late MA {late:.2f}"
        assert smoke_artifacts["wall_s"] < 90 * 60

        ckpts = sorted(smoke_artifacts["out"].glob("checkpoint_*.ckpt"))
        pipeline, schedule, config, _, _ = load_checkpoint(ckpts[-1])
        rec = smoke_artifacts["records"][0]
        front = min(rec.views, key=lambda v: abs(v.azimuth))
        poses = [pose_from_angles(az, 10.0, 2.7) for az in (-45.0, 0.0, 45.0, 90.0)]
        sampled = sample_images(
            pipeline, schedule, config, front.image, poses,
            steps=50, generator=torch.Generator().manual_seed(0),
        )
        emb = make_embedder("random-conv", seed=711)
        rng = np.random.default_rng(1)
        noise = [
            rng.integers(0, 256, size=sampled[0].shape, dtype=np.uint8)
            for _ in sampled
        ]
        oid_model = o2oid(sampled, emb)
        oid_noise = o2oid(noise, emb)
        assert oid_model > oid_noise, f"model {oid_model:.4f} vs noise {oid_noise:.4f}"


def test_criterion_8_schedule_constants():
    with criterion(8, "lr-constants-and-subset-uniformity", limit_s=60):
        config = desk_train_config()
        assert lr_at(0, "backbone", config) == 1e-6
        assert lr_at(100, "backbone", config) == 5e-5
        assert lr_at(10_000, "backbone", config) == 5e-5
        for step in (0, 1, 99, 100, 5000):
            assert lr_at(step, "other", config) == 5e-4

        draws = 100_000
        n, k = 16, 4
        g = torch.Generator().manual_seed(0)
        counts = np.zeros(n, dtype=np.int64)
        for _ in range(draws):
            for idx in sample_view_subset(n, k, g):
                counts[idx] += 1
        p = k / n
        sigma = math.sqrt(draws * p * (1 - p))
        assert np.abs(counts - draws * p).max() <= 3 * sigma, counts


def test_criterion_9_bitwise_reproducibility(tmp_path):
    with criterion(9, "bitwise-reproducibility", limit_s=300):
        config = tiny_train_config(total_steps=4, checkpoint_every=2)
        records = generate_corpus(
            2, base_seed=5, config=SynthConfig(image_size=16, n_views=4)
        )
        ckpt_bytes = []
        for name in ("runA", "runB"):
            out = tmp_path / name
            fit(config, records, out)
            ckpt_bytes.append((out / "checkpoint_000004.ckpt").read_bytes())
        assert ckpt_bytes[0] == ckpt_bytes[1]

        pipeline, schedule, cfg, _, _ = load_checkpoint(tmp_path / "runA" / "checkpoint_000004.ckpt")
        front = records[0].views[0]
        poses = [pose_from_angles(az, 0.0, 2.7) for az in (0.0, 90.0)]
        grids = []
        for _ in range(2):
            out = sample_images(
                pipeline, schedule, cfg, front.image, poses,
                steps=4, generator=torch.Generator().manual_seed(5),
            )
            grids.append(np.stack(out).tobytes())
        assert grids[0] == grids[1]

        feature_emb = make_embedder("random-conv", seed=711)
        face_emb = make_embedder("random-conv", seed=902)
        reports = [
            compute_report(records, records, feature_emb, face_emb).to_json()
            for _ in range(2)
        ]
        assert reports[0] == reports[1]
