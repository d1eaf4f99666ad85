import numpy as np
import pytest

from poseswap.config import (AlignmentConfig, DataConfig, DenoiserConfig,
                             IdentityConfig, PipelineConfig, ScheduleConfig,
                             StageSettings, TrainConfig, EvalConfig)
from poseswap.diffusion import Schedule, SubjectSwapModel
from poseswap.errors import ShapeError, TooFewFrames
from poseswap.evaluation import (MetricReport, booster_gradcheck, cell_config,
                                 estimate_foreground, infer, mask_iou,
                                 proxy_extractor, psnr, ssim, temporal_proxy,
                                 SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2)
from poseswap.synth import default_templates, generate_dataset


def tiny_cfg(seed=0):
    return PipelineConfig(
        seed=seed,
        data=DataConfig(height=24, width=32, clip_len=4, n_clips=4),
        alignment=AlignmentConfig(out_size=16),
        identity=IdentityConfig(patch_size=8, embed_dim=32, depth=1, heads=4, n_learn=4),
        denoiser=DenoiserConfig(base_channels=16, channel_mults=(1, 2),
                                attn_heads=4, norm_groups=8, max_keypoints=17),
        schedule=ScheduleConfig(t_steps=8),
        train=TrainConfig(stage1=StageSettings(steps=2, batch=2, lr=1e-3, clip_len=1),
                          stage2=StageSettings(steps=2, batch=1, lr=1e-3, clip_len=4),
                          checkpoint_every=0),
        eval=EvalConfig(eval_clips=1, ablation_stage1_steps=2, ablation_stage2_steps=2),
    ).validate()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("evds")
    templates = tuple(t.scaled(0.6) for t in default_templates())
    return generate_dataset(4, templates, seed=3, out_dir=root,
                            t_frames=4, height=24, width=32)


# --- independent naive oracles ------------------------------------------------

def naive_gaussian_window():
    w = np.zeros((SSIM_WINDOW, SSIM_WINDOW))
    c = (SSIM_WINDOW - 1) / 2
    for i in range(SSIM_WINDOW):
        for j in range(SSIM_WINDOW):
            w[i, j] = np.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * SSIM_SIGMA ** 2))
    return w / w.sum()


def naive_ssim(a, b):
    """Unvectorized windowed SSIM, mean over channels and valid positions."""
    win = naive_gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, chans = a.shape
    r = SSIM_WINDOW
    vals = []
    for ch in range(chans):
        total = 0.0
        count = 0
        for i in range(h - r + 1):
            for j in range(w - r + 1):
                mx = my = 0.0
                for u in range(r):
                    for v in range(r):
                        mx += win[u, v] * a[i + u, j + v, ch]
                        my += win[u, v] * b[i + u, j + v, ch]
                vx = vy = cov = 0.0
                for u in range(r):
                    for v in range(r):
                        vx += win[u, v] * a[i + u, j + v, ch] ** 2
                        vy += win[u, v] * b[i + u, j + v, ch] ** 2
                        cov += win[u, v] * a[i + u, j + v, ch] * b[i + u, j + v, ch]
                vx -= mx * mx
                vy -= my * my
                cov -= mx * my
                total += ((2 * mx * my + c1) * (2 * cov + c2)) / \
                         ((mx * mx + my * my + c1) * (vx + vy + c2))
                count += 1
        vals.append(total / count)
    return float(np.mean(vals))


def naive_psnr(a, b):
    total = 0.0
    n = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (x - y) ** 2
        n += 1
    if total == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / (total / n))


# --- ssim / psnr ----------------------------------------------------------------

def test_ssim_identity_exact(rng):
    img = rng.random((20, 24, 3))
    assert ssim(img, img) == 1.0


def test_ssim_symmetric(rng):
    a = rng.random((20, 24, 3))
    b = rng.random((20, 24, 3))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_checkerboard_inversion():
    yy, xx = np.mgrid[0:24, 0:24]
    checker = ((yy + xx) % 2).astype(np.float64)
    assert ssim(checker, 1.0 - checker) < 0.2


def test_ssim_matches_naive_oracle(rng):
    for _ in range(10):
        a = rng.random((16, 18))
        b = rng.random((16, 18))
        assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-9


def test_ssim_shape_error(rng):
    with pytest.raises(ShapeError):
        ssim(rng.random((16, 16)), rng.random((16, 18)))


def test_psnr_uniform_difference():
    a = np.full((16, 16, 3), 0.5)
    b = np.full((16, 16, 3), 0.6)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_identical_sentinel(rng):
    img = rng.random((16, 16, 3))
    assert psnr(img, img) == float("inf")


def test_psnr_matches_naive_oracle(rng):
    for _ in range(10):
        a = rng.random((12, 12, 3))
        b = rng.random((12, 12, 3))
        assert abs(psnr(a, b) - naive_psnr(a, b)) < 1e-9


def test_psnr_shuffle_invariant(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    perm = rng.permutation(16 * 16 * 3)
    assert psnr(a, b) == pytest.approx(
        psnr(a.ravel()[perm].reshape(a.shape), b.ravel()[perm].reshape(b.shape)),
        abs=1e-12)


# --- temporal proxy ---------------------------------------------------------------

def test_temporal_proxy_identical_frames(rng):
    cfg = tiny_cfg()
    ext = proxy_extractor(cfg)
    frame = rng.random((24, 32, 3))
    frames = np.stack([frame] * 4)
    assert temporal_proxy(frames, ext) == pytest.approx(1.0, abs=1e-9)


def test_temporal_proxy_two_frames_single_cosine(rng):
    cfg = tiny_cfg()
    ext = proxy_extractor(cfg)
    frames = rng.random((2, 24, 32, 3))
    value = temporal_proxy(frames, ext)
    assert -1.0 <= value <= 1.0


def test_temporal_proxy_noise_frames_low(rng):
    cfg = tiny_cfg()
    ext = proxy_extractor(cfg)
    frames = rng.random((6, 24, 32, 3))
    assert abs(temporal_proxy(frames, ext)) < 0.5


def test_temporal_proxy_too_few_frames(rng):
    with pytest.raises(TooFewFrames):
        temporal_proxy(rng.random((1, 24, 32, 3)), proxy_extractor(tiny_cfg()))


# --- foreground estimation ----------------------------------------------------------

def test_estimate_foreground_and_iou():
    scene = np.zeros((2, 3, 8, 8))
    scene[:, :, :, :4] = 0.5  # background half
    frames = scene.copy()
    frames[:, :, 2:5, 5:8] = 0.9  # subject painted in the zeroed half
    fg = estimate_foreground(frames, scene, threshold=0.1)
    expected = np.zeros((8, 8), dtype=bool)
    expected[2:5, 5:8] = True
    assert (fg[0] == expected).all()
    assert mask_iou(fg[0], expected) == 1.0
    assert mask_iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0


# --- metric report -------------------------------------------------------------------

def test_metric_report_aggregate_and_json():
    report = MetricReport(config_fingerprint="abc")
    report.add("clip_a", ssim=0.5, psnr=20.0)
    report.add("clip_b", ssim=0.7, psnr=float("inf"))
    agg = report.aggregate()
    assert agg["ssim"] == pytest.approx(0.6)
    assert agg["psnr"] == pytest.approx(20.0)  # finite mean only
    assert "N/A" in agg["perceptual"]
    text = report.to_json()
    assert '"inf"' in text


# --- inference smoke -----------------------------------------------------------------

def test_infer_matched_produces_report(dataset):
    cfg = tiny_cfg()
    model = SubjectSwapModel(cfg)
    schedule = Schedule.from_config(cfg)
    result = infer(model, schedule, dataset, "clip_000", "clip_000", cfg,
                   np.random.default_rng(0))
    assert result.frames.shape == (4, 3, 24, 32)
    assert result.report is not None
    metrics = result.report.per_clip["clip_000"]
    assert set(metrics) == {"ssim", "psnr", "fg_iou", "temporal_proxy"}


def test_infer_cross_species_completes(dataset):
    cfg = tiny_cfg()
    model = SubjectSwapModel(cfg)
    schedule = Schedule.from_config(cfg)
    result = infer(model, schedule, dataset, "clip_000", "clip_001", cfg,
                   np.random.default_rng(0))
    assert result.meta["reference_species"] != result.meta["driver_species"]
    assert result.report is None
    assert result.frames.min() >= 0.0 and result.frames.max() <= 1.0


def test_infer_deterministic(dataset):
    cfg = tiny_cfg()
    model = SubjectSwapModel(cfg)
    schedule = Schedule.from_config(cfg)
    a = infer(model, schedule, dataset, "clip_000", "clip_001", cfg,
              np.random.default_rng(7))
    b = infer(model, schedule, dataset, "clip_000", "clip_001", cfg,
              np.random.default_rng(7))
    np.testing.assert_array_equal(a.frames, b.frames)


# --- ablation plumbing ----------------------------------------------------------------

def test_cell_config_toggles_only():
    base = tiny_cfg()
    cfg = cell_config(base, booster_on=False, prompt_on=False)
    assert cfg.alignment.booster_enabled is False
    assert cfg.identity.n_learn == 0
    assert cfg.denoiser == base.denoiser
    assert cfg.schedule == base.schedule
    assert cfg.seed == base.seed
    both = cell_config(base, True, True)
    assert both.alignment.booster_enabled is True
    assert both.identity.n_learn == base.identity.n_learn


def test_gradcheck_runner():
    result = booster_gradcheck(n_inputs=5, seed=0)
    assert result["passed"]
    assert result["checked"] == 5
    assert result["max_rel_err"] < 1e-4
