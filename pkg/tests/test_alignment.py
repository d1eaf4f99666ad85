import numpy as np
import pytest

from poseswap.alignment import (AlignedReference, BoosterParams,
                                bbox_center_error, booster_forward,
                                booster_grad, gaussian_blur,
                                gaussian_blur_adjoint, gaussian_kernel,
                                remove_scale, resize_bilinear,
                                sample_reference, sobel_magnitude,
                                sobel_texture, align_reference, SOBEL_X,
                                SOBEL_Y, SOBEL_NORM)
from poseswap.errors import EmptyMask

from conftest import blob_mask, make_clip


# --- independent oracles -------------------------------------------------

def naive_conv_reflect(plane, kernel):
    """O(HWk^2) double-loop correlation with reflect padding."""
    h, w = plane.shape
    k = kernel.shape[0]
    pad = k // 2
    padded = np.pad(plane, pad, mode="reflect")
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(k):
                for b in range(k):
                    acc += kernel[a, b] * padded[i + a, j + b]
            out[i, j] = acc
    return out


def booster_reference(img, params, out_size, blur_size=5, blur_sigma=1.0):
    """Straight-line reimplementation of the band recursion (no clamp)."""
    y = resize_bilinear(img, out_size, out_size)
    kernel = gaussian_kernel(blur_size, blur_sigma)
    for w, b in zip(params.weights, params.biases):
        blurred = np.stack([naive_conv_reflect(y[..., c], kernel) for c in range(3)], axis=-1)
        d = y - blurred
        y = y + w * d + b * np.sign(d) * (np.abs(d) > 1e-12)
    return y


def finite_difference_grad(img, params, out_size, upstream, step=1e-5):
    flat = params.flat()
    grads = np.zeros_like(flat)
    for i in range(flat.size):
        hi = flat.copy()
        hi[i] += step
        lo = flat.copy()
        lo[i] -= step
        f_hi = np.sum(upstream * booster_forward(img, BoosterParams.from_flat(hi),
                                                 out_size, clamp=False))
        f_lo = np.sum(upstream * booster_forward(img, BoosterParams.from_flat(lo),
                                                 out_size, clamp=False))
        grads[i] = (f_hi - f_lo) / (2 * step)
    return grads


def min_band_detail(img, params, out_size):
    """Smallest |d_l| over bands l >= 2.

    FD perturbation of earlier parameters can flip sign(d_l) only for bands
    that depend on those parameters (the first band never does); inputs with
    near-zero detail there sit on a kink where central differences are
    invalid, so the gradcheck resamples them.
    """
    y = resize_bilinear(img, out_size, out_size)
    m = np.inf
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        d = y - gaussian_blur(y)
        if l >= 1:
            m = min(m, np.abs(d).min())
        y = y + w * d + b * np.sign(d)
    return m


# --- sample_reference -----------------------------------------------------

def test_sample_reference_singleton(rng):
    clip = make_clip(rng, t=1)
    for _ in range(5):
        idx, _, _ = sample_reference(clip, rng)
        assert idx == 0


def test_sample_reference_uniform(rng):
    clip = make_clip(rng, t=8)
    counts = np.zeros(8)
    for _ in range(10_000):
        idx, _, _ = sample_reference(clip, rng)
        counts[idx] += 1
    freqs = counts / 10_000
    assert (freqs >= 0.10).all() and (freqs <= 0.15).all()


def test_sample_reference_deterministic(rng):
    clip = make_clip(rng, t=8)
    a = [sample_reference(clip, np.random.default_rng(7))[0] for _ in range(4)]
    b = [sample_reference(clip, np.random.default_rng(7))[0] for _ in range(4)]
    assert a == b


# --- remove_scale ----------------------------------------------------------

def test_remove_scale_centers_corner_square(rng):
    frame = np.zeros((32, 56, 3))
    mask = np.zeros((32, 56))
    frame[0:5, 0:5] = 0.8
    mask[0:5, 0:5] = 1.0
    canvas, canvas_mask, _ = remove_scale(frame, mask, 0.0, rng)
    assert canvas.shape == (9, 9, 3)  # 5 + 2*2 margin
    ey, ex = bbox_center_error(canvas_mask)
    assert ey < 0.5 and ex < 0.5
    # background exactly zero
    assert canvas[canvas_mask < 0.5].max() == 0.0


def test_remove_scale_flip_involution(rng):
    frame = np.random.default_rng(0).random((32, 56, 3))
    mask = blob_mask(32, 56, 14, 20, 6, 9).mask
    once_img, once_mask, f1 = remove_scale(frame, mask, 1.0, rng)
    assert f1
    twice_img, twice_mask, f2 = remove_scale(once_img, once_mask, 1.0, rng)
    plain_img, plain_mask, f0 = remove_scale(frame, mask, 0.0, rng)
    assert f2 and not f0
    np.testing.assert_array_equal(twice_img, plain_img)
    np.testing.assert_array_equal(twice_mask, plain_mask)


def test_remove_scale_empty_mask(rng):
    with pytest.raises(EmptyMask):
        remove_scale(np.zeros((16, 16, 3)), np.zeros((16, 16)), 0.0, rng)


def test_remove_scale_scale_invariance(rng):
    # identical relative subject at 32x56 and 64x112 -> same output semantics
    def build(h, w):
        frame = np.zeros((h, w, 3))
        mask = blob_mask(h, w, h * 0.45, w * 0.4, h * 0.35, w * 0.22).mask
        frame[..., 0] = np.linspace(0, 1, w)[None, :]
        return frame, mask

    params = BoosterParams.zeros(2)
    out = []
    for h, w in ((32, 56), (64, 112)):
        frame, mask = build(h, w)
        out.append(align_reference(frame, mask, 0, params, 32, 0.0, rng))
    a, b = out
    assert a.enhanced.shape == b.enhanced.shape == (32, 32, 3)
    inter = np.logical_and(a.mask_out >= 0.5, b.mask_out >= 0.5).sum()
    union = np.logical_or(a.mask_out >= 0.5, b.mask_out >= 0.5).sum()
    assert inter / union >= 0.9


# --- booster ----------------------------------------------------------------

def test_booster_zero_params_is_bilinear(rng):
    img = rng.random((20, 20, 3))
    out = booster_forward(img, BoosterParams.zeros(2), 16, clamp=False)
    np.testing.assert_array_equal(out, resize_bilinear(img, 16, 16))


def test_booster_flat_image_identity(rng):
    img = np.full((16, 16, 3), 0.5)
    params = BoosterParams(weights=np.array([0.7, -0.3]), biases=np.array([0.2, 0.1]))
    out = booster_forward(img, params, 16, clamp=False)
    np.testing.assert_allclose(out, 0.5, atol=1e-12)


def test_booster_matches_straight_line_oracle(rng):
    img = rng.random((16, 16, 3))
    params = BoosterParams(weights=np.array([0.5, 0.5]), biases=np.array([0.0, 0.0]))
    ours = booster_forward(img, params, 16, clamp=False)
    ref = booster_reference(img, params, 16)
    assert np.abs(ours - ref).max() < 1e-10


def test_blur_adjoint_dot_product(rng):
    x = rng.random((16, 16))
    u = rng.standard_normal((16, 16))
    lhs = np.sum(gaussian_blur(x) * u)
    rhs = np.sum(x * gaussian_blur_adjoint(u))
    assert abs(lhs - rhs) < 1e-10


def test_booster_grad_zero_upstream(rng):
    img = rng.random((16, 16, 3))
    params = BoosterParams(weights=np.array([0.3, -0.2]), biases=np.array([0.05, 0.02]))
    g = booster_grad(img, params, 16, np.zeros((16, 16, 3)))
    np.testing.assert_array_equal(g, np.zeros(4))


def test_booster_grad_linear_in_upstream(rng):
    img = rng.random((16, 16, 3))
    params = BoosterParams(weights=np.array([0.3, -0.2]), biases=np.array([0.05, 0.02]))
    u = rng.standard_normal((16, 16, 3))
    g1 = booster_grad(img, params, 16, u)
    g2 = booster_grad(img, params, 16, 2.0 * u)
    np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-12)


def test_booster_gradcheck_finite_differences(rng):
    """Analytic gradient vs central differences, 20 random inputs."""
    checked = 0
    attempts = 0
    while checked < 20 and attempts < 500:
        attempts += 1
        img = rng.random((16, 16, 3))
        params = BoosterParams(weights=rng.uniform(-0.8, 0.8, 2),
                               biases=rng.uniform(-0.2, 0.2, 2))
        # keep the FD step well clear of sign() kinks
        if min_band_detail(img, params, 16) < 1e-4:
            continue
        upstream = rng.standard_normal((16, 16, 3))
        analytic = booster_grad(img, params, 16, upstream)
        numeric = finite_difference_grad(img, params, 16, upstream)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert rel.max() < 1e-4, f"rel err {rel}"
        checked += 1
    assert checked == 20


# --- sobel -------------------------------------------------------------------

def test_sobel_constant_subject_interior_zero(rng):
    enhanced = np.zeros((32, 32, 3))
    mask = np.zeros((32, 32))
    enhanced[8:24, 8:24] = 0.6
    mask[8:24, 8:24] = 1.0
    aligned = AlignedReference(canvas=enhanced, canvas_mask=mask, enhanced=enhanced,
                               mask_out=mask, flip_applied=False, source_frame_index=0)
    tex = sobel_texture(aligned).texture
    interior = tex[10:22, 10:22]
    assert np.abs(interior).max() < 1e-12  # flat region: float residue only
    assert tex[mask < 0.5].max() == 0.0  # background exactly zero


def test_sobel_step_edge_closed_form():
    img = np.zeros((16, 16))
    img[:, 8:] = 1.0
    g = sobel_magnitude(img)
    # columns adjacent to the edge see |gx| = 4 -> 4/(4*sqrt(2)) = 1/sqrt(2)
    expected = 1.0 / np.sqrt(2.0)
    assert abs(g[8, 7] - expected) < 1e-9
    assert abs(g[8, 8] - expected) < 1e-9


def test_sobel_matches_naive_conv(rng):
    from conftest import make_clip  # noqa: F401  (kept for parity with other tests)
    for _ in range(25):
        img = rng.random((12, 14))
        padded = np.pad(img, 1, mode="reflect")
        gx = naive_conv_reflect(img, SOBEL_X)
        gy = naive_conv_reflect(img, SOBEL_Y)
        ref = np.sqrt(gx ** 2 + gy ** 2) / SOBEL_NORM
        ours = sobel_magnitude(img)
        assert np.abs(ours - ref).max() < 1e-12


def test_sobel_flip_equivariant(rng):
    img = rng.random((16, 16, 3))
    a = sobel_magnitude(img[:, ::-1])
    b = sobel_magnitude(img)[:, ::-1]
    np.testing.assert_allclose(a, b, atol=1e-12)


# --- full alignment -----------------------------------------------------------

def test_align_reference_output_contract(rng):
    clip = make_clip(rng, t=4)
    idx, frame, mask = sample_reference(clip, rng)
    params = BoosterParams(weights=np.array([0.4, 0.1]), biases=np.array([0.02, 0.01]))
    aligned = align_reference(frame, mask, idx, params, 32, 0.5, rng)
    assert aligned.enhanced.shape == (32, 32, 3)
    assert aligned.mask_out.shape == (32, 32)
    assert aligned.enhanced.min() >= 0.0 and aligned.enhanced.max() <= 1.0
    assert aligned.source_frame_index == idx
