import numpy as np
import pytest

from mbdepth import synth
from mbdepth.bundle import Bundle, Frame
from mbdepth.errors import DegenerateBundleError, SamplingStarvationError
from mbdepth.geometry import Intrinsics, Pose, exact_pose, pose_inverse, project, transform_point, unproject
from mbdepth.image import ImageGrid, make_patch_kernel, upsample_bilinear
from mbdepth.neural import init_params
from mbdepth.refine import (
    ConfidenceMap,
    EpochLog,
    QuerySamples,
    TrainConfig,
    batch_objective,
    compute_z_avg,
    draw_query_samples,
    geometric_regularizer,
    photometric_loss,
    predict_correction,
    reconstruct,
    refine_points,
    resample_in_query,
    to_reference_frame,
    prepare_bundle,
    train,
)

FAST = dict(samples=256, patch_k=2, epochs=2, seed=0)


def randomized_params(seed, n_freqs=6, hidden=256, scale=1e-3):
    p = init_params(seed, n_freqs, hidden)
    rng = np.random.default_rng(seed + 100)
    p.weights[-1][:] = rng.normal(scale=scale, size=p.weights[-1].shape)
    return p


# -- configuration ----------------------------------------------------------


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.samples, c.patch_k, c.n_freqs, c.alpha, c.base_lr, c.decay, c.epochs) == (
        4096, 11, 6, 0.01, 1e-5, 0.985, 200)
    assert c.kernel().sigma == 6.0
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        TrainConfig(frame_stride=0)
    nl = TrainConfig.no_lidar()
    assert nl.constant_init_depth == 1.0 and nl.alpha == 0.0


def test_confidence_map():
    c = ConfidenceMap.ones(4, 5)
    assert c.values.shape == (4, 5, 1) and np.all(c.values == 1)
    c.values[0, 0] = 3.0
    c.values[1, 1] = -1.0
    c.clamp()
    assert c.values.max() == 1.0 and c.values.min() == 0.0
    with pytest.raises(ValueError):
        ConfidenceMap(np.full((2, 2), 2.0))


# -- sampling ---------------------------------------------------------------


def test_draw_samples_margin_and_count(small_bundle, rng):
    f = small_bundle.frames[2]
    s = draw_query_samples(f, 4096, rng, margin=11)
    assert s.uv.shape == (4096, 2) and s.z.shape == (4096,) and s.rgb.shape == (4096, 3)
    assert s.uv[:, 0].min() >= 11 and s.uv[:, 0].max() <= 96 - 1 - 11
    assert s.uv[:, 1].min() >= 11 and s.uv[:, 1].max() <= 72 - 1 - 11
    assert np.all(s.z > 0)


def test_draw_samples_deterministic(small_bundle):
    f = small_bundle.frames[1]
    a = draw_query_samples(f, 100, np.random.default_rng(7), 3)
    b = draw_query_samples(f, 100, np.random.default_rng(7), 3)
    np.testing.assert_array_equal(a.uv, b.uv)
    np.testing.assert_array_equal(a.rgb, b.rgb)


def test_draw_samples_skips_holes(small_bundle, rng):
    f = small_bundle.frames[1]
    d = f.depth.data.copy()
    d[:, : d.shape[1] // 2] = 0.0
    holey = Frame(f.image, ImageGrid(d), f.pose, f.intrinsics_rgb)
    s = draw_query_samples(holey, 500, rng, 2)
    # left half of the depth grid is empty; valid bilinear support starts at column W_d/2
    assert s.uv[:, 0].min() * f.depth_scale[0] >= d.shape[1] // 2 - 1e-9


def test_draw_samples_starvation(small_bundle, rng):
    f = small_bundle.frames[1]
    empty = Frame(f.image, ImageGrid(np.zeros(f.depth.shape)), f.pose, f.intrinsics_rgb)
    with pytest.raises(SamplingStarvationError):
        draw_query_samples(empty, 10, rng, 2, max_retries=3)
    with pytest.raises(SamplingStarvationError):
        draw_query_samples(f, 10, rng, margin=40)


# -- per-stage operations ---------------------------------------------------

K = Intrinsics(500.0, 500.0, 63.5, 47.5)


def test_to_reference_frame():
    s = QuerySamples(np.array([[10.0, 20.0], [63.5, 47.5]]), np.array([0.3, 0.4]), np.array([[0.1, 0.2, 0.3]] * 2))
    X, rgb = to_reference_frame(s, Pose.identity(), K)
    np.testing.assert_array_equal(X, unproject(s.uv, s.z, K))
    X2, rgb2 = to_reference_frame(s, Pose(np.eye(3), [0.001, 0, 0]), K)
    np.testing.assert_allclose(X2 - X, [[0.001, 0, 0]] * 2, atol=1e-15)
    assert rgb is s.rgb and rgb2 is s.rgb


def test_refine_points_moves_along_ray():
    X = np.array([[0.1, -0.05, 0.4]])
    Xf = refine_points(X, np.array([0.02]))
    assert Xf[0, 2] == pytest.approx(0.42)
    np.testing.assert_allclose(project(Xf, K), project(X, K), atol=1e-12)


def test_predict_correction_gates():
    X = unproject(np.array([[50.0, 40.0], [70.0, 20.0]]), np.array([0.3, 0.35]), K)
    rgb = np.full((2, 3), 0.5)
    cfg = TrainConfig()
    conf = ConfidenceMap.ones(96, 128)
    dz, x_r, ok = predict_correction(init_params(0), conf, X, rgb, K, cfg)
    assert ok.all() and np.all(dz == 0)
    p = init_params(0)
    p.biases[-1][:] = -0.01
    dz, _, _ = predict_correction(p, conf, X, rgb, K, cfg)
    np.testing.assert_allclose(dz, -0.01)
    dz, _, _ = predict_correction(p, ConfidenceMap(np.zeros((96, 128))), X, rgb, K, cfg)
    np.testing.assert_array_equal(dz, 0.0)
    far = unproject(np.array([[500.0, 40.0]]), np.array([0.3]), K)
    dz, _, ok = predict_correction(p, conf, far, rgb[:1], K, cfg)
    assert not ok[0] and np.isnan(dz[0])


def test_predict_correction_direct_mode():
    X = unproject(np.array([[50.0, 40.0]]), np.array([0.3]), K)
    p = init_params(0, final_bias=0.5)
    dz, _, _ = predict_correction(p, ConfidenceMap.ones(96, 128), X, np.full((1, 3), 0.5), K, TrainConfig(direct_depth=True))
    assert dz[0] == pytest.approx(0.2)


def test_resample_roundtrip_zero_offset(small_bundle, rng):
    f = small_bundle.frames[3]
    kern = make_patch_kernel(2)
    s = draw_query_samples(f, 300, rng, margin=4)
    X_hat, _ = to_reference_frame(s, f.pose, f.intrinsics_rgb)
    x_f, _, ok = resample_in_query(X_hat, f.pose, f.intrinsics_rgb, f.image, kern)
    assert np.max(np.abs(x_f - s.uv)) < 1e-9


def test_resample_reference_as_own_query(small_bundle, rng):
    ref = small_bundle.reference
    s = draw_query_samples(ref, 100, rng, margin=0)
    X_hat, rgb = to_reference_frame(s, ref.pose, ref.intrinsics_rgb)
    _, patch, ok = resample_in_query(X_hat, ref.pose, ref.intrinsics_rgb, ref.image, make_patch_kernel(0))
    assert ok.all()
    np.testing.assert_allclose(patch[:, 0], rgb, atol=1e-6)


def test_resample_analytic_disparity():
    f_px, tx, z, z_true = 500.0, 0.004, 0.31, 0.30
    pose = Pose(np.eye(3), [tx, 0, 0])
    img = ImageGrid(np.zeros((96, 128, 3)))
    X_hat = unproject(np.array([[60.0, 40.0]]), np.array([z]), K)
    x0, _, _ = resample_in_query(X_hat, pose, K, img, make_patch_kernel(0))
    x1, _, _ = resample_in_query(refine_points(X_hat, np.array([z_true - z])), pose, K, img, make_patch_kernel(0))
    assert x1[0, 0] - x0[0, 0] == pytest.approx(f_px * tx * (1 / z - 1 / z_true), abs=1e-9)
    assert x1[0, 1] == pytest.approx(x0[0, 1], abs=1e-9)


def test_photometric_loss_constant_images():
    img = ImageGrid(np.full((40, 50, 3), 0.3))
    kern = make_patch_kernel(3)
    xf = np.array([[20.2, 15.7], [30.0, 20.0]])
    xr = np.array([[10.0, 10.0], [25.5, 18.1]])
    loss, gu, gv = photometric_loss(img, img, xf, xr, kern)
    np.testing.assert_allclose(loss, 0.0, atol=1e-14)
    np.testing.assert_allclose(gu, 0.0, atol=1e-14)


def test_photometric_loss_depth_sweep():
    """Ground-truth depth beats +-5 mm on a rendered plane."""
    scene = synth.scene_preset("textured-plane")
    Kc = synth.default_intrinsics()
    pose = exact_pose([0.0005, -0.0003, 0.0002], [0.004, -0.003, 0.0005])
    ref, _, _ = synth.render_view(scene, Pose.identity(), Kc, 480, 360)
    qry, _, _ = synth.render_view(scene, pose, Kc, 480, 360)
    I_r, I_q = ImageGrid(ref), ImageGrid(qry)
    kern = make_patch_kernel(11)
    rng = np.random.default_rng(0)
    xr = np.column_stack([rng.uniform(60, 420, 200), rng.uniform(60, 300, 200)])
    def loss_at(z):
        X = unproject(xr, np.full(200, z), Kc)
        xf = project(transform_point(pose_inverse(pose), X), Kc)
        return photometric_loss(I_q, I_r, xf, xr, kern)[0]

    at_gt = loss_at(0.3)
    assert at_gt.mean() < 1e-5
    assert at_gt.mean() < loss_at(0.295).mean()
    assert at_gt.mean() < loss_at(0.305).mean()
    assert np.all(at_gt >= 0)


def test_geometric_regularizer():
    v, g = geometric_regularizer(np.array([0.0, -0.01, 0.02]))
    np.testing.assert_allclose(v, [0.0, 0.01, 0.02])
    np.testing.assert_array_equal(g, [0.0, -1.0, 1.0])


# -- batch objective --------------------------------------------------------


def _fd_setup(small_bundle, direct=False):
    cfg = TrainConfig(samples=16, patch_k=2, n_freqs=2, seed=0, compute_dtype="float64", direct_depth=direct)
    p = randomized_params(3, n_freqs=2, hidden=8, scale=0.05)
    if direct:
        p.biases[-1][:] = 0.4
    conf = ConfidenceMap(np.random.default_rng(0).uniform(0.3, 1.0, (72, 96)))
    frame = small_bundle.frames[4]
    s = draw_query_samples(frame, 16, np.random.default_rng(1), margin=2)
    return cfg, p, conf, frame, s


@pytest.mark.parametrize("direct", [False, True])
def test_batch_gradient_finite_differences(small_bundle, direct):
    cfg, p, conf, frame, s = _fd_setup(small_bundle, direct)
    ref = small_bundle.reference

    def L():
        return batch_objective(p, conf, ref, frame, s, cfg, want_grads=False).loss

    res = batch_objective(p, conf, ref, frame, s, cfg)
    assert res.n_valid > 8
    h = 1e-6
    rng = np.random.default_rng(5)
    for a, g in zip(p.arrays(), res.grads):
        flat = a.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            lp = L()
            flat[i] = old - h
            lm = L()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            gi = g.reshape(-1)[i]
            assert abs(gi - fd) <= 1e-4 * (abs(gi) + 1e-8) + 1e-10


def test_confidence_gradient_finite_differences(small_bundle):
    cfg, p, conf, frame, s = _fd_setup(small_bundle)
    ref = small_bundle.reference
    res = batch_objective(p, conf, ref, frame, s, cfg)
    g = res.confidence_grad[:, :, 0]
    ys, xs = np.nonzero(np.abs(g) > 0)
    h = 1e-6
    for y, x in list(zip(ys, xs))[:8]:
        old = conf.values[y, x, 0]
        conf.values[y, x, 0] = old + h
        lp = batch_objective(p, conf, ref, frame, s, cfg, want_grads=False).loss
        conf.values[y, x, 0] = old - h
        lm = batch_objective(p, conf, ref, frame, s, cfg, want_grads=False).loss
        conf.values[y, x, 0] = old
        assert g[y, x] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-10)


def test_batch_zero_init_has_no_offset(small_bundle, rng):
    frame = small_bundle.frames[2]
    s = draw_query_samples(frame, 64, rng, margin=2)
    res = batch_objective(init_params(0), ConfidenceMap.ones(72, 96), small_bundle.reference, frame, s, TrainConfig(patch_k=2))
    np.testing.assert_array_equal(res.dz_applied, 0.0)
    assert res.geometric == 0.0


# -- training and reconstruction -------------------------------------------


def test_zero_epochs_is_identity(small_bundle):
    cfg = TrainConfig(epochs=0)
    res = train(small_bundle, cfg)
    assert res.log == [] and np.all(res.confidence.values == 1.0)
    z_avg = compute_z_avg(small_bundle)
    z = reconstruct(res.params, res.confidence, small_bundle, z_avg, cfg)
    assert z.data.tobytes() == z_avg.data.tobytes()


def test_zero_confidence_reconstruct(small_bundle):
    z_avg = compute_z_avg(small_bundle)
    z = reconstruct(randomized_params(1), ConfidenceMap(np.zeros((72, 96))), small_bundle, z_avg)
    assert z.data.tobytes() == z_avg.data.tobytes()


def test_train_deterministic_and_logged(small_bundle, tmp_path):
    cfg = TrainConfig(**FAST)
    a = train(small_bundle, cfg, log_path=tmp_path / "a.log")
    b = train(small_bundle, cfg)
    z_avg = compute_z_avg(small_bundle)
    za = reconstruct(a.params, a.confidence, small_bundle, z_avg, cfg)
    zb = reconstruct(b.params, b.confidence, small_bundle, z_avg, cfg)
    assert za.data.tobytes() == zb.data.tobytes()
    lines = (tmp_path / "a.log").read_text().splitlines()
    assert len(lines) == 2 and a.steps_per_epoch == 7
    e = EpochLog.parse(lines[1])
    assert e.epoch == 1 and e.lr == pytest.approx(1e-5 * 0.985)
    assert EpochLog.parse(e.line()) == EpochLog(e.epoch, e.lr, e.mean_photometric, e.mean_geometric, e.mean_total)
    assert np.all((a.confidence.values >= 0) & (a.confidence.values <= 1))


def test_train_stride_steps(small_bundle):
    assert train(small_bundle, TrainConfig(**dict(FAST, epochs=1, frame_stride=2))).steps_per_epoch == 3


def test_train_loss_decreases():
    b = synth.render_synthetic_bundle(
        synth.scene_preset("textured-plane"), synth.TremorParams(n_frames=6, seed=2),
        size=(160, 120), depth_size=(20, 15), seed=2,
    )
    res = train(b, TrainConfig(samples=512, patch_k=5, epochs=31, base_lr=1e-4, seed=1))
    assert res.log[30].mean_total < res.log[0].mean_total


def test_textureless_stays_put():
    b = synth.render_synthetic_bundle(
        synth.scene_preset("flat-plane"), synth.TremorParams(n_frames=4, seed=2),
        size=(64, 48), depth_size=(8, 6), seed=2,
    )
    cfg = TrainConfig(samples=256, patch_k=3, epochs=3, alpha=0.0)
    res = train(b, cfg)
    z_avg = compute_z_avg(b)
    z = reconstruct(res.params, res.confidence, b, z_avg, cfg)
    np.testing.assert_array_equal(z.data, z_avg.data)


def test_train_needs_queries(small_bundle):
    with pytest.raises(DegenerateBundleError):
        train(small_bundle.subset([0]), TrainConfig(epochs=1))


def test_constant_init_depth(small_bundle):
    cfg = TrainConfig.no_lidar(epochs=0)
    prepared = prepare_bundle(small_bundle, cfg)
    assert all(np.all(f.depth.data == 1.0) for f in prepared.frames)
    # tilted query cameras see the 1 m plane at slightly different reference depths
    np.testing.assert_allclose(compute_z_avg(prepared).data, 1.0, atol=1e-3)


# -- Z_avg ------------------------------------------------------------------


def test_z_avg_single_frame_is_upsample(small_bundle):
    one = small_bundle.subset([0])
    z = compute_z_avg(one).plane()
    np.testing.assert_allclose(z, upsample_bilinear(one.reference.depth.plane().astype(np.float64), 72, 96), atol=1e-6)


def test_z_avg_in_plane_translation_constant():
    poses = [Pose.identity()] + [Pose(np.eye(3), [0.001 * i, -0.0007 * i, 0]) for i in range(1, 6)]
    b = synth.render_synthetic_bundle(
        synth.scene_preset("textured-plane"), synth.TremorParams(n_frames=6), size=(96, 72), depth_size=(24, 18),
        lidar=synth.LidarModel(noise_std=0, bias_amplitude=0), poses=poses,
    )
    z = compute_z_avg(b).plane()
    assert np.max(np.abs(z - 0.3)) < 1e-6


def test_z_avg_noise_reduction_static():
    """Co-located frames: averaging 120 i.i.d. samples cuts noise by sqrt(120)."""
    b = synth.render_synthetic_bundle(
        synth.scene_preset("textured-plane"), synth.TremorParams(seed=1), size=(96, 72), depth_size=(24, 18),
        lidar=synth.LidarModel(bias_amplitude=0), seed=1, poses=[Pose.identity()] * 120,
    )
    z = compute_z_avg(b).plane()
    on_grid = z[::4, ::4][3:-3, 3:-3]
    ratio = 0.005 / np.std(on_grid - 0.3)
    assert ratio == pytest.approx(np.sqrt(120), rel=0.3)


def test_z_avg_noise_reduction_tremor():
    b = synth.render_synthetic_bundle(
        synth.scene_preset("textured-plane"), synth.TremorParams(seed=1), size=(96, 72), depth_size=(24, 18),
        lidar=synth.LidarModel(bias_amplitude=0), seed=1,
    )
    z = compute_z_avg(b).plane()
    ratio = 0.005 / np.std(z[14:-14, 19:-19] - 0.3)
    assert ratio >= 0.7 * np.sqrt(120)


def test_z_avg_hole_filling(small_bundle):
    frames = []
    for f in small_bundle.frames:
        d = f.depth.data.copy()
        d[:3, :3] = 0.0
        frames.append(Frame(f.image, ImageGrid(d), f.pose, f.intrinsics_rgb))
    z = compute_z_avg(Bundle(tuple(frames))).plane()
    assert np.all(np.isfinite(z)) and np.all(z > 0.1)


def test_z_avg_empty():
    f = Frame(ImageGrid(np.zeros((8, 8, 3))), ImageGrid(np.zeros((2, 2))), Pose.identity(), Intrinsics(8, 8, 3.5, 3.5))
    with pytest.raises(DegenerateBundleError):
        compute_z_avg(Bundle((f,)))
