import numpy as np
import pytest

import fogcount.atmos as atmos
import fogcount.tensor as T
from fogcount.gradcheck import grad_check, grad_check_param, sample_coords
from fogcount.nn import ParamStore
from fogcount.tensor import Tensor


def rand_image(shape, seed=0):
    return np.random.default_rng(seed).uniform(0.05, 0.95, size=shape)


# ------------------------------------------------------------ synthesize_fog


def test_synthesize_beta_zero_is_identity_bitexact():
    J = rand_image((6, 7, 3), seed=1)
    d = atmos.vertical_depth_ramp(6, 7)
    I = atmos.synthesize_fog(J, d, 0.0, 0.9)
    assert np.array_equal(I, J)


def test_synthesize_closed_form():
    # e^{-beta d} = 0.5: I = 0.2*0.5 + 1.0*0.5 = 0.6
    J = np.full((2, 2, 3), 0.2)
    d = np.full((2, 2), np.log(2.0))
    I = atmos.synthesize_fog(J, d, 1.0, 1.0)
    assert np.allclose(I, 0.6, atol=1e-12)


def test_synthesize_matches_per_pixel_oracle():
    J = rand_image((4, 4, 3), seed=2)
    d = atmos.vertical_depth_ramp(4, 4, 0.1, 2.0)
    beta, A = 2.0, np.array([0.9, 0.85, 0.8])
    I = atmos.synthesize_fog(J, d, beta, A)
    for i in range(4):
        for j in range(4):
            for c in range(3):
                t = np.exp(-beta * d[i, j])
                want = min(1.0, max(0.0, J[i, j, c] * t + A[c] * (1 - t)))
                assert abs(I[i, j, c] - want) < 1e-15


def test_synthesize_rejects_negative_inputs():
    J = rand_image((3, 3, 3))
    d = np.ones((3, 3))
    with pytest.raises(ValueError):
        atmos.synthesize_fog(J, d, -0.1, 0.9)
    with pytest.raises(ValueError):
        atmos.synthesize_fog(J, -d, 1.0, 0.9)


def test_depth_ramp_orientations():
    d = atmos.vertical_depth_ramp(5, 3, 0.1, 2.0, far="bottom")
    assert d[0, 0] == 0.1 and d[-1, 0] == 2.0
    dt = atmos.vertical_depth_ramp(5, 3, 0.1, 2.0, far="top")
    assert dt[0, 0] == 2.0 and dt[-1, 0] == 0.1


# ------------------------------------------------- dark channel transmission


def dark_channel_oracle(I, A, window, omega):
    """Independent double-loop implementation."""
    H, W, C = I.shape
    r = window // 2
    ratio = np.minimum(I / A, 1.0)
    chan_min = ratio.min(axis=2)
    out = np.empty((H, W))
    for i in range(H):
        for j in range(W):
            out[i, j] = 1.0 - omega * chan_min[max(0, i - r):i + r + 1,
                                                max(0, j - r):j + r + 1].min()
    return out


def test_dark_channel_saturated_fog():
    A = np.array([0.8, 0.7, 0.9])
    I = np.broadcast_to(A, (5, 5, 3)).copy()
    t = atmos.dark_channel_transmission(Tensor(I[None]), Tensor(A), window=3, omega=0.95)
    assert np.allclose(t.data, 0.05, atol=1e-12)


def test_dark_channel_dark_pixel_gives_one():
    I = rand_image((5, 5, 3), seed=3)
    I[2, 2, 1] = 0.0
    t = atmos.dark_channel_transmission(Tensor(I[None]), Tensor(np.array([0.8, 0.8, 0.8])),
                                        window=5, omega=0.95)
    assert t.data[0, 2, 2, 0] == 1.0


def test_dark_channel_matches_bruteforce():
    I = rand_image((5, 5, 3), seed=4)
    A = np.array([0.9, 0.8, 0.85])
    t = atmos.dark_channel_transmission(Tensor(I[None]), Tensor(A), window=3, omega=0.95)
    ref = dark_channel_oracle(I, A, 3, 0.95)
    assert np.array_equal(t.data[0, :, :, 0], ref)


def test_dark_channel_output_range():
    I = np.random.default_rng(5).uniform(0, 1, (8, 8, 3))
    t = atmos.dark_channel_transmission(Tensor(I[None]), Tensor(np.array([0.7, 0.7, 0.7])),
                                        window=15, omega=0.95).data
    assert t.min() >= 0.05 - 1e-12 and t.max() <= 1.0 + 1e-12


def test_dark_channel_rejects_bad_airlight():
    with pytest.raises(ValueError):
        atmos.dark_channel_transmission(Tensor(np.ones((1, 4, 4, 3))),
                                        Tensor(np.array([0.5, -0.1, 0.5])))


def test_dark_channel_gradient_wrt_airlight():
    I = rand_image((6, 6, 3), seed=6)
    A0 = np.array([0.8, 0.75, 0.9])

    def f(a):
        t = atmos.dark_channel_transmission(Tensor(I[None]), a, window=3)
        return T.square(t).mean()

    rep = grad_check(f, Tensor(A0), tol=1e-5)
    assert rep.passed, str(rep)


# ------------------------------------------------------------- guided filter


def guided_filter_oracle(g, p, r, eps):
    """Direct double-loop box-filter implementation."""
    H, W = g.shape

    def box_mean(a):
        out = np.empty_like(a)
        for i in range(H):
            for j in range(W):
                win = a[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1]
                out[i, j] = win.mean()
        return out

    mg, mp = box_mean(g), box_mean(p)
    cov = box_mean(g * p) - mg * mp
    var = box_mean(g * g) - mg * mg
    a = cov / (var + eps)
    b = mp - a * mg
    return box_mean(a) * g + box_mean(b)


def test_guided_filter_constant_p():
    g = rand_image((6, 6), seed=7)
    p = np.full((6, 6), 0.4)
    out = atmos.guided_filter(Tensor(g[None, :, :, None]), Tensor(p[None, :, :, None]), r=2)
    assert np.allclose(out.data, 0.4, atol=1e-12)


def test_guided_filter_constant_guide_gives_box_mean():
    g = np.full((6, 6), 0.5)
    p = rand_image((6, 6), seed=8)
    out = atmos.guided_filter(Tensor(g[None, :, :, None]), Tensor(p[None, :, :, None]),
                              r=2, clamp_output=False)
    ref = guided_filter_oracle(g, p, 2, 1e-3)
    assert np.all(np.abs(out.data[0, :, :, 0] - ref) < 1e-12)


def test_guided_filter_matches_bruteforce():
    g = rand_image((6, 6), seed=9)
    p = rand_image((6, 6), seed=10)
    out = atmos.guided_filter(Tensor(g[None, :, :, None]), Tensor(p[None, :, :, None]),
                              r=2, clamp_output=False)
    ref = guided_filter_oracle(g, p, 2, 1e-3)
    assert np.all(np.abs(out.data[0, :, :, 0] - ref) < 1e-12)


def test_guided_filter_shift_commutes():
    g = rand_image((6, 6), seed=11)
    p = rand_image((6, 6), seed=12) * 0.3
    base = atmos.guided_filter(Tensor(g[None, :, :, None]), Tensor(p[None, :, :, None]),
                               r=2, clamp_output=False).data
    shifted = atmos.guided_filter(Tensor(g[None, :, :, None]),
                                  Tensor(p[None, :, :, None] + 0.21), r=2,
                                  clamp_output=False).data
    assert np.all(np.abs(shifted - base - 0.21) < 1e-10)


def test_guided_filter_rejects_bad_eps():
    x = Tensor(np.ones((1, 4, 4, 1)))
    with pytest.raises(ValueError):
        atmos.guided_filter(x, x, r=2, eps=0.0)


# ----------------------------------------------------------------- refiner


def make_refiner(seed=0, width=4):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    refiner = atmos.TransmissionRefiner(store, rng, width=width)
    return store, refiner


def test_refiner_zero_init_is_identity():
    store, refiner = make_refiner(seed=1)
    t0 = rand_image((8, 8), seed=13)[None, :, :, None]
    I = rand_image((8, 8, 3), seed=14)[None]
    out = refiner.forward(Tensor(t0), Tensor(I))
    assert np.all(np.abs(out.data - t0) < 1e-12)


def test_refiner_shape_mismatch_rejected():
    store, refiner = make_refiner()
    with pytest.raises(T.ShapeError):
        refiner.forward(Tensor(np.ones((1, 8, 8, 1))), Tensor(np.ones((1, 4, 8, 3))))


def test_refine_loss_zero_at_truth():
    t = Tensor(rand_image((4, 4), seed=15)[None, :, :, None])
    assert atmos.refine_loss(t, t).data == 0.0


def test_refine_loss_gradient_wrt_weights():
    store, refiner = make_refiner(seed=2)
    # give the zero-initialized output layer some signal so its grads flow
    rng = np.random.default_rng(3)
    store["refiner.out.w"].data = rng.standard_normal(store["refiner.out.w"].shape) * 0.05
    t0 = rand_image((8, 8), seed=16)[None, :, :, None]
    I = rand_image((8, 8, 3), seed=17)[None]
    t_gt = np.clip(t0 + 0.1 * rng.standard_normal(t0.shape), 0.05, 0.95)

    def forward():
        out = refiner.forward(Tensor(t0), Tensor(I))
        return atmos.refine_loss(out, Tensor(t_gt))

    for pname in ["refiner.enc1.w", "refiner.mid.w", "refiner.out.w", "refiner.dec2.b"]:
        param = store[pname]
        coords = sample_coords(param.size, 4, np.random.default_rng(hash(pname) % 2**31))
        rep = grad_check_param(forward, param, tol=1e-4, coords=coords)
        assert rep.passed, f"{pname}: {rep}"


# ------------------------------------------------------------------- dehaze


def test_dehaze_t_one_returns_input():
    I = rand_image((5, 5, 3), seed=18)[None]
    t = np.ones((1, 5, 5, 1))
    J = atmos.dehaze(Tensor(I), Tensor(np.array([0.9, 0.9, 0.9])), Tensor(t))
    assert np.allclose(J.data, I, atol=1e-12)


def test_dehaze_airlight_fixed_point():
    A = np.array([0.8, 0.85, 0.9])
    I = np.broadcast_to(A, (4, 4, 3)).copy()[None]
    t = np.full((1, 4, 4, 1), 0.5)
    J = atmos.dehaze(Tensor(I), Tensor(A), Tensor(t))
    assert np.allclose(J.data, I, atol=1e-12)


def test_round_trip_within_1e6():
    rng = np.random.default_rng(19)
    for beta in (0.5, 1.0, 2.0):
        J = rng.uniform(0.1, 0.9, (8, 8, 3))
        d = atmos.vertical_depth_ramp(8, 8, 0.1, 1.0)
        A = np.array([0.85, 0.8, 0.9])
        I = atmos.synthesize_fog(J, d, beta, A)
        t = atmos.transmission_from_depth(d, beta)
        ok = t >= 0.1
        # exclude pixels where the forward clamp engaged
        raw = J * t[:, :, None] + A * (1 - t[:, :, None])
        ok3 = ok[:, :, None] & (raw > 0) & (raw < 1)
        J_hat = atmos.dehaze(Tensor(I[None]), Tensor(A), Tensor(t[None, :, :, None])).data[0]
        assert np.abs((J_hat - J)[ok3]).max() < 1e-6


# -------------------------------------------------------------- estimator


def test_estimator_zero_weights_defaults():
    store = ParamStore()
    est = atmos.PhysicsParamEstimator(store, np.random.default_rng(0), beta_max=2.5, downsample=2)
    for name, t in store.items():
        t.data = np.zeros_like(t.data)
    I = Tensor(rand_image((8, 8, 3), seed=20)[None])
    beta, A, fm = est.forward(I)
    assert np.allclose(beta.data, 0.5 * 2.5, atol=1e-12)
    assert np.allclose(A.data, 0.5, atol=1e-12)


def test_estimator_equal_scale_logits_uniform_weights():
    store = ParamStore()
    est = atmos.PhysicsParamEstimator(store, np.random.default_rng(1), downsample=2)
    w = T.softmax(est.scale_logits)
    assert np.allclose(w.data, 1.0 / 3.0, atol=1e-15)


def test_estimator_ranges_random_draws():
    I = Tensor(rand_image((8, 8, 3), seed=21)[None])
    for k in range(100):
        store = ParamStore()
        est = atmos.PhysicsParamEstimator(store, np.random.default_rng(1000 + k),
                                          beta_max=2.5, downsample=2)
        # exaggerate weights to push the heads around
        for name, t in store.items():
            t.data = t.data * 5.0
        beta, A, _ = est.forward(I)
        assert 0.0 <= beta.data.min() and beta.data.max() <= 2.5
        assert 0.5 - 1e-12 <= A.data.min() and A.data.max() <= 0.95 + 1e-12


def test_estimator_gradients_flow():
    store = ParamStore()
    est = atmos.PhysicsParamEstimator(store, np.random.default_rng(2), downsample=2)
    I = Tensor(rand_image((8, 8, 3), seed=22)[None])
    beta, A, fm = est.forward(I)
    loss = T.square(beta).sum() + T.square(A).sum() + T.square(fm).mean()
    loss.backward()
    for name, t in store.items():
        assert t.grad is not None, name


# ----------------------------------------------- end-to-end differentiability


def test_dehaze_composite_gradient():
    """Eq-9-style composite: params -> (beta, A) -> transmission -> dehaze -> loss."""
    store = ParamStore()
    rng = np.random.default_rng(3)
    est = atmos.PhysicsParamEstimator(store, rng, downsample=2)
    refiner = atmos.TransmissionRefiner(store, rng, width=4)
    store["refiner.out.w"].data = rng.standard_normal(store["refiner.out.w"].shape) * 0.05
    I_np = rand_image((8, 8, 3), seed=23)[None]

    def forward():
        I = Tensor(I_np)
        beta, A, _ = est.forward(I)
        t0 = atmos.dark_channel_transmission(I, A, window=3)
        t1 = refiner.forward(t0, I)
        t2 = atmos.guided_filter(atmos.grayscale(I), t1, r=2)
        J = atmos.dehaze(I, A, t2)
        return T.square(J).mean() + T.square(beta).mean()

    for pname in ["phys.backbone0.w", "phys.beta_head.w", "phys.a_head.b",
                  "phys.scale_logits", "refiner.enc1.w"]:
        param = store[pname]
        coords = sample_coords(param.size, 3, np.random.default_rng(hash(pname) % 2**31))
        rep = grad_check_param(forward, param, tol=1e-4, coords=coords)
        assert rep.passed, f"{pname}: {rep}"
