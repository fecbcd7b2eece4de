import numpy as np
import pytest

from polyforge import diffusion as dif
from polyforge import schedule as sch
from polyforge.errors import DataError, NumericError, ParameterError


@pytest.fixture(scope="module")
def zsched():
    return sch.rescale_zero_terminal_snr(sch.make_linear_schedule(1000))


def test_ema_trivial_cases():
    params = {"w": np.array([2.0, 4.0])}
    e0 = dif.ema_update(dif.EmaState({"w": np.zeros(2)}, 0.0), params)
    assert np.array_equal(e0.shadow["w"], params["w"])
    e1 = dif.ema_update(dif.EmaState({"w": np.zeros(2)}, 1.0), params)
    assert np.array_equal(e1.shadow["w"], np.zeros(2))
    eh = dif.ema_update(dif.EmaState({"w": np.zeros(2)}, 0.5), {"w": np.full(2, 2.0)})
    assert np.array_equal(eh.shadow["w"], np.ones(2))


def test_ema_shape_mismatch():
    with pytest.raises(ParameterError):
        dif.ema_update(dif.EmaState({"w": np.zeros(2)}, 0.5), {"w": np.zeros(3)})
    with pytest.raises(ParameterError):
        dif.EmaState({}, 1.5)


def test_loss_zero_for_perfect_denoiser(zsched, rng):
    captured = {}

    def perfect(x, t):
        return captured["eps"]

    batch = rng.uniform(-1, 1, size=(4, 2, 8, 8)).astype(np.float32)
    # recreate the rng stream the loss uses to capture the drawn noise
    probe = np.random.default_rng(5)
    probe.integers(0, zsched.T, size=4)
    captured["eps"] = probe.standard_normal(batch.shape).astype(np.float32)
    loss = dif.training_loss(perfect, zsched, batch, np.random.default_rng(5))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_loss_of_zero_predictor_is_unit(zsched):
    def zeros(x, t):
        return np.zeros_like(x)

    batch = np.zeros((100, 1, 10, 10), dtype=np.float32)  # 10^4 elements
    loss = dif.training_loss(zeros, zsched, batch, np.random.default_rng(3))
    assert loss == pytest.approx(1.0, rel=0.05)


def test_loss_rejects_unscaled_batch(zsched):
    def zeros(x, t):
        return np.zeros_like(x)

    batch = np.full((2, 1, 4, 4), 3.0, dtype=np.float32)
    with pytest.raises(DataError):
        dif.training_loss(zeros, zsched, batch, np.random.default_rng(0))


def test_loss_gradient_matches_finite_differences(zsched, rng):
    """200-parameter toy denoiser: x -> w * x + b per channel."""
    w = rng.normal(0.1, 0.05, size=(2, 10, 10))
    b = rng.normal(0.0, 0.05, size=(2, 10, 10))
    batch = rng.uniform(-1, 1, size=(3, 2, 10, 10))

    def loss_at(wv, bv, as_var=False):
        def toy(x, t):
            if as_var:
                import polyforge.denoiser.engine as eng

                return eng.add(eng.mul(wv, x), bv)
            return wv * x + bv

        return dif.training_loss(toy, zsched, batch, np.random.default_rng(11))

    from polyforge.denoiser import gradient

    grads, _ = gradient({"w": w, "b": b}, lambda pv: loss_at(pv["w"], pv["b"], True))
    h = 1e-5
    check = np.random.default_rng(1)
    for name, arr in (("w", w), ("b", b)):
        for _ in range(6):
            idx = tuple(check.integers(d) for d in arr.shape)
            wp, bp = w.copy(), b.copy()
            (wp if name == "w" else bp)[idx] += h
            lp = loss_at(wp, bp)
            wm, bm = w.copy(), b.copy()
            (wm if name == "w" else bm)[idx] -= h
            lm = loss_at(wm, bm)
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) <= 1e-4


def test_convert_epsilon_inverts_forward(zsched, rng):
    x0 = rng.uniform(-0.9, 0.9, size=(2, 4, 4))
    eps = rng.standard_normal((2, 4, 4))
    t = 500
    xt = sch.forward_sample(zsched, x0, t, eps)
    eps_hat, x0_hat = dif.convert_prediction("epsilon", zsched, t, xt, eps)
    assert np.allclose(x0_hat, x0, atol=1e-9)
    assert eps_hat is not x0_hat and np.array_equal(eps_hat, eps)


def test_convert_v_identities(zsched, rng):
    x0 = rng.uniform(-0.9, 0.9, size=(3, 5, 5))
    eps = rng.standard_normal((3, 5, 5))
    for t in (0, 123, 999):
        xt = sch.forward_sample(zsched, x0, t, eps)
        v = dif.v_target(zsched, t, x0, eps)
        eps_hat, x0_hat = dif.convert_prediction("v", zsched, t, xt, v, clip_x0=False)
        assert np.max(np.abs(eps_hat - eps)) <= 1e-10
        assert np.max(np.abs(x0_hat - x0)) <= 1e-10


def test_convert_clips_x0(zsched):
    t = 0  # nearly noiseless: x0_hat tracks x_t
    xt = np.array([[[5.0, -5.0]]])
    _, x0_hat = dif.convert_prediction("epsilon", zsched, t, xt, np.zeros_like(xt))
    assert set(np.unique(x0_hat)) == {-1.0, 1.0}


def test_convert_epsilon_refuses_terminal_below_clamp():
    s = sch.rescale_zero_terminal_snr(sch.make_linear_schedule(100), clamp=0.0)
    with pytest.raises(NumericError):
        dif.convert_prediction("epsilon", s, 99, np.ones((1, 1, 1)), np.ones((1, 1, 1)))


def _optimal_gaussian_denoiser(s, mu):
    def fn(x, t):
        tt = int(np.atleast_1d(t)[0])
        a = s.sqrt_alpha_bar[tt]
        b = s.sqrt_one_minus_alpha_bar[tt]
        return (b * (x - a * mu)).astype(x.dtype)

    return fn


def test_sampler_bit_reproducible(zsched):
    sub = sch.make_subsequence(zsched, 40)
    fn = _optimal_gaussian_denoiser(zsched, np.zeros((2, 4, 4)))
    img1, m1 = dif.ddpm_sample(fn, zsched, sub, 2, (4, 4), rng=np.random.default_rng(9))
    img2, m2 = dif.ddpm_sample(fn, zsched, sub, 2, (4, 4), rng=np.random.default_rng(9))
    assert np.array_equal(img1, img2) and np.array_equal(m1, m2)


def test_sampler_output_shapes(zsched):
    sub = sch.make_subsequence(zsched, 10)
    fn = _optimal_gaussian_denoiser(zsched, np.zeros((3, 8, 8)))
    img, mask = dif.ddpm_sample(fn, zsched, sub, 3, (8, 8), rng=np.random.default_rng(0))
    assert img.shape == (2, 8, 8)
    assert mask.shape == (1, 8, 8)


def test_sampler_batch_matches_single(zsched):
    sub = sch.make_subsequence(zsched, 25)
    fn = _optimal_gaussian_denoiser(zsched, np.zeros((2, 4, 4)))
    batch = dif.ddpm_sample_batch(fn, zsched, sub, 3, 2, (4, 4),
                                  rng=np.random.default_rng(21))
    img, mask = dif.ddpm_sample(fn, zsched, sub, 2, (4, 4),
                                rng=np.random.default_rng(21))
    assert np.array_equal(np.concatenate([img, mask]), batch[0])


def test_cond_mask_clamped_exactly(zsched, rng):
    sub = sch.make_subsequence(zsched, 30)
    fn = _optimal_gaussian_denoiser(zsched, np.zeros((2, 8, 8)))
    cond = np.where(rng.random((8, 8)) > 0.5, 1.0, -1.0).astype(np.float32)
    _, mask = dif.ddpm_sample(fn, zsched, sub, 2, (8, 8), cond_mask=cond,
                              rng=np.random.default_rng(4))
    assert np.array_equal(mask[0], cond)
    assert np.array_equal(np.sign(mask[0]), np.sign(cond))


def test_cond_mask_shape_mismatch(zsched):
    sub = sch.make_subsequence(zsched, 5)
    fn = _optimal_gaussian_denoiser(zsched, np.zeros((2, 8, 8)))
    with pytest.raises(ParameterError):
        dif.ddpm_sample(fn, zsched, sub, 2, (8, 8), cond_mask=np.ones((4, 4)),
                        rng=np.random.default_rng(0))


def test_gaussian_sampler_fidelity(zsched):
    """Closed-form optimal denoiser for N(mu, I) data: sample moments match."""
    mu = np.array([[[0.3, -0.2], [0.1, 0.4]], [[-0.3, 0.2], [-0.1, -0.4]]])
    sub = sch.make_subsequence(zsched, 300)
    fn = _optimal_gaussian_denoiser(zsched, mu)
    out = dif.ddpm_sample_batch(
        fn, zsched, sub, 10_000, 2, (2, 2), rng=np.random.default_rng(42),
        clip_x0=False, dtype=np.float64,
    )
    flat = out.reshape(10_000, -1)
    se = flat.std(axis=0) / np.sqrt(10_000)
    assert np.all(np.abs(flat.mean(axis=0) - mu.ravel()) <= 3 * se)
    cov = np.cov(flat, rowvar=False)
    rel = np.linalg.norm(cov - np.eye(8)) / np.linalg.norm(np.eye(8))
    assert rel <= 0.05
