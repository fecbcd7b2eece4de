import numpy as np
import pytest

from polyforge import schedule as sch
from polyforge.denoiser import (
    DenoiserConfig,
    apply,
    build_denoiser,
    denoise,
    gradient,
    param_shapes,
)
from polyforge.denoiser.engine import Var, mean, mul, sub
from polyforge.errors import ParameterError, ShapeError


def _oracle_param_count(cfg: DenoiserConfig) -> int:
    """Independent shape walk: recompute the total from the architecture rules."""
    c1, c2, c3 = (cfg.base_width * m for m in cfg.channel_multipliers)
    d = cfg.time_embed_dim or 4 * cfg.base_width

    def conv(cin, cout, k):
        return cout * cin * k * k + cout

    def res(cin, cout):
        total = 2 * cin  # gn1
        total += conv(cin, cout, 3)
        total += d * cout + cout  # time projection
        total += 2 * cout  # gn2
        total += conv(cout, cout, 3)
        if cin != cout:
            total += conv(cin, cout, 1)
        return total

    def attn(c):
        return 2 * c + 4 * conv(c, c, 1)

    def block(cin, cout, with_attn):
        total = res(cin, cout) + (cfg.layers_per_block - 1) * res(cout, cout)
        if with_attn:
            total += attn(cout)
        return total

    total = 2 * (d * d + d)  # two time-embedding linears
    total += conv(cfg.in_channels, c1, 3)  # stem
    total += block(c1, c1, False) + block(c1, c2, False) + block(c2, c3, cfg.attn_encoder_last)
    total += res(c3, c3) + (attn(c3) if cfg.attn_middle else 0) + res(c3, c3)
    total += block(c3 + c3, c3, cfg.attn_decoder_first)
    total += block(c3 + c2, c2, False)
    total += block(c2 + c1, c1, False)
    total += 2 * c1 + conv(c1, cfg.in_channels, 3)  # head
    return total


@pytest.mark.parametrize(
    "cfg",
    [
        DenoiserConfig(in_channels=2, base_width=8, channel_multipliers=(1, 2, 4)),
        DenoiserConfig(in_channels=4, base_width=16, channel_multipliers=(1, 1, 2),
                       layers_per_block=2, attn_middle=False),
        DenoiserConfig(in_channels=2, base_width=8, channel_multipliers=(1, 2, 2),
                       layers_per_block=1, attn_encoder_last=False,
                       attn_decoder_first=False),
    ],
)
def test_param_count_matches_shape_walk_oracle(cfg):
    params = build_denoiser(cfg, np.random.default_rng(0))
    assert params.total_count == _oracle_param_count(cfg)
    assert params.total_count == sum(
        int(np.prod(s)) for s in param_shapes(cfg).values()
    )


def test_build_deterministic():
    cfg = DenoiserConfig(in_channels=2, base_width=8)
    a = build_denoiser(cfg, np.random.default_rng(33))
    b = build_denoiser(cfg, np.random.default_rng(33))
    assert set(a.tensors) == set(b.tensors)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])


def test_attention_flags_off_removes_attention_params():
    cfg = DenoiserConfig(in_channels=2, base_width=8, attn_encoder_last=False,
                         attn_decoder_first=False, attn_middle=False)
    params = build_denoiser(cfg, np.random.default_rng(0))
    assert not any(".attn." in k for k in params.tensors)


def test_forward_shapes_fully_convolutional():
    cfg = DenoiserConfig(in_channels=2, base_width=8, layers_per_block=1)
    params = build_denoiser(cfg, np.random.default_rng(0))
    s = sch.make_linear_schedule(100)
    rng = np.random.default_rng(1)
    for side in (16, 32, 40):
        out = denoise(params, rng.normal(size=(2, side, side)).astype(np.float32), 3, s)
        assert out.shape == (2, side, side)


def test_forward_rejects_indivisible_spatial():
    cfg = DenoiserConfig(in_channels=2, base_width=8, layers_per_block=1)
    params = build_denoiser(cfg, np.random.default_rng(0))
    s = sch.make_linear_schedule(100)
    with pytest.raises(ShapeError, match="divisible by 8"):
        denoise(params, np.zeros((2, 20, 20), dtype=np.float32), 3, s)
    with pytest.raises(ParameterError):
        denoise(params, np.zeros((2, 16, 16), dtype=np.float32), 100, s)


def test_zero_final_projection_gives_zero_output():
    cfg = DenoiserConfig(in_channels=2, base_width=8, layers_per_block=1)
    params = build_denoiser(cfg, np.random.default_rng(0))
    s = sch.make_linear_schedule(100)
    out = denoise(params, np.random.default_rng(2).normal(size=(2, 16, 16)), 5, s)
    assert np.all(out == 0)  # head conv is zero-initialized


def test_forward_bit_stable():
    cfg = DenoiserConfig(in_channels=2, base_width=8, layers_per_block=1)
    params = build_denoiser(cfg, np.random.default_rng(0))
    _perturb(params, seed=5)
    s = sch.make_linear_schedule(100)
    x = np.random.default_rng(3).normal(size=(2, 16, 16)).astype(np.float32)
    a = denoise(params, x, 7, s)
    b = denoise(params, x, 7, s)
    assert np.array_equal(a, b)


def _perturb(params, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    for k, v in params.tensors.items():
        params.tensors[k] = (v + rng.normal(0, scale, v.shape)).astype(v.dtype)


def test_shift_equivariance_cyclic_padding_no_attention():
    cfg = DenoiserConfig(in_channels=2, base_width=8, layers_per_block=1,
                         attn_encoder_last=False, attn_decoder_first=False,
                         attn_middle=False, padding="cyclic")
    params = build_denoiser(cfg, np.random.default_rng(0))
    _perturb(params, seed=6)
    s = sch.make_linear_schedule(100)
    x = np.random.default_rng(4).normal(size=(2, 32, 32)).astype(np.float32)
    base = denoise(params, x, 11, s)
    shifted = denoise(params, np.roll(x, 8, axis=(1, 2)), 11, s)
    assert np.max(np.abs(np.roll(base, 8, axis=(1, 2)) - shifted)) <= 1e-5


def test_gradient_quadratic_exact():
    p = {"a": np.array([1.0, -2.0, 3.0]), "b": np.array([[0.5]])}

    def closure(pv):
        return mean(mul(pv["a"], pv["a"]))

    grads, loss = gradient(p, closure)
    assert np.allclose(grads["a"], 2.0 * p["a"] / 3.0)  # mean divides by 3
    assert np.array_equal(grads["b"], np.zeros((1, 1)))  # untouched -> exact zeros
    assert loss == pytest.approx((p["a"] ** 2).mean())


def test_full_model_gradient_vs_central_differences():
    """Every layer type is exercised: conv, norm, attention, time embedding."""
    cfg = DenoiserConfig(in_channels=2, base_width=8, channel_multipliers=(1, 2, 4),
                         layers_per_block=1, time_embed_dim=16)
    params = build_denoiser(cfg, np.random.default_rng(0))
    _perturb(params, seed=7)
    p64 = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 16, 16))
    target = rng.normal(size=(1, 2, 16, 16))
    tv = np.array([37])

    def closure(pv):
        d = sub(apply(pv, cfg, x, tv), target)
        return mean(mul(d, d))

    grads, _ = gradient(p64, closure)

    def loss_at(p):
        return float(closure({k: Var(v) for k, v in p.items()}).value)

    h = 1e-5
    pick = np.random.default_rng(9)
    names = sorted(p64)
    covered = set()
    for _ in range(50):
        nm = names[pick.integers(len(names))]
        covered.add(nm.split(".")[0])
        idx = tuple(pick.integers(d) for d in p64[nm].shape)
        pp = {k: v.copy() for k, v in p64.items()}
        pp[nm][idx] += h
        lp = loss_at(pp)
        pp[nm][idx] -= 2 * h
        lm = loss_at(pp)
        fd = (lp - lm) / (2 * h)
        an = grads[nm][idx]
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-12) <= 1e-4, (nm, idx)


def test_gradient_reports_nonfinite():
    p = {"a": np.array([np.inf])}
    with pytest.raises(Exception, match="a"):
        gradient(p, lambda pv: mean(mul(pv["a"], pv["a"])))
